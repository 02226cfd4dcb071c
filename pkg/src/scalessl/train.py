"""SSL pretraining and label-constrained patch fine-tuning loops."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.optim.optimizer import Optimizer

from . import evalkit
from .core import ImageRecord, RngStream, ValidatedConfig, Window
from .errors import EmptySubset, NonFiniteGradient, NonFiniteLoss, ShapeError
from .nets import (DecoderSpec, Encoder, EncoderSpec, Head, HeadSpec, SegmentationNet,
                   build_decoder, ema_update, load_checkpoint, param_checksum, save_checkpoint,
                   spec_from_dict, spec_to_dict)
from .objectives import ssl_batch_loss
from .views import crop, make_view_pair, sample_window_proximal, sample_window_random, view_size

log = logging.getLogger(__name__)


# --- LARS -----------------------------------------------------------------

def _local_lr(p_norm: float, g_norm: float, weight_decay: float, trust: float, eps: float) -> float:
    if p_norm > 0 and g_norm > 0:
        return trust * p_norm / (g_norm + weight_decay * p_norm + eps)
    return 1.0


@torch.no_grad()
def lars_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float,
              momentum: float = 0.0, weight_decay: float = 0.0, trust_coefficient: float = 0.001,
              eps: float = 1e-9, state: Optional[list] = None) -> list[torch.Tensor]:
    """One layer-wise adaptive step, in place on ``params``.

    ``state`` (a list of momentum buffers, one per tensor, ``None`` initially)
    is updated in place when given.
    """
    if state is None:
        state = [None] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient in tensor {i}")
        local = _local_lr(float(p.norm()), float(g.norm()), weight_decay, trust_coefficient, eps)
        d = (g + weight_decay * p) * local
        if momentum > 0:
            buf = state[i]
            if buf is None:
                buf = state[i] = d.clone()
            else:
                buf.mul_(momentum).add_(d)
            d = buf
        p.sub_(lr * d)
    return list(params)


class LARS(Optimizer):
    """Momentum SGD with a per-tensor trust ratio (see :func:`lars_step`)."""

    def __init__(self, params, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 0.0,
                 trust_coefficient: float = 0.001, eps: float = 1e-9):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      trust_coefficient=trust_coefficient, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            bufs = [self.state[p].get("momentum_buffer") for p in params]
            lars_step(params, [p.grad for p in params], group["lr"], group["momentum"],
                      group["weight_decay"], group["trust_coefficient"], group["eps"], bufs)
            for p, b in zip(params, bufs):
                if b is not None:
                    self.state[p]["momentum_buffer"] = b
        return loss


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                   trust_coefficient: float = 0.001) -> Optimizer:
    if name == "lars":
        return LARS(params, lr=lr, momentum=momentum, weight_decay=weight_decay,
                    trust_coefficient=trust_coefficient)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- data selection and losses -------------------------------------------

def select_labeled_subset(records: Sequence[ImageRecord], fraction: float, seed: int) -> list[ImageRecord]:
    """Seeded uniform choice of ``ceil(fraction * n)`` records, keyed on record ids.

    The chosen set does not depend on input order; the result keeps input order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(records)
    k = math.ceil(fraction * n)
    if k == 0:
        raise EmptySubset("labeled subset would be empty")
    if k == n:
        return list(records)
    ids = sorted(r.id for r in records)
    perm = RngStream(seed, "labeled_subset").gen.permutation(n)
    chosen = {ids[i] for i in perm[:k]}
    return [r for r in records if r.id in chosen]


def dice_loss(pred, target, epsilon: float = 1.0):
    """Soft Dice loss ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    inter = (pred * target).sum()
    return 1 - (2 * inter + epsilon) / (pred.sum() + target.sum() + epsilon)


def multiclass_dice_loss(probs: torch.Tensor, labels: torch.Tensor, epsilon: float = 1.0) -> torch.Tensor:
    """Mean per-class soft Dice; ``probs`` is (B, C, h, w), ``labels`` (B, h, w)."""
    c = probs.shape[1]
    onehot = torch.nn.functional.one_hot(labels.long(), c).permute(0, 3, 1, 2).to(probs.dtype)
    return torch.stack([dice_loss(probs[:, k], onehot[:, k], epsilon) for k in range(c)]).mean()


# --- model assembly -------------------------------------------------------

def encoder_spec(config: ValidatedConfig, input_size) -> EncoderSpec:
    return EncoderSpec(config.encoder, tuple(int(s) for s in input_size), config.feature_dim,
                       tuple(config.encoder_strides))


def projector_spec(config: ValidatedConfig) -> HeadSpec:
    return HeadSpec("projector", (config.feature_dim, config.embed_dim))


def predictor_spec(config: ValidatedConfig) -> HeadSpec:
    return HeadSpec("predictor", (config.feature_dim, config.embed_dim))


class SSLModel(nn.Module):
    """Online encoder + projector (+ predictor and EMA target for BYOL)."""

    def __init__(self, config: ValidatedConfig, input_size):
        super().__init__()
        self.method = config.ssl_method
        self.encoder = Encoder(encoder_spec(config, input_size))
        self.projector = Head(projector_spec(config), config.feature_dim)
        if self.method == "byol":
            self.predictor = Head(predictor_spec(config), config.embed_dim)
            self.target_encoder = copy.deepcopy(self.encoder)
            self.target_projector = copy.deepcopy(self.projector)
            for p in list(self.target_encoder.parameters()) + list(self.target_projector.parameters()):
                p.requires_grad_(False)

    def online_parameters(self):
        mods = [self.encoder, self.projector] + ([self.predictor] if self.method == "byol" else [])
        return [p for m in mods for p in m.parameters()]

    def embed(self, x):
        return self.projector(self.encoder.pooled(x))

    def operands(self, x1, x2) -> dict:
        if self.method == "byol":
            z1, z2 = self.embed(x1), self.embed(x2)
            with torch.no_grad():
                t1 = self.target_projector(self.target_encoder.pooled(x1))
                t2 = self.target_projector(self.target_encoder.pooled(x2))
            return {"p1": self.predictor(z1), "p2": self.predictor(z2), "t1": t1, "t2": t2}
        return {"z1": self.embed(x1), "z2": self.embed(x2)}

    def update_target(self, momentum: float) -> None:
        if self.method == "byol":
            ema_update(self.target_encoder, self.encoder, momentum)
            ema_update(self.target_projector, self.projector, momentum)


class MetricsLog:
    """Line-delimited JSON metrics sink (no-op without a path)."""

    def __init__(self, path=None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")


def _to_batch(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays).astype(np.float32))[:, None]


def _torch_seed(config: ValidatedConfig, tag: str) -> int:
    return int(RngStream(config.seed, f"torch/{tag}").integers(0, 2**31 - 1))


# --- pretraining ----------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Optional[Path]
    model: SSLModel
    losses: list[float]
    epoch_times: list[float]
    step: int


def _epoch_batches(records: Sequence[ImageRecord], config: ValidatedConfig, epoch: int) -> list[list[int]]:
    order = RngStream(config.seed, f"pretrain/e{epoch}/order").gen.permutation(len(records))
    items = [int(i) for i in order for _ in range(config.views_per_image)]
    bs = config.batch_size
    batches = [items[i:i + bs] for i in range(0, len(items), bs)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()  # a single pair has no negatives
    return batches


def _manifest(config: ValidatedConfig, kind: str, **extra) -> dict:
    return {"kind": kind, "config": config.to_dict(), "config_hash": config.config_hash(), **extra}


def pretrain(records: Sequence[ImageRecord], config: ValidatedConfig, out_dir=None,
             resume_from=None, max_steps: Optional[int] = None,
             metrics: Optional[MetricsLog] = None) -> PretrainResult:
    """Run SSL pretraining over view pairs and return the trained model.

    ``max_steps`` stops early (after that many optimizer steps in total), which
    together with ``resume_from`` gives exact checkpoint/resume.
    """
    if not records:
        raise ValueError("pretraining dataset is empty")
    if config.ssl_method == "none":
        raise ValueError("pretrain called with ssl_method none")
    input_size = view_size(config, records[0].shape)
    torch.manual_seed(_torch_seed(config, "pretrain-init"))
    model = SSLModel(config, input_size)
    opt = make_optimizer(config.optimizer, model.online_parameters(), config.base_lr,
                         config.momentum, config.weight_decay, config.trust_coefficient)
    start_epoch, start_batch, step = 0, 0, 0
    if resume_from is not None:
        manifest, blob = load_checkpoint(resume_from)
        model.load_state_dict(blob["model"])
        opt.load_state_dict(blob["_extra"]["optimizer"])
        start_epoch, start_batch, step = manifest["epoch"], manifest["batch_in_epoch"], manifest["step"]
        torch.set_rng_state(blob["_extra"]["torch_rng"])
    if metrics is None:
        metrics = MetricsLog(Path(out_dir) / "metrics.jsonl" if out_dir else None,
                             append=resume_from is not None)

    steps_per_epoch = len(_epoch_batches(records, config, 0))
    total_steps = steps_per_epoch * config.epochs
    warmup = steps_per_epoch * config.warmup_epochs
    losses, epoch_times = [], []
    model.train()
    stopped = False
    epoch, bi = start_epoch, start_batch
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        batches = _epoch_batches(records, config, epoch)
        first = start_batch if epoch == start_epoch else 0
        for bi in range(first, len(batches)):
            if max_steps is not None and step >= max_steps:
                stopped = True
                break
            rng = RngStream(config.seed, f"pretrain/e{epoch}/b{bi}")
            pairs = [make_view_pair(records[i], config, rng) for i in batches[bi]]
            x1 = _to_batch([p.view1 for p in pairs])
            x2 = _to_batch([p.view2 for p in pairs])
            lr = cosine_lr(step, total_steps, warmup, config.base_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            report = ssl_batch_loss(config.ssl_method, model.operands(x1, x2), config)
            if not math.isfinite(report.value):
                log.error("non-finite loss at epoch %d step %d", epoch, step)
                raise NonFiniteLoss(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            model.update_target(config.ema_momentum)
            losses.append(report.value)
            metrics.write({"phase": "pretrain", "epoch": epoch, "step": step, "lr": lr,
                           **report.as_dict()})
            step += 1
        else:
            bi = len(batches)
        epoch_times.append(time.perf_counter() - t0)
        if stopped:
            break
        if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _save_pretrain(out_dir, f"epoch{epoch + 1:04d}", model, opt, config, epoch + 1, 0, step,
                           input_size)
    if stopped:
        next_epoch, next_batch = epoch, bi
    else:
        next_epoch, next_batch = config.epochs, 0
    ckpt = None
    if out_dir:
        ckpt = _save_pretrain(out_dir, "final", model, opt, config, next_epoch, next_batch, step,
                              input_size)
    return PretrainResult(ckpt, model, losses, epoch_times, step)


def _save_pretrain(out_dir, name, model, opt, config, epoch, batch_in_epoch, step, input_size) -> Path:
    manifest = _manifest(
        config, "pretrain", epoch=epoch, batch_in_epoch=batch_in_epoch, step=step,
        encoder_spec=spec_to_dict(model.encoder.spec),
        head_specs={"projector": spec_to_dict(model.projector.spec)},
        rng_state={"torch_rng_bytes": int(torch.get_rng_state().numel()),
                   "data_streams": f"RngStream(seed={config.seed}, 'pretrain/e<epoch>/b<batch>')"},
        encoder_checksum=param_checksum(model.encoder),
    )
    extra = {"optimizer": opt.state_dict(), "torch_rng": torch.get_rng_state()}
    return save_checkpoint(Path(out_dir) / name, {"model": model, "encoder": model.encoder}, manifest, extra)


def load_pretrained_encoder(checkpoint) -> Encoder:
    manifest, blob = load_checkpoint(checkpoint)
    enc = Encoder(spec_from_dict(EncoderSpec, manifest["encoder_spec"]))
    enc.load_state_dict(blob["encoder"])
    return enc


# --- fine-tuning ----------------------------------------------------------

@dataclass
class FinetuneResult:
    checkpoint: Optional[Path]
    net: SegmentationNet
    best_val_dice: float
    history: list[dict] = field(default_factory=list)


def budget_scale(config: ValidatedConfig, base_L: int, size: int) -> int:
    """Multiplier on patch count and batch size under the ``pixels`` budget.

    Scaling both by the slice-to-patch area ratio gives every crop scale the
    same optimizer steps and the same labeled pixels per step.
    """
    if config.finetune_budget != "pixels":
        return 1
    return max(1, round(base_L * base_L / (size * size)))


def _patch_windows(shape, size: int, config: ValidatedConfig, rng: RngStream, count: int) -> list[Window]:
    if config.sampling == "full_view" and size >= min(shape) and shape[0] == shape[1]:
        return [Window.whole(shape)] * count
    sz = (size, size)
    first = sample_window_random(shape, sz, rng)
    out = [first]
    for _ in range(count - 1):
        if config.sampling == "proximity":
            out.append(sample_window_proximal(first, shape, sz, config.delta or size, rng))
        else:
            out.append(sample_window_random(shape, sz, rng))
    return out


def labeled_patches(records: Sequence[ImageRecord], size: int, config: ValidatedConfig,
                    rng: RngStream, per_image: Optional[int] = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Aligned (pixels, target) crops; random flips applied jointly."""
    out = []
    per_image = per_image or config.patches_per_image
    for rec in records:
        for win in _patch_windows(rec.shape, size, config, rng, per_image):
            x, y = crop(rec.pixels, win), crop(rec.mask, win)
            if config.augment:
                if rng.random() < config.flip_prob:
                    x, y = x[:, ::-1], y[:, ::-1]
                if rng.random() < config.flip_prob:
                    x, y = x[::-1], y[::-1]
            out.append((np.ascontiguousarray(x), np.ascontiguousarray(y)))
    return out


def patch_model(net: SegmentationNet, batch_size: int = 512) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a network as the ``(B, h, w) -> probabilities`` callable used for stitching."""
    def predict(patches: np.ndarray) -> np.ndarray:
        net.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, len(patches), batch_size):
                x = torch.from_numpy(np.asarray(patches[i:i + batch_size], dtype=np.float32))[:, None]
                outs.append(net.probabilities(x).numpy())
        return np.concatenate(outs)
    return predict


def evaluate_net(net: SegmentationNet, records: Sequence[ImageRecord], size: int,
                 config: ValidatedConfig, **labels) -> tuple[list, dict]:
    stride = config.stride or max(1, size // 2)
    return evalkit.evaluate_split(patch_model(net), records, size, size, stride,
                                  level=config.threshold, cap=config.metric_cap,
                                  num_classes=config.num_classes, seed=config.seed, **labels)


def build_segmentation_net(config: ValidatedConfig, size: int, encoder: Optional[Encoder] = None,
                           seed_tag: str = "decoder-init") -> SegmentationNet:
    spec = encoder_spec(config, (size, size))
    if encoder is None:
        torch.manual_seed(_torch_seed(config, "encoder-init"))
        encoder = Encoder(spec)
    else:
        fresh = Encoder(spec)
        fresh.load_state_dict(encoder.state_dict())
        encoder = fresh
    torch.manual_seed(_torch_seed(config, seed_tag))
    n_out = config.num_classes
    decoder = build_decoder(DecoderSpec(config.decoder, n_out, (size, size)), config.feature_dim)
    return SegmentationNet(encoder, decoder)


def finetune_segmentation(checkpoint, labeled: Sequence[ImageRecord], config: ValidatedConfig,
                          size: int, val_records: Sequence[ImageRecord] = (), out_dir=None,
                          encoder: Optional[Encoder] = None,
                          metrics: Optional[MetricsLog] = None) -> FinetuneResult:
    """Fine-tune encoder + fresh decoder on labeled patches with Dice loss.

    The encoder comes from ``checkpoint`` (or ``encoder``); with
    ``ssl_method == "none"`` and neither given it is randomly initialised.
    Returns the best-validation network.
    """
    if not labeled:
        raise EmptySubset("no labeled records to fine-tune on")
    if any(r.mask is None for r in labeled):
        raise evalkit.MissingMask("fine-tuning record without mask")
    if checkpoint is not None and encoder is None:
        encoder = load_pretrained_encoder(checkpoint)
        if encoder.spec.arch != config.encoder or encoder.spec.feature_dim != config.feature_dim:
            raise ValueError("checkpoint encoder does not match config")
    net = build_segmentation_net(config, size, encoder)
    if config.frozen_encoder:
        for p in net.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = make_optimizer(config.finetune_optimizer, params, config.finetune_lr,
                         config.momentum, 0.0, config.trust_coefficient)
    if metrics is None:
        metrics = MetricsLog(Path(out_dir) / "metrics.jsonl" if out_dir else None)
    best_dice, best_state, history = -1.0, None, []
    scale = budget_scale(config, min(min(r.shape) for r in labeled), size)
    bs = config.finetune_batch_size * scale
    for epoch in range(config.finetune_epochs):
        rng = RngStream(config.seed, f"finetune/e{epoch}")
        patches = labeled_patches(labeled, size, config, rng, config.patches_per_image * scale)
        order = rng.gen.permutation(len(patches))
        net.train()
        if config.frozen_encoder:
            net.encoder.eval()
        losses = []
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            if len(idx) < 2 and len(order) > 1:
                continue  # BatchNorm needs more than one sample
            x = _to_batch([patches[j][0] for j in idx])
            y = torch.from_numpy(np.stack([patches[j][1] for j in idx]).astype(np.int64))
            if config.num_classes == 1:
                loss = dice_loss(net.probabilities(x), (y > 0).float())
            else:
                loss = multiclass_dice_loss(net.probabilities(x), y)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        row = {"phase": "finetune", "epoch": epoch, "loss": float(np.mean(losses)) if losses else None}
        if val_records:
            _, agg = evaluate_net(net, val_records, size, config)
            row.update(val_dice=agg["dice"], val_hd=agg["hd"])
            score = agg["dice"]
        else:
            score = -row["loss"] if row["loss"] is not None else 0.0
        if score > best_dice:
            best_dice, best_state = score, copy.deepcopy(net.state_dict())
        history.append(row)
        metrics.write(row)
    if best_state is not None:
        net.load_state_dict(best_state)
    ckpt = None
    if out_dir:
        manifest = _manifest(config, "finetune", epoch=config.finetune_epochs, patch_size=size,
                             encoder_spec=spec_to_dict(net.encoder.spec),
                             decoder_spec=spec_to_dict(net.decoder.spec), best_val_dice=best_dice)
        ckpt = save_checkpoint(Path(out_dir) / "best", {"encoder": net.encoder, "decoder": net.decoder},
                               manifest)
    return FinetuneResult(ckpt, net, best_dice, history)


def load_segmentation_net(checkpoint) -> tuple[SegmentationNet, dict]:
    manifest, blob = load_checkpoint(checkpoint)
    enc = Encoder(spec_from_dict(EncoderSpec, manifest["encoder_spec"]))
    dspec = spec_from_dict(DecoderSpec, manifest["decoder_spec"])
    dec = build_decoder(dspec, enc.spec.feature_dim)
    enc.load_state_dict(blob["encoder"])
    dec.load_state_dict(blob["decoder"])
    return SegmentationNet(enc, dec), manifest
