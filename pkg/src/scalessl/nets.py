"""Encoder, projection/predictor heads, segmentation decoders and checkpoints."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, StructureMismatch


@dataclass(frozen=True)
class EncoderSpec:
    arch: str = "toy_cnn"
    input_size: tuple[int, int] = (32, 32)
    feature_dim: int = 64
    stage_strides: tuple[int, ...] = (1, 2, 2)

    def __post_init__(self):
        if self.arch not in ("toy_cnn", "resnet18"):
            raise ValueError(f"unknown encoder arch {self.arch!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        p = self.stride_product
        if self.input_size[0] % p or self.input_size[1] % p:
            raise ShapeError(f"input {self.input_size} not divisible by stride product {p}")

    @property
    def stride_product(self) -> int:
        return int(np.prod(self.stage_strides))

    @property
    def feature_size(self) -> tuple[int, int]:
        p = self.stride_product
        return self.input_size[0] // p, self.input_size[1] // p


@dataclass(frozen=True)
class HeadSpec:
    kind: str = "projector"
    layer_dims: tuple[int, ...] = (64, 32)
    nonlinearity: str = "relu"
    final_norm: bool = False

    def __post_init__(self):
        if self.kind not in ("projector", "predictor"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if len(self.layer_dims) < 1:
            raise ValueError("head needs at least one layer")

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass(frozen=True)
class DecoderSpec:
    style: str = "plain_upsample"
    num_classes: int = 1
    output_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.style not in ("plain_upsample", "deeplab_aspp"):
            raise ValueError(f"unknown decoder style {self.style!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


def _conv_bn(cin: int, cout: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyCNN(nn.Module):
    """One conv block per stage; widths double up to ``feature_dim``."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        n = len(spec.stage_strides)
        widths = [max(8, spec.feature_dim >> (n - 1 - i)) for i in range(n)]
        widths[-1] = spec.feature_dim
        layers, cin = [], 1
        for s, c in zip(spec.stage_strides, widths):
            layers.append(_conv_bn(cin, c, stride=s))
            cin = c
        self.stages = nn.Sequential(*layers)

    def forward(self, x):
        return self.stages(x)


class ResNet18(nn.Module):
    """torchvision ResNet-18 trunk adapted to one input channel, no classifier."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        from torchvision.models import resnet18

        if spec.stage_strides != (2, 2, 2, 2, 2):
            raise ValueError("resnet18 has fixed stage strides (2, 2, 2, 2, 2)")
        net = resnet18(weights=None)
        net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                   net.layer1, net.layer2, net.layer3, net.layer4)
        self.proj = nn.Identity() if spec.feature_dim == 512 else nn.Conv2d(512, spec.feature_dim, 1)

    def forward(self, x):
        return self.proj(self.trunk(x))


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.body = ToyCNN(spec) if spec.arch == "toy_cnn" else ResNet18(spec)

    def forward(self, x):
        return self.body(x)

    def pooled(self, x):
        return self.forward(x).mean(dim=(2, 3))


class Head(nn.Module):
    """MLP head: hidden layers are Linear-BN-ReLU, the last is a plain Linear."""

    def __init__(self, spec: HeadSpec, in_dim: int):
        super().__init__()
        self.spec = spec
        self.in_dim = in_dim
        act = {"relu": nn.ReLU, "gelu": nn.GELU}[spec.nonlinearity]
        layers, d = [], in_dim
        for out in spec.layer_dims[:-1]:
            layers += [nn.Linear(d, out), nn.BatchNorm1d(out), act()]
            d = out
        layers.append(nn.Linear(d, spec.layer_dims[-1]))
        if spec.final_norm:
            layers.append(nn.BatchNorm1d(spec.layer_dims[-1], affine=False))
        self.net = nn.Sequential(*layers)

    @property
    def final_linear(self) -> nn.Linear:
        return [m for m in self.net if isinstance(m, nn.Linear)][-1]

    def forward(self, x):
        return self.net(x)


class PlainUpsampleDecoder(nn.Module):
    def __init__(self, in_channels: int, spec: DecoderSpec, width: int = 32):
        super().__init__()
        self.spec = spec
        self.stage1 = _conv_bn(in_channels, width)
        self.stage2 = _conv_bn(width, width)
        self.classifier = nn.Conv2d(width, spec.num_classes, 1)

    def forward(self, feats, size):
        x = self.stage1(feats)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.stage2(x)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.classifier(x)


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates: Sequence[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())]
            + [_conv_bn(cin, cout, dilation=r) for r in rates]
        )
        # no BatchNorm on the pooled branch: it sees a single value per channel
        self.image_pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU())
        self.project = nn.Sequential(
            nn.Conv2d(cout * (len(rates) + 2), cout, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.image_pool(x).expand(-1, -1, x.shape[2], x.shape[3])
        return self.project(torch.cat(outs + [pooled], dim=1))


class DeepLabDecoder(nn.Module):
    """DeepLabV3-style head: atrous spatial pyramid pooling then upsampling."""

    def __init__(self, in_channels: int, spec: DecoderSpec, width: int = 64,
                 rates: Sequence[int] = (6, 12, 18)):
        super().__init__()
        self.spec = spec
        self.aspp = ASPP(in_channels, width, rates)
        self.refine = _conv_bn(width, width)
        self.classifier = nn.Conv2d(width, spec.num_classes, 1)

    def forward(self, feats, size):
        x = self.refine(self.aspp(feats))
        x = self.classifier(x)
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def build_decoder(spec: DecoderSpec, in_channels: int) -> nn.Module:
    if spec.style == "plain_upsample":
        return PlainUpsampleDecoder(in_channels, spec)
    return DeepLabDecoder(in_channels, spec)


class SegmentationNet(nn.Module):
    """Encoder followed by a decoder; returns per-pixel logits."""

    def __init__(self, encoder: Encoder, decoder: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    @property
    def num_classes(self) -> int:
        return self.decoder.spec.num_classes

    def forward(self, x):
        return self.decoder(self.encoder(x), x.shape[-2:])

    def probabilities(self, x):
        logits = self.forward(x)
        if self.num_classes == 1:
            return torch.sigmoid(logits[:, 0])
        return torch.softmax(logits, dim=1)


def _patch_tensor(patch, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    t = torch.as_tensor(np.asarray(patch) if not isinstance(patch, torch.Tensor) else patch)
    return t.to(dtype=p.dtype, device=p.device)


def encode(encoder: Encoder, patch) -> torch.Tensor:
    """Features of one h x w patch (C x h' x w'), in eval mode."""
    if tuple(np.shape(patch)) != tuple(encoder.spec.input_size):
        raise ShapeError(f"patch {tuple(np.shape(patch))} != encoder input {encoder.spec.input_size}")
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = encoder(_patch_tensor(patch, encoder)[None, None])[0]
    encoder.train(was_training)
    return out


def project(head: Head, pooled_features) -> torch.Tensor:
    x = pooled_features if isinstance(pooled_features, torch.Tensor) else _patch_tensor(pooled_features, head)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[-1] != head.in_dim:
        raise ShapeError(f"head expects dim {head.in_dim}, got {x.shape[-1]}")
    if squeeze and head.training:
        head.eval()
        z = head(x)
        head.train()
    else:
        z = head(x)
    return z[0] if squeeze else z


def segment_patch(encoder: Encoder, decoder: nn.Module, patch) -> torch.Tensor:
    """Probability map for one patch: sigmoid (binary) or per-pixel softmax."""
    shape = tuple(np.shape(patch))
    if shape != tuple(encoder.spec.input_size):
        raise ShapeError(f"patch {shape} != encoder input {encoder.spec.input_size}")
    if shape != tuple(decoder.spec.output_size):
        raise ShapeError(f"patch {shape} != decoder output {decoder.spec.output_size}")
    net = SegmentationNet(encoder, decoder)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        probs = net.probabilities(_patch_tensor(patch, encoder)[None, None])[0]
    net.train(was_training)
    return probs


ParamTree = Union[nn.Module, Mapping[str, torch.Tensor]]


def _named_tensors(tree: ParamTree) -> dict[str, torch.Tensor]:
    if isinstance(tree, nn.Module):
        return dict(tree.named_parameters())
    return dict(tree)


@torch.no_grad()
def ema_update(target: ParamTree, online: ParamTree, momentum: float) -> ParamTree:
    """In place ``target <- m * target + (1 - m) * online``; module buffers are copied."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    t, o = _named_tensors(target), _named_tensors(online)
    if t.keys() != o.keys() or any(t[k].shape != o[k].shape for k in t):
        raise StructureMismatch("target and online parameter trees differ")
    for k, tv in t.items():
        tv.mul_(momentum).add_(o[k], alpha=1.0 - momentum)
    if isinstance(target, nn.Module) and isinstance(online, nn.Module):
        for tb, ob in zip(target.buffers(), online.buffers()):
            tb.copy_(ob)
    return target


def param_checksum(module: ParamTree) -> str:
    h = hashlib.sha256()
    state = module.state_dict() if isinstance(module, nn.Module) else module
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(directory, modules: Mapping[str, nn.Module], manifest: dict,
                    extra_state: Optional[dict] = None) -> Path:
    """Write ``params.pt`` (torch state dicts) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = {name: m.state_dict() for name, m in modules.items()}
    if extra_state:
        blob["_extra"] = extra_state
    torch.save(blob, d / "params.pt")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    return d


def load_checkpoint(directory) -> tuple[dict, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    blob = torch.load(d / "params.pt", map_location="cpu", weights_only=False)
    return manifest, blob


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def spec_to_dict(spec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def spec_from_dict(cls, d: dict):
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
