import dataclasses
import math

import numpy as np
import pytest
import torch

from scalessl.core import ExperimentConfig, ImageRecord, RngStream, validate_config, with_crop_size
from scalessl.errors import EmptySubset, NonFiniteGradient
from scalessl.nets import (DecoderSpec, Encoder, EncoderSpec, SegmentationNet, build_decoder,
                           param_checksum)
from scalessl.synth import SynthSpec, generate
from scalessl.train import (LARS, budget_scale, build_segmentation_net, cosine_lr, dice_loss,
                            finetune_segmentation, labeled_patches, lars_step,
                            load_pretrained_encoder, load_segmentation_net, multiclass_dice_loss,
                            pretrain, select_labeled_subset)


def test_lars_zero_gradient_leaves_params():
    p = torch.tensor([1.0, -2.0])
    lars_step([p], [torch.zeros(2)], lr=1.0)
    assert torch.equal(p, torch.tensor([1.0, -2.0]))


def test_lars_scalar_example():
    p = torch.tensor([2.0], dtype=torch.float64)
    lars_step([p], [torch.tensor([1.0], dtype=torch.float64)], lr=1.0, trust_coefficient=0.001, eps=0.0)
    assert float(2.0 - p) == pytest.approx(0.002)


def test_lars_momentum_and_optimizer_agree():
    torch.manual_seed(0)
    a = torch.randn(5, requires_grad=True)
    b = a.detach().clone()
    opt = LARS([a], lr=0.5, momentum=0.9, weight_decay=1e-4, trust_coefficient=0.01)
    state = [None]
    for k in range(3):
        g = torch.full((5,), float(k + 1))
        a.grad = g.clone()
        opt.step()
        lars_step([b], [g], 0.5, 0.9, 1e-4, 0.01, state=state)
    assert torch.allclose(a.detach(), b)


def test_lars_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        lars_step([torch.ones(2)], [torch.tensor([1.0, float("nan")])], lr=1.0)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 10, 1.0) == pytest.approx(0.1)
    assert cosine_lr(9, 100, 10, 1.0) == pytest.approx(1.0)
    assert cosine_lr(10, 100, 10, 1.0) == pytest.approx(1.0)
    assert cosine_lr(100, 100, 10, 1.0) == pytest.approx(0.0, abs=1e-12)


def _records(n, labeled=True):
    rng = np.random.default_rng(0)
    return [ImageRecord(f"r{i:03d}", rng.normal(size=(16, 16)),
                        (rng.random((16, 16)) > 0.7).astype(np.uint8) if labeled else None, "train")
            for i in range(n)]


def test_labeled_subset_examples():
    recs = _records(100, labeled=False)
    assert select_labeled_subset(recs, 1.0, 0) == recs
    sub = select_labeled_subset(recs, 0.1, 0)
    assert len(sub) == 10
    assert select_labeled_subset(recs, 0.1, 0) == sub
    assert select_labeled_subset(recs, 0.1, 1) != sub
    shuffled = list(reversed(recs))
    assert {r.id for r in select_labeled_subset(shuffled, 0.1, 0)} == {r.id for r in sub}
    assert len(select_labeled_subset(recs[:3], 0.1, 0)) == 1
    with pytest.raises(EmptySubset):
        select_labeled_subset([], 0.5, 0)


def test_dice_loss_cases():
    t = torch.zeros(8, 8)
    t[:4] = 1
    assert float(dice_loss(t, t)) == 0.0
    assert float(dice_loss(1 - t, t)) == pytest.approx(1 - 1 / (64 + 1))
    assert float(dice_loss(torch.zeros(8, 8), torch.zeros(8, 8))) == 0.0
    labels = torch.zeros(1, 8, 8, dtype=torch.long)
    labels[:, 4:] = 2
    onehot = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).float()
    assert float(multiclass_dice_loss(onehot, labels)) == pytest.approx(0.0, abs=1e-7)


def test_dice_loss_overfits_tiny_batch():
    torch.manual_seed(0)
    x = torch.randn(4, 1, 8, 8)
    y = (x[:, 0] > 0.5).float()
    net = SegmentationNet(Encoder(EncoderSpec("toy_cnn", (8, 8), 16, (1, 2, 2))),
                          build_decoder(DecoderSpec("plain_upsample", 1, (8, 8)), 16))
    opt = torch.optim.SGD(net.parameters(), lr=0.5)
    first = None
    for _ in range(50):
        loss = dice_loss(net.probabilities(x), y)
        first = first if first is not None else float(loss.detach())
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert float(dice_loss(net.probabilities(x), y)) < first


def _cfg(**over):
    base = dict(ssl_method="simclr", sampling="random", crop_divisor=2, epochs=1, batch_size=8,
                warmup_epochs=0, finetune_epochs=1, finetune_batch_size=4, seed=0)
    base.update(over)
    return with_crop_size(validate_config(ExperimentConfig(**base)), 16)


@pytest.fixture(scope="module")
def pool():
    return generate(SynthSpec.default("thin_curves", count=32, image_size=(32, 32), seed=1))


def test_pretrain_smoke_and_determinism(pool, tmp_path):
    cfg = _cfg()
    a = pretrain(pool, cfg, tmp_path / "a")
    assert len(a.losses) == 4 and all(math.isfinite(v) for v in a.losses)
    assert (tmp_path / "a" / "metrics.jsonl").read_text().count("\n") == 4
    b = pretrain(pool, cfg)
    assert a.losses == b.losses
    enc = load_pretrained_encoder(a.checkpoint)
    assert param_checksum(enc) == param_checksum(a.model.encoder)


@pytest.mark.parametrize("method", ["simclr", "byol", "vicreg"])
def test_resume_matches_uninterrupted(pool, tmp_path, method):
    cfg = _cfg(ssl_method=method, epochs=5)
    straight = pretrain(pool, cfg, max_steps=20)
    half = pretrain(pool, cfg, tmp_path / "half", max_steps=10)
    rest = pretrain(pool, cfg, tmp_path / "rest", resume_from=half.checkpoint)
    assert rest.step == straight.step == 20
    assert straight.losses == half.losses + rest.losses
    assert param_checksum(rest.model) == param_checksum(straight.model)


def test_byol_target_moves_only_through_ema(pool):
    frozen = pretrain(pool, _cfg(ssl_method="byol", ema_momentum=1.0, epochs=2))
    m = frozen.model

    def target_params():
        return param_checksum(dict(m.target_encoder.named_parameters()))

    init = pretrain(pool, _cfg(ssl_method="byol", ema_momentum=1.0, epochs=2), max_steps=0).model
    assert target_params() == param_checksum(dict(init.target_encoder.named_parameters()))
    assert param_checksum(dict(m.encoder.named_parameters())) != target_params()


def test_finetune_paths(pool, tmp_path):
    cfg = _cfg()
    pre = pretrain(pool, cfg, tmp_path / "pre")
    labeled = [r for r in pool[:6]]
    res = finetune_segmentation(pre.checkpoint, labeled, cfg, 16, pool[6:8], tmp_path / "ft")
    assert "val_dice" in res.history[0]
    # fine-tuning starts from the pretrained encoder, decoder is fresh
    net, manifest = load_segmentation_net(res.checkpoint)
    assert manifest["patch_size"] == 16
    frozen = dataclasses.replace(cfg, frozen_encoder=True)
    res2 = finetune_segmentation(pre.checkpoint, labeled, frozen, 16)
    assert param_checksum(dict(res2.net.encoder.named_parameters())) == \
        param_checksum(dict(pre.model.encoder.named_parameters()))
    sup = finetune_segmentation(None, labeled, _cfg(ssl_method="none"), 16)
    assert sup.net.encoder.spec == pre.model.encoder.spec


def test_encoder_weights_copied_before_first_step(pool):
    cfg = _cfg()
    pre = pretrain(pool, cfg)
    net = build_segmentation_net(cfg, 16, pre.model.encoder)
    assert param_checksum(net.encoder) == param_checksum(pre.model.encoder)
    other = build_segmentation_net(_cfg(seed=1), 16, pre.model.encoder)
    assert param_checksum(other.decoder) != param_checksum(net.decoder)


def test_labeled_patches_are_aligned():
    rng = np.random.default_rng(3)
    recs = []
    for i in range(2):
        px = rng.normal(size=(32, 32))
        recs.append(ImageRecord(f"a{i}", px, (px > 0).astype(np.uint8), "train"))
    patches = labeled_patches(recs, 8, _cfg(patches_per_image=3, flip_prob=0.5), RngStream(0))
    assert len(patches) == 6
    for px, tgt in patches:
        assert px.shape == tgt.shape == (8, 8)
        assert np.array_equal(tgt, (px > 0).astype(np.uint8))


def test_pixel_budget_scale():
    cfg = _cfg(finetune_budget="pixels")
    assert budget_scale(cfg, 96, 12) == 64
    assert budget_scale(cfg, 96, 96) == 1
    assert budget_scale(_cfg(), 96, 12) == 1
