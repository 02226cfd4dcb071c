"""Acceptance gate: one test per criterion, each reporting a pass/fail line.

Criteria 7 and 8 are directional desk-scale experiments and take the bulk of
the runtime (tens of minutes on one CPU core).
"""
import json
import math
import tempfile
import time

import numpy as np
import pytest
import torch
from scipy import stats

from oracles import central_fd, dice_ref, hausdorff_ref, ntxent_ref, rel_err, stitch_ref, vicreg_terms_ref
from scalessl.cli import main as cli
from scalessl.core import ExperimentConfig, RngStream, validate_config, with_crop_size
from scalessl.errors import StrideError
from scalessl.evalkit import build_stitch_plan, dice_score, hausdorff, stitch_predict
from scalessl.harness import normalize_records, read_report_csv, resolve_run_config, run_cell
from scalessl.nets import DecoderSpec, Encoder, EncoderSpec, SegmentationNet, build_decoder, param_checksum
from scalessl.objectives import ntxent_loss, ssl_batch_loss, vicreg_loss
from scalessl.synth import SynthSpec, generate
from scalessl.train import patch_model, pretrain
from scalessl.views import sample_window_proximal, sample_window_random, valid_center_range

# Shared desk-scale protocol for the directional experiments (identical for every arm).
DESK = dict(
    ssl_method="simclr",
    epochs=30,
    batch_size=64,
    warmup_epochs=1,
    trust_coefficient=0.02,
    finetune_epochs=40,
    finetune_budget="pixels",
    label_fraction=0.1,
    encoder="toy_cnn",
)
SEEDS = (1, 2, 3)


def _t(x, grad=False):
    return torch.tensor(np.asarray(x), dtype=torch.float64, requires_grad=grad)


def _grad_err(fn, x):
    xt = _t(x, True)
    fn(xt).backward()
    return rel_err(xt.grad.numpy(), central_fd(lambda a: float(fn(_t(a))), x, step=1e-5))


def test_criterion_01_loss_gradients(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"ntxent": 0.0, "byol": 0.0, "vicreg": 0.0}
    for _ in range(20):
        z1, z2 = rng.normal(size=(8, 16)), rng.normal(size=(8, 16))
        both = np.concatenate([z1, z2])
        worst["ntxent"] = max(worst["ntxent"], _grad_err(
            lambda a: ssl_batch_loss("simclr", {"z1": a[:8], "z2": a[8:]}).total, both))
        t1, t2 = _t(rng.normal(size=(8, 16))), _t(rng.normal(size=(8, 16)))
        worst["byol"] = max(worst["byol"], _grad_err(
            lambda a: ssl_batch_loss("byol", {"p1": a[:8], "p2": a[8:], "t1": t1, "t2": t2}).total, both))
        worst["vicreg"] = max(worst["vicreg"], _grad_err(lambda a: vicreg_loss(a[:8], a[8:]).total, both))
    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
                    + f"; {elapsed:.1f}s")
    assert max(worst.values()) < 1e-4
    assert elapsed < 60


def test_criterion_02_loss_value_oracles(record_property):
    e = np.eye(4)
    ortho = ntxent_loss(_t(np.stack([e[0], e[0], e[1], e[1]])), 0.5).value
    assert abs(ortho - math.log(1 + 2 * math.exp(-2))) <= 1e-9
    for n in (2, 4, 8):
        assert abs(ntxent_loss(_t(np.ones((2 * n, 16))), 0.5).value - math.log(2 * n - 1)) <= 1e-9
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(20):
        z1, z2 = rng.normal(size=(8, 16)), rng.normal(size=(8, 16))
        c = vicreg_loss(_t(z1), _t(z2)).components
        ref = vicreg_terms_ref(z1, z2)
        worst = max(worst, *(abs(c[k] - r) for k, r in zip(("invariance", "variance", "covariance"), ref)))
        assert abs(ntxent_loss(_t(np.concatenate([z1, z2])), 0.5).value
                   - ntxent_ref(np.concatenate([z1, z2]), 0.5)) <= 1e-9
    record_property("detail", f"orthonormal {ortho:.12f}; VICReg max abs diff {worst:.1e}")
    assert worst <= 1e-10


def test_criterion_03_sampler_constraints(record_property):
    t0 = time.perf_counter()
    shape, size = (64, 64), (16, 16)
    rng = RngStream(303, "acceptance/sampler")
    for k in range(10_000):
        first = sample_window_random(shape, size, rng)
        delta = float(rng.uniform(1.0, 20.0))
        w = sample_window_proximal(first, shape, size, delta, rng)
        d2 = (w.center_u - first.center_u) ** 2 + (w.center_v - first.center_v) ** 2
        assert d2 < delta ** 2 and w.in_bounds(shape)
    (u0, u1), (v0, v1) = valid_center_range(shape, size)
    counts = np.zeros((u1 - u0 + 1, v1 - v0 + 1))
    for _ in range(100_000):
        w = sample_window_random(shape, size, rng)
        counts[w.center_u - u0, w.center_v - v0] += 1
    p = stats.chisquare(counts.ravel()).pvalue
    elapsed = time.perf_counter() - t0
    record_property("detail", f"10^4 proximity draws ok; chi-square p={p:.3f} over {counts.size} cells; "
                              f"{elapsed:.1f}s")
    assert p > 0.001 and elapsed < 60


def test_criterion_04_stitcher_oracle(record_property):
    torch.manual_seed(404)
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(20):
        H, W = (int(v) for v in rng.integers(16, 41, size=2))
        h = int(rng.choice([8, 12, 16]))
        s = int(rng.integers(1, h))
        net = SegmentationNet(Encoder(EncoderSpec("toy_cnn", (h, h), 16, (1, 2, 2))),
                              build_decoder(DecoderSpec("plain_upsample", 1, (h, h)), 16))
        model = patch_model(net)
        img = rng.normal(size=(H, W)).astype(np.float32)
        got = stitch_predict(img, model, build_stitch_plan(img.shape, h, h, s))
        worst = max(worst, float(np.abs(got - stitch_ref(img, model, h, h, s)).max()))
        with pytest.raises(StrideError):
            build_stitch_plan(img.shape, h, h, h)
    record_property("detail", f"max abs diff {worst:.1e} over 20 configs; s = h rejected")
    assert worst <= 1e-6


def test_criterion_05_metric_oracles(record_property):
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(100):
        a = rng.random((32, 32)) < rng.uniform(0.01, 0.4)
        b = rng.random((32, 32)) < rng.uniform(0.01, 0.4)
        assert dice_score(a, b) == dice_ref(a, b)
        worst = max(worst, abs(hausdorff(a, b) - hausdorff_ref(a, b)))
    empty = hausdorff(np.zeros((32, 32), bool), rng.random((32, 32)) < 0.1)
    record_property("detail", f"Dice exact on 100 pairs; HD max abs diff {worst:.1e}; empty HD {empty}")
    assert worst <= 1e-9 and empty == 200.0


def test_criterion_06_determinism_and_resume(record_property):
    pool = generate(SynthSpec.default("thin_curves", count=32, image_size=(32, 32), seed=6))
    cfg = with_crop_size(validate_config(ExperimentConfig(
        crop_divisor=2, epochs=5, batch_size=8, warmup_epochs=1, seed=6)), 16)
    a, b = pretrain(pool, cfg), pretrain(pool, cfg)
    with tempfile.TemporaryDirectory() as tmp:
        half = pretrain(pool, cfg, f"{tmp}/half", max_steps=10)
        rest = pretrain(pool, cfg, f"{tmp}/rest", resume_from=half.checkpoint)
    same_trace = a.losses == b.losses
    resumed = param_checksum(rest.model) == param_checksum(a.model)
    record_property("detail", f"loss traces identical: {same_trace}; resume checksum match: {resumed}")
    assert same_trace and resumed


def _directional(kind, cells, tmp_path, num_classes=1):
    """Mean test Dice/HD per arm over SEEDS; each seed regenerates the dataset."""
    out = {name: {"dice": [], "hd": []} for name in cells}
    for seed in SEEDS:
        recs = normalize_records(generate(SynthSpec.default(kind, count=500, seed=seed)))
        for name, cell in cells.items():
            cfg = ExperimentConfig(**{**DESK, **cell, "seed": seed, "num_classes": num_classes})
            rr = run_cell(cfg, recs, tmp_path / f"{kind}-{name}-{seed}", kind)
            out[name]["dice"].append(rr.aggregate["dice"])
            out[name]["hd"].append(rr.aggregate["hd"])
    return out


def _fmt(res):
    return "; ".join(f"{k} Dice {np.mean(v['dice']):.3f} HD {np.mean(v['hd']):.2f} "
                     f"(per seed {[round(x, 3) for x in v['dice']]})" for k, v in res.items())


def test_criterion_07_small_structure_direction(record_property, tmp_path):
    res = _directional("thin_curves", {
        "L/8": dict(sampling="proximity", crop_divisor=8),
        "full-view": dict(sampling="full_view", crop_divisor=None),
    }, tmp_path)
    record_property("detail", _fmt(res))
    small, full = res["L/8"], res["full-view"]
    assert np.mean(small["dice"]) >= np.mean(full["dice"]) + 0.02
    assert np.mean(small["hd"]) < np.mean(full["hd"])


def test_criterion_08_large_structure_direction(record_property, tmp_path):
    res = _directional("large_bands", {
        "L/2": dict(sampling="proximity", crop_divisor=2),
        "L/8": dict(sampling="proximity", crop_divisor=8),
    }, tmp_path, num_classes=4)
    wins = sum(a >= b for a, b in zip(res["L/2"]["dice"], res["L/8"]["dice"]))
    record_property("detail", _fmt(res) + f"; L/2 >= L/8 on {wins}/{len(SEEDS)} seeds")
    assert wins > len(SEEDS) / 2


def test_criterion_09_throughput(record_property):
    recs = normalize_records(generate(SynthSpec.default("thin_curves", count=500, seed=9)))
    pool = [r for r in recs if r.split in ("pretrain", "train")]
    times = {}
    for name, cell in {"L/8": dict(sampling="random", crop_divisor=8),
                       "full-view": dict(sampling="full_view", crop_divisor=None)}.items():
        cfg, _ = resolve_run_config(ExperimentConfig(**{**DESK, **cell, "epochs": 3, "seed": 9}), recs)
        times[name] = float(np.median(pretrain(pool, cfg).epoch_times))
    ratio = times["full-view"] / times["L/8"]
    record_property("detail", f"median epoch L/8 {times['L/8']:.2f}s, full-view {times['full-view']:.2f}s "
                              f"({ratio:.1f}x)")
    assert times["L/8"] < times["full-view"]


def test_criterion_10_end_to_end_smoke(record_property, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert cli(["synth", "--kind", "thin_curves", "--count", "200", "--out", str(data), "--seed", "10"]) == 0
    base = {**DESK, "epochs": 2, "finetune_epochs": 2, "warmup_epochs": 0}
    spec = {"axes": {"ssl_method": ["simclr"], "sampling": ["random", "proximity"],
                     "crop_divisor": [2, 4], "seed": [10]},
            "base_config": base, "dataset": "thin_curves"}
    (tmp_path / "sweep.json").write_text(json.dumps(spec))
    sweep = tmp_path / "sweep"
    assert cli(["sweep", "--config", str(tmp_path / "sweep.json"), "--data", str(data),
                "--out", str(sweep)]) == 0
    assert cli(["report", "--sweep", str(sweep), "--average-methods"]) == 0
    rows = read_report_csv(sweep / "report.csv")
    md = (sweep / "report.md").read_text()
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(rows)} report rows, {elapsed:.0f}s")
    assert {(r["sampling"], r["patch_size"]) for r in rows if r["method"] == "simclr"} == \
        {("random", "L/2"), ("random", "L/4"), ("proximity", "L/2"), ("proximity", "L/4")}
    assert md.startswith("| Group | Dataset | Method | Sampling | Patch size | HD | Dice |")
    assert (sweep / "dice_vs_patch.svg").exists()
    assert elapsed < 600
