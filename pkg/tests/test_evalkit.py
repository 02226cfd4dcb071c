import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dice_ref, hausdorff_ref, stitch_ref
from scalessl.core import ImageRecord
from scalessl.errors import MissingMask, ShapeError, StrideError
from scalessl.evalkit import (EvalRow, build_stitch_plan, dice_score, evaluate_split, hausdorff,
                              multiclass_scores, read_eval_rows, stitch_predict, threshold,
                              write_eval_rows)


def sigmoid_model(patches):
    return 1 / (1 + np.exp(-np.asarray(patches)))


def test_plan_window_grid():
    plan = build_stitch_plan((10, 10), 4, 4, 3)
    tops = sorted({w.top for w in plan.windows})
    assert tops == [0, 3, 6]
    plan = build_stitch_plan((11, 10), 4, 4, 3)
    assert sorted({w.top for w in plan.windows}) == [0, 3, 6, 7]
    assert plan.coverage.min() >= 1


def test_stride_must_be_below_window():
    with pytest.raises(StrideError):
        build_stitch_plan((32, 32), 8, 8, 8)
    with pytest.raises(StrideError):
        build_stitch_plan((32, 32), 8, 8, 0)
    with pytest.raises(ShapeError):
        build_stitch_plan((8, 8), 9, 9, 2)


def test_constant_model_gives_constant_map():
    plan = build_stitch_plan((20, 17), 6, 6, 4)
    out = stitch_predict(np.zeros((20, 17)), lambda p: np.full(p.shape, 0.3), plan)
    assert np.allclose(out, 0.3)


def test_stitch_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        H, W = rng.integers(12, 30, size=2)
        h = int(rng.integers(3, min(H, W) + 1))
        s = int(rng.integers(1, h))
        img = rng.normal(size=(H, W))
        plan = build_stitch_plan(img.shape, h, h, s)
        got = stitch_predict(img, sigmoid_model, plan, batch_size=7)
        assert np.max(np.abs(got - stitch_ref(img, sigmoid_model, h, h, s))) <= 1e-12


def test_stitch_multiclass_shape():
    def model(p):
        return np.stack([p, 1 - p], axis=1)
    plan = build_stitch_plan((12, 12), 4, 4, 2)
    out = stitch_predict(np.full((12, 12), 0.25), model, plan)
    assert out.shape == (2, 12, 12) and np.allclose(out[1], 0.75)


def test_threshold_is_strict():
    assert threshold(np.array([0.5, 0.50001, 0.2])).tolist() == [False, True, False]


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    assert dice_score(a, a) == 1.0
    b = a.copy()
    b[0, 0] = True
    assert dice_score(a, b) == 0.0
    assert dice_score(b, b) == 1.0
    c = b.copy()
    c[0, 1] = True
    assert dice_score(b, c) == pytest.approx(2 / 3)


def test_hausdorff_examples():
    a = np.zeros((10, 10), bool)
    b = a.copy()
    a[0, 0] = True
    b[3, 4] = True
    assert hausdorff(a, b) == 5.0
    assert hausdorff(a, np.zeros_like(a)) == 200.0
    assert hausdorff(np.zeros_like(a), a, cap=50) == 50.0
    assert hausdorff(np.zeros_like(a), np.zeros_like(a)) == 0.0


masks = arrays(bool, (12, 12), elements=st.booleans())


@given(masks, masks)
@settings(max_examples=60, deadline=None)
def test_metrics_match_oracles(a, b):
    assert dice_score(a, b) == dice_ref(a, b)
    ref = hausdorff_ref(a, b)
    assert hausdorff(a, b, method="exhaustive") == pytest.approx(ref, abs=1e-9)
    assert hausdorff(a, b, method="edt") == pytest.approx(ref, abs=1e-9)
    assert hausdorff(a, b) == hausdorff(b, a)


@given(masks, masks, masks)
@settings(max_examples=40, deadline=None)
def test_hausdorff_triangle_inequality(a, b, c):
    if a.any() and b.any() and c.any():
        assert hausdorff(a, c) <= hausdorff(a, b) + hausdorff(b, c) + 1e-9


def test_multiclass_scores_skip_absent_classes():
    gt = np.array([[0, 0], [1, 1]])
    assert multiclass_scores(gt, gt, 4) == (1.0, 0.0)
    pred = np.array([[0, 0], [0, 1]])
    d, hd = multiclass_scores(pred, gt, 2)
    assert d == pytest.approx(0.5 * (2 * 2 / 5 + 2 * 1 / 3))
    assert hd == pytest.approx(0.5 * (1.0 + 1.0))


def _rec(mask, rid="r", pixels=None):
    mask = np.asarray(mask, np.uint8)
    px = np.zeros(mask.shape) if pixels is None else pixels
    return ImageRecord(rid, px, mask, "test")


def test_evaluate_split_perfect_and_empty_predictions():
    gt = np.zeros((16, 16), np.uint8)
    gt[4:8, 4:8] = 1
    rec = _rec(gt, pixels=gt.astype(float) * 10 - 5)
    rows, agg = evaluate_split(sigmoid_model, [rec], 8, 8, 4)
    assert agg["dice"] == 1.0 and agg["hd"] == 0.0
    rows, agg = evaluate_split(lambda p: np.zeros(p.shape), [rec], 8, 8, 4)
    assert rows[0].dice == 0.0 and rows[0].hd == 200.0


def test_evaluate_split_whole_image_window():
    gt = np.ones((8, 8), np.uint8)
    rows, agg = evaluate_split(lambda p: np.ones(p.shape), [_rec(gt)], 8, 8, 4)
    assert agg == {"dice": 1.0, "hd": 0.0, "n": 1}


def test_evaluate_split_requires_masks():
    with pytest.raises(MissingMask):
        evaluate_split(sigmoid_model, [ImageRecord("x", np.zeros((8, 8)), None, "test")], 4, 4, 2)


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_eval_rows_round_trip(tmp_path, suffix):
    rows = [EvalRow("d", "simclr", "random", "L/8", 3.5, 0.25, 0, "a"),
            EvalRow("d", "byol", "proximity", "L/2", 200.0, 0.0, 1, "b")]
    path = write_eval_rows(rows, tmp_path / f"rows{suffix}")
    assert read_eval_rows(path) == rows


def test_eval_row_bounds():
    with pytest.raises(ValueError):
        EvalRow("d", "m", "s", "L/2", 1.0, 1.5, 0)
    with pytest.raises(ValueError):
        EvalRow("d", "m", "s", "L/2", -1.0, 0.5, 0)
