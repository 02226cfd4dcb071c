"""Sliding-window stitched inference and Dice / Hausdorff metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .core import ImageRecord, Window
from .errors import MissingMask, ShapeError, StrideError

DEFAULT_CAP = 200.0


@dataclass(frozen=True, eq=False)
class StitchPlan:
    windows: tuple[Window, ...]
    stride: int
    coverage: np.ndarray
    h: int
    w: int

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.coverage.shape


def _axis_origins(n: int, k: int, s: int) -> list[int]:
    origins = list(range(0, n - k + 1, s))
    if origins[-1] != n - k:
        origins.append(n - k)  # last window flush with the border
    return origins


def build_stitch_plan(image_shape, h: int, w: int, s: int) -> StitchPlan:
    H, W = image_shape[:2]
    if h > H or w > W or h < 1 or w < 1:
        raise ShapeError(f"window {h}x{w} does not fit image {H}x{W}")
    if s < 1 or s >= min(h, w):
        raise StrideError(f"stride {s} must satisfy 1 <= s < min(h, w) = {min(h, w)}")
    windows = []
    coverage = np.zeros((H, W), dtype=np.int64)
    for top in _axis_origins(H, h, s):
        for left in _axis_origins(W, w, s):
            win = Window.from_origin(top, left, h, w)
            windows.append(win)
            coverage[win.slices] += 1
    return StitchPlan(tuple(windows), int(s), coverage, int(h), int(w))


def stitch_predict(image: np.ndarray, model: Callable, plan: StitchPlan,
                   batch_size: int = 256) -> np.ndarray:
    """Average the model's patch probabilities over every covering window.

    ``model`` maps a ``(B, h, w)`` float array to ``(B, h, w)`` probabilities
    (binary) or ``(B, C, h, w)`` (multiclass). Result is ``(H, W)`` or
    ``(C, H, W)``.
    """
    image = np.asarray(image)
    if image.shape != plan.image_shape:
        raise ShapeError(f"image {image.shape} does not match plan {plan.image_shape}")
    acc = None
    for start in range(0, len(plan.windows), batch_size):
        chunk = plan.windows[start:start + batch_size]
        patches = np.stack([image[win.slices] for win in chunk])
        probs = np.asarray(model(patches), dtype=np.float64)
        if probs.shape[0] != len(chunk) or probs.shape[-2:] != (plan.h, plan.w):
            raise ShapeError(f"model output {probs.shape} does not match patches {patches.shape}")
        if acc is None:
            acc = np.zeros(probs.shape[1:-2] + plan.image_shape)
        for win, p in zip(chunk, probs):
            acc[(..., *win.slices)] += p
    return acc / plan.coverage


def threshold(prob: np.ndarray, level: float = 0.5) -> np.ndarray:
    """Binary mask with the strict ``prob > level`` rule (ties are background)."""
    return np.asarray(prob) > level


def dice_score(pred_mask, gt_mask) -> float:
    a, b = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _directed_edt(src: np.ndarray, dst: np.ndarray) -> float:
    # exact Euclidean distance from each pixel to the nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].max())


def _directed_exhaustive(pa: np.ndarray, pb: np.ndarray, chunk: int = 2048) -> float:
    worst = 0.0
    for i in range(0, len(pa), chunk):
        worst = max(worst, float(cdist(pa[i:i + chunk], pb).min(axis=1).max()))
    return worst


def hausdorff(pred_mask, gt_mask, cap: float = DEFAULT_CAP, method: str = "auto") -> float:
    """Symmetric Hausdorff distance between foreground pixel sets (pixel units).

    Exactly one empty mask yields ``cap``; two empty masks yield 0.
    """
    a, b = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return float(cap)
    if method == "auto":
        method = "exhaustive" if na * nb <= 4_000_000 else "edt"
    if method == "exhaustive":
        pa, pb = np.argwhere(a).astype(float), np.argwhere(b).astype(float)
        return max(_directed_exhaustive(pa, pb), _directed_exhaustive(pb, pa))
    if method == "edt":
        return max(_directed_edt(a, b), _directed_edt(b, a))
    raise ValueError(f"unknown method {method!r}")


def multiclass_scores(pred_labels, gt_labels, num_classes: int,
                      cap: float = DEFAULT_CAP) -> tuple[float, float]:
    """Mean per-class Dice and Hausdorff over classes present in either map."""
    dices, hds = [], []
    for c in range(num_classes):
        a, b = pred_labels == c, gt_labels == c
        if not a.any() and not b.any():
            continue
        dices.append(dice_score(a, b))
        hds.append(hausdorff(a, b, cap))
    if not dices:
        return 1.0, 0.0
    return float(np.mean(dices)), float(np.mean(hds))


@dataclass
class EvalRow:
    dataset: str
    method: str
    sampling: str
    patch_divisor: str
    hd: float
    dice: float
    seed: int
    record_id: str = ""

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0):
            raise ValueError(f"dice {self.dice} outside [0, 1]")
        if self.hd < 0:
            raise ValueError(f"negative hd {self.hd}")


def evaluate_split(model: Callable, records: Sequence[ImageRecord], h: int, w: int, s: int,
                   level: float = 0.5, cap: float = DEFAULT_CAP, num_classes: int = 1,
                   dataset: str = "", method: str = "", sampling: str = "",
                   patch_divisor: str = "", seed: int = 0) -> tuple[list[EvalRow], dict]:
    """Stitch, threshold (binary) or argmax (multiclass), then score each record."""
    rows = []
    for rec in records:
        if rec.mask is None:
            raise MissingMask(rec.id)
        H, W = rec.shape
        hh, ww = min(h, H), min(w, W)
        if hh == H and ww == W and s >= min(hh, ww):
            plan = build_stitch_plan(rec.shape, hh, ww, max(1, min(hh, ww) - 1))
        else:
            plan = build_stitch_plan(rec.shape, hh, ww, s)
        prob = stitch_predict(rec.pixels, model, plan)
        if num_classes == 1:
            pred = threshold(prob, level)
            gt = np.asarray(rec.mask) > 0
            d, hd = dice_score(pred, gt), hausdorff(pred, gt, cap)
        else:
            d, hd = multiclass_scores(prob.argmax(axis=0), np.asarray(rec.mask), num_classes, cap)
        rows.append(EvalRow(dataset, method, sampling, patch_divisor, hd, d, seed, rec.id))
    agg = {
        "dice": float(np.mean([r.dice for r in rows])) if rows else float("nan"),
        "hd": float(np.mean([r.hd for r in rows])) if rows else float("nan"),
        "n": len(rows),
    }
    return rows, agg


def write_eval_rows(rows: Sequence[EvalRow], path) -> Path:
    """CSV or JSON by file suffix."""
    path = Path(path)
    records = [asdict(r) for r in rows]
    if path.suffix == ".json":
        path.write_text(json.dumps(records, indent=2))
    else:
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[f.name for f in fields(EvalRow)])
            writer.writeheader()
            writer.writerows(records)
    return path


def read_eval_rows(path) -> list[EvalRow]:
    path = Path(path)
    if path.suffix == ".json":
        return [EvalRow(**r) for r in json.loads(path.read_text())]
    with path.open(newline="") as fh:
        return [EvalRow(r["dataset"], r["method"], r["sampling"], r["patch_divisor"],
                        float(r["hd"]), float(r["dice"]), int(r["seed"]), r["record_id"])
                for r in csv.DictReader(fh)]
