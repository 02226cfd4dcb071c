"""Dataset ingestion, sweep orchestration and Table-style reporting."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import synth, train
from .core import (DIVISORS, ExperimentConfig, ImageRecord, ValidatedConfig, config_from_dict,
                   smallest_side, validate_config, with_crop_size)
from .errors import FormatError, InconsistentShape, MissingMask, NothingToReport, TooSmall
from .evalkit import EvalRow, write_eval_rows

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
LABELED_SPLITS = ("train", "val", "test")
RUNS_FILE = "runs.jsonl"


class Dataset(list):
    """List of records that also carries the normalization statistics."""

    def __init__(self, records: Iterable[ImageRecord] = (), stats: Optional[dict] = None):
        super().__init__(records)
        self.stats = stats or {}

    def split(self, *names: str) -> list[ImageRecord]:
        return [r for r in self if r.split in names]

    @property
    def base_L(self) -> int:
        return smallest_side(self)


def normalize_records(records: Sequence[ImageRecord]) -> Dataset:
    """Zero-mean, unit-variance intensities using dataset-wide statistics."""
    n = sum(r.pixels.size for r in records)
    mean = sum(float(r.pixels.sum()) for r in records) / n
    var = sum(float(((r.pixels - mean) ** 2).sum()) for r in records) / n
    std = float(np.sqrt(var)) or 1.0
    out = [ImageRecord(r.id, (r.pixels - mean) / std, r.mask, r.split) for r in records]
    return Dataset(out, {"mean": mean, "std": std, "count": len(out)})


def hash_split(record_id: str) -> str:
    b = int(hashlib.sha256(record_id.encode()).hexdigest(), 16) % 100
    return "pretrain" if b < 60 else "train" if b < 80 else "val" if b < 90 else "test"


def _read_pages(path: Path) -> list[np.ndarray]:
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        arr = tifffile.imread(path)
        if arr.ndim == 2:
            return [arr]
        if arr.ndim == 3:
            return [arr[i] for i in range(arr.shape[0])]
        raise FormatError(f"{path}: unsupported TIFF shape {arr.shape}")
    from PIL import Image

    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    return [arr]


def ingest_dataset(source, normalize: bool = True) -> Dataset:
    """Load records from a synth manifest or ``<id>.png`` / ``<id>_mask.png`` pairs.

    Multi-page TIFF stacks yield one record per page (``<stem>_p<page>``).
    Without a manifest, splits come from a hash of the record id; when no file
    has a mask everything is assigned to the pretrain split.
    """
    src = Path(source)
    if (src / "manifest.json").exists() or src.name == "manifest.json":
        records = synth.read_dataset(src)
    else:
        if not src.is_dir():
            raise FormatError(f"{src} is neither a directory nor a manifest")
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        images = [p for p in files if not p.stem.endswith("_mask")]
        if not images:
            raise FormatError(f"no images found in {src}")
        masks = {p.stem[: -len("_mask")]: p for p in files if p.stem.endswith("_mask")}
        records = []
        for p in images:
            pages = _read_pages(p)
            mask_pages = _read_pages(masks[p.stem]) if p.stem in masks else None
            if mask_pages is not None and len(mask_pages) != len(pages):
                raise InconsistentShape(f"{p.name}: {len(pages)} pages but {len(mask_pages)} mask pages")
            for k, page in enumerate(pages):
                rid = p.stem if len(pages) == 1 else f"{p.stem}_p{k:03d}"
                mask = None
                if mask_pages is not None:
                    mask = np.asarray(mask_pages[k])
                    if mask.shape != page.shape:
                        raise InconsistentShape(f"{rid}: mask {mask.shape} vs image {page.shape}")
                    mask = mask.astype(np.uint8)
                split = hash_split(rid) if masks else "pretrain"
                if split in LABELED_SPLITS and mask is None:
                    raise MissingMask(f"{rid} assigned to {split} but has no mask")
                records.append(ImageRecord(rid, np.asarray(page, dtype=np.float64), mask, split))
    for r in records:
        if r.split in LABELED_SPLITS and r.mask is None:
            raise MissingMask(f"{r.id} in split {r.split} has no mask")
    if normalize:
        return normalize_records(records)
    return Dataset(records)


def resolve_patch_size(records: Sequence[ImageRecord], divisor: int, stride_product: int = 1) -> int:
    """``floor(L / divisor)`` rounded down to a multiple of the encoder stride product."""
    if divisor not in DIVISORS:
        raise ValueError(f"divisor must be one of {DIVISORS}")
    if not records:
        raise ValueError("no records")
    size = smallest_side(records) // divisor
    size -= size % stride_product
    if size < 8:
        raise TooSmall(f"L/{divisor} gives a {size} px patch (< 8)")
    return size


def resolve_run_config(config: ExperimentConfig, records: Sequence[ImageRecord]) -> tuple[ValidatedConfig, int]:
    """Pin crop size (and full-view resolution) for a dataset; returns (config, patch size)."""
    cfg = validate_config(config)
    L = smallest_side(records)
    if cfg.sampling == "full_view":
        size = cfg.full_view_size or (L - L % cfg.stride_product)
        cfg = validate_config(dataclasses.replace(cfg, full_view_size=size))
    elif cfg.crop_size is not None:
        size = cfg.crop_size
    else:
        size = resolve_patch_size(records, cfg.crop_divisor, cfg.stride_product)
    return with_crop_size(cfg, size), size


# --- sweeps ---------------------------------------------------------------

@dataclass
class SweepSpec:
    axes: dict
    base_config: ExperimentConfig = field(default_factory=ExperimentConfig)
    output_dir: str = "sweep"
    dataset: str = "dataset"

    def cells(self) -> list[ValidatedConfig]:
        keys = [k for k in ("ssl_method", "sampling", "crop_divisor", "seed") if k in self.axes]
        extra = set(self.axes) - set(keys)
        if extra:
            raise ValueError(f"unsupported sweep axes {sorted(extra)}")
        out, seen = [], set()
        for combo in itertools.product(*(self.axes[k] for k in keys)):
            values = dict(zip(keys, combo))
            if values.get("sampling", self.base_config.sampling) == "full_view":
                values["crop_divisor"] = None
            cfg = validate_config(dataclasses.replace(self.base_config, **values))
            key = cell_id(cfg)
            if key not in seen:
                seen.add(key)
                out.append(cfg)
        if not out:
            raise ValueError("sweep has no cells")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        base = config_from_dict(d.get("base_config", {}))
        return cls(dict(d["axes"]), base, d.get("output_dir", "sweep"), d.get("dataset", "dataset"))


def cell_id(cfg: ExperimentConfig) -> str:
    div = f"L{cfg.crop_divisor}" if cfg.crop_divisor and cfg.sampling != "full_view" else "full"
    return f"{cfg.ssl_method}-{cfg.sampling}-{div}-seed{cfg.seed}"


def divisor_label(cfg: ExperimentConfig) -> str:
    return "full" if cfg.sampling == "full_view" or not cfg.crop_divisor else f"L/{cfg.crop_divisor}"


@dataclass
class RunRecord:
    cell: dict
    status: str = "pending"
    eval_rows: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    checkpoints: dict = field(default_factory=dict)
    error: str = ""
    cell_id: str = ""

    def __post_init__(self):
        if self.status not in ("pending", "running", "done", "failed"):
            raise ValueError(f"bad status {self.status!r}")

    def rows(self) -> list[EvalRow]:
        return [EvalRow(**r) for r in self.eval_rows]


def run_cell(cfg: ExperimentConfig, records: Sequence[ImageRecord], out_dir, dataset: str = "dataset",
             split: str = "test") -> RunRecord:
    """pretrain -> finetune -> evaluate for one configuration."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    cfg, size = resolve_run_config(cfg, records)
    rec = RunRecord(cell=cfg.to_dict(), status="running", cell_id=cell_id(cfg))
    by_split = {s: [r for r in records if r.split == s] for s in ("pretrain", "train", "val", "test")}
    encoder = None
    if cfg.ssl_method != "none":
        pre = train.pretrain(by_split["pretrain"] + by_split["train"], cfg, out / "pretrain")
        rec.checkpoints["pretrain"] = str(pre.checkpoint)
        encoder = pre.model.encoder
    labeled = train.select_labeled_subset(by_split["train"], cfg.label_fraction, cfg.seed)
    ft = train.finetune_segmentation(None, labeled, cfg, size, by_split["val"], out / "finetune",
                                     encoder=encoder)
    rec.checkpoints["finetune"] = str(ft.checkpoint)
    method = "supervised" if cfg.ssl_method == "none" else cfg.ssl_method
    rows, agg = train.evaluate_net(ft.net, by_split[split], size, cfg, dataset=dataset, method=method,
                                   sampling=cfg.sampling, patch_divisor=divisor_label(cfg))
    write_eval_rows(rows, out / "eval.csv")
    rec.eval_rows = [dataclasses.asdict(r) for r in rows]
    rec.aggregate = {**agg, "patch_size": size, "best_val_dice": ft.best_val_dice}
    rec.status = "done"
    rec.wall_time_s = time.perf_counter() - t0
    return rec


def load_runs(sweep_dir) -> dict[str, RunRecord]:
    """Latest record per cell from the append-only ``runs.jsonl``."""
    path = Path(sweep_dir) / RUNS_FILE
    latest: dict[str, RunRecord] = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                r = RunRecord(**json.loads(line))
                latest[r.cell_id] = r
    return latest


def _append_run(sweep_dir: Path, rec: RunRecord) -> None:
    with (sweep_dir / RUNS_FILE).open("a") as fh:
        fh.write(json.dumps(dataclasses.asdict(rec), default=float) + "\n")


def run_sweep(sweep: SweepSpec, records: Sequence[ImageRecord]) -> list[RunRecord]:
    """Execute every cell sequentially; cells already done are skipped."""
    root = Path(sweep.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    previous = load_runs(root)
    results = []
    for cfg in sweep.cells():
        cid = cell_id(cfg)
        if cid in previous and previous[cid].status == "done":
            results.append(previous[cid])
            continue
        _append_run(root, RunRecord(cell=cfg.to_dict(), status="running", cell_id=cid))
        try:
            rec = run_cell(cfg, records, root / cid, sweep.dataset)
        except Exception as exc:  # recorded; the sweep continues
            log.exception("cell %s failed", cid)
            rec = RunRecord(cell=cfg.to_dict(), status="failed", cell_id=cid,
                            error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        _append_run(root, rec)
        results.append(rec)
    return results


# --- aggregation and reporting --------------------------------------------

REPORT_COLUMNS = ("group", "dataset", "method", "sampling", "patch_size", "hd", "hd_std", "dice",
                  "dice_std", "n_seeds", "best")


def _group_name(method: str, sampling: str) -> str:
    if method == "supervised" or sampling == "full_view":
        return "Full-slice Baselines"
    return "SSL Patch Methods"


def aggregate_runs(runs: Sequence[RunRecord], average_methods: bool = False) -> list[dict]:
    """Mean (and std) of per-run Dice/HD over seeds, optionally over SSL methods.

    Per-method rows are always kept; averaging adds rows with method ``ssl-avg``.
    """
    done = [r for r in runs if r.status == "done"]
    per_run = []
    for r in done:
        rows = r.rows()
        if not rows:
            continue
        first = rows[0]
        per_run.append({"dataset": first.dataset, "method": first.method, "sampling": first.sampling,
                        "patch_size": first.patch_divisor, "seed": first.seed,
                        "dice": float(np.mean([x.dice for x in rows])),
                        "hd": float(np.mean([x.hd for x in rows]))})
    keyed: dict[tuple, list[dict]] = {}
    for p in per_run:
        keyed.setdefault((p["dataset"], p["method"], p["sampling"], p["patch_size"]), []).append(p)
        if average_methods and p["method"] != "supervised" and p["sampling"] != "full_view":
            keyed.setdefault((p["dataset"], "ssl-avg", p["sampling"], p["patch_size"]), []).append(p)
    out = []
    for (ds, method, sampling, ps), items in keyed.items():
        dice = [i["dice"] for i in items]
        hd = [i["hd"] for i in items]
        out.append({"group": _group_name(method, sampling), "dataset": ds, "method": method,
                    "sampling": sampling, "patch_size": ps,
                    "hd": float(np.mean(hd)), "hd_std": float(np.std(hd)),
                    "dice": float(np.mean(dice)), "dice_std": float(np.std(dice)),
                    "n_seeds": len({i["seed"] for i in items}), "best": False})
    order = {"Full-slice Baselines": 0, "SSL Patch Methods": 1}
    out.sort(key=lambda r: (r["dataset"], order[r["group"]], r["method"], r["sampling"], r["patch_size"]))
    for ds in {r["dataset"] for r in out}:
        rows = [r for r in out if r["dataset"] == ds]
        best = max(rows, key=lambda r: (r["dice"], -r["hd"]))
        best["best"] = True
    return out


def write_report_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in REPORT_COLUMNS})  # str(float) round-trips exactly
    return path


def read_report_csv(path) -> list[dict]:
    out = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({**r, "hd": float(r["hd"]), "hd_std": float(r["hd_std"]), "dice": float(r["dice"]),
                        "dice_std": float(r["dice_std"]), "n_seeds": int(r["n_seeds"]),
                        "best": r["best"] == "True"})
    return out


def markdown_table(rows: Sequence[dict]) -> str:
    lines = ["| Group | Dataset | Method | Sampling | Patch size | HD | Dice |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        hd = f"{r['hd']:.2f} ± {r['hd_std']:.2f}"
        dice = f"{r['dice']:.3f} ± {r['dice_std']:.3f}"
        if r["best"]:
            hd, dice = f"**{hd}**", f"**{dice}**"
        lines.append(f"| {r['group']} | {r['dataset']} | {r['method']} | {r['sampling']} | "
                     f"{r['patch_size']} | {hd} | {dice} |")
    return "\n".join(lines) + "\n"


def _plot(rows: Sequence[dict], metric: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    patch_rows = [r for r in rows if r["group"] == "SSL Patch Methods"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (method, sampling) in sorted({(r["method"], r["sampling"]) for r in patch_rows}):
        pts = sorted(((int(r["patch_size"].split("/")[1]), r[metric]) for r in patch_rows
                      if r["method"] == method and r["sampling"] == sampling))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{method}/{sampling}")
    for r in rows:
        if r["group"] == "Full-slice Baselines":
            ax.axhline(r[metric], linestyle="--", linewidth=0.8, color="gray")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("patch divisor (L/x)")
    ax.set_ylabel(metric.upper() if metric == "hd" else "Dice")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(runs: Sequence[RunRecord], out_dir, average_methods: bool = False) -> dict[str, Path]:
    """CSV + Markdown tables and Dice/HD-vs-divisor SVG plots."""
    if not any(r.status == "done" for r in runs):
        raise NothingToReport("no completed runs")
    rows = aggregate_runs(runs, average_methods)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": write_report_csv(rows, out / "report.csv")}
    (out / "report.md").write_text(markdown_table(rows))
    paths["markdown"] = out / "report.md"
    for metric in ("dice", "hd"):
        p = out / f"{metric}_vs_patch.svg"
        _plot(rows, metric, p)
        paths[f"plot_{metric}"] = p
    return paths
