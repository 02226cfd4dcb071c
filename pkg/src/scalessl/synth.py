"""Deterministic synthetic image/mask datasets at two target scales.

Small, sparse targets:
  thin_curves  - near-vertical fault-like discontinuities cutting layered reflectors
  small_blobs  - compact cell-like disks/ellipses on a granular background
Large targets:
  large_bands    - undulating horizontal bands, one class per band
  large_regions  - one big connected region covering a quarter to 60% of the slice
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ImageRecord, RngStream, SPLITS
from .errors import FormatError, SpecError

GENERATOR_VERSION = "1.0"
MANIFEST_SCHEMA_VERSION = 1
KINDS = ("thin_curves", "small_blobs", "large_bands", "large_regions")

_KIND_DEFAULTS = {
    "thin_curves": dict(density=3.0, thickness_px=2, texture="layered_reflectors", noise_sigma=0.15),
    "small_blobs": dict(density=8.0, radius_px=3, texture="granular", noise_sigma=0.15),
    "large_bands": dict(band_count=4, texture="layered_reflectors", noise_sigma=0.15),
    "large_regions": dict(texture="granular", noise_sigma=0.15),
}


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "thin_curves"
    image_size: tuple[int, int] = (96, 96)
    count: int = 100
    density: float = 3.0
    thickness_px: int = 2
    radius_px: int = 3
    band_count: int = 4
    noise_sigma: float = 0.15
    texture: str = "layered_reflectors"
    seed: int = 0
    split_fractions: tuple[float, float, float, float] = (0.6, 0.2, 0.1, 0.1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown kind {self.kind!r}")
        H, W = self.image_size
        if H < 16 or W < 16:
            raise SpecError("image_size must be at least 16x16")
        if self.count < 1:
            raise SpecError("count must be >= 1")
        if self.density < 0:
            raise SpecError("density must be >= 0")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        if self.texture not in ("none", "layered_reflectors", "granular"):
            raise SpecError(f"unknown texture {self.texture!r}")
        if not (1 <= self.thickness_px <= 3):
            raise SpecError("thin_curves thickness must lie in [1, 3] px")
        if not (1 <= self.radius_px <= 5):
            raise SpecError("small_blobs radius must lie in [1, 5] px")
        if not (1 <= self.band_count <= 10):
            raise SpecError("band_count must lie in [1, 10] so each band spans >= 10% of rows")
        fr = self.split_fractions
        if len(fr) != 4 or min(fr) < 0 or not math.isclose(sum(fr), 1.0):
            raise SpecError("split_fractions must be four non-negative values summing to 1")

    @classmethod
    def default(cls, kind: str, **overrides) -> "SynthSpec":
        if kind not in KINDS:
            raise SpecError(f"unknown kind {kind!r}")
        return cls(kind=kind, **{**_KIND_DEFAULTS[kind], **overrides})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def assign_splits(n: int, fractions: Sequence[float], seed: int) -> list[str]:
    """Seeded disjoint, exhaustive split labels with exact per-split counts."""
    counts = [int(math.floor(f * n)) for f in fractions]
    counts[0] += n - sum(counts)
    labels = np.repeat(np.array(SPLITS), counts)
    perm = RngStream(seed, "synth/splits").gen.permutation(n)
    out = [""] * n
    for i, p in enumerate(perm):
        out[p] = str(labels[i])
    return out


# --- textures -------------------------------------------------------------

def _reflectivity_trace(n: int, rng: RngStream, smooth: float = 1.2) -> np.ndarray:
    """Band-limited random reflectivity: spiky impedance contrasts, smoothed."""
    r = rng.gen.standard_normal(n) * (rng.random(n) < 0.35)
    tr = ndimage.gaussian_filter1d(r, smooth)
    return tr / (tr.std() + 1e-12)


def _layered(H: int, W: int, rng: RngStream, throw_field: Optional[np.ndarray] = None) -> np.ndarray:
    """Dipping, gently folded reflectors; ``throw_field`` shifts depth per pixel."""
    pad = 64
    trace = _reflectivity_trace(H + 2 * pad + W, rng)
    u = np.arange(H)[:, None].astype(float)
    v = np.arange(W)[None, :].astype(float)
    dip = rng.uniform(-0.15, 0.15)
    amp, wl, ph = rng.uniform(1.0, 4.0), rng.uniform(0.7, 1.5) * W, rng.uniform(0, 2 * np.pi)
    depth = u + pad + dip * v + amp * np.sin(2 * np.pi * v / wl + ph)
    depth = depth - depth.min() + pad / 2
    if throw_field is not None:
        depth = depth + throw_field
    return np.interp(depth, np.arange(trace.size), trace)


def _granular(H: int, W: int, rng: RngStream, grain: float = 1.0) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.gen.standard_normal((H, W)), grain)
    shade = ndimage.gaussian_filter(rng.gen.standard_normal((H, W)), max(H, W) / 6)
    g = g / (g.std() + 1e-12) + 2.0 * shade / (shade.std() + 1e-12) * 0.3
    return g


def _background(spec: SynthSpec, rng: RngStream, texture: Optional[str] = None) -> np.ndarray:
    H, W = spec.image_size
    texture = texture or spec.texture
    if texture == "layered_reflectors":
        return _layered(H, W, rng)
    if texture == "granular":
        return _granular(H, W, rng)
    return np.zeros((H, W))


def _finish(img: np.ndarray, spec: SynthSpec, rng: RngStream) -> np.ndarray:
    img = img + spec.noise_sigma * rng.gen.standard_normal(img.shape)
    return img.astype(np.float64)


# --- generators -----------------------------------------------------------

def _thin_curve_image(spec: SynthSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray, int]:
    H, W = spec.image_size
    n_faults = int(rng.gen.poisson(spec.density))
    v = np.arange(W)[None, :].astype(float)
    throw = np.zeros((H, W))
    mask = np.zeros((H, W), dtype=bool)
    placed = 0
    for _ in range(n_faults):
        length = int(rng.uniform(0.3, 0.9) * H)
        top = int(rng.integers(0, H - length + 1))
        c0 = rng.uniform(0.1 * W, 0.9 * W)
        slope = rng.uniform(-0.3, 0.3)
        bend = rng.uniform(-4.0, 4.0)
        t = (np.arange(H) - top) / max(length - 1, 1)
        center = c0 + slope * (np.arange(H) - top) + bend * np.sin(np.pi * t)
        rows = (np.arange(H) >= top) & (np.arange(H) < top + length)
        half = spec.thickness_px / 2.0
        band = (np.abs(v + 0.5 - center[:, None]) <= half) & rows[:, None]
        if (mask | band).mean() >= 0.05:
            continue
        # displacement fades out toward the fault tips
        taper = np.clip(np.sin(np.pi * np.clip(t, 0, 1)) * 1.5, 0, 1) * rows
        side = (v > center[:, None]).astype(float)
        throw += rng.gen.choice([-1.0, 1.0]) * rng.uniform(3.0, 7.0) * taper[:, None] * side
        mask |= band
        placed += 1
    H_, W_ = spec.image_size
    if spec.texture == "layered_reflectors":
        img = _layered(H_, W_, rng, throw_field=throw)
    else:
        img = _background(spec, rng) + 0.8 * (throw != 0)
    return _finish(img, spec, rng), mask.astype(np.uint8), placed


def gen_thin_curves(spec: SynthSpec, rng: Optional[RngStream] = None) -> list[ImageRecord]:
    """Fault proxy: thin near-vertical curves across which reflectors are offset."""
    if spec.kind != "thin_curves":
        raise SpecError(f"gen_thin_curves needs kind thin_curves, got {spec.kind}")
    splits = assign_splits(spec.count, spec.split_fractions, spec.seed)
    out = []
    for i in range(spec.count):
        img, mask, _ = _thin_curve_image(spec, _image_rng(spec, rng, i))
        out.append(ImageRecord(f"{spec.kind}_{i:05d}", img, mask, splits[i]))
    fg = np.mean([r.mask.mean() for r in out])
    if spec.density > 0 and not fg < 0.05:
        raise SpecError(f"foreground fraction {fg:.4f} is not sparse")
    return out


def _ellipse_mask(H: int, W: int, cu: float, cv: float, a: float, b: float, th: float) -> np.ndarray:
    u = np.arange(H)[:, None] - cu
    v = np.arange(W)[None, :] - cv
    x = u * math.cos(th) + v * math.sin(th)
    y = -u * math.sin(th) + v * math.cos(th)
    return (x / a) ** 2 + (y / b) ** 2 <= 1.0


def _small_blob_image(spec: SynthSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray, int]:
    H, W = spec.image_size
    target = int(rng.gen.poisson(spec.density))
    mask = np.zeros((H, W), dtype=bool)
    halo = np.zeros((H, W), dtype=bool)
    r = spec.radius_px
    placed = 0
    for _ in range(target):
        for _attempt in range(50):
            a = rng.uniform(max(0.75, r * 0.6), r + 0.25)
            b = rng.uniform(max(0.75, r * 0.6), r + 0.25)
            if r == 1:
                a = b = 1.0
            cu = int(rng.integers(r, H - r))
            cv = int(rng.integers(r, W - r))
            blob = _ellipse_mask(H, W, cu, cv, a, b, rng.uniform(0, np.pi))
            if not blob.any() or (blob & halo).any():
                continue
            if (mask | blob).mean() >= 0.08:
                break
            mask |= blob
            halo |= ndimage.binary_dilation(blob, structure=np.ones((3, 3)), iterations=2)
            placed += 1
            break
    bg = _background(spec, rng)
    soft = ndimage.gaussian_filter(mask.astype(float), 0.7)
    img = bg + 1.6 * soft
    return _finish(img, spec, rng), mask.astype(np.uint8), placed


def gen_small_blobs(spec: SynthSpec, rng: Optional[RngStream] = None) -> list[ImageRecord]:
    """Cell proxy: separated small disks/ellipses; per-image count ~ Poisson(density)."""
    if spec.kind != "small_blobs":
        raise SpecError(f"gen_small_blobs needs kind small_blobs, got {spec.kind}")
    splits = assign_splits(spec.count, spec.split_fractions, spec.seed)
    out = []
    for i in range(spec.count):
        img, mask, _ = _small_blob_image(spec, _image_rng(spec, rng, i))
        out.append(ImageRecord(f"{spec.kind}_{i:05d}", img, mask, splits[i]))
    return out


def _bands_image(spec: SynthSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    H, W = spec.image_size
    k = spec.band_count
    v = np.arange(W, dtype=float)
    # boundaries: equal spacing with jitter, each undulating; kept ordered per column
    base = (np.arange(1, k) + rng.uniform(-0.2, 0.2, size=k - 1)) * H / k
    bounds = []
    for b0 in base:
        amp = rng.uniform(0.02, 0.06) * H
        wl = rng.uniform(0.6, 1.6) * W
        curve = b0 + amp * np.sin(2 * np.pi * v / wl + rng.uniform(0, 2 * np.pi))
        bounds.append(curve)
    bounds = np.maximum.accumulate(np.array(bounds).reshape(k - 1, W), axis=0) if k > 1 else np.zeros((0, W))
    u = np.arange(H, dtype=float)[:, None]
    labels = (u[None] >= bounds[:, None, :]).sum(axis=0).astype(np.uint8) if k > 1 else np.zeros((H, W), np.uint8)
    # two visual families alternate, so a small window cannot tell e.g. band 0 from band 2
    fam_a = _layered(H, W, rng)
    fam_b = _granular(H, W, rng, grain=1.2)
    img = np.where(labels % 2 == 0, fam_a, 0.8 * fam_b)
    img = img + 0.08 * labels  # faint per-band offset
    return _finish(img, spec, rng), labels


def _region_image(spec: SynthSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    H, W = spec.image_size
    target = rng.uniform(0.30, 0.55)
    cu = rng.uniform(0.4, 0.6) * H
    cv = rng.uniform(0.4, 0.6) * W
    harmonics = [(kk, rng.uniform(0.0, 0.18), rng.uniform(0, 2 * np.pi)) for kk in (2, 3, 5)]
    uu, vv = np.mgrid[0:H, 0:W].astype(float)
    ang = np.arctan2(uu - cu, vv - cv)
    rad = np.hypot(uu - cu, vv - cv)
    shape = 1.0 + sum(a * np.cos(kk * ang + ph) for kk, a, ph in harmonics)
    R = math.sqrt(target * H * W / math.pi)
    mask = rad <= R * shape
    for _ in range(20):
        frac = mask.mean()
        if 0.25 <= frac <= 0.60 and abs(frac - target) < 0.02:
            break
        R *= math.sqrt(target / max(frac, 1e-3))
        mask = rad <= R * shape
    inside = _granular(H, W, rng, grain=2.0)
    outside = _granular(H, W, rng, grain=0.8)
    img = np.where(mask, 0.9 * inside + 0.5, outside)
    return _finish(img, spec, rng), mask.astype(np.uint8)


def gen_large_structures(spec: SynthSpec, rng: Optional[RngStream] = None) -> list[ImageRecord]:
    """Facies/axon proxy: large bands (multiclass) or one large region (binary)."""
    if spec.kind not in ("large_bands", "large_regions"):
        raise SpecError(f"gen_large_structures needs a large kind, got {spec.kind}")
    splits = assign_splits(spec.count, spec.split_fractions, spec.seed)
    out = []
    for i in range(spec.count):
        r = _image_rng(spec, rng, i)
        if spec.kind == "large_bands":
            img, mask = _bands_image(spec, r)
        else:
            img, mask = _region_image(spec, r)
            frac = mask.mean()
            if not 0.25 <= frac <= 0.60:
                raise SpecError(f"region fraction {frac:.3f} outside [0.25, 0.60]")
        out.append(ImageRecord(f"{spec.kind}_{i:05d}", img, mask, splits[i]))
    return out


def _image_rng(spec: SynthSpec, rng: Optional[RngStream], i: int) -> RngStream:
    base = rng if rng is not None else RngStream(spec.seed, f"synth/{spec.kind}")
    return base.child(f"img{i}")


def generate(spec: SynthSpec, rng: Optional[RngStream] = None) -> list[ImageRecord]:
    if spec.kind == "thin_curves":
        return gen_thin_curves(spec, rng)
    if spec.kind == "small_blobs":
        return gen_small_blobs(spec, rng)
    return gen_large_structures(spec, rng)


# --- on-disk format -------------------------------------------------------

def write_dataset(records: Sequence[ImageRecord], directory, spec: Optional[SynthSpec] = None) -> Path:
    """16-bit grayscale image PNGs, 8-bit label PNGs and ``manifest.json``.

    Intensities are quantized linearly over the dataset-wide range recorded in
    the manifest.
    """
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {d}: {exc}") from exc
    lo = float(min(r.pixels.min() for r in records))
    hi = float(max(r.pixels.max() for r in records))
    span = hi - lo if hi > lo else 1.0
    entries = []
    for r in records:
        q = np.round((r.pixels - lo) / span * 65535).astype(np.uint16)
        Image.fromarray(q).save(d / f"{r.id}.png")
        entry = {"id": r.id, "split": r.split, "image": f"{r.id}.png", "mask": None}
        if r.mask is not None:
            Image.fromarray(np.asarray(r.mask, dtype=np.uint8)).save(d / f"{r.id}_mask.png")
            entry["mask"] = f"{r.id}_mask.png"
        entries.append(entry)
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "generator_version": GENERATOR_VERSION,
        "spec": spec.to_dict() if spec is not None else None,
        "intensity_range": [lo, hi],
        "records": entries,
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_dataset(directory) -> list[ImageRecord]:
    """Load a directory written by :func:`write_dataset`, de-quantizing intensities."""
    d = Path(directory)
    path = d / "manifest.json" if d.is_dir() else d
    d = path.parent
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest {path}: {exc}") from None
    lo, hi = manifest.get("intensity_range", [0.0, 65535.0])
    span = hi - lo if hi > lo else 1.0
    out = []
    for e in manifest["records"]:
        q = np.asarray(Image.open(d / e["image"]), dtype=np.float64)
        pixels = lo + q / 65535 * span
        mask = None
        if e.get("mask"):
            mask = np.asarray(Image.open(d / e["mask"]), dtype=np.uint8)
        out.append(ImageRecord(e["id"], pixels, mask, e.get("split", "pretrain")))
    return out


def file_checksums(directory) -> dict[str, str]:
    d = Path(directory)
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}
