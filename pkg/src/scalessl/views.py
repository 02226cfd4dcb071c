"""Scale-aware view construction: crop-center sampling, cropping, augmentation.

A view is ``augment(crop(x, window), descriptor)``: the crop always comes
first and the stochastic augmentation acts on the cropped patch only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .core import ImageRecord, RngStream, ValidatedConfig, Window
from .errors import InfeasibleConstraint, ShapeError


@dataclass(frozen=True)
class Affine:
    rotation_deg: float = 0.0
    shear: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.shear == 0.0 and self.scale == 1.0


@dataclass(frozen=True)
class AugmentationDescriptor:
    """Replayable description of one augmentation draw."""

    hflip: bool = False
    vflip: bool = False
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0
    affine: Optional[Affine] = None

    def __post_init__(self):
        if not self.intensity_scale > 0:
            raise ValueError("intensity_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationDescriptor":
        d = dict(d)
        if d.get("affine") is not None:
            d["affine"] = Affine(**d["affine"])
        return cls(**d)


IDENTITY = AugmentationDescriptor()


@dataclass(frozen=True, eq=False)
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    window1: Window
    window2: Window
    aug1: AugmentationDescriptor
    aug2: AugmentationDescriptor
    source_id: str

    def log_record(self) -> dict:
        return {
            "source_id": self.source_id,
            "window1": self.window1.to_dict(),
            "window2": self.window2.to_dict(),
            "aug1": self.aug1.to_dict(),
            "aug2": self.aug2.to_dict(),
        }


def valid_center_range(image_shape, size) -> tuple[tuple[int, int], tuple[int, int]]:
    """Inclusive bounds of integer centers whose window stays inside the image."""
    H, W = image_shape[:2]
    h, w = size
    if h > H or w > W:
        raise ShapeError(f"crop {h}x{w} exceeds image {H}x{W}")
    if h < 1 or w < 1:
        raise ShapeError(f"invalid crop size {h}x{w}")
    return (h // 2, H - math.ceil(h / 2)), (w // 2, W - math.ceil(w / 2))


def sample_window_random(image_shape, size, rng: RngStream) -> Window:
    """Uniform crop center over the valid-center rectangle."""
    (u0, u1), (v0, v1) = valid_center_range(image_shape, size)
    u = int(rng.integers(u0, u1 + 1))
    v = int(rng.integers(v0, v1 + 1))
    return Window(u, v, int(size[0]), int(size[1]))


def sample_window_proximal(first: Window, image_shape, size, delta: float,
                           rng: RngStream, max_tries: int = 100_000) -> Window:
    """Second crop center drawn uniformly from ``{c : |c - first| < delta}``.

    Rejection sampling over the bounding box of the disc clipped to the
    valid-center rectangle, so the accepted draw is uniform on the
    intersection.
    """
    (u0, u1), (v0, v1) = valid_center_range(image_shape, size)
    if not first.in_bounds(image_shape):
        raise ShapeError(f"first window {first} is out of bounds")
    r = math.ceil(delta) - 1  # largest integer offset with offset < delta
    lo_u, hi_u = max(u0, first.center_u - r), min(u1, first.center_u + r)
    lo_v, hi_v = max(v0, first.center_v - r), min(v1, first.center_v + r)
    if lo_u > hi_u or lo_v > hi_v or delta <= 0:
        raise InfeasibleConstraint(f"no valid center within {delta} of {first}")
    d2 = float(delta) ** 2
    for _ in range(max_tries):
        u = int(rng.integers(lo_u, hi_u + 1))
        v = int(rng.integers(lo_v, hi_v + 1))
        if (u - first.center_u) ** 2 + (v - first.center_v) ** 2 < d2:
            return Window(u, v, int(size[0]), int(size[1]))
    raise InfeasibleConstraint(f"rejection sampling exhausted around {first}")


def crop(image: np.ndarray, window: Window) -> np.ndarray:
    if not window.in_bounds(np.shape(image)):
        raise ShapeError(f"{window} out of bounds for image {np.shape(image)}")
    return image[window.slices]


def _affine_matrix(affine: Affine) -> np.ndarray:
    """Output->input coordinate map (rows, cols) for rotation, shear and zoom."""
    th = math.radians(affine.rotation_deg)
    sh = math.radians(affine.shear)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, 0.0], [math.tan(sh), 1.0]])
    forward = affine.scale * rot @ shear
    return np.linalg.inv(forward)


def augment(patch: np.ndarray, descriptor: AugmentationDescriptor) -> np.ndarray:
    """Apply affine -> flips -> intensity ``a*x + b`` exactly as described."""
    x = np.asarray(patch, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("augment: non-finite input patch")
    if descriptor.affine is not None and not descriptor.affine.is_identity:
        m = _affine_matrix(descriptor.affine)
        center = (np.array(x.shape, dtype=float) - 1) / 2
        offset = center - m @ center
        x = ndimage.affine_transform(x, m, offset=offset, order=1, mode="mirror")
    if descriptor.hflip:
        x = x[:, ::-1]
    if descriptor.vflip:
        x = x[::-1, :]
    if descriptor.intensity_scale != 1.0 or descriptor.intensity_shift != 0.0:
        x = descriptor.intensity_scale * x + descriptor.intensity_shift
    return np.ascontiguousarray(x)


def draw_augmentation(config: ValidatedConfig, rng: RngStream) -> AugmentationDescriptor:
    if not config.augment:
        return IDENTITY
    hflip = bool(rng.random() < config.flip_prob)
    vflip = bool(rng.random() < config.flip_prob)
    scale = float(rng.uniform(*config.intensity_scale_range))
    shift = float(rng.uniform(*config.intensity_shift_range))
    affine = None
    if rng.random() < config.affine_prob:
        affine = Affine(
            rotation_deg=float(rng.uniform(-config.max_rotation, config.max_rotation)),
            shear=float(rng.uniform(-config.max_shear, config.max_shear)),
            scale=float(rng.uniform(*config.scale_range)),
        )
    return AugmentationDescriptor(hflip, vflip, scale, shift, affine)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape == (size, size):
        return image
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def view_size(config: ValidatedConfig, image_shape) -> tuple[int, int]:
    if config.sampling == "full_view":
        s = config.full_view_size
        return (s, s) if s is not None else tuple(image_shape)
    if config.crop_size is None:
        raise ShapeError("crop size unresolved; call core.with_crop_size first")
    return config.crop_size, config.crop_size


def make_view_pair(image: ImageRecord, config: ValidatedConfig, rng: RngStream) -> ViewPair:
    x = image.pixels
    if config.sampling == "full_view":
        w1 = w2 = Window.whole(x.shape)
    else:
        size = (config.crop_size, config.crop_size)
        w1 = sample_window_random(x.shape, size, rng)
        if config.sampling == "proximity":
            w2 = sample_window_proximal(w1, x.shape, size, config.delta, rng)
        else:
            w2 = sample_window_random(x.shape, size, rng)
    a1 = draw_augmentation(config, rng)
    a2 = draw_augmentation(config, rng)
    return ViewPair(
        view1=render_view(x, w1, a1, config),
        view2=render_view(x, w2, a2, config),
        window1=w1, window2=w2, aug1=a1, aug2=a2, source_id=image.id,
    )


def render_view(x: np.ndarray, window: Window, aug: AugmentationDescriptor,
                config: ValidatedConfig) -> np.ndarray:
    patch = crop(x, window)
    if config.sampling == "full_view" and config.full_view_size is not None:
        patch = resize_bilinear(patch, config.full_view_size)
    return augment(patch, aug)


def replay_view_pair(record: dict, image: ImageRecord, config: ValidatedConfig) -> ViewPair:
    """Rebuild a logged pair from its windows and descriptors."""
    w1, w2 = Window(**record["window1"]), Window(**record["window2"])
    a1 = AugmentationDescriptor.from_dict(record["aug1"])
    a2 = AugmentationDescriptor.from_dict(record["aug2"])
    return ViewPair(render_view(image.pixels, w1, a1, config),
                    render_view(image.pixels, w2, a2, config), w1, w2, a1, a2, image.id)


def write_view_log(pairs: Iterable[ViewPair], fh) -> None:
    for p in pairs:
        fh.write(json.dumps(p.log_record()) + "\n")


def read_view_log(fh) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]
