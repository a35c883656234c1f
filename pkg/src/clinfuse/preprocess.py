"""Image preprocessing: CLAHE and the train/eval geometric pipelines."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import _clahe_py
from .errors import ConfigError

if os.environ.get("CLINFUSE_PURE_PYTHON") == "1":
    _kernels = _clahe_py
else:
    try:
        from . import _clahe_ext as _kernels
    except ImportError:  # extension not built
        _kernels = _clahe_py

BACKEND = "cython" if _kernels is not _clahe_py else "python"
N_BINS = 256


def kernels(backend: str | None = None):
    if backend is None:
        return _kernels
    if backend == "python":
        return _clahe_py
    if backend == "cython":
        from . import _clahe_ext
        return _clahe_ext
    raise ValueError(f"unknown CLAHE backend {backend!r}")


@dataclass(frozen=True)
class ClaheParams:
    tile_grid: tuple = (8, 8)
    clip_limit: float = 2.0  # multiple of the mean bin count; inf disables clipping
    n_bins: int = N_BINS

    def validate(self) -> None:
        rows, cols = self.tile_grid
        if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
            raise ConfigError("clahe.tile_grid", "tile counts must be positive integers")
        if math.isnan(self.clip_limit) or self.clip_limit < 1.0:
            raise ConfigError("clahe.clip_limit", "must be >= 1")
        if self.n_bins != N_BINS:
            raise ConfigError("clahe.n_bins", "only 256 bins are supported")


def clahe(image: np.ndarray, params: ClaheParams = ClaheParams(), backend: str | None = None) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of an 8-bit image.

    The image is edge-padded to a whole number of tiles. Each tile gets a clipped
    256-bin histogram and an equalization map; tiles holding a single grey level
    keep the identity map. Output pixels interpolate bilinearly between the maps of
    the nearest tile centres, with integer half-up rounding.
    """
    params.validate()
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("clahe expects a non-empty 2-D image")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255 or not np.all(np.floor(image) == image):
            raise ValueError("clahe expects integer intensities in [0, 255]")
        image = image.astype(np.uint8)
    image = np.ascontiguousarray(image)
    rows, cols = (int(x) for x in params.tile_grid)
    h, w = image.shape
    th, tw = math.ceil(h / rows), math.ceil(w / cols)
    padded = np.pad(image, ((0, rows * th - h), (0, cols * tw - w)), mode="edge")
    k = kernels(backend)
    luts = k.tile_luts(np.ascontiguousarray(padded), rows, cols, float(params.clip_limit))
    return k.interpolate(image, luts, th, tw)


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    rotation_deg: float = 15.0
    scale: tuple = (0.9, 1.1)
    shear_deg: float = 10.0
    translate_frac: float = 0.10
    resize_to: int = 256
    crop: int = 224
    crop_jitter: int | None = None  # max |offset| of the random crop from centre; None = full range

    def validate(self) -> None:
        if self.crop > self.resize_to:
            raise ConfigError("preprocess.augment.crop", "crop must not exceed resize_to")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("preprocess.augment.flip_prob", "must lie in [0, 1]")
        if self.scale[0] <= 0 or self.scale[0] > self.scale[1]:
            raise ConfigError("preprocess.augment.scale", "need 0 < low <= high")

    @classmethod
    def identity(cls, resize_to: int = 256, crop: int = 224) -> "AugmentParams":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, 0.0, resize_to, crop, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = list(self.scale)
        return d


def _as_float_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 2:
        x = x[None]
    return x[:, None] / 255.0  # (B, 1, H, W)


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-2:] == (size, size):
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def _affine_theta(angle, scale, shear, tx, ty) -> torch.Tensor:
    # forward map in normalized coordinates: translate . rotate . shear . scale
    a, s = math.radians(angle), math.radians(shear)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    sh = np.array([[1.0, math.tan(s)], [0.0, 1.0]])
    m = rot @ sh * scale
    inv = np.linalg.inv(m)
    t = np.array([2.0 * tx, 2.0 * ty])
    theta = np.concatenate([inv, (-inv @ t)[:, None]], axis=1)
    return torch.as_tensor(theta, dtype=torch.float32)


def train_transform_batch(images, params: AugmentParams, rng: np.random.Generator) -> torch.Tensor:
    """resize -> flip -> affine -> random crop, per image; returns (B, crop, crop) floats in [0, 1]."""
    params.validate()
    x = _resize(_as_float_batch(images), params.resize_to)
    size, crop = params.resize_to, params.crop
    max_off = size - crop
    centre = max_off // 2
    jitter = max_off if params.crop_jitter is None else params.crop_jitter
    out = []
    for b in range(x.shape[0]):
        xi = x[b : b + 1]
        if rng.random() < params.flip_prob:
            xi = torch.flip(xi, dims=[-1])
        angle = rng.uniform(-params.rotation_deg, params.rotation_deg)
        scale = rng.uniform(params.scale[0], params.scale[1])
        shear = rng.uniform(-params.shear_deg, params.shear_deg)
        tx = rng.uniform(-params.translate_frac, params.translate_frac)
        ty = rng.uniform(-params.translate_frac, params.translate_frac)
        if (angle, scale, shear, tx, ty) != (0.0, 1.0, 0.0, 0.0, 0.0):
            theta = _affine_theta(angle, scale, shear, tx, ty)[None]
            grid = F.affine_grid(theta, list(xi.shape), align_corners=False)
            xi = F.grid_sample(xi, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        oy = int(np.clip(centre + rng.integers(-jitter, jitter + 1), 0, max_off)) if jitter else centre
        ox = int(np.clip(centre + rng.integers(-jitter, jitter + 1), 0, max_off)) if jitter else centre
        out.append(xi[0, 0, oy : oy + crop, ox : ox + crop])
    return torch.stack(out).clamp_(0.0, 1.0)


def train_transform(image, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("train_transform expects a 2-D image")
    return train_transform_batch(image[None], params, rng)[0].numpy()


def eval_transform_batch(images, resize_to: int = 256, crop: int = 224) -> torch.Tensor:
    if crop > resize_to:
        raise ValueError("crop must not exceed resize_to")
    x = _resize(_as_float_batch(images), resize_to)
    off = (resize_to - crop) // 2
    return x[:, 0, off : off + crop, off : off + crop].contiguous()


def eval_transform(image, resize_to: int = 256, crop: int = 224) -> np.ndarray:
    """Resize then centre crop; deterministic."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("eval_transform expects a 2-D image")
    return eval_transform_batch(image[None], resize_to, crop)[0].numpy()
