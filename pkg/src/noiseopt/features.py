"""Image-batch feature extractors feeding the diversity statistics.

Built-ins are analytic and differentiable: flattened pixel patches
(unit-normalized), a 32x32 area-averaged pixel vector, and a soft color
histogram with Gaussian kernels. Real perceptual extractors attach through
the bridge protocol and share the same (B, P, D) tensor contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Var
from .errors import ConfigError, DegenerateInputError, DimensionError

LOWRES_SIZE = 32
ZERO_NORM_TOL = 1e-30


@dataclass
class ImageBatch:
    """Generated images, (B, 3, H', W') with values in [0, 1]."""

    node: Var

    def __post_init__(self):
        v = self.node.value
        if v.ndim != 4 or v.shape[1] != 3:
            raise DimensionError(f"image batch must be (B, 3, H, W), got {v.shape}")

    @property
    def values(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self):
        return self.node.value.shape


@dataclass
class FeatureSet:
    """Per-image embedding stack, (B, P, D).

    `l2_bound` is the extractor's documented upper bound on the L2 distance
    between two of its vectors; pairwise L2 statistics divide by it to land
    in [0, 1].
    """

    values: Var
    extractor: str
    normalized: bool
    l2_bound: float

    def __post_init__(self):
        v = self.values.value
        if v.ndim != 3 or v.shape[1] < 1:
            raise DimensionError(f"feature set must be (B, P, D), got {v.shape}")
        if self.normalized:
            norms = np.linalg.norm(v, axis=2)
            if np.abs(norms - 1.0).max() > 1e-9:
                raise DegenerateInputError("normalized flag set but slices are not unit norm")

    @property
    def batch_size(self) -> int:
        return self.values.value.shape[0]

    @property
    def patches(self) -> int:
        return self.values.value.shape[1]

    @property
    def dim(self) -> int:
        return self.values.value.shape[2]


def _normalize_slices(x: Var) -> Var:
    """Unit L2 norm along the last axis; zero vectors are degenerate."""
    sq = de.sum_(de.mul(x, x), axis=-1, keepdims=True)
    if sq.value.min() < ZERO_NORM_TOL:
        raise DegenerateInputError("cannot normalize a zero feature vector")
    return de.div(x, de.sqrt(sq))


def pixel_patches(img: ImageBatch, grid: int) -> FeatureSet:
    """Split each image into a grid x grid mosaic; every patch is flattened
    across channels and unit-normalized. P = grid^2, D = 3*(H/g)*(W/g)."""
    b, c, h, w = img.shape
    g = int(grid)
    if g < 1 or h % g or w % g:
        raise DimensionError(f"grid {g} does not divide image dims {h}x{w}")
    ph, pw = h // g, w // g
    x = de.reshape(img.node, (b, c, g, ph, g, pw))
    x = de.transpose(x, (0, 2, 4, 1, 3, 5))
    x = de.reshape(x, (b, g * g, c * ph * pw))
    return FeatureSet(_normalize_slices(x), f"pixel_patches:g={g}", True, 2.0)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic interval-overlap weights for 1D area averaging."""
    w = np.zeros((n_out, n_in))
    step = n_in / n_out
    for j in range(n_out):
        lo, hi = j * step, (j + 1) * step
        for i in range(int(np.floor(lo)), int(np.ceil(hi))):
            w[j, i] = min(hi, i + 1) - max(lo, i)
    return w / step


def lowres_vec(img: ImageBatch, size: int = LOWRES_SIZE) -> FeatureSet:
    """Area-average down to size x size and flatten: P = 1, D = 3*size^2."""
    b, c, h, w = img.shape
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than the {size}x{size} target")
    wh = de.constant(_area_weights(h, size))
    ww = de.constant(_area_weights(w, size).T)
    small = de.matmul(de.matmul(wh, img.node), ww)  # (B, 3, size, size)
    d = c * size * size
    flat = de.reshape(small, (b, 1, d))
    return FeatureSet(flat, f"lowres:{size}", False, float(np.sqrt(d)))


def soft_color_hist(img: ImageBatch, bins: int = 32, bandwidth: float | None = None) -> FeatureSet:
    """Per-channel soft histogram with Gaussian kernels.

    Pixel v contributes exp(-(v - c_k)^2 / (2 bw^2)) to bin k; rows are
    normalized to sum to 1 per channel. P = 3, D = bins. Values are clamped
    to [0, 1] first (part of the extractor contract).
    """
    if bins < 2:
        raise DimensionError(f"bins must be >= 2, got {bins}")
    bw = 1.0 / (2.0 * bins) if bandwidth is None else float(bandwidth)
    if bw <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bw}")
    b, c, h, w = img.shape
    centers = de.constant((np.arange(bins) + 0.5) / bins)
    v = de.reshape(de.clip(img.node, 0.0, 1.0), (b, c, h * w, 1))
    diff = de.sub(v, centers)
    kern = de.exp(de.mul(de.mul(diff, diff), -1.0 / (2.0 * bw * bw)))
    mass = de.sum_(kern, axis=2)  # (B, 3, bins)
    total = de.sum_(mass, axis=-1, keepdims=True)
    hist = de.div(mass, total)
    return FeatureSet(hist, f"soft_hist:{bins}", False, float(np.sqrt(2.0)))


def external_features(img: ImageBatch, endpoint) -> FeatureSet:
    """Features from a bridge peer; the vjp round-trips through the peer too."""
    from . import bridgeclient

    return bridgeclient.remote_features(img, endpoint)


_BUILTINS = {
    "pixel_patches": lambda img, params: pixel_patches(img, int(params.get("grid", 2))),
    "lowres": lambda img, params: lowres_vec(img, int(params.get("size", LOWRES_SIZE))),
    "soft_hist": lambda img, params: soft_color_hist(
        img, int(params.get("bins", 32)), params.get("bandwidth")
    ),
}


def extract(name: str, img: ImageBatch, params: dict | None = None, endpoint=None) -> FeatureSet:
    """Dispatch an extractor by config id."""
    params = params or {}
    if name == "external":
        if endpoint is None:
            raise ConfigError("extractor 'external' requires a bridge endpoint")
        return external_features(img, endpoint)
    if name not in _BUILTINS:
        raise ConfigError(f"unknown extractor {name!r}; choose from {sorted(_BUILTINS)} or 'external'")
    return _BUILTINS[name](img, params)
