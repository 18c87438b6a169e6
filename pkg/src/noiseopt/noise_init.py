"""Initial noise batches: white Gaussian and alpha-colored (pink) noise.

Coloring reweighs each Fourier component by 1/(1+f)^alpha, where f is the
radial frequency in the signed (wrap-around) DFT convention, then
standardizes every channel-plane back to zero mean and unit std so colored
batches match white-noise statistics. The whole map is linear-then-affine
and is exposed as a differentiable node, so optimization can also run in
colored coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from . import numerics
from .diffengine import Var
from .errors import ContractViolation, DegenerateInputError, DimensionError

RADIAL_CONVENTION = "signed-dft-min(u,H-u)"


@dataclass(frozen=True)
class SpectralProfile:
    """Power-law exponent for spectral reweighing; alpha = 0 leaves the
    filter at all-ones (white)."""

    alpha: float = 0.0
    convention: str = RADIAL_CONVENTION

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractViolation(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class NoiseBatch:
    """A batch of initial noise tensors with seed and profile provenance."""

    values: np.ndarray  # (B, C, H, W) float64
    seed: int
    profile: SpectralProfile = field(default_factory=SpectralProfile)
    standardized: bool = False  # True after colorize's per-plane normalization

    def __post_init__(self):
        v = numerics.as_tensor(self.values)
        if v.ndim != 4 or v.shape[0] < 1:
            raise DimensionError(f"noise batch must be (B, C, H, W), got {v.shape}")
        self.values = v
        if self.standardized:
            mu = v.mean(axis=(2, 3))
            sd = v.std(axis=(2, 3))
            if np.abs(mu).max() > 1e-9 or np.abs(sd - 1.0).max() > 1e-9:
                raise ContractViolation("standardized batch fails the mean/std invariant")

    @property
    def shape(self):
        return self.values.shape

    @property
    def per_image_dim(self) -> int:
        b, c, h, w = self.values.shape
        return c * h * w


def sample_white(rng: numerics.SeededRng, b: int, c: int, h: int, w: int) -> NoiseBatch:
    """I.i.d. standard Gaussian batch; records alpha = 0."""
    values = numerics.gaussian_sample(rng, (b, c, h, w))
    return NoiseBatch(values, seed=rng.seed, profile=SpectralProfile(0.0))


def radial_frequency(h: int, w: int) -> np.ndarray:
    """Radial frequency per DFT cell using signed (wrap-around) indices:
    f(u, v) = sqrt(min(u, H-u)^2 + min(v, W-v)^2)."""
    if h < 1 or w < 1:
        raise DimensionError(f"dimensions must be positive, got {h}x{w}")
    u = np.arange(h)
    v = np.arange(w)
    us = np.minimum(u, h - u)
    vs = np.minimum(v, w - v)
    return np.sqrt(us[:, None] ** 2.0 + vs[None, :] ** 2.0)


def filter_weights(h: int, w: int, alpha: float) -> np.ndarray:
    """Spectral reweighing factors 1/(1+f)^alpha."""
    return (1.0 + radial_frequency(h, w)) ** (-float(alpha))


def spectral_filter(x, weights: np.ndarray) -> Var:
    """Multiply every channel-plane's spectrum by `weights` (real, symmetric
    under (u,v) -> (-u,-v) so the output stays real).

    The operator is real-symmetric, hence self-adjoint: the vjp applies the
    same filter to the cotangent.
    """
    x = de.as_var(x)
    h, w = x.value.shape[-2], x.value.shape[-1]
    if weights.shape != (h, w):
        raise DimensionError(f"weights shape {weights.shape} does not match plane {h}x{w}")

    def apply(arr: np.ndarray) -> np.ndarray:
        spec = np.fft.fft2(arr, axes=(-2, -1)) * weights
        out = np.fft.ifft2(spec, axes=(-2, -1))
        scale = max(1.0, float(np.abs(out.real).max()))
        if np.abs(out.imag).max() > 1e-8 * scale:
            raise ContractViolation("spectral filter produced a non-negligible imaginary part")
        return np.ascontiguousarray(out.real)

    return Var(apply(x.value), ((x, apply),), "spectral_filter")


def standardize_planes(x) -> Var:
    """Zero-mean / unit-std each channel-plane (population statistics)."""
    x = de.as_var(x)
    mu = de.mean_(x, axis=(-2, -1), keepdims=True)
    centered = de.sub(x, mu)
    var = de.mean_(de.mul(centered, centered), axis=(-2, -1), keepdims=True)
    if var.value.min() <= 0.0:
        raise DegenerateInputError("constant channel-plane: std is zero")
    return de.div(centered, de.sqrt(var))


def colorize_node(z, profile: SpectralProfile) -> Var:
    """Differentiable coloring: spectral reweighing then per-plane
    standardization."""
    z = de.as_var(z)
    h, w = z.value.shape[-2], z.value.shape[-1]
    return standardize_planes(spectral_filter(z, filter_weights(h, w, profile.alpha)))


def colorize(white: NoiseBatch, profile: SpectralProfile) -> NoiseBatch:
    """Color a white batch: per plane, FFT -> 1/(1+f)^alpha reweighing ->
    inverse FFT -> standardize to white-noise statistics."""
    if white.profile.alpha != 0.0:
        raise ContractViolation("colorize expects a white (alpha = 0) input batch")
    out = colorize_node(de.constant(white.values), profile)
    return NoiseBatch(out.value, seed=white.seed, profile=profile, standardized=True)
