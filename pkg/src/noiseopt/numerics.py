"""Deterministic numerical substrate: tensors, 2D FFT, symmetric eigendecomposition,
and seeded Gaussian sampling.

All optimization-path arithmetic runs in float64. Dense arrays are plain
``numpy.ndarray``; this module adds the contract checks the rest of the
package relies on (finiteness, symmetry, descending eigenvalue order) and
pins the RNG algorithm so sample streams are reproducible bit-for-bit.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, DimensionError

# Forward transform is unnormalized, inverse carries the 1/(H*W) factor
# (numpy's default convention).

SYMMETRY_TOL = 1e-9


def as_tensor(values, shape=None) -> np.ndarray:
    """Validate and return a float64 array.

    Raises DimensionError if `shape` is given and disagrees, and
    ContractViolation if any value is NaN/Inf.
    """
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("tensor contains non-finite values")
    return arr


class SeededRng:
    """Deterministic Gaussian sampler.

    Pinned algorithm: Philox4x64-10 counter-based bit generator keyed by the
    seed, with numpy's ziggurat transform for standard normals. The same seed
    yields a bit-identical double-precision stream across runs and platforms.
    """

    ALGORITHM = "philox4x64-10+numpy-ziggurat"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.algorithm = self.ALGORITHM
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def gaussian_sample(rng: SeededRng, shape) -> np.ndarray:
    """I.i.d. standard normal draws; advances the rng state."""
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    if any(s <= 0 for s in shape):
        raise DimensionError(f"non-positive dimension in shape {shape}")
    return rng.normal(shape)


def fft2d(plane: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT of a real H x W plane.

    The (0,0) component equals the sum of the inputs.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 1 or plane.shape[1] < 1:
        raise DimensionError(f"fft2d expects a non-empty 2D plane, got shape {plane.shape}")
    return np.fft.fft2(plane)


class InversePlane(NamedTuple):
    """Real inverse-transform output plus the discarded imaginary residue."""

    values: np.ndarray
    imag_max: float
    residue_flag: bool


def ifft2d(grid: np.ndarray) -> InversePlane:
    """Inverse of fft2d including the 1/(H*W) normalization.

    Returns the real part; `residue_flag` is set when the imaginary remainder
    exceeds 1e-8 relative to the plane scale (i.e. the grid was not
    conjugate-symmetric).
    """
    grid = np.asarray(grid, dtype=np.complex128)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise DimensionError(f"ifft2d expects a non-empty 2D grid, got shape {grid.shape}")
    full = np.fft.ifft2(grid)
    real = np.ascontiguousarray(full.real)
    imag_max = float(np.abs(full.imag).max()) if full.size else 0.0
    scale = max(1.0, float(np.abs(real).max())) if real.size else 1.0
    return InversePlane(real, imag_max, imag_max > 1e-8 * scale)


def sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues descending, eigenvectors as columns). The input must
    be symmetric within SYMMETRY_TOL (scaled by the matrix magnitude); it is
    symmetrized exactly before factorization.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"sym_eig expects a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    asym = float(np.abs(m - m.T).max())
    if asym > SYMMETRY_TOL * scale:
        raise ContractViolation(f"matrix asymmetric: max|m - m^T| = {asym:.3e}")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    order = np.argsort(w)[::-1]
    return np.ascontiguousarray(w[order]), np.ascontiguousarray(v[:, order])
