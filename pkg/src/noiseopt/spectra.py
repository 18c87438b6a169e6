"""Frequency analysis of noise trajectories.

Per-step delta heatmaps M(h,w) = sqrt(sum_c dz^2), a three-band radial
decomposition of each heatmap with phase-preserving reconstruction, per-bin
energy tracking across a trajectory, and radial power-spectrum estimation
for noise batches.

Two radial conventions coexist on purpose: band decomposition centers the
spectrum (distance from the shifted DC cell, r_max = sqrt(uc^2 + vc^2)),
while the power-spectrum estimator reuses the signed wrap-around frequency
of the coloring filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import noise_init, numerics
from .errors import DimensionError

BAND_NAMES = ("low", "mid", "high")
BAND_EPS = 1e-10


@dataclass
class DeltaHeatmap:
    """Channel-collapsed L2 magnitude of a noise step, (H, W) >= 0."""

    m: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.m = numerics.as_tensor(self.m)
        if self.m.ndim != 2:
            raise DimensionError(f"heatmap must be 2D, got shape {self.m.shape}")


@dataclass
class BandReport:
    """Per-band normalized maps, their scalar energies, and the bin edges."""

    maps: dict
    energies: np.ndarray  # (3,) sum of |map| per band
    edges: tuple  # (r_max/3, 2 r_max/3, r_max)


def delta_heatmap(z_t: np.ndarray, z_prev: np.ndarray, iteration: int = 0) -> DeltaHeatmap:
    """M(h, w) = sqrt(sum_c (z_t - z_prev)^2) for one (C, H, W) item."""
    z_t = np.asarray(z_t, dtype=np.float64)
    z_prev = np.asarray(z_prev, dtype=np.float64)
    if z_t.shape != z_prev.shape:
        raise DimensionError(f"shape mismatch {z_t.shape} vs {z_prev.shape}")
    if z_t.ndim != 3:
        raise DimensionError(f"expected (C, H, W), got {z_t.shape}")
    delta = z_t - z_prev
    return DeltaHeatmap(np.sqrt((delta**2).sum(axis=0)), iteration)


def band_masks(h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple]:
    """Disjoint low/mid/high masks over the centered spectrum.

    The center (uc, vc) = (H//2, W//2) is where fftshift puts DC;
    r_max = sqrt(uc^2 + vc^2). Bins: [0, r/3), [r/3, 2r/3), [2r/3, r].
    """
    uc, vc = h // 2, w // 2
    uu = np.arange(h)[:, None] - uc
    vv = np.arange(w)[None, :] - vc
    r = np.sqrt(uu**2.0 + vv**2.0)
    r_max = float(np.sqrt(uc**2 + vc**2))
    e1, e2 = r_max / 3.0, 2.0 * r_max / 3.0
    low = r < e1
    mid = (r >= e1) & (r < e2)
    high = r >= e2
    return low, mid, high, (e1, e2, r_max)


def band_decompose(m) -> BandReport:
    """Split a heatmap into three radial-frequency bands.

    Per band: mask the power spectrum, rescale the original FFT by
    sqrt(P_b / (P + eps)) to preserve phase, invert, take magnitudes, then
    renormalize per pixel so the three bands sum to the input map.
    """
    arr = m.m if isinstance(m, DeltaHeatmap) else numerics.as_tensor(m)
    if arr.ndim != 2:
        raise DimensionError(f"band_decompose expects a 2D map, got {arr.shape}")
    h, w = arr.shape
    if h < 3 or w < 3:
        raise DimensionError(f"band decomposition needs H, W >= 3, got {h}x{w}")

    spec = np.fft.fftshift(np.fft.fft2(arr))
    power = np.abs(spec) ** 2
    low, mid, high, edges = band_masks(h, w)

    raw = {}
    for name, mask in zip(BAND_NAMES, (low, mid, high)):
        scaled = spec * np.sqrt(power * mask / (power + BAND_EPS))
        raw[name] = np.abs(np.fft.ifft2(np.fft.ifftshift(scaled)))

    total = raw["low"] + raw["mid"] + raw["high"]
    factor = arr / (total + BAND_EPS)
    maps = {name: raw[name] * factor for name in BAND_NAMES}
    energies = np.array([np.abs(maps[name]).sum() for name in BAND_NAMES])
    return BandReport(maps, energies, edges)


def bin_energy_series(snapshots) -> np.ndarray:
    """Per-step (low, mid, high) energies of the delta heatmaps, averaged
    over the batch. `snapshots` is a sequence of (B, C, H, W) arrays or
    NoiseBatch objects, in iteration order."""
    arrays = [np.asarray(getattr(s, "values", s), dtype=np.float64) for s in snapshots]
    if len(arrays) < 2:
        raise DimensionError("need at least two snapshots to form deltas")
    series = []
    for t in range(1, len(arrays)):
        per_item = []
        for b in range(arrays[t].shape[0]):
            hm = delta_heatmap(arrays[t][b], arrays[t - 1][b], iteration=t)
            per_item.append(band_decompose(hm).energies)
        series.append(np.mean(per_item, axis=0))
    return np.asarray(series)


@dataclass
class RadialSpectrum:
    """Binned mean power vs radial frequency (signed DFT convention)."""

    centers: np.ndarray  # mean radial frequency of the cells in each bin
    power: np.ndarray  # mean |FFT|^2 over batch, channels, and bin cells
    cells: np.ndarray  # frequency cells per bin in one plane


def radial_power_spectrum(batch, n_bins: int) -> RadialSpectrum:
    """Mean |FFT|^2 binned by radial frequency, averaged over all planes."""
    values = np.asarray(getattr(batch, "values", batch), dtype=np.float64)
    if values.ndim == 2:
        values = values[None, None]
    if values.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W) or (H, W), got {values.shape}")
    if n_bins < 2:
        raise DimensionError(f"n_bins must be >= 2, got {n_bins}")
    h, w = values.shape[-2:]
    f = noise_init.radial_frequency(h, w).ravel()
    power = (np.abs(np.fft.fft2(values, axes=(-2, -1))) ** 2).reshape(-1, f.size)

    edges = np.linspace(0.0, f.max() * (1 + 1e-12), n_bins + 1)
    idx = np.clip(np.digitize(f, edges) - 1, 0, n_bins - 1)
    centers = np.zeros(n_bins)
    mean_power = np.zeros(n_bins)
    cells = np.zeros(n_bins, dtype=int)
    for b in range(n_bins):
        mask = idx == b
        cells[b] = int(mask.sum())
        if cells[b]:
            centers[b] = f[mask].mean()
            mean_power[b] = power[:, mask].mean()
    return RadialSpectrum(centers, mean_power, cells)
