"""Reference toy model behind the bridge.

A tiny frozen differentiable net: neighborhood smoothing (circular 5-point
average, self-adjoint), a fixed random channel mix, and a sigmoid onto
(0, 1). Features area-average each channel down to 8x8 and flatten; the
reward is closeness to a flat template selected by the conditioning string.
Every operation ships its exact adjoint, so the peer answers vjp_* requests
analytically.
"""

from __future__ import annotations

import numpy as np

WEIGHT_SEED = 424242
CHANNELS = 3
FEATURE_SIZE = 8

TEMPLATES = {"gray": 0.5, "black": 0.0, "white": 1.0}


def _mix_matrix() -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=WEIGHT_SEED))
    return rng.standard_normal((CHANNELS, CHANNELS)) * 0.5 + 0.5 * np.eye(CHANNELS)


MIX = _mix_matrix()


def _smooth(x: np.ndarray) -> np.ndarray:
    """Circular 5-point average over the two spatial axes (self-adjoint)."""
    return (
        x
        + np.roll(x, 1, axis=-2)
        + np.roll(x, -1, axis=-2)
        + np.roll(x, 1, axis=-1)
        + np.roll(x, -1, axis=-1)
    ) / 5.0


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-a))


def _require_batch(z: np.ndarray, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4:
        raise ValueError(f"{name} must be (B, C, H, W), got {z.shape}")
    if z.shape[1] != CHANNELS:
        raise ValueError(f"{name} must carry {CHANNELS} channels, got {z.shape[1]}")
    return z


def generate(z: np.ndarray) -> np.ndarray:
    z = _require_batch(z, "z")
    pre = np.einsum("oc,bchw->bohw", MIX, _smooth(z))
    return _sigmoid(pre)


def vjp_generate(z: np.ndarray, x_bar: np.ndarray) -> np.ndarray:
    z = _require_batch(z, "z")
    x_bar = np.asarray(x_bar, dtype=np.float64)
    if x_bar.shape != z.shape:
        raise ValueError(f"x_bar shape {x_bar.shape} does not match z {z.shape}")
    x = generate(z)
    g_pre = x_bar * x * (1.0 - x)
    g_smooth = np.einsum("oc,bohw->bchw", MIX, g_pre)
    return _smooth(g_smooth)  # the smoother is its own adjoint


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    w = np.zeros((n_out, n_in))
    step = n_in / n_out
    for j in range(n_out):
        lo, hi = j * step, (j + 1) * step
        for i in range(int(np.floor(lo)), int(np.ceil(hi))):
            w[j, i] = min(hi, i + 1) - max(lo, i)
    return w / step


def features(x: np.ndarray) -> np.ndarray:
    x = _require_batch(x, "x")
    b, c, h, w = x.shape
    if h < FEATURE_SIZE or w < FEATURE_SIZE:
        raise ValueError(f"images must be at least {FEATURE_SIZE}x{FEATURE_SIZE}, got {h}x{w}")
    wh, ww = _area_weights(h, FEATURE_SIZE), _area_weights(w, FEATURE_SIZE)
    small = np.einsum("ij,bcjk,lk->bcil", wh, x, ww)
    return small.reshape(b, 1, c * FEATURE_SIZE * FEATURE_SIZE)


def vjp_features(x: np.ndarray, f_bar: np.ndarray) -> np.ndarray:
    x = _require_batch(x, "x")
    b, c, h, w = x.shape
    wh, ww = _area_weights(h, FEATURE_SIZE), _area_weights(w, FEATURE_SIZE)
    g = np.asarray(f_bar, dtype=np.float64).reshape(b, c, FEATURE_SIZE, FEATURE_SIZE)
    return np.einsum("ji,bcjk,kl->bcil", wh, g, ww)


def _template_value(conditioning: str) -> float:
    if conditioning not in TEMPLATES:
        raise ValueError(f"unknown conditioning {conditioning!r}; templates: {sorted(TEMPLATES)}")
    return TEMPLATES[conditioning]


def reward(x: np.ndarray, conditioning: str) -> np.ndarray:
    x = _require_batch(x, "x")
    t = _template_value(conditioning)
    return 1.0 - ((x - t) ** 2).mean(axis=(1, 2, 3))


def vjp_reward(x: np.ndarray, conditioning: str, r_bar: np.ndarray) -> np.ndarray:
    x = _require_batch(x, "x")
    t = _template_value(conditioning)
    n = x[0].size
    return -2.0 * (x - t) / n * np.asarray(r_bar, dtype=np.float64).reshape(-1, 1, 1, 1)


def capabilities() -> dict:
    return {
        "model": "toy",
        "dtype": "f32",
        "channels": CHANNELS,
        "feature_size": FEATURE_SIZE,
        "normalized": False,
        "l2_bound": float(np.sqrt(CHANNELS * FEATURE_SIZE * FEATURE_SIZE)),
        "templates": sorted(TEMPLATES),
    }
