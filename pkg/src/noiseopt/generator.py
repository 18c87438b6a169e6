"""Differentiable frozen generators g(z, c) and per-image rewards.

Three built-in toy generators cover desk-scale verification:

* ``linear``   - channelwise identity followed by a smooth squash to [0, 1].
* ``lowpass_painter`` - keeps only the lowest third of radial noise
  frequencies before squashing, so the image Jacobian is exactly zero along
  high-frequency noise directions.
* ``mlp``      - one fixed-random hidden layer with tanh, then the squash.

External generators attach through the bridge protocol under kind
``bridge``. The built-in reward scores each image by closeness to a target
template associated with the conditioning id, affinely mapped to [0, 1].
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from . import noise_init, numerics
from .diffengine import Var
from .errors import ConfigError, DimensionError
from .features import ImageBatch

SQUASH_LO = -3.0
SQUASH_HI = 3.0
LOWPASS_FRACTION = 1.0 / 3.0

GENERATOR_KINDS = ("linear", "mlp", "lowpass_painter", "bridge")


@dataclass(frozen=True)
class GeneratorSpec:
    """Frozen generator description: forward is deterministic given (z, c)."""

    kind: str
    height: int
    width: int
    template: str = "gray"  # conditioning id; selects the reward target
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}; choose from {GENERATOR_KINDS}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"output dims must be positive, got {self.height}x{self.width}")


def squash(x, lo: float = SQUASH_LO, hi: float = SQUASH_HI) -> Var:
    """Clamped smoothstep onto [0, 1]: C1, flat outside [lo, hi]."""
    t = de.clip(de.mul(de.sub(x, lo), 1.0 / (hi - lo)), 0.0, 1.0)
    return de.mul(de.mul(t, t), de.sub(3.0, de.mul(t, 2.0)))


def _to_three_channels(x: Var) -> Var:
    c = x.value.shape[1]
    if c == 3:
        return x
    if c == 1:
        return de.tile_channels(x, 3)
    raise DimensionError(f"toy generators accept 1 or 3 noise channels, got {c}")


def lowpass_mask(h: int, w: int, fraction: float = LOWPASS_FRACTION) -> np.ndarray:
    """Binary mask keeping radial frequencies strictly below fraction * f_max."""
    f = noise_init.radial_frequency(h, w)
    return (f < fraction * f.max()).astype(np.float64)


@functools.lru_cache(maxsize=32)
def _mlp_weights(seed: int, d_in: int, hidden: int, d_out: int):
    rng = numerics.SeededRng(seed)
    w1 = rng.normal((hidden, d_in)) / np.sqrt(d_in)
    b1 = rng.normal((hidden,)) * 0.1
    w2 = rng.normal((d_out, hidden)) / np.sqrt(hidden)
    b2 = rng.normal((d_out,)) * 0.1
    return w1, b1, w2, b2


def generate(spec: GeneratorSpec, z, endpoint=None) -> ImageBatch:
    """Run the frozen generator on a noise batch (Var or NoiseBatch)."""
    zv = z if isinstance(z, Var) else de.constant(np.asarray(getattr(z, "values", z)))
    if zv.value.ndim != 4:
        raise DimensionError(f"noise must be (B, C, H, W), got {zv.value.shape}")
    b, c, h, w = zv.value.shape
    lo = float(spec.params.get("squash_lo", SQUASH_LO))
    hi = float(spec.params.get("squash_hi", SQUASH_HI))

    if spec.kind == "linear":
        if (h, w) != (spec.height, spec.width):
            raise DimensionError(f"noise plane {h}x{w} != output {spec.height}x{spec.width}")
        return ImageBatch(squash(_to_three_channels(zv), lo, hi))

    if spec.kind == "lowpass_painter":
        if (h, w) != (spec.height, spec.width):
            raise DimensionError(f"noise plane {h}x{w} != output {spec.height}x{spec.width}")
        frac = float(spec.params.get("cutoff_fraction", LOWPASS_FRACTION))
        filtered = noise_init.spectral_filter(zv, lowpass_mask(h, w, frac))
        return ImageBatch(squash(_to_three_channels(filtered), lo, hi))

    if spec.kind == "mlp":
        d_in = c * h * w
        d_out = 3 * spec.height * spec.width
        hidden = int(spec.params.get("hidden", 32))
        seed = int(spec.params.get("weight_seed", 1234))
        w1, b1, w2, b2 = _mlp_weights(seed, d_in, hidden, d_out)
        flat = de.reshape(zv, (b, d_in))
        hid = de.tanh(de.add(de.matmul(flat, de.constant(w1.T)), de.constant(b1)))
        out = de.add(de.matmul(hid, de.constant(w2.T)), de.constant(b2))
        img = de.reshape(out, (b, 3, spec.height, spec.width))
        return ImageBatch(squash(img, lo, hi))

    # bridge
    if endpoint is None:
        raise ConfigError("generator kind 'bridge' requires an endpoint")
    from . import bridgeclient

    return bridgeclient.remote_generate(spec, zv, endpoint)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------


def template_image(template: str, h: int, w: int) -> np.ndarray:
    """Deterministic (3, H, W) target in [0, 1] for the toy reward."""
    if template == "gray":
        return np.full((3, h, w), 0.5)
    if template == "black":
        return np.zeros((3, h, w))
    if template == "white":
        return np.ones((3, h, w))
    if template == "hgrad":
        ramp = np.linspace(0.0, 1.0, w)[None, :] if w > 1 else np.full((1, 1), 0.5)
        return np.broadcast_to(ramp, (3, h, w)).astype(np.float64).copy()
    if template == "vgrad":
        ramp = np.linspace(0.0, 1.0, h)[:, None] if h > 1 else np.full((1, 1), 0.5)
        return np.broadcast_to(ramp, (3, h, w)).astype(np.float64).copy()
    if template == "checker":
        idx = np.indices((h, w)).sum(axis=0) % 2
        return np.broadcast_to(idx, (3, h, w)).astype(np.float64).copy()
    raise ConfigError(f"unknown template id {template!r}")


@dataclass(frozen=True)
class RewardSpec:
    """Per-image scalar reward selection."""

    kind: str = "template_mse"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("template_mse", "bridge"):
            raise ConfigError(f"unknown reward id {self.kind!r}")


def reward(spec_r: RewardSpec, img: ImageBatch, template: str, endpoint=None) -> Var:
    """Per-image rewards, shape (B,), differentiable in the pixels.

    template_mse: 1 - mean squared distance to the conditioning's template
    (pixels live in [0, 1], so the score does too when the template sits at
    the extremes)."""
    if spec_r.kind == "bridge":
        if endpoint is None:
            raise ConfigError("reward kind 'bridge' requires an endpoint")
        from . import bridgeclient

        return bridgeclient.remote_reward(img, template, endpoint)
    b, c, h, w = img.shape
    target = de.constant(template_image(template, h, w))
    diff = de.sub(img.node, target)
    mse = de.mean_(de.mul(diff, diff), axis=(1, 2, 3))
    return de.sub(1.0, mse)
