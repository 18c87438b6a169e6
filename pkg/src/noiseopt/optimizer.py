"""Gradient loop over initial noise.

Plain gradient descent with global L2-norm clipping: the full batch gradient
is rescaled whenever its norm exceeds `clip_norm`, then z <- z - lr * g.
Batch mode optimizes all B noises jointly; sequential mode optimizes one new
noise against the frozen features of previously accepted images. An optional
revert guard restores the last accepted latent whenever the quality score
drops below a threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from . import features as feat
from . import generator as gen_mod
from . import noise_init, numerics, objective, spectra
from .errors import ArityError, ConfigError, ContractViolation, DegenerateInputError
from .features import FeatureSet
from .noise_init import NoiseBatch

STOP_RULES = ("thresholds", "diversity_value", "diversity_multiple")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 10.0
    clip_norm: float = 0.1
    max_iters: int = 100
    revert_threshold: float | None = None
    seed: int = 0
    mode: str = "batch"
    stop_rule: str = "thresholds"
    stop_value: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.max_iters < 1:
            raise ConfigError("learning_rate, clip_norm must be > 0 and max_iters >= 1")
        if self.mode not in ("batch", "sequential"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.stop_rule not in STOP_RULES:
            raise ConfigError(f"unknown stop_rule {self.stop_rule!r}; choose from {STOP_RULES}")
        if self.stop_rule != "thresholds" and self.stop_value is None:
            raise ConfigError(f"stop_rule {self.stop_rule!r} requires stop_value")


@dataclass
class IterationStats:
    iteration: int
    breakdown: objective.LossBreakdown
    grad_norm_pre: float
    grad_norm_post: float
    noise_delta_l2: float  # ||z_t - z_0||
    delta_energy_increment: float  # telescoping term of ||z_t - z_0||^2
    band_energies: tuple  # (low, mid, high) of this step's delta, batch mean
    reverted: bool
    wall_time: float = 0.0  # seconds spent in this iteration


@dataclass
class TrajectoryRecord:
    rows: list = field(default_factory=list)
    stopped_early: bool = False
    error: str | None = None
    snapshots: dict = field(default_factory=dict)  # iteration -> noise values

    @property
    def iterations(self) -> int:
        return len(self.rows)


class RevertGuard:
    """Restore the last accepted latent when quality drops below threshold."""

    def __init__(self, threshold: float):
        self.threshold = float(threshold)
        self.checkpoint: np.ndarray | None = None
        self.revert_count = 0

    def step(self, latent: np.ndarray, quality: float) -> tuple[np.ndarray, bool]:
        if self.checkpoint is not None and quality < self.threshold:
            self.revert_count += 1
            return self.checkpoint.copy(), True
        self.checkpoint = latent.copy()
        return latent, False


def revert_guard(guard: RevertGuard | None, latent: np.ndarray, quality: float):
    """Functional wrapper: with no guard configured this is the identity."""
    if guard is None:
        return latent, False
    return guard.step(latent, quality)


def _clip_gradient(g: np.ndarray, clip_norm: float) -> tuple[np.ndarray, float, float]:
    pre = float(np.linalg.norm(g))
    if pre > clip_norm:
        g = g * (clip_norm / pre)
    return g, pre, float(np.linalg.norm(g))


def _band_energies(z_new: np.ndarray, z_old: np.ndarray) -> tuple:
    h, w = z_new.shape[-2:]
    nan3 = (float("nan"),) * 3
    if h < 3 or w < 3:
        return nan3
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            per_item = [
                spectra.band_decompose(spectra.delta_heatmap(z_new[b], z_old[b])).energies
                for b in range(z_new.shape[0])
            ]
        except ContractViolation:  # diverging step: magnitudes overflowed
            return nan3
    out = np.mean(per_item, axis=0)
    return tuple(out) if np.all(np.isfinite(out)) else nan3


def _should_stop(cfg, spec, breakdown, first_vb) -> bool:
    if cfg.stop_rule == "thresholds":
        return objective.stopping(spec, breakdown)
    if cfg.stop_rule == "diversity_value":
        return breakdown.v_b >= cfg.stop_value
    return first_vb is not None and breakdown.v_b >= cfg.stop_value * first_vb


def _descend(
    z0: np.ndarray,
    spec: objective.ObjectiveSpec,
    cfg: OptimizerConfig,
    gen: gen_mod.GeneratorSpec,
    context_features: FeatureSet | None,
    snapshot_every: int | None,
    extra_metrics: tuple,
    endpoint=None,
) -> tuple[np.ndarray, TrajectoryRecord]:
    z = z0.copy()
    init = z0.copy()
    guard = RevertGuard(cfg.revert_threshold) if cfg.revert_threshold is not None else None
    record = TrajectoryRecord()
    if snapshot_every:
        record.snapshots[0] = z.copy()
    first_vb = None

    for it in range(1, cfg.max_iters + 1):
        tick = time.perf_counter()
        zv = de.leaf(z)
        try:
            breakdown, loss = objective.evaluate(
                spec, zv, gen,
                context_features=context_features,
                endpoint=endpoint,
                extra_metrics=extra_metrics,
            )
            grad = de.backward(loss, params=[zv]).of(zv)
        except (ContractViolation, DegenerateInputError) as exc:
            record.error = f"iteration {it}: {exc}"
            break
        if not np.all(np.isfinite(grad)):
            record.error = f"iteration {it}: non-finite gradient"
            break
        if first_vb is None:
            first_vb = breakdown.v_b

        clipped, pre, post = _clip_gradient(grad, cfg.clip_norm)
        stop = _should_stop(cfg, spec, breakdown, first_vb)

        if stop:
            z_new, reverted = z, False
        else:
            z_new, reverted = revert_guard(guard, z, breakdown.reward_mean)
            if not reverted:
                z_new = z - cfg.learning_rate * clipped

        delta = z_new - z
        with np.errstate(over="ignore", invalid="ignore"):
            record.rows.append(
                IterationStats(
                    iteration=it,
                    breakdown=breakdown,
                    grad_norm_pre=pre,
                    grad_norm_post=post,
                    noise_delta_l2=float(np.linalg.norm(z_new - init)),
                    delta_energy_increment=float(np.sum(delta * (z_new + z - 2.0 * init))),
                    band_energies=_band_energies(z_new, z),
                    reverted=reverted,
                    wall_time=time.perf_counter() - tick,
                )
            )
        z = z_new
        if snapshot_every and it % snapshot_every == 0:
            record.snapshots[it] = z.copy()
        if stop:
            record.stopped_early = True
            break

    if snapshot_every:
        record.snapshots.setdefault(len(record.rows), z.copy())
    return z, record


def optimize_batch(
    z0: NoiseBatch,
    spec: objective.ObjectiveSpec,
    cfg: OptimizerConfig,
    gen: gen_mod.GeneratorSpec,
    snapshot_every: int | None = None,
    extra_metrics: tuple = (),
    endpoint=None,
) -> tuple[NoiseBatch, TrajectoryRecord]:
    """Jointly optimize a batch of B >= 2 noises; deterministic given inputs."""
    if z0.values.shape[0] < 2:
        raise ArityError("batch mode needs B >= 2")
    z, record = _descend(
        z0.values, spec, cfg, gen, None, snapshot_every, extra_metrics, endpoint
    )
    return NoiseBatch(z, seed=z0.seed, profile=z0.profile), record


def context_feature_stack(
    spec: objective.ObjectiveSpec,
    images: feat.ImageBatch,
    endpoint=None,
) -> FeatureSet:
    """Extract and freeze context features (no gradients flow into them)."""
    fs = feat.extract(spec.extractor, images, spec.extractor_params, endpoint=endpoint)
    return FeatureSet(de.constant(fs.values.value), fs.extractor, fs.normalized, fs.l2_bound)


def optimize_sequential(
    context: feat.ImageBatch | None,
    spec: objective.ObjectiveSpec,
    cfg: OptimizerConfig,
    gen: gen_mod.GeneratorSpec,
    z0: NoiseBatch | None = None,
    noise_shape: tuple | None = None,
    context_features: FeatureSet | None = None,
    snapshot_every: int | None = None,
    endpoint=None,
) -> tuple[NoiseBatch, TrajectoryRecord]:
    """Optimize one new noise against n >= 1 frozen context images.

    The diversity statistic runs on the (n+1)-set with constant context
    features; reward and radius terms apply to the new image alone.
    """
    if context_features is None:
        if context is None or context.shape[0] < 1:
            raise ArityError("sequential mode needs at least one context image")
        context_features = context_feature_stack(spec, context, endpoint=endpoint)
    elif context_features.batch_size < 1:
        raise ArityError("sequential mode needs at least one context feature row")

    if z0 is None:
        if noise_shape is None:
            raise ConfigError("provide z0 or noise_shape for sequential mode")
        z0 = noise_init.sample_white(numerics.SeededRng(cfg.seed), 1, *noise_shape)
    if z0.values.shape[0] != 1:
        raise ArityError("sequential mode optimizes exactly one new noise")

    z, record = _descend(
        z0.values, spec, cfg, gen, context_features, snapshot_every, (), endpoint
    )
    return NoiseBatch(z, seed=z0.seed, profile=z0.profile), record


@dataclass
class SequentialBuild:
    """Result of growing an image set one optimized noise at a time."""

    noise: NoiseBatch  # (n, C, H, W) final noises
    iid_noise: NoiseBatch  # the untouched initial draws, same seeds
    records: list  # one TrajectoryRecord per optimized addition


def sequential_build(
    n_images: int,
    spec: objective.ObjectiveSpec,
    cfg: OptimizerConfig,
    gen: gen_mod.GeneratorSpec,
    noise_shape: tuple,
    alpha: float = 0.0,
) -> SequentialBuild:
    """Grow an n-image set: the first image keeps its i.i.d. draw, every
    later one is optimized against the frozen features of the set so far."""
    if n_images < 2:
        raise ArityError("sequential build needs at least two images")
    rng = numerics.SeededRng(cfg.seed)
    draws = noise_init.sample_white(rng, n_images, *noise_shape)
    if alpha > 0:
        draws = noise_init.colorize(draws, noise_init.SpectralProfile(alpha))

    accepted = [draws.values[0:1]]
    ctx_rows: FeatureSet | None = None
    records = []
    for i in range(1, n_images):
        imgs = gen_mod.generate(gen, de.constant(accepted[-1]))
        new_rows = context_feature_stack(spec, imgs)
        if ctx_rows is None:
            ctx_rows = new_rows
        else:
            stacked = np.concatenate([ctx_rows.values.value, new_rows.values.value], axis=0)
            ctx_rows = FeatureSet(
                de.constant(stacked), ctx_rows.extractor, ctx_rows.normalized, ctx_rows.l2_bound
            )
        z0 = NoiseBatch(draws.values[i : i + 1], seed=draws.seed, profile=draws.profile)
        z_i, rec = optimize_sequential(
            None, spec, cfg, gen, z0=z0, context_features=ctx_rows
        )
        accepted.append(z_i.values)
        records.append(rec)
    final = NoiseBatch(np.concatenate(accepted, axis=0), seed=draws.seed, profile=draws.profile)
    return SequentialBuild(final, draws, records)
