"""The composite batch loss and its stopping criterion.

L = -lq * mean(r) + lmin * mean([tau_s - r]_+) + ldiv * [tau_D - v_B]_+
    + lreg * mean(-K(eps))

All four terms are reported separately so the total can be reconstructed
exactly. The diversity hinge uses the same metric instance that is logged as
v_B, keeping the stopping test coherent with the optimized quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from . import diversity as div
from . import features as feat
from . import generator as gen_mod
from . import regularizer
from .diffengine import Var
from .errors import ArityError, ConfigError, ContractViolation
from .features import FeatureSet


@dataclass(frozen=True)
class ObjectiveSpec:
    """Weights, thresholds, and metric/reward/extractor selections.

    lambda_q scales the raw reward term (the quality weight that appears in
    the experimental setups alongside lambda_div); at its default 1.0 the
    loss is the plain four-term composite.
    """

    lambda_div: float = 1.0
    lambda_min: float = 0.0
    lambda_reg: float = 0.01
    lambda_q: float = 1.0
    tau_s: float = 0.9
    tau_d: float = 0.8
    metric: str = "pairwise_cosine"
    reward: gen_mod.RewardSpec = field(default_factory=gen_mod.RewardSpec)
    extractor: str = "pixel_patches"
    extractor_params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lambda_div", "lambda_min", "lambda_reg", "lambda_q"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        for name in ("tau_s", "tau_d"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite (use a large value to disable stopping)")


@dataclass
class LossBreakdown:
    """Scalar terms of one loss evaluation (floats; graph node kept aside)."""

    total: float
    reward_mean: float
    quality_hinge: float
    diversity_hinge: float
    reg_term: float
    v_b: float
    min_reward: float
    extra: dict = field(default_factory=dict)  # additionally logged metrics

    def reconstruct(self, spec: ObjectiveSpec) -> float:
        return (
            -spec.lambda_q * self.reward_mean
            + spec.lambda_min * self.quality_hinge
            + spec.lambda_div * self.diversity_hinge
            + spec.lambda_reg * self.reg_term
        )


def hinge(u) -> Var:
    """[u]_+ = max(u, 0); subgradient 0 at the kink."""
    return de.relu(de.as_var(u))


def evaluate(
    spec: ObjectiveSpec,
    z,
    gen: gen_mod.GeneratorSpec,
    context_features: FeatureSet | None = None,
    endpoint=None,
    extra_metrics: tuple = (),
) -> tuple[LossBreakdown, Var]:
    """Assemble the loss for a noise batch; differentiable in z.

    With `context_features`, the diversity statistic runs on the combined
    (context + new) stack while reward, quality hinge, and radius penalty
    apply to the new images only; no gradient flows into the context.
    """
    zv = z if isinstance(z, Var) else de.constant(np.asarray(getattr(z, "values", z)))
    b = zv.value.shape[0]
    if b < 2 and context_features is None:
        raise ArityError("set metrics need B >= 2 (B = 1 only with frozen context features)")

    images = gen_mod.generate(gen, zv, endpoint=endpoint)
    rewards = gen_mod.reward(spec.reward, images, gen.template, endpoint=endpoint)
    reward_mean = de.mean_(rewards)
    quality_hinge = de.mean_(hinge(de.sub(spec.tau_s, rewards)))

    fs = feat.extract(spec.extractor, images, spec.extractor_params, endpoint=endpoint)
    if context_features is not None:
        if context_features.extractor != fs.extractor:
            raise ConfigError(
                f"context features from {context_features.extractor!r} do not match "
                f"the configured extractor {fs.extractor!r}"
            )
        combined = de.concat([de.constant(context_features.values.value), fs.values], axis=0)
        fs = FeatureSet(combined, fs.extractor, fs.normalized, fs.l2_bound)
    stat = div.compute(spec.metric, fs)
    diversity_hinge = hinge(de.sub(spec.tau_d, stat.node))

    reg_term = regularizer.mean_neg_log_density(zv)

    total = de.add(
        de.add(
            de.mul(reward_mean, -spec.lambda_q),
            de.mul(quality_hinge, spec.lambda_min),
        ),
        de.add(
            de.mul(diversity_hinge, spec.lambda_div),
            de.mul(reg_term, spec.lambda_reg),
        ),
    )

    breakdown = LossBreakdown(
        total=float(total.value),
        reward_mean=float(reward_mean.value),
        quality_hinge=float(quality_hinge.value),
        diversity_hinge=float(diversity_hinge.value),
        reg_term=float(reg_term.value),
        v_b=stat.value,
        min_reward=float(rewards.value.min()),
        extra={m: div.compute(m, fs).value for m in extra_metrics if m != spec.metric},
    )
    if not np.isfinite(breakdown.total):
        raise ContractViolation("loss evaluated to a non-finite value")
    return breakdown, total


def stopping(spec: ObjectiveSpec, breakdown: LossBreakdown) -> bool:
    """True iff min_i r_i >= tau_s and v_B >= tau_D (closed thresholds)."""
    return breakdown.min_reward >= spec.tau_s and breakdown.v_b >= spec.tau_d
