"""Radius prior on noise vectors.

The norm of a d-dimensional standard Gaussian follows a chi law with d
degrees of freedom; its unnormalized log-density in the radius r = ||eps|| is
K(eps) = (d - 1) log r - r^2 / 2, maximized at r = sqrt(d - 1). The penalty
used by the composite objective is -K averaged over the batch, scaled by
lambda_reg.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Var
from .errors import ContractViolation, DegenerateInputError, DimensionError


@dataclass(frozen=True)
class RadiusPrior:
    """d is the per-image flattened noise dimension C*H*W (not the batch)."""

    d: int
    lambda_reg: float = 0.01

    def __post_init__(self):
        if self.d < 2:
            raise ContractViolation(f"radius prior needs d >= 2, got {self.d}")
        if not np.isfinite(self.lambda_reg) or self.lambda_reg < 0:
            raise ContractViolation(f"lambda_reg must be finite and >= 0, got {self.lambda_reg}")

    @property
    def mode_radius(self) -> float:
        return float(np.sqrt(self.d - 1))


def log_density(eps) -> Var:
    """K(eps) = (d - 1) log ||eps|| - ||eps||^2 / 2 for a flat vector."""
    eps = de.as_var(eps)
    d = eps.value.size
    if d < 2:
        raise DimensionError(f"log_density needs d >= 2, got {d}")
    flat = de.reshape(eps, (d,))
    sq = de.sum_(de.mul(flat, flat))
    if sq.value <= 0.0:
        raise DegenerateInputError("zero noise vector: log radius undefined")
    r = de.sqrt(sq)
    return de.sub(de.mul(de.log(r), float(d - 1)), de.mul(sq, 0.5))


def mean_neg_log_density(z) -> Var:
    """(1/B) sum_i -K(eps_i) for a (B, ...) batch; the unweighted Eq-style
    regularization term."""
    z = de.as_var(z)
    b = z.value.shape[0]
    d = int(z.value.size // b)
    if d < 2:
        raise DimensionError(f"per-image dimension must be >= 2, got {d}")
    flat = de.reshape(z, (b, d))
    sq = de.sum_(de.mul(flat, flat), axis=1)
    if sq.value.min() <= 0.0:
        raise DegenerateInputError("zero noise vector in batch")
    r = de.sqrt(sq)
    k = de.sub(de.mul(de.log(r), float(d - 1)), de.mul(sq, 0.5))
    return de.neg(de.mean_(k))


def penalty(batch, prior: RadiusPrior) -> Var:
    """lambda_reg * mean_i -K(eps_i), differentiable in the batch."""
    z = batch if isinstance(batch, Var) else de.constant(np.asarray(getattr(batch, "values", batch)))
    b = z.value.shape[0]
    d = int(z.value.size // b)
    if d != prior.d:
        raise DimensionError(f"prior d = {prior.d} but batch has per-image dimension {d}")
    return de.mul(mean_neg_log_density(z), prior.lambda_reg)
