"""Set-level diversity statistics over feature stacks.

Pairwise statistics average a per-pair distance over all pairs and patches.
Set statistics build a similarity kernel from pooled embeddings and score it
with the log-determinant (DPP) or the exponential eigenvalue entropy
(Vendi). All paths are differentiable back to the features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Var
from .errors import ArityError, ConfigError, ContractViolation, DegenerateInputError, DimensionError
from .features import FeatureSet

KERNEL_JITTER = 1e-6
VENDI_DELTA = 1e-12
_SQRT_SMOOTHING = 1e-24  # keeps the L2 distance subgradient finite at coincidence


@dataclass
class SimilarityKernel:
    """B x B PSD similarity matrix (symmetrized, jitter on the diagonal)."""

    k: Var
    epsilon_jitter: float = KERNEL_JITTER

    def __post_init__(self):
        if not isinstance(self.k, Var):
            self.k = de.constant(np.asarray(self.k, dtype=np.float64))
        m = self.k.value
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"kernel must be square, got {m.shape}")
        scale = max(1.0, float(np.abs(m).max()))
        if np.abs(m - m.T).max() > 1e-9 * scale:
            raise ContractViolation("kernel not symmetric within tolerance")

    @property
    def size(self) -> int:
        return self.k.value.shape[0]


@dataclass
class DiversityStat:
    """A scalar diversity statistic plus its graph node; pairwise metrics
    also expose the patch-averaged per-pair distance matrix."""

    metric: str
    node: Var
    per_pair: np.ndarray | None = None

    @property
    def value(self) -> float:
        return float(self.node.value)


def _dot(a: Var, b: Var) -> Var:
    return de.sum_(de.mul(a, b))


def _cosine_distance(a: Var, b: Var) -> Var:
    na = de.sqrt(_dot(a, a))
    nb = de.sqrt(_dot(b, b))
    if na.value < 1e-15 or nb.value < 1e-15:
        raise DegenerateInputError("cosine distance undefined for a zero vector")
    cos = de.div(_dot(a, b), de.mul(na, nb))
    return de.mul(de.sub(1.0, cos), 0.5)


def _l2_distance(a: Var, b: Var, bound: float) -> Var:
    diff = de.sub(a, b)
    return de.div(de.sqrt(de.add(de.sum_(de.mul(diff, diff)), _SQRT_SMOOTHING)), bound)


def pairwise_mean(fs: FeatureSet, distance: str = "cosine") -> DiversityStat:
    """Mean pairwise distance, averaged over patches:
    (1/P) sum_p (2 / (B (B-1))) sum_{i<j} d(f_p(i), f_p(j)). Every supported
    distance lands in [0, 1]: cosine as (1 - cos)/2, L2 divided by the
    extractor's documented bound."""
    b, p = fs.batch_size, fs.patches
    if b < 2:
        raise ArityError(f"pairwise statistics need B >= 2, got B = {b}")
    if distance == "hist_l2" and not fs.extractor.startswith("soft_hist"):
        raise ConfigError(f"hist_l2 expects histogram features, got {fs.extractor!r}")
    if distance not in ("cosine", "l2_normalized", "hist_l2"):
        raise ConfigError(f"unknown distance {distance!r}")

    per_pair = np.zeros((b, b))
    total = de.constant(0.0)
    for i in range(b):
        for j in range(i + 1, b):
            pair_sum = de.constant(0.0)
            for q in range(p):
                fi = fs.values[(i, q)]
                fj = fs.values[(j, q)]
                if distance == "cosine":
                    d = _cosine_distance(fi, fj)
                else:
                    d = _l2_distance(fi, fj, fs.l2_bound)
                pair_sum = de.add(pair_sum, d)
            mean_over_patches = de.mul(pair_sum, 1.0 / p)
            per_pair[i, j] = per_pair[j, i] = float(mean_over_patches.value)
            total = de.add(total, mean_over_patches)
    stat = de.mul(total, 2.0 / (b * (b - 1)))
    return DiversityStat(f"pairwise_{distance}", stat, per_pair)


def pool_features(fs: FeatureSet) -> FeatureSet:
    """Mean over patches, then unit-normalize: the P = 1 stack kernel
    construction expects."""
    pooled = de.mean_(fs.values, axis=1, keepdims=True)
    sq = de.sum_(de.mul(pooled, pooled), axis=-1, keepdims=True)
    if sq.value.min() < 1e-30:
        raise DegenerateInputError("patch pooling produced a zero embedding")
    unit = de.div(pooled, de.sqrt(sq))
    return FeatureSet(unit, fs.extractor + "+pooled", True, 2.0)


def build_kernel(fs: FeatureSet, epsilon: float = KERNEL_JITTER) -> SimilarityKernel:
    """Row-normalize the embeddings, K_s = F F^T, symmetrize, add epsilon I."""
    if fs.patches != 1:
        raise DimensionError("build_kernel expects P = 1 features; pool patch stacks first")
    b = fs.batch_size
    f = de.reshape(fs.values, (b, fs.dim))
    sq = de.sum_(de.mul(f, f), axis=-1, keepdims=True)
    if sq.value.min() < 1e-30:
        raise DegenerateInputError("zero-norm embedding in kernel construction")
    fbar = de.div(f, de.sqrt(sq))
    ks = de.matmul(fbar, de.transpose(fbar, (1, 0)))
    sym = de.mul(de.add(ks, de.transpose(ks, (1, 0))), 0.5)
    k = de.add(sym, de.constant(epsilon * np.eye(b)))
    return SimilarityKernel(k, epsilon)


def _checked_eigvals(kernel: SimilarityKernel) -> Var:
    vals, _ = de.eigh(kernel.k)
    top = max(1.0, float(vals.value.max()))
    if vals.value.min() < -1e-8 * top:
        raise ContractViolation(f"kernel not PSD: min eigenvalue {vals.value.min():.3e}")
    return vals


def dpp_score(kernel: SimilarityKernel) -> DiversityStat:
    """log det(I + K) = sum_i log(1 + lambda_i); the gradient in K is
    (I + K)^{-1}, realized through the eigenvalue vjp."""
    vals = _checked_eigvals(kernel)
    return DiversityStat("dpp", de.sum_(de.log1p(vals)))


def vendi_score(kernel: SimilarityKernel) -> DiversityStat:
    """exp of the Shannon entropy of the normalized eigenvalue spectrum;
    negative eigenvalues clamp to zero, delta = 1e-12 guards the log."""
    vals = _checked_eigvals(kernel)
    pos = de.relu(vals)
    total = de.sum_(pos)
    if total.value <= 0.0:
        raise DegenerateInputError("all-zero kernel has no eigenvalue distribution")
    p = de.div(pos, total)
    entropy = de.neg(de.sum_(de.mul(p, de.log(de.add(p, VENDI_DELTA)))))
    return DiversityStat("vendi", de.exp(entropy))


_METRICS = {
    "pairwise_cosine": lambda fs: pairwise_mean(fs, "cosine"),
    "pairwise_l2": lambda fs: pairwise_mean(fs, "l2_normalized"),
    "pairwise_hist_l2": lambda fs: pairwise_mean(fs, "hist_l2"),
    "dpp": lambda fs: dpp_score(build_kernel(fs if fs.patches == 1 else pool_features(fs))),
    "vendi": lambda fs: vendi_score(build_kernel(fs if fs.patches == 1 else pool_features(fs))),
}


def compute(metric: str, fs: FeatureSet) -> DiversityStat:
    """Dispatch a diversity statistic by config id."""
    if metric not in _METRICS:
        raise ConfigError(f"unknown diversity metric {metric!r}; choose from {sorted(_METRICS)}")
    return _METRICS[metric](fs)
