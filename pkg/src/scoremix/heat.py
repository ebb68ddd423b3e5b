"""Heat-flow scores of point-cloud data and their two-dataset mixtures.

Solving the heat equation from an empirical initial condition gives a
Gaussian mixture with the original weights; its log-density, score, and
softmax barycenter all reduce to one shifted-softmax kernel, shared here so
every operation has identical floating-point behavior.  The rescaled
potential F(x, t) = -4t (lam log u1 + (1 - lam) log u2) is the quantity
whose t -> 0 limit is the weighted squared-distance potential handled in
:mod:`scoremix.geometry`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import EmpiricalMeasure

# exp underflows to zero beyond this shift; such terms are dropped outright.
EXP_CUTOFF = 745.0


@dataclass(frozen=True)
class MixedScoreModel:
    """Two datasets plus mixing weight, horizon, and noise level.

    lam in [0, 1] interpolates the two scores (mixture-of-experts regime);
    lam > 1 extrapolates (guidance regime).  T is the generation horizon and
    epsilon the stochastic perturbation strength.
    """

    mu1: EmpiricalMeasure
    mu2: EmpiricalMeasure
    lam: float
    T: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.mu1.dim != self.mu2.dim:
            raise ValueError(
                f"datasets have mismatched dimensions {self.mu1.dim} and {self.mu2.dim}"
            )
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be finite and >= 0")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def dim(self) -> int:
        return self.mu1.dim

    @property
    def regime(self) -> str:
        return "moe" if self.lam <= 1.0 else "cfg"


@dataclass(frozen=True)
class ScoreEvaluation:
    """Bundle of every per-point quantity evaluated in one kernel pass."""

    log_u1: np.ndarray
    log_u2: np.ndarray
    score1: np.ndarray
    score2: np.ndarray
    mixed_score: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    F_lambda: np.ndarray
    grad_F_lambda: np.ndarray
    epsilon: float
    T: float


def _check_t(t: float) -> float:
    t = float(t)
    if t == 0.0:
        raise ValueError("t=0 is the geometric limit; use scoremix.geometry for it")
    if not (t > 0.0) or not np.isfinite(t):
        raise ValueError("t must be positive and finite")
    return t


def _as_batch(x, dim: int):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"query shape {x.shape} incompatible with dimension {dim}")
    return X, single


def _softmax_parts(measure: EmpiricalMeasure, X: np.ndarray, t: float):
    """Shifted softmax of -|x - x_k|^2 / (4t) with the measure's weights.

    Returns (p, logmix) where p[m] are the mixture responsibilities at
    X[m] and logmix = log sum_k w_k exp(-E_k), evaluated by subtracting
    the smallest exponent so the largest term is exactly one.
    """
    diff = X[:, None, :] - measure.points[None, :, :]
    e = np.einsum("mnd,mnd->mn", diff, diff) / (4.0 * t)
    e_min = e.min(axis=1, keepdims=True)
    shifted = e - e_min
    terms = measure.weights[None, :] * np.exp(-np.minimum(shifted, EXP_CUTOFF))
    terms[shifted > EXP_CUTOFF] = 0.0
    total = terms.sum(axis=1)
    p = terms / total[:, None]
    logmix = np.log(total) - e_min[:, 0]
    return p, logmix


def log_heat_density(measure: EmpiricalMeasure, x, t: float):
    """log u(x, t) for the heat flow started at the measure."""
    t = _check_t(t)
    X, single = _as_batch(x, measure.dim)
    _, logmix = _softmax_parts(measure, X, t)
    out = -(measure.dim / 2.0) * np.log(4.0 * np.pi * t) + logmix
    return float(out[0]) if single else out


def barycenter(measure: EmpiricalMeasure, x, t: float):
    """Softmax barycenter m(x, t); always inside the support's convex hull."""
    t = _check_t(t)
    X, single = _as_batch(x, measure.dim)
    p, _ = _softmax_parts(measure, X, t)
    m = p @ measure.points
    return m[0] if single else m


def score(measure: EmpiricalMeasure, x, t: float):
    """Gradient of log u, in mean-shift form (m(x, t) - x) / (2t)."""
    t = _check_t(t)
    X, single = _as_batch(x, measure.dim)
    p, _ = _softmax_parts(measure, X, t)
    s = (p @ measure.points - X) / (2.0 * t)
    return s[0] if single else s


def mixed_score(model: MixedScoreModel, x, t: float):
    """lam * score1 + (1 - lam) * score2."""
    s1 = score(model.mu1, x, t)
    s2 = score(model.mu2, x, t)
    return model.lam * s1 + (1.0 - model.lam) * s2


def rescaled_potential(model: MixedScoreModel, x, t: float):
    """F(x, t) = -4t (lam log u1 + (1 - lam) log u2)."""
    l1 = log_heat_density(model.mu1, x, t)
    l2 = log_heat_density(model.mu2, x, t)
    return -4.0 * t * (model.lam * l1 + (1.0 - model.lam) * l2)


def grad_rescaled_potential(model: MixedScoreModel, x, t: float):
    """grad F = 2 (x - lam m1 - (1 - lam) m2); equals -4t * mixed score."""
    t = _check_t(t)
    X, single = _as_batch(x, model.dim)
    m1 = barycenter(model.mu1, X, t)
    m2 = barycenter(model.mu2, X, t)
    g = 2.0 * (X - model.lam * m1 - (1.0 - model.lam) * m2)
    return g[0] if single else g


def evaluate_all(model: MixedScoreModel, x, t: float) -> ScoreEvaluation:
    """One kernel pass per dataset, all derived quantities assembled."""
    t = _check_t(t)
    X, single = _as_batch(x, model.dim)
    p1, logmix1 = _softmax_parts(model.mu1, X, t)
    p2, logmix2 = _softmax_parts(model.mu2, X, t)
    lognorm = -(model.dim / 2.0) * np.log(4.0 * np.pi * t)
    log_u1 = lognorm + logmix1
    log_u2 = lognorm + logmix2
    m1 = p1 @ model.mu1.points
    m2 = p2 @ model.mu2.points
    s1 = (m1 - X) / (2.0 * t)
    s2 = (m2 - X) / (2.0 * t)
    mixed = model.lam * s1 + (1.0 - model.lam) * s2
    F = -4.0 * t * (model.lam * log_u1 + (1.0 - model.lam) * log_u2)
    gradF = 2.0 * (X - model.lam * m1 - (1.0 - model.lam) * m2)

    def maybe(a):
        return a[0] if single else a

    return ScoreEvaluation(
        log_u1=maybe(log_u1),
        log_u2=maybe(log_u2),
        score1=maybe(s1),
        score2=maybe(s2),
        mixed_score=maybe(mixed),
        m1=maybe(m1),
        m2=maybe(m2),
        F_lambda=maybe(F),
        grad_F_lambda=maybe(gradF),
        epsilon=model.epsilon,
        T=model.T,
    )
