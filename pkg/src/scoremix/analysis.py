"""Numerical verification suites for the score-mixing dynamics.

Each check packages one quantitative statement about the interplay between
the finite-time potential F of :mod:`scoremix.heat` and its geometric limit
phi of :mod:`scoremix.geometry`: value and gradient convergence with
explicit constants, dissipation along the limiting flow, contraction rates,
the viscous Hamilton-Jacobi identity, semiconcavity, and density growth
factors.  Checks return a :class:`VerificationReport`; nothing is asserted
here, callers decide what is a hard gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import IntegratorConfig, Trajectory, _sde_batch
from .geometry import active_sets, grad_phi_smooth, min_norm_element, nd_indicator, phi
from .heat import MixedScoreModel, grad_rescaled_potential, rescaled_potential
from .measures import squared_distances

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

# Gradient errors below this are treated as exact zeros and excluded from fits.
GRAD_CLAMP = 1e-300
# Error floor for rate fits, scaled by (1 + |x*|).
RATE_FLOOR = 100.0 * np.finfo(float).eps


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through (abscissa, log error) pairs."""

    abscissa: np.ndarray
    log_errors: np.ndarray
    slope: float
    intercept: float
    r2: float


@dataclass(frozen=True)
class VerificationReport:
    check_name: str
    points_tested: int
    worst_violation: float
    bound_used: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, np.ndarray):
                return [clean(u) for u in v]
            if isinstance(v, dict):
                return {k: clean(u) for k, u in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(u) for u in v]
            return v

        return {
            "check_name": self.check_name,
            "points_tested": int(self.points_tested),
            "worst_violation": float(self.worst_violation),
            "bound_used": float(self.bound_used),
            "pass": bool(self.passed),
            "details": clean(self.details),
        }


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float((resid**2).sum()) / ss_tot
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# value and gradient convergence


def varadhan_constants(model: MixedScoreModel, x) -> tuple[np.ndarray, float]:
    """Explicit constants (C1(x), C2) of the value-convergence bound.

    |phi - F(., t)| <= C1(x) sqrt(t) + C2 t (1 + |log t|) for t <= r0^2,
    with C1(x) = 2|lam| d1 + 2|1-lam| d2 and C2 built from the dimension
    and the smallest atom weight c (point clouds have mass exponent 0).
    """
    x = np.asarray(x, dtype=float)
    X = x[None, :] if x.ndim == 1 else x
    lam = model.lam
    d1 = np.sqrt(squared_distances(model.mu1.points, X).min(axis=1))
    d2 = np.sqrt(squared_distances(model.mu2.points, X).min(axis=1))
    C1 = 2.0 * abs(lam) * d1 + 2.0 * abs(1.0 - lam) * d2
    c = min(model.mu1.weights.min(), model.mu2.weights.min())
    d = model.dim
    C2 = max(1.0 + 4.0 * abs(math.log(c)) + 2.0 * d * math.log(4.0 * math.pi), 2.0 * d)
    C2 *= abs(lam) + abs(1.0 - lam)
    return (C1[0] if x.ndim == 1 else C1), C2


def varadhan_value_gap(model: MixedScoreModel, xs, ts, r0: float = 1.0) -> VerificationReport:
    """Check |phi - F(., t)| against the explicit convergence bound.

    Evaluates the gap on every (x, t) pair and reports the worst excess
    over the bound (negative worst_violation means uniform margin).  Also
    tracks how often the gap decreases monotonically across the given
    decreasing ts.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    ts = [float(t) for t in ts]
    if any(t <= 0 or t > r0**2 for t in ts):
        raise ValueError("varadhan_value_gap requires 0 < t <= r0^2")
    C1, C2 = varadhan_constants(model, xs)
    phis = phi(model, xs)
    gaps = []
    worst = -np.inf
    n_violations = 0
    for t in ts:
        F = rescaled_potential(model, xs, t)
        gap = np.abs(phis - F)
        bound = C1 * math.sqrt(t) + C2 * t * (1.0 + abs(math.log(t)))
        excess = gap - bound
        worst = max(worst, float(excess.max()))
        n_violations += int((excess > 0).sum())
        gaps.append(gap)
    gaps = np.array(gaps)
    if len(ts) >= 2 and all(ts[i] > ts[i + 1] for i in range(len(ts) - 1)):
        monotone_frac = float(np.mean(np.all(np.diff(gaps, axis=0) <= 1e-12, axis=0)))
    else:
        monotone_frac = float("nan")
    return VerificationReport(
        check_name="varadhan_value_gap",
        points_tested=xs.shape[0] * len(ts),
        worst_violation=worst,
        bound_used=0.0,
        passed=n_violations == 0,
        details={
            "n_violations": n_violations,
            "ts": ts,
            "monotone_fraction": monotone_frac,
            "C2": C2,
            "max_gap_per_t": [float(g.max()) for g in gaps],
        },
    )


def interface_margins(model: MixedScoreModel, x) -> tuple[float, float]:
    """Squared-distance gaps to the second-nearest point of each support."""
    x = np.asarray(x, dtype=float)
    out = []
    for pts in (model.mu1.points, model.mu2.points):
        d2 = np.sort(squared_distances(pts, x))
        out.append(float(d2[1] - d2[0]) if d2.size > 1 else float("inf"))
    return out[0], out[1]


def analytic_gradient_rate(model: MixedScoreModel, x) -> float:
    """Predicted decay exponent eta in |grad F - grad phi| <= C exp(-eta/t).

    eta = min over datasets that carry weight of (squared-distance margin)/4;
    at the endpoints lam in {0, 1} only the active dataset counts.
    """
    m1, m2 = interface_margins(model, x)
    rates = []
    if model.lam != 0.0:
        rates.append(m1)
    if model.lam != 1.0:
        rates.append(m2)
    return 0.25 * min(rates)


def varadhan_gradient_decay(model: MixedScoreModel, x0, ts) -> RateFit:
    """Fit log |grad F(x0, t) - grad phi(x0)| against 1/t at one smooth point.

    The slope estimates -eta.  Errors below GRAD_CLAMP are excluded; at
    least three usable times are required.
    """
    x0 = np.asarray(x0, dtype=float)
    ind = nd_indicator(MixedScoreModel(model.mu1, model.mu2, model.lam, model.T, model.epsilon), x0)
    if (model.lam != 0.0 and ind.in_nd1) or (model.lam != 1.0 and ind.in_nd2):
        raise ValueError("gradient decay is defined off the tie locus; x0 has a tied nearest set")
    g_phi = grad_phi_smooth(model, x0)
    inv_t, log_err = [], []
    for t in sorted(float(t) for t in ts):
        err = float(np.linalg.norm(grad_rescaled_potential(model, x0, t) - g_phi))
        if err <= GRAD_CLAMP:
            continue
        inv_t.append(1.0 / t)
        log_err.append(math.log(err))
    if len(inv_t) < 3:
        raise ValueError("fewer than three usable times; errors underflowed the clamp")
    slope, intercept, r2 = _linear_fit(np.array(inv_t), np.array(log_err))
    return RateFit(np.array(inv_t), np.array(log_err), slope, intercept, r2)


# ---------------------------------------------------------------------------
# trajectory diagnostics


def rate_fit(traj: Trajectory, x_star, tail_fraction: float = 0.5) -> RateFit:
    """Contraction-rate fit of log |Y - x*| over the trajectory tail.

    For similarity-time modes the abscissa is tau and the expected slope
    near a smooth minimizer is -1/2; for the physical mode the abscissa is
    log t and the expected slope is +1/2.  Errors at the floor of double
    precision are excluded; the trajectory must have converged to within
    1e-1 of x*.
    """
    x_star = np.asarray(x_star, dtype=float)
    errs = np.linalg.norm(traj.states - x_star[None, :], axis=1)
    if errs[-1] >= 1e-1:
        raise ValueError(f"trajectory terminal error {errs[-1]:.3g} >= 1e-1; not converged to x*")
    n = len(errs)
    start = n - max(3, int(math.ceil(tail_fraction * n)))
    abscissa = np.log(traj.times) if traj.mode == "physical_ode" else traj.times
    floor = RATE_FLOOR * (1.0 + float(np.linalg.norm(x_star)))
    keep = errs[start:] > floor
    if keep.sum() < 3:
        raise ValueError("degenerate tail: errors sit at the double-precision floor")
    xs = abscissa[start:][keep]
    ys = np.log(errs[start:][keep])
    slope, intercept, r2 = _linear_fit(xs, ys)
    return RateFit(xs, ys, slope, intercept, r2)


def lyapunov_audit(traj: Trajectory, model: MixedScoreModel, tol: float | None = None) -> VerificationReport:
    """Compare the drop of phi with 4 times the integrated squared speed.

    Along exact solutions of the limiting inclusion these agree; for the
    Euler discretization the mismatch is first order in dtau times the
    total drop, which is the default tolerance.  Per-step monotonicity is
    checked with an O(dtau^2) slack.
    """
    if traj.mode != "limit_inclusion":
        raise ValueError("lyapunov_audit expects a limit-inclusion trajectory")
    if traj.drift_norm_sq is None:
        raise ValueError("trajectory lacks recorded drift norms")
    phis = phi(model, traj.states)
    dissipated = float(_trapezoid(4.0 * traj.drift_norm_sq, traj.times))
    drop = float(phis[0] - phis[-1])
    gap = abs(dissipated - drop)
    dtau = float(traj.times[1] - traj.times[0]) if len(traj.times) > 1 else 0.0
    if tol is None:
        tol = 5.0 * dtau * (1.0 + abs(drop))
    step_slack = 2.0 * dtau**2 * (traj.drift_norm_sq[:-1] + traj.drift_norm_sq[1:] + 1.0)
    increases = np.diff(phis) - step_slack
    max_increase = float(increases.max()) if increases.size else 0.0
    monotone_ok = max_increase <= 0.0
    return VerificationReport(
        check_name="lyapunov_identity",
        points_tested=len(phis),
        worst_violation=gap,
        bound_used=tol,
        passed=gap <= tol and monotone_ok,
        details={
            "phi_initial": float(phis[0]),
            "phi_final": float(phis[-1]),
            "dissipation_integral": dissipated,
            "monotone_ok": monotone_ok,
            "max_step_increase": max_increase,
        },
    )


def mixture_hull_distance_sq(model: MixedScoreModel, x) -> float:
    """Squared distance to conv(lam A1 + (1 - lam) A2), the invariant hull."""
    x = np.asarray(x, dtype=float)
    combos = (
        model.lam * model.mu1.points[:, None, :]
        + (1.0 - model.lam) * model.mu2.points[None, :, :]
    ).reshape(-1, model.dim)
    v = min_norm_element(combos - x[None, :])
    return float(v @ v)


def confinement_check(traj: Trajectory, model: MixedScoreModel, slack: float = 1.1) -> VerificationReport:
    """Exponential contraction of the squared distance to the mixture hull.

    dist^2(Y_tau, K) <= slack * e^{-tau} dist^2(Y_0, K) + O(dtau), the
    additive term covering the explicit-Euler noise floor.
    """
    combos = (
        model.lam * model.mu1.points[:, None, :]
        + (1.0 - model.lam) * model.mu2.points[None, :, :]
    ).reshape(-1, model.dim)
    diam_sq = float(
        max(((combos[i] - combos[j]) ** 2).sum() for i in range(len(combos)) for j in range(i, len(combos)))
    ) if len(combos) > 1 else 0.0
    taus = traj.times if traj.mode != "physical_ode" else np.log(model.T / traj.times)
    dtau = abs(float(taus[1] - taus[0])) if len(taus) > 1 else 0.0
    d0 = mixture_hull_distance_sq(model, traj.states[0])
    worst = -np.inf
    for k in range(len(taus)):
        dk = mixture_hull_distance_sq(model, traj.states[k])
        allowed = slack * math.exp(-float(taus[k])) * d0 + dtau * max(1.0, diam_sq)
        worst = max(worst, dk - allowed)
    return VerificationReport(
        check_name="hull_confinement",
        points_tested=len(taus),
        worst_violation=worst,
        bound_used=0.0,
        passed=worst <= 0.0,
        details={"initial_dist_sq": d0, "slack": slack, "dtau_term": dtau * max(1.0, diam_sq)},
    )


# ---------------------------------------------------------------------------
# PDE structure


def hj_residual(model: MixedScoreModel, xs, ts, hx: float = 1e-4, tol: float = 1e-3) -> VerificationReport:
    """Finite-difference residual of dF/dt = F/t + Lap F - |grad F|^2 / (4t).

    Defined for lam = 1, where F is the potential of the first dataset
    alone.  Time steps are relative (1e-6 t); space steps are hx.  Also
    reports the sup of ||grad F|^2 - 4F| at off-tie points per t, which
    should shrink as t does (the eikonal limit).
    """
    if model.lam != 1.0:
        raise ValueError("the Hamilton-Jacobi identity in this form requires lam = 1")
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    d = model.dim
    worst = 0.0
    eikonal = {}
    off = np.array([not nd_indicator(model, x).in_nd for x in xs])
    for t in ts:
        t = float(t)
        ht = 1e-6 * t
        F0 = rescaled_potential(model, xs, t)
        Ft = (rescaled_potential(model, xs, t + ht) - rescaled_potential(model, xs, t - ht)) / (2.0 * ht)
        lap = np.zeros(xs.shape[0])
        grad_sq = np.zeros(xs.shape[0])
        for i in range(d):
            e = np.zeros(d)
            e[i] = hx
            Fp = rescaled_potential(model, xs + e, t)
            Fm = rescaled_potential(model, xs - e, t)
            lap += (Fp - 2.0 * F0 + Fm) / hx**2
            grad_sq += ((Fp - Fm) / (2.0 * hx)) ** 2
        resid = Ft - F0 / t - lap + grad_sq / (4.0 * t)
        worst = max(worst, float(np.abs(resid).max()))
        if off.any():
            eikonal[repr(t)] = float(np.abs(grad_sq[off] - 4.0 * F0[off]).max())
    return VerificationReport(
        check_name="hj_residual",
        points_tested=xs.shape[0] * len(list(ts)),
        worst_violation=worst,
        bound_used=tol,
        passed=worst <= tol,
        details={"eikonal_sup_per_t": eikonal, "hx": hx},
    )


def fd_hessian(model: MixedScoreModel, x, t: float, h: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of F(., t) at one point."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    H = np.empty((d, d))
    F0 = rescaled_potential(model, x, t)
    eye = np.eye(d)
    for i in range(d):
        Fp = rescaled_potential(model, x + h * eye[i], t)
        Fm = rescaled_potential(model, x - h * eye[i], t)
        H[i, i] = (Fp - 2.0 * F0 + Fm) / h**2
        for j in range(i + 1, d):
            Fpp = rescaled_potential(model, x + h * eye[i] + h * eye[j], t)
            Fpm = rescaled_potential(model, x + h * eye[i] - h * eye[j], t)
            Fmp = rescaled_potential(model, x - h * eye[i] + h * eye[j], t)
            Fmm = rescaled_potential(model, x - h * eye[i] - h * eye[j], t)
            H[i, j] = H[j, i] = (Fpp - Fpm - Fmp + Fmm) / (4.0 * h**2)
    return H


def hessian_max_eigenvalue(model: MixedScoreModel, x, t: float, h: float = 1e-4) -> float:
    """Largest eigenvalue of the finite-difference Hessian of F(., t)."""
    return float(np.linalg.eigvalsh(fd_hessian(model, x, t, h)).max())


def semiconcavity_check(
    model: MixedScoreModel,
    n_samples: int = 1000,
    seed: int = 0,
    box=None,
    t_range=(1e-3, 1.0),
    tol: float = 1e-3,
) -> VerificationReport:
    """Hessian bound Hess F <= 2 I and midpoint concavity of phi - |x|^2.

    Valid only for lam in [0, 1]; the guidance regime genuinely breaks
    both (use hessian_max_eigenvalue directly to exhibit the failure).
    Samples (x, t) uniformly in the box and log-uniformly in t_range.
    """
    if not (0.0 <= model.lam <= 1.0):
        raise ValueError(
            "semiconcavity holds only for lam in [0, 1]; the lam > 1 violation "
            "is exhibited through hessian_max_eigenvalue"
        )
    if box is None:
        pts = np.vstack([model.mu1.points, model.mu2.points])
        box = (pts.min(axis=0) - 2.0, pts.max(axis=0) + 2.0)
    lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    rng = np.random.Generator(np.random.Philox(key=seed))
    worst_eig = -np.inf
    for _ in range(n_samples):
        x = rng.uniform(lo, hi)
        t = float(np.exp(rng.uniform(math.log(t_range[0]), math.log(t_range[1]))))
        worst_eig = max(worst_eig, hessian_max_eigenvalue(model, x, t))
    a = rng.uniform(lo, hi, size=(n_samples, model.dim))
    b = rng.uniform(lo, hi, size=(n_samples, model.dim))
    psi = lambda X: phi(model, X) - (X**2).sum(axis=1)
    deficit = 0.5 * (psi(a) + psi(b)) - psi(0.5 * (a + b))
    scale = 1.0 + np.abs(psi(a)).max()
    worst_mid = float(deficit.max()) - 1e-12 * scale
    worst = max(worst_eig - 2.0, worst_mid)
    return VerificationReport(
        check_name="semiconcavity",
        points_tested=2 * n_samples,
        worst_violation=worst,
        bound_used=tol,
        passed=worst_eig <= 2.0 + tol and worst_mid <= 0.0,
        details={"max_hessian_eig": float(worst_eig), "max_midpoint_deficit": float(worst_mid)},
    )


# ---------------------------------------------------------------------------
# density growth


def energy_bound_factor(model: MixedScoreModel, p: float, t: float) -> float:
    """Growth factor bounding |rho(t)|_p / |v_T|_p for the perturbed flow.

    Mixture regime: (T/t)^{d (1+eps)(p-1)/(2p)}, independent of lam.
    Guidance regime (lam > 1): an extra exponential carrying (lam - 1) and
    the support radius of the second dataset.  Exactly 1 at p = 1 or t = T.
    """
    if p < 1.0:
        raise ValueError("p must be >= 1")
    if not (0.0 < t <= model.T):
        raise ValueError("t must lie in (0, T]")
    d = model.dim
    eps = model.epsilon
    expo = d * (1.0 + eps) * (p - 1.0) / (2.0 * p)
    factor = (model.T / t) ** expo
    if model.lam > 1.0:
        R = model.mu2.support_radius
        rate = (1.0 + eps) * (p - 1.0) * (model.lam - 1.0) * d * R**2 / (4.0 * p)
        factor *= math.exp(rate * (1.0 / t - 1.0 / model.T))
    return float(factor)


def mc_lp_check(
    model: MixedScoreModel,
    p: float,
    ts,
    n_paths: int,
    cfg: IntegratorConfig,
    sampler: dict | None = None,
    n_bins: int = 512,
) -> VerificationReport:
    """Monte-Carlo Lp growth of the perturbed ensemble against the factor.

    One-dimensional only.  Histogram densities at the requested physical
    times are compared with 3x the bound factor applied to the initial
    density, estimated on the same bins.  Informational: histogram noise
    makes this a sanity check, not a proof.
    """
    if model.dim != 1:
        raise ValueError("mc_lp_check is implemented for dimension 1")
    if model.epsilon <= 0.0:
        raise ValueError("mc_lp_check requires epsilon > 0")
    if n_paths < 10_000:
        raise ValueError("mc_lp_check requires at least 1e4 paths")
    if p < 1.0:
        raise ValueError("p must be >= 1")
    if sampler is None:
        pts = np.vstack([model.mu1.points, model.mu2.points])
        mean = pts.mean(axis=0)
        std = float(pts.std() + math.sqrt(2.0 * model.T))
        sampler = {"kind": "gaussian", "mean": mean, "std": std}
    from .dynamics import _sample_initials

    X0 = _sample_initials(sampler, n_paths, 1, cfg.seed)
    taus, states, _ = _sde_batch(model, X0, cfg)
    t_grid = model.T * np.exp(-taus)
    all_states = np.concatenate([states[0, :, 0]] + [states[-1, :, 0]])
    lo, hi = float(all_states.min()) - 1.0, float(all_states.max()) + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    width = edges[1] - edges[0]

    def lp_norm(samples):
        dens = np.histogram(samples, bins=edges)[0] / (len(samples) * width)
        return float((np.sum(dens**p) * width) ** (1.0 / p))

    norm_init = lp_norm(states[0, :, 0])
    worst = -np.inf
    per_t = {}
    for t in ts:
        t = float(t)
        k = int(np.argmin(np.abs(t_grid - t)))
        norm_t = lp_norm(states[k, :, 0])
        allowed = 3.0 * energy_bound_factor(model, p, float(t_grid[k])) * norm_init
        per_t[repr(t)] = {"lp": norm_t, "allowed": allowed}
        worst = max(worst, (norm_t - allowed) / allowed)
    return VerificationReport(
        check_name="mc_lp_growth",
        points_tested=n_paths * len(list(ts)),
        worst_violation=worst,
        bound_used=0.0,
        passed=worst <= 0.0,
        details={"informational": True, "p": p, "per_t": per_t, "initial_lp": norm_init},
    )
