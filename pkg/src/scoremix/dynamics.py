"""Integrators for the score-driven generation dynamics.

Four closely related flows share the drift assembled in
:mod:`scoremix.heat`:

* the physical reverse-time ODE on a log-uniform time grid,
* its similarity-time reparametrization (uniform steps, explicit Euler),
* the stochastically perturbed version (Euler-Maruyama, counter-based
  Gaussian increments so ensembles are reproducible path by path),
* the autonomous limiting inclusion driven by the nonsmooth potential of
  :mod:`scoremix.geometry`, with event-aware handling of nearest-set ties.

The similarity and physical integrators run the very same update sequence;
they differ only in how the time column is labelled, which is what makes
their matching-grid agreement exact rather than up to discretization error.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import RESIDUAL_TOL, _pair_generators, min_norm_element
from .heat import MixedScoreModel, grad_rescaled_potential
from .measures import squared_distances


@dataclass(frozen=True)
class IntegratorConfig:
    """Step sizes, horizons, seeding, and nonsmooth-event options.

    tau_max defaults to log(T / t_min), the similarity time at which the
    physical time reaches t_min.  method="rk4" exists to generate
    reference fixtures; production paths use explicit Euler.  chattering
    disables interface events in the limiting inclusion (plain Euler with
    lowest-index tie-breaking), kept for cross-validation.
    """

    dtau: float = 1e-2
    tau_max: float | None = None
    t_min: float = 1e-4
    seed: int = 0
    sliding_tol: float = 1e-7
    method: str = "euler"
    chattering: bool = False

    def __post_init__(self):
        if self.dtau <= 0:
            raise ValueError("dtau must be positive")
        if self.t_min <= 0:
            raise ValueError("t_min must be positive")
        if self.tau_max is not None and self.tau_max <= 0:
            raise ValueError("tau_max must be positive")
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")

    def resolve_tau_max(self, T: float) -> float:
        if self.tau_max is not None:
            return self.tau_max
        if T <= self.t_min:
            raise ValueError("T must exceed t_min to define the similarity horizon")
        return math.log(T / self.t_min)


@dataclass
class Trajectory:
    """Sampled path of one flow, with optional per-node drift norms."""

    times: np.ndarray
    states: np.ndarray
    drift_norm_sq: np.ndarray | None
    mode: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] != self.times.shape[0]:
            raise ValueError("states must be (n, d) with one row per time")
        dt = np.diff(self.times)
        if dt.size and not (np.all(dt > 0) or np.all(dt < 0)):
            raise ValueError("times must be strictly monotone")
        if self.drift_norm_sq is not None:
            self.drift_norm_sq = np.asarray(self.drift_norm_sq, dtype=float)
            if self.drift_norm_sq.shape != (self.times.shape[0],):
                raise ValueError("drift_norm_sq must align with times")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def _check_x0(x0, dim: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0 and dim == 1:
        x0 = x0[None]
    if x0.shape != (dim,):
        raise ValueError(f"initial state shape {x0.shape} incompatible with dimension {dim}")
    return x0.copy()


def _grid(model: MixedScoreModel, cfg: IntegratorConfig):
    tau_max = cfg.resolve_tau_max(model.T)
    n = max(1, int(round(tau_max / cfg.dtau)))
    taus = np.arange(n + 1) * cfg.dtau
    return taus, n


def _base_meta(model: MixedScoreModel, cfg: IntegratorConfig, mode: str) -> dict:
    return {
        "mode": mode,
        "lam": model.lam,
        "T": model.T,
        "epsilon": model.epsilon,
        "dtau": cfg.dtau,
        "tau_max": cfg.resolve_tau_max(model.T),
        "t_min": cfg.t_min,
        "seed": cfg.seed,
        "sliding_tol": cfg.sliding_tol,
        "method": cfg.method,
    }


def _similarity_states(model: MixedScoreModel, x0: np.ndarray, cfg: IntegratorConfig):
    """Shared update loop of the similarity-time ODE, Euler or RK4."""
    taus, n = _grid(model, cfg)
    states = np.empty((n + 1, x0.shape[0]))
    drifts = np.empty(n + 1)
    y = x0.copy()

    def f(tau, z):
        t = model.T * math.exp(-tau)
        return -(0.25) * grad_rescaled_potential(model, z, t)

    h = cfg.dtau
    for k in range(n + 1):
        states[k] = y
        d = f(taus[k], y)
        drifts[k] = float(d @ d)
        if k == n:
            break
        if cfg.method == "euler":
            y = y + h * d
        else:
            k1 = d
            k2 = f(taus[k] + 0.5 * h, y + 0.5 * h * k1)
            k3 = f(taus[k] + 0.5 * h, y + 0.5 * h * k2)
            k4 = f(taus[k] + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return taus, states, drifts


def simulate_similarity_ode(model: MixedScoreModel, x0, cfg: IntegratorConfig) -> Trajectory:
    """Explicit Euler on dY/dtau = -(1/4) grad F(Y, T e^{-tau}) from tau=0."""
    x0 = _check_x0(x0, model.dim)
    taus, states, drifts = _similarity_states(model, x0, cfg)
    return Trajectory(taus, states, drifts, "similarity_ode", _base_meta(model, cfg, "similarity_ode"))


def simulate_physical_ode(model: MixedScoreModel, x0, cfg: IntegratorConfig) -> Trajectory:
    """Reverse-time flow on the log-uniform grid t_k = T exp(-k dtau).

    Identical update sequence to the similarity integrator (the grids are
    images of each other under t = T e^{-tau}), reported against physical
    time, which therefore decreases from T to roughly t_min.
    """
    x0 = _check_x0(x0, model.dim)
    taus, states, drifts = _similarity_states(model, x0, cfg)
    meta = _base_meta(model, cfg, "physical_ode")
    if len(taus) == 2:
        meta["warning"] = "single-step grid; discretization error is uncontrolled"
    times = model.T * np.exp(-taus)
    return Trajectory(times, states, drifts, "physical_ode", meta)


def _sde_batch(model: MixedScoreModel, X0: np.ndarray, cfg: IntegratorConfig):
    """Euler-Maruyama on a batch of paths with per-path Philox streams.

    Path i consumes the stream Philox(key = seed + i), drawn in one block,
    so results do not depend on batch size or evaluation order.  With
    epsilon = 0 the noise is skipped and the update is bitwise the Euler
    ODE step.
    """
    m, dim = X0.shape
    taus, n = _grid(model, cfg)
    eps = model.epsilon
    states = np.empty((n + 1, m, dim))
    drifts = np.empty((n + 1, m))
    y = X0.copy()
    if eps > 0.0:
        xi = np.empty((m, n, dim))
        for i in range(m):
            rng = np.random.Generator(np.random.Philox(key=cfg.seed + i))
            xi[i] = rng.standard_normal((n, dim))
        amp = math.sqrt(2.0 * eps * model.T) * math.sqrt(cfg.dtau)
    coef = -((1.0 + eps) / 4.0)
    for k in range(n + 1):
        states[k] = y
        t = model.T * math.exp(-taus[k])
        d = coef * grad_rescaled_potential(model, y, t)
        drifts[k] = np.einsum("md,md->m", d, d)
        if k == n:
            break
        y = y + cfg.dtau * d
        if eps > 0.0:
            y = y + (amp * math.exp(-taus[k] / 2.0)) * xi[:, k, :]
    return taus, states, drifts


def simulate_similarity_sde(model: MixedScoreModel, x0, cfg: IntegratorConfig) -> Trajectory:
    """Euler-Maruyama for the perturbed similarity dynamics.

    Drift -(1+eps)/4 grad F, diffusion sqrt(2 eps T) e^{-tau/2}; Gaussian
    increments come from the counter-based stream Philox(key=cfg.seed).
    """
    x0 = _check_x0(x0, model.dim)
    taus, states, drifts = _sde_batch(model, x0[None, :], cfg)
    return Trajectory(
        taus, states[:, 0, :], drifts[:, 0], "similarity_sde", _base_meta(model, cfg, "similarity_sde")
    )


# ---------------------------------------------------------------------------
# limiting inclusion


def _one_sided(model: MixedScoreModel, z: np.ndarray):
    """Lowest-index nearest pair and the corresponding smooth generator."""
    d1 = squared_distances(model.mu1.points, z)
    d2 = squared_distances(model.mu2.points, z)
    k = int(np.argmin(d1))
    l = int(np.argmin(d2))
    g = 2.0 * model.lam * (z - model.mu1.points[k]) + 2.0 * (1.0 - model.lam) * (
        z - model.mu2.points[l]
    )
    return k, l, g


def _tie_groups(model: MixedScoreModel, z: np.ndarray, tol_sq: float):
    d1 = squared_distances(model.mu1.points, z)
    d2 = squared_distances(model.mu2.points, z)
    I = tuple(int(i) for i in np.flatnonzero(d1 <= d1.min() + tol_sq))
    J = tuple(int(j) for j in np.flatnonzero(d2 <= d2.min() + tol_sq))
    return I, J


def _bisector(points: np.ndarray, a: int, b: int):
    """Row form n . x = rhs of the equal-distance hyperplane of two points."""
    n = 2.0 * (points[a] - points[b])
    rhs = float(points[a] @ points[a] - points[b] @ points[b])
    return n, rhs


def _project_bisector(z: np.ndarray, n: np.ndarray, rhs: float) -> np.ndarray:
    return z - ((z @ n - rhs) / (n @ n)) * n


def _sliding_test(model: MixedScoreModel, x: np.ndarray, which: int, a: int, b: int):
    """Filippov attraction test across one two-way tie.

    which=1 ties dataset 1 (indices a, b), which=2 ties dataset 2.  Returns
    (attracting, tangential generator, plane normal, plane rhs).  The
    tangential part of the generator is shared by both sides, so sliding
    motion does not depend on the side used to compute it.
    """
    pts = model.mu1.points if which == 1 else model.mu2.points
    u = pts[b] - pts[a]
    if which == 1:
        _, l, _ = _one_sided(model, x)
        other = model.mu2.points[l]
        g_a = 2.0 * model.lam * (x - pts[a]) + 2.0 * (1.0 - model.lam) * (x - other)
        g_b = 2.0 * model.lam * (x - pts[b]) + 2.0 * (1.0 - model.lam) * (x - other)
    else:
        k, _, _ = _one_sided(model, x)
        other = model.mu1.points[k]
        g_a = 2.0 * model.lam * (x - other) + 2.0 * (1.0 - model.lam) * (x - pts[a])
        g_b = 2.0 * model.lam * (x - other) + 2.0 * (1.0 - model.lam) * (x - pts[b])
    attracting = float(g_a @ u) < 0.0 < float(g_b @ u)
    n, rhs = _bisector(pts, a, b)
    nn = float(n @ n)
    g_tan = g_a - ((g_a @ n) / nn) * n
    return attracting, g_tan, n, rhs


def _limit_field(model: MixedScoreModel, z: np.ndarray, key, cfg: IntegratorConfig):
    """Selected field of the inclusion at z, honoring an active sliding key.

    Returns (drift, key).  key is None or ("1"|"2", a, b) naming a two-way
    tie currently slid along.  Sliding is released when the tie stops
    being jointly nearest or the two-sided attraction fails; outside
    sliding the field is the one-sided choice with lowest-index ties.
    """
    if key is not None:
        which, a, b = key
        pts = model.mu1.points if which == 1 else model.mu2.points
        d2 = squared_distances(pts, z)
        tied = abs(d2[a] - d2[b]) <= 20.0 * cfg.sliding_tol
        nearest = min(d2[a], d2[b]) <= d2.min() + cfg.sliding_tol
        if tied and nearest:
            attracting, g_tan, _, _ = _sliding_test(model, z, which, a, b)
            if attracting:
                return -0.25 * g_tan, key
        key = None
    I, J = _tie_groups(model, z, cfg.sliding_tol)
    if len(I) > 1 or len(J) > 1:
        # exact multi-way or simultaneous ties: freeze at critical points,
        # otherwise fall back to the lowest-index side (O(dtau) event error)
        gens = _pair_generators(model, z, I, J)
        v = min_norm_element(gens)
        if float(v @ v) <= RESIDUAL_TOL**2:
            return np.zeros_like(z), None
        if len(I) == 2 and len(J) == 1:
            attracting, g_tan, _, _ = _sliding_test(model, z, 1, I[0], I[1])
            if attracting:
                return -0.25 * g_tan, (1, I[0], I[1])
        if len(I) == 1 and len(J) == 2:
            attracting, g_tan, _, _ = _sliding_test(model, z, 2, J[0], J[1])
            if attracting:
                return -0.25 * g_tan, (2, J[0], J[1])
    _, _, g = _one_sided(model, z)
    return -0.25 * g, None


def simulate_limit_inclusion(model: MixedScoreModel, z0, cfg: IntegratorConfig) -> Trajectory:
    """Event-aware explicit Euler for dZ/dtau in -(1/4) d(phi)(Z).

    Away from ties this is plain Euler on the smooth field.  When a step
    would cross a nearest-point cell boundary, the crossing point of the
    (affine) margin is located, the two one-sided fields are tested, and
    if both point toward the boundary the state is projected onto it and
    continues with the shared tangential field.  Events are located only
    to first order, consistent with the overall O(dtau) accuracy.  With
    cfg.chattering=True all of this is skipped.
    """
    z = _check_x0(z0, model.dim)
    taus, n = _grid(model, cfg)
    states = np.empty((n + 1, z.shape[0]))
    drifts = np.empty(n + 1)
    key = None
    for k in range(n + 1):
        states[k] = z
        if cfg.chattering:
            _, _, g = _one_sided(model, z)
            d = -0.25 * g
        else:
            d, key = _limit_field(model, z, key, cfg)
        drifts[k] = float(d @ d)
        if k == n:
            break
        z_next = z + cfg.dtau * d
        if not cfg.chattering and key is None:
            z_next, key = _handle_crossings(model, z, z_next, cfg)
        elif not cfg.chattering and key is not None:
            which, a, b = key
            pts = model.mu1.points if which == 1 else model.mu2.points
            nvec, rhs = _bisector(pts, a, b)
            z_next = _project_bisector(z_next, nvec, rhs)
        z = z_next
    return Trajectory(taus, states, drifts, "limit_inclusion", _base_meta(model, cfg, "limit_inclusion"))


def _handle_crossings(model: MixedScoreModel, z: np.ndarray, z_next: np.ndarray, cfg):
    """Detect nearest-index changes across one Euler step and slide if attracting."""
    k0, l0, _ = _one_sided(model, z)
    k1, l1, _ = _one_sided(model, z_next)
    events = []
    if k1 != k0:
        events.append((1, k0, k1))
    if l1 != l0:
        events.append((2, l0, l1))
    if not events:
        return z_next, None
    best = None
    for which, a, b in events:
        pts = model.mu1.points if which == 1 else model.mu2.points
        m0 = float(squared_distances(pts, z)[a] - squared_distances(pts, z)[b])
        m1 = float(squared_distances(pts, z_next)[a] - squared_distances(pts, z_next)[b])
        if m1 <= m0:
            continue
        s = m0 / (m0 - m1) if m1 != m0 else 1.0
        s = min(1.0, max(0.0, s))
        if best is None or s < best[0]:
            best = (s, which, a, b)
    if best is None:
        return z_next, None
    s, which, a, b = best
    x_c = z + s * (z_next - z)
    attracting, g_tan, nvec, rhs = _sliding_test(model, x_c, which, a, b)
    if not attracting:
        return z_next, None
    x_c = _project_bisector(x_c, nvec, rhs)
    z_new = x_c + (1.0 - s) * cfg.dtau * (-0.25 * g_tan)
    return _project_bisector(z_new, nvec, rhs), (which, a, b)


# ---------------------------------------------------------------------------
# ensembles


def _sample_initials(sampler: dict, n_paths: int, dim: int, seed: int) -> np.ndarray:
    kind = sampler.get("kind")
    if kind == "gaussian":
        mean = np.asarray(sampler["mean"], dtype=float)
        if mean.shape != (dim,):
            raise ValueError("gaussian sampler mean has wrong dimension")
        std = float(sampler.get("std", 1.0))
        rng = np.random.Generator(np.random.Philox(key=seed).jumped(1))
        return mean[None, :] + std * rng.standard_normal((n_paths, dim))
    if kind == "grid":
        lo = np.asarray(sampler["lo"], dtype=float)
        hi = np.asarray(sampler["hi"], dtype=float)
        n = int(sampler["n"])
        if lo.shape != (dim,) or hi.shape != (dim,):
            raise ValueError("grid sampler box has wrong dimension")
        axes = [np.linspace(lo[i], hi[i], n) for i in range(dim)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        if n_paths != pts.shape[0]:
            raise ValueError(f"grid sampler yields {pts.shape[0]} starts, n_paths={n_paths}")
        return pts
    if kind == "points":
        pts = np.asarray(sampler["points"], dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape != (n_paths, dim):
            raise ValueError("points sampler shape mismatch")
        return pts.copy()
    raise ValueError(f"unknown sampler kind {kind!r}")


def ensemble(
    model: MixedScoreModel,
    sampler: dict,
    n_paths: int,
    cfg: IntegratorConfig,
    mode: str = "sde",
) -> list[Trajectory]:
    """Simulate n_paths independent trajectories from a common sampler.

    Path i reuses the single-path integrators with seed cfg.seed + i, so
    any ensemble member can be reproduced in isolation.  SCOREMIX_THREADS
    caps worker threads for the sequential limit-inclusion map; the other
    modes integrate the whole batch vectorized.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    X0 = _sample_initials(sampler, n_paths, model.dim, cfg.seed)
    if mode == "sde":
        taus, states, drifts = _sde_batch(model, X0, cfg)
        trajs = []
        for i in range(n_paths):
            meta = _base_meta(model, cfg, "similarity_sde")
            meta["seed"] = cfg.seed + i
            trajs.append(Trajectory(taus, states[:, i, :], drifts[:, i], "similarity_sde", meta))
        return trajs
    if mode in ("ode", "physical"):
        sim = simulate_similarity_ode if mode == "ode" else simulate_physical_ode
        return [sim(model, X0[i], replace(cfg, seed=cfg.seed + i)) for i in range(n_paths)]
    if mode == "limit":
        threads = int(os.environ.get("SCOREMIX_THREADS", "1"))
        run = lambda i: simulate_limit_inclusion(model, X0[i], replace(cfg, seed=cfg.seed + i))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(run, range(n_paths)))
        return [run(i) for i in range(n_paths)]
    raise ValueError(f"unknown ensemble mode {mode!r}")
