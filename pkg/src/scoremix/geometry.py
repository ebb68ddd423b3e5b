"""Limiting geometric structure: weighted squared-distance potentials.

As the heat-flow time goes to zero, the rescaled potential of
:mod:`scoremix.heat` converges to

    phi(x) = lam * d1(x)^2 + (1 - lam) * d2(x)^2,

where d_i is the distance to the i-th support.  This module evaluates phi,
its nondifferentiability locus (points with tied nearest neighbors), its
generalized gradients, and enumerates its critical points stratum by
stratum.  On each stratum both squared distances restrict to quadratics
with Hessian exactly 2I, so every stratum carries at most one critical
point and the enumeration is finite.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .heat import MixedScoreModel
from .measures import squared_distances

# Tie window on squared distances used to decide nearest-set uniqueness.
ACTIVE_TOL_SQ = 1e-9
# Convergence tolerance (duality gap) of the min-norm solver.
MIN_NORM_TOL = 1e-10
MIN_NORM_MAX_ITER = 100_000
# A stratum point is critical when the hull's min-norm element is below this.
RESIDUAL_TOL = 1e-8
# Critical points closer than this are merged.
DEDUP_RADIUS = 1e-6
# Radius of the sphere probed to tell local minimizers from saddles.
PROBE_RADIUS = 1e-3
# Widened tie window used to read stratum keys off descent endpoints.
SNAP_TOL_SQ = 1e-4
# Guards against combinatorial blowups on large supports.
PAIR_BUDGET = 250_000
KEY_BUDGET = 20_000

CLASS_SMOOTH = "smooth_local_min"
CLASS_INTERFACE = "interface_point"
CLASS_SADDLE = "saddle_candidate"


@dataclass(frozen=True)
class NDIndicator:
    """Which of the two nearest-point maps is non-unique at a query."""

    in_nd1: bool
    in_nd2: bool

    @property
    def in_nd(self) -> bool:
        return self.in_nd1 or self.in_nd2


@dataclass(frozen=True)
class SubgradientSet:
    """Generators of a generalized gradient hull at one point.

    The set represented is the convex hull of the rows of `generators`,
    one row per active support pair (k, l):

        g_{kl} = 2 lam (x - x_k) + 2 (1 - lam) (y - y_l).

    For lam in [0, 1] this hull is the Clarke subdifferential of phi; for
    lam > 1 it is the outer estimate lam D(d1^2) + (1 - lam) D(d2^2),
    which coincides with the Clarke set away from simultaneous ties.
    """

    x: np.ndarray
    lam: float
    generators: np.ndarray
    active1: tuple[int, ...]
    active2: tuple[int, ...]
    kind: str

    @property
    def is_singleton(self) -> bool:
        return self.generators.shape[0] == 1


@dataclass(frozen=True)
class CriticalPointRecord:
    """One certified critical point of phi."""

    x_star: np.ndarray
    active1: tuple[int, ...]
    active2: tuple[int, ...]
    classification: str
    phi_value: float
    residual: float

    def to_dict(self) -> dict:
        return {
            "x_star": [float(v) for v in self.x_star],
            "active1": list(self.active1),
            "active2": list(self.active2),
            "classification": self.classification,
            "phi_value": float(self.phi_value),
            "residual": float(self.residual),
        }


def phi(model: MixedScoreModel, x):
    """Weighted squared-distance potential lam d1^2 + (1 - lam) d2^2."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    d1 = squared_distances(model.mu1.points, X).min(axis=1)
    d2 = squared_distances(model.mu2.points, X).min(axis=1)
    out = model.lam * d1 + (1.0 - model.lam) * d2
    return float(out[0]) if single else out


def _active_indices(points: np.ndarray, x: np.ndarray, tol_sq: float):
    d2 = squared_distances(points, x)
    dmin = d2.min()
    return tuple(int(i) for i in np.flatnonzero(d2 <= dmin + tol_sq)), float(dmin)


def active_sets(model: MixedScoreModel, x, tol_sq: float = ACTIVE_TOL_SQ):
    """Nearest index sets of both supports at x, with a squared-distance tie window."""
    x = np.asarray(x, dtype=float)
    I, _ = _active_indices(model.mu1.points, x, tol_sq)
    J, _ = _active_indices(model.mu2.points, x, tol_sq)
    return I, J


def nd_indicator(model: MixedScoreModel, x, tie_tol: float = ACTIVE_TOL_SQ) -> NDIndicator:
    """Flag nearest-set non-uniqueness for each support at x."""
    I, J = active_sets(model, x, tie_tol)
    return NDIndicator(in_nd1=len(I) > 1, in_nd2=len(J) > 1)


def _pair_generators(model: MixedScoreModel, x: np.ndarray, I, J) -> np.ndarray:
    gens = np.empty((len(I) * len(J), model.dim))
    lam2 = 2.0 * model.lam
    com2 = 2.0 * (1.0 - model.lam)
    for r, (k, l) in enumerate(itertools.product(I, J)):
        gens[r] = lam2 * (x - model.mu1.points[k]) + com2 * (x - model.mu2.points[l])
    return gens


def clarke_subdifferential(
    model: MixedScoreModel, x, kind: str = "clarke", tie_tol: float = ACTIVE_TOL_SQ
) -> SubgradientSet:
    """Generalized gradient generators of phi at x.

    kind="clarke" asks for the genuine Clarke subdifferential and is
    refused for lam > 1 at simultaneous ties of both supports, where only
    the outer sum rule estimate is available; kind="outer_clarke" always
    succeeds.  The outer path assembles per-support generators first and
    combines them, the Clarke path uses the joint active-pair formula;
    away from the refused case the two agree generator for generator.
    """
    if kind not in ("clarke", "outer_clarke"):
        raise ValueError(f"unknown subdifferential kind {kind!r}")
    x = np.asarray(x, dtype=float)
    I, J = active_sets(model, x, tie_tol)
    if kind == "clarke":
        if model.lam > 1.0 and len(I) > 1 and len(J) > 1:
            raise ValueError(
                "Clarke subdifferential is not available for lam > 1 at a "
                "simultaneous tie of both supports; request kind='outer_clarke'"
            )
        gens = _pair_generators(model, x, I, J)
    else:
        g1 = 2.0 * (x[None, :] - model.mu1.points[list(I)])
        g2 = 2.0 * (x[None, :] - model.mu2.points[list(J)])
        gens = np.empty((len(I) * len(J), model.dim))
        for r, (a, b) in enumerate(itertools.product(range(len(I)), range(len(J)))):
            gens[r] = model.lam * g1[a] + (1.0 - model.lam) * g2[b]
    return SubgradientSet(x=x, lam=model.lam, generators=gens, active1=I, active2=J, kind=kind)


def _min_norm_two(G: np.ndarray) -> np.ndarray:
    d = G[1] - G[0]
    denom = float(d @ d)
    if denom == 0.0:
        return G[0].copy()
    s = min(1.0, max(0.0, -float(G[0] @ d) / denom))
    return G[0] + s * d


def _simplex_kkt(G: np.ndarray):
    """Equality-constrained minimizer of |G^T theta|^2 over sum(theta)=1."""
    m = G.shape[0]
    gram = G @ G.T
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = 2.0 * gram
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:m]


def _min_norm_three(G: np.ndarray) -> np.ndarray:
    best = None
    for i in range(3):
        v = G[i]
        n = float(v @ v)
        if best is None or n < best[0]:
            best = (n, v.copy())
    for i, j in ((0, 1), (0, 2), (1, 2)):
        v = _min_norm_two(G[[i, j]])
        n = float(v @ v)
        if n < best[0]:
            best = (n, v)
    theta = _simplex_kkt(G)
    if np.all(theta >= -1e-12):
        theta = np.clip(theta, 0.0, None)
        theta = theta / theta.sum()
        v = G.T @ theta
        n = float(v @ v)
        if n < best[0]:
            best = (n, v)
    return best[1]


def _min_norm_fw(G: np.ndarray) -> np.ndarray:
    """Pairwise Frank-Wolfe on the simplex, with an active-face polish."""
    m = G.shape[0]
    theta = np.zeros(m)
    theta[int(np.argmin((G**2).sum(axis=1)))] = 1.0
    v = G.T @ theta
    converged = False
    for _ in range(MIN_NORM_MAX_ITER):
        grads = G @ v
        i = int(np.argmin(grads))
        gap = 2.0 * (float(v @ v) - float(grads[i]))
        if gap <= MIN_NORM_TOL:
            converged = True
            break
        support = np.flatnonzero(theta > 0.0)
        j = int(support[np.argmax(grads[support])])
        d = G[i] - G[j]
        denom = float(d @ d)
        if denom <= 0.0:
            converged = True
            break
        gamma = min(theta[j], max(0.0, -float(v @ d) / denom))
        if gamma == 0.0:
            converged = True
            break
        theta[i] += gamma
        theta[j] -= gamma
        v = v + gamma * d
    if not converged:
        raise RuntimeError("min-norm solver did not converge within 100000 iterations")
    support = np.flatnonzero(theta > 1e-14)
    if support.size > 1:
        sub = _simplex_kkt(G[support])
        if np.all(sub >= -1e-12):
            sub = np.clip(sub, 0.0, None)
            sub = sub / sub.sum()
            cand = G[support].T @ sub
            if float(cand @ cand) <= float(v @ v):
                v = cand
    return v


def min_norm_element(subgradient) -> np.ndarray:
    """Minimum-norm point of the convex hull of the generators.

    Accepts a SubgradientSet or a raw (m, d) generator array.  Up to three
    generators are handled by exact face enumeration, more by pairwise
    Frank-Wolfe with tolerance MIN_NORM_TOL.
    """
    G = subgradient.generators if isinstance(subgradient, SubgradientSet) else subgradient
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("generator array must be nonempty with shape (m, d)")
    if G.shape[0] == 1:
        return G[0].copy()
    if G.shape[0] == 2:
        return _min_norm_two(G)
    if G.shape[0] == 3:
        return _min_norm_three(G)
    return _min_norm_fw(G)


def grad_phi_smooth(model: MixedScoreModel, x, tie_tol: float = ACTIVE_TOL_SQ) -> np.ndarray:
    """Gradient 2 (x - lam a1 - (1 - lam) a2) where phi is differentiable.

    Raises at points whose relevant nearest set is tied.  At the endpoints
    lam in {0, 1} only the active support's uniqueness matters; the other
    enters with coefficient zero.
    """
    x = np.asarray(x, dtype=float)
    I, J = active_sets(model, x, tie_tol)
    if model.lam != 0.0 and len(I) > 1:
        raise ValueError(f"phi is nonsmooth at x={x!r}: tied nearest set {I} in dataset 1")
    if model.lam != 1.0 and len(J) > 1:
        raise ValueError(f"phi is nonsmooth at x={x!r}: tied nearest set {J} in dataset 2")
    a1 = model.mu1.points[I[0]]
    a2 = model.mu2.points[J[0]]
    return 2.0 * (x - model.lam * a1 - (1.0 - model.lam) * a2)


# ---------------------------------------------------------------------------
# critical-point enumeration


def _tie_rows(points: np.ndarray, idx) -> tuple[np.ndarray, np.ndarray]:
    """Affine constraints pinning equal squared distance to points[idx]."""
    base = points[idx[0]]
    rows, rhs = [], []
    for i in idx[1:]:
        p = points[i]
        rows.append(2.0 * (base - p))
        rhs.append(float(base @ base - p @ p))
    return np.array(rows), np.array(rhs)


def _stratum_point(model: MixedScoreModel, I, J):
    """Unique critical point of the stratum quadratic on the tie manifold.

    Returns None when the tie constraints are infeasible.  On the affine
    manifold M the branch quadratic is |x - c|^2 + const with
    c = lam x_{I0} + (1 - lam) y_{J0}, so the restricted critical point is
    the projection of c onto M.
    """
    d = model.dim
    c = model.lam * model.mu1.points[I[0]] + (1.0 - model.lam) * model.mu2.points[J[0]]
    rows, rhs = [], []
    for pts, idx in ((model.mu1.points, I), (model.mu2.points, J)):
        if len(idx) > 1:
            a, b = _tie_rows(pts, idx)
            rows.append(a)
            rhs.append(b)
    if not rows:
        return c
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    x0, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.max(np.abs(A @ x0 - b)) > 1e-9 * max(1.0, np.abs(b).max()):
        return None
    _, s, vt = np.linalg.svd(A)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    if rank >= d:
        return x0
    N = vt[rank:].T
    return x0 + N @ (N.T @ (c - x0))


def _tangent_projector(model: MixedScoreModel, I, J) -> np.ndarray:
    """Orthogonal projector onto the tie manifold's direction space."""
    d = model.dim
    rows = []
    for pts, idx in ((model.mu1.points, I), (model.mu2.points, J)):
        if len(idx) > 1:
            a, _ = _tie_rows(pts, idx)
            rows.append(a)
    if not rows:
        return np.eye(d)
    A = np.vstack(rows)
    _, s, vt = np.linalg.svd(A)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    if rank >= d:
        return np.zeros((d, d))
    N = vt[rank:].T
    return N @ N.T


def _probe_directions(model: MixedScoreModel, x: np.ndarray, I, J) -> np.ndarray:
    d = model.dim
    dirs = [np.eye(d), -np.eye(d)]
    for pts, idx in ((model.mu1.points, I), (model.mu2.points, J)):
        for i in idx:
            v = x - pts[i]
            nrm = np.linalg.norm(v)
            if nrm > 1e-12:
                dirs.append((v / nrm)[None, :])
                dirs.append((-v / nrm)[None, :])
    rng = np.random.Generator(np.random.Philox(key=12345))
    extra = rng.standard_normal((2 * d + 8, d))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    dirs.append(extra)
    return np.vstack(dirs)


def _classify(model: MixedScoreModel, x: np.ndarray, I, J, phi_x: float) -> str:
    smooth1 = len(I) == 1 or model.lam == 0.0
    smooth2 = len(J) == 1 or model.lam == 1.0
    if smooth1 and smooth2:
        return CLASS_SMOOTH
    dirs = _probe_directions(model, x, I, J)
    vals = phi(model, x[None, :] + PROBE_RADIUS * dirs)
    if vals.min() < phi_x - 1e-11 * (1.0 + abs(phi_x)):
        return CLASS_SADDLE
    return CLASS_INTERFACE


def _candidate_keys(model: MixedScoreModel, max_active: int, box, grid_n: int):
    """Stratum keys to test: full enumeration when small, probing otherwise."""
    n1, n2 = model.mu1.n, model.mu2.n
    m1 = min(max_active, n1)
    m2 = min(max_active, n2)

    def n_subsets(n, m):
        total = 0
        c = 1
        for i in range(1, m + 1):
            c = c * (n - i + 1) // i
            total += c
        return total

    if n_subsets(n1, m1) * n_subsets(n2, m2) <= KEY_BUDGET:
        subs1 = [c for r in range(1, m1 + 1) for c in itertools.combinations(range(n1), r)]
        subs2 = [c for r in range(1, m2 + 1) for c in itertools.combinations(range(n2), r)]
        return [(I, J) for I in subs1 for J in subs2]

    if n1 * n2 > PAIR_BUDGET:
        raise ValueError("support pair count exceeds the enumeration budget")
    keys = {((k,), (l,)) for k in range(n1) for l in range(n2)}
    if grid_n >= 2 and model.dim <= 3:
        lo, hi = box
        h = float(np.max((hi - lo) / (grid_n - 1)))
        axes = [np.linspace(lo[i], hi[i], grid_n) for i in range(model.dim)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dim)
        for x in mesh:
            groups = []
            for pts in (model.mu1.points, model.mu2.points):
                d2 = squared_distances(pts, x)
                dmin = d2.min()
                window = 2.0 * np.sqrt(dmin) * h + h * h
                near = np.flatnonzero(d2 <= dmin + window)
                if near.size > max_active + 2:
                    near = near[np.argsort(d2[near])][: max_active + 2]
                groups.append(near)
            for r1 in range(1, min(m1, groups[0].size) + 1):
                for I in itertools.combinations(sorted(int(i) for i in groups[0]), r1):
                    for r2 in range(1, min(m2, groups[1].size) + 1):
                        for Jc in itertools.combinations(sorted(int(j) for j in groups[1]), r2):
                            keys.add((I, Jc))
            if len(keys) > 5 * KEY_BUDGET:
                break
    return sorted(keys)


def _default_box(model: MixedScoreModel):
    pts = [model.mu1.points, model.mu2.points]
    combos = (
        model.lam * model.mu1.points[:, None, :]
        + (1.0 - model.lam) * model.mu2.points[None, :, :]
    ).reshape(-1, model.dim)
    allpts = np.vstack(pts + [combos])
    return allpts.min(axis=0) - 0.5, allpts.max(axis=0) + 0.5


def _certify(model: MixedScoreModel, I, J, priority: int):
    """Solve the stratum, verify membership and criticality, classify."""
    x = _stratum_point(model, I, J)
    if x is None or not np.all(np.isfinite(x)):
        return None
    I_obs, J_obs = active_sets(model, x)
    need_I = model.lam != 0.0
    need_J = model.lam != 1.0
    if need_I and set(I_obs) != set(I):
        return None
    if need_J and set(J_obs) != set(J):
        return None
    if not need_I:
        I_obs = I if set(I) <= set(I_obs) else I_obs
    if not need_J:
        J_obs = J if set(J) <= set(J_obs) else J_obs
    gens = _pair_generators(model, x, I_obs, J_obs)
    residual = float(np.linalg.norm(min_norm_element(gens)))
    if residual > RESIDUAL_TOL:
        return None
    phi_x = phi(model, x)
    cls = _classify(model, x, I_obs, J_obs, phi_x)
    rec = CriticalPointRecord(
        x_star=x,
        active1=tuple(sorted(I_obs)),
        active2=tuple(sorted(J_obs)),
        classification=cls,
        phi_value=phi_x,
        residual=residual,
    )
    return priority, rec


def _descent_keys(model: MixedScoreModel, box, grid_n: int):
    """Stratum keys suggested by multi-start descent of the limit flow."""
    from .dynamics import IntegratorConfig, simulate_limit_inclusion

    lo, hi = box
    axes = [np.linspace(lo[i], hi[i], grid_n) for i in range(model.dim)]
    starts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dim)
    cfg = IntegratorConfig(dtau=2e-2, tau_max=30.0)
    terminals = []
    for z0 in starts:
        traj = simulate_limit_inclusion(model, z0, cfg)
        terminals.append(traj.states[-1])
    clusters: list[np.ndarray] = []
    for z in terminals:
        if not any(np.linalg.norm(z - c) < 1e-3 for c in clusters):
            clusters.append(z)
    keys = set()
    for c in clusters:
        I, J = active_sets(model, c, SNAP_TOL_SQ)
        keys.add((tuple(sorted(I)), tuple(sorted(J))))
    return sorted(keys)


def enumerate_critical_points(
    model: MixedScoreModel,
    max_active: int | None = None,
    search_box=None,
    grid_n: int = 8,
) -> list[CriticalPointRecord]:
    """All critical points of phi found by exact stratum solves plus descent.

    Two passes.  The exact pass tests every stratum key (I, J) with
    |I|, |J| <= max_active: ties define an affine manifold, the branch
    quadratic is projected onto it, and the candidate is kept when its
    nearest sets realize the key and the generator hull contains zero
    within RESIDUAL_TOL.  The descent pass runs the limiting flow from a
    grid of starts and feeds the stratum keys seen at the endpoints back
    through the same certification, which guards against keys missed by
    probing on large supports.  Records are deduplicated within
    DEDUP_RADIUS, preferring the exact pass, and ordered by potential
    value then coordinates.

    grid_n=0 disables the descent/probing passes (the only mode available
    above dimension 3, where grids are refused).
    """
    if max_active is None:
        max_active = min(model.dim + 1, max(model.mu1.n, model.mu2.n))
    if max_active < 1:
        raise ValueError("max_active must be >= 1")
    if grid_n == 1 or grid_n < 0:
        raise ValueError("grid_n must be 0 (disabled) or >= 2")
    if grid_n >= 2 and model.dim > 3:
        raise ValueError("grid-based passes are limited to dimension <= 3; pass grid_n=0")
    if model.mu1.n * model.mu2.n > PAIR_BUDGET:
        raise ValueError("support pair count exceeds the enumeration budget")

    if search_box is None:
        box = _default_box(model)
    else:
        lo = np.asarray(search_box[0], dtype=float)
        hi = np.asarray(search_box[1], dtype=float)
        if lo.shape != (model.dim,) or hi.shape != (model.dim,) or np.any(lo >= hi):
            raise ValueError("search_box must be a (lo, hi) pair of d-vectors with lo < hi")
        box = (lo, hi)

    found: list[tuple[int, CriticalPointRecord]] = []
    for I, J in _candidate_keys(model, max_active, box, grid_n if grid_n else 0):
        out = _certify(model, I, J, priority=0)
        if out is not None:
            found.append(out)
    if grid_n >= 2:
        for I, J in _descent_keys(model, box, grid_n):
            out = _certify(model, I, J, priority=1)
            if out is not None:
                found.append(out)

    found.sort(key=lambda pr: (pr[0], pr[1].phi_value, tuple(pr[1].x_star)))
    kept: list[CriticalPointRecord] = []
    for _, rec in found:
        if not any(np.linalg.norm(rec.x_star - k.x_star) <= DEDUP_RADIUS for k in kept):
            kept.append(rec)
    kept.sort(key=lambda r: (r.phi_value, tuple(r.x_star)))
    return kept


def local_minimizers(records) -> list[CriticalPointRecord]:
    """Filter records classified as minimizers (smooth or interface)."""
    return [r for r in records if r.classification in (CLASS_SMOOTH, CLASS_INTERFACE)]
