"""Transport costs between histograms.

The three data-fidelity backends of the toolkit live here:

* ``mk_exact``      -- the exact Monge-Kantorovich linear program, solved by a
                       dense transportation simplex (northwest-corner start,
                       dual/MODI pivoting).
* ``sinkhorn``      -- entropy-regularized transport with weight 1/lambda,
                       solved by alternate row/column scaling, automatically
                       switching to a log-domain implementation when the
                       kernel e^{-lambda*C} would lose precision.
* ``build_cost_matrix`` and the implicit marginal operator ``L`` shared by
  the dual formulations.

Histograms are plain nonnegative 1-d arrays; total mass is whatever the
caller supplies (masses are *not* normalized here, only required to agree
between the two sides of a transport problem, within EPS_MASS relative
tolerance).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, MassMismatch, NotConverged, NumericalUnderflow

__all__ = [
    "EPS_MASS",
    "Histogram",
    "CostMatrix",
    "TransportPlan",
    "DualPotentials",
    "build_cost_matrix",
    "apply_L",
    "apply_L_transpose",
    "mk_exact",
    "sinkhorn",
    "entropic_cost",
    "SinkhornResult",
]

# Relative tolerance on "equal total mass" (relative to the larger mass).
EPS_MASS = 1e-9

# Soft size cap for the dense exact LP; beyond this the quadratic memory and
# the simplex pivot count are no longer desk-scale.
MK_MAX_BINS = 4096

# Above lambda * max(C) = 30 the plain kernel spans > e^30 dynamic range and
# the scaling iteration starts eating precision; switch to log domain.
LOG_DOMAIN_THRESHOLD = 30.0


@dataclass(frozen=True)
class Histogram:
    """Nonnegative bin masses. ``total`` is always recomputed."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError(f"histogram must be 1-d, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("histogram entries must be finite")
        if np.any(v < 0):
            raise ValueError("histogram entries must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class CostMatrix:
    """Ground costs between source and destination bins."""

    entries: np.ndarray
    kind: str = "custom"
    param: float | None = None
    normalized: bool = False

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 2:
            raise ValueError(f"cost matrix must be 2-d, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("cost entries must be finite")
        if np.any(e < 0):
            raise ValueError("cost entries must be nonnegative")
        object.__setattr__(self, "entries", e)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative coupling whose marginals are the two histograms."""

    entries: np.ndarray

    @property
    def source_marginal(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    @property
    def target_marginal(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    @property
    def total_mass(self) -> float:
        return float(self.entries.sum())


@dataclass(frozen=True)
class DualPotentials:
    beta_src: np.ndarray
    beta_dst: np.ndarray


def _as_hist(a) -> np.ndarray:
    if isinstance(a, Histogram):
        return a.values
    a = np.asarray(a, dtype=float)
    if a.ndim != 1:
        raise ValueError(f"histogram must be 1-d, got shape {a.shape}")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise DomainError("histogram entries must be finite and nonnegative")
    return a


def _as_cost(C) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.entries
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {C.shape}")
    return C


def _check_masses(a: np.ndarray, b: np.ndarray) -> float:
    ma, mb = float(a.sum()), float(b.sum())
    tol = EPS_MASS * max(ma, mb, 1e-300)
    if abs(ma - mb) > tol:
        raise MassMismatch(ma, mb, tol)
    return 0.5 * (ma + mb)


def build_cost_matrix(src_centroids, dst_centroids, kind: str = "euclidean_p",
                      *, p: float = 1.0, gamma: float | None = None,
                      normalize: bool = False) -> CostMatrix:
    """Pairwise ground costs between two centroid lists.

    kind="euclidean_p": entries[i,j] = ||src_i - dst_j||^p  (p > 0).
    kind="exp_concave": entries[i,j] = 1 - exp(-gamma * ||src_i - dst_j||),
    a concave, bounded transform of the distance (gamma > 0).

    With ``normalize`` the matrix is scaled so its maximum entry is exactly
    1, which makes the entropic parameter lambda scale-free across feature
    spaces; the segmentation models turn this on.  An all-zero matrix is
    left untouched.
    """
    src = np.atleast_2d(np.asarray(src_centroids, dtype=float))
    dst = np.atleast_2d(np.asarray(dst_centroids, dtype=float))
    if src.size == 0 or dst.size == 0:
        raise ValueError("centroid lists must be non-empty")
    if src.shape[1] != dst.shape[1]:
        raise ValueError(
            f"feature dimensions differ: {src.shape[1]} vs {dst.shape[1]}")
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(np.maximum(d2, 0.0))
    if kind in ("euclidean_p", "euclidean"):
        if p <= 0:
            raise ValueError(f"power p must be > 0, got {p}")
        entries = dist if p == 1.0 else dist ** p
        param = p
        kind = "euclidean_p"
    elif kind == "exp_concave":
        if gamma is None or gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {gamma}")
        entries = -np.expm1(-gamma * dist)
        param = gamma
    else:
        raise ValueError(f"unknown cost kind {kind!r}")
    top = entries.max() if entries.size else 0.0
    if normalize and top > 0:
        entries = entries / top
    return CostMatrix(entries=entries, kind=kind, param=param,
                      normalized=bool(normalize))


def apply_L(beta_src, beta_dst) -> np.ndarray:
    """(L beta)_{ij} = beta_src[i] + beta_dst[j], matrix-free in L."""
    bs = np.asarray(beta_src, dtype=float)
    bd = np.asarray(beta_dst, dtype=float)
    return bs[:, None] + bd[None, :]


def apply_L_transpose(plan) -> tuple[np.ndarray, np.ndarray]:
    """Row and column sums of the plan (the two marginals of L^T)."""
    P = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    if P.ndim != 2:
        raise ValueError(f"plan must be 2-d, got shape {P.shape}")
    return P.sum(axis=1), P.sum(axis=0)


# ---------------------------------------------------------------------------
# Exact LP: dense transportation simplex
# ---------------------------------------------------------------------------

def _northwest_corner(a: np.ndarray, b: np.ndarray):
    """Initial basic feasible solution with exactly m+n-1 basic cells."""
    m, n = len(a), len(b)
    ar = a.copy()
    bc = b.copy()
    rows = np.empty(m + n - 1, dtype=np.int64)
    cols = np.empty(m + n - 1, dtype=np.int64)
    vals = np.empty(m + n - 1, dtype=float)
    i = j = k = 0
    while True:
        t = min(ar[i], bc[j])
        rows[k] = i
        cols[k] = j
        vals[k] = t
        k += 1
        ar[i] -= t
        bc[j] -= t
        if i == m - 1 and j == n - 1:
            break
        if i < m - 1 and (ar[i] <= 0.0 or j == n - 1):
            i += 1
        else:
            j += 1
    return rows[:k], cols[:k], vals[:k]


def _tree_duals(m, n, rows, cols, C):
    """Potentials u, v with u_i + v_j = c_ij on the basis tree."""
    by_row = [[] for _ in range(m)]
    by_col = [[] for _ in range(n)]
    for k in range(len(rows)):
        by_row[rows[k]].append(k)
        by_col[cols[k]].append(k)
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    stack = [(True, 0)]
    while stack:
        is_row, idx = stack.pop()
        if is_row:
            for k in by_row[idx]:
                j = cols[k]
                if np.isnan(v[j]):
                    v[j] = C[idx, j] - u[idx]
                    stack.append((False, j))
        else:
            for k in by_col[idx]:
                i = rows[k]
                if np.isnan(u[i]):
                    u[i] = C[i, idx] - v[idx]
                    stack.append((True, i))
    return u, v, by_row, by_col


def _basis_cycle(m, rows, cols, by_row, by_col, i_in, j_in):
    """Indices of basic cells on the tree path from row i_in to col j_in.

    The path alternates row/col nodes; returned cells at even positions
    lose mass when the entering cell gains.
    """
    # BFS over the bipartite tree; nodes: 0..m-1 rows, m..m+n-1 cols
    parent_arc = {}
    start = i_in
    goal = m + j_in
    frontier = [start]
    seen = {start}
    while frontier:
        nxt = []
        for node in frontier:
            if node < m:
                arcs = by_row[node]
            else:
                arcs = by_col[node - m]
            for k in arcs:
                other = (m + cols[k]) if node < m else rows[k]
                if other in seen:
                    continue
                seen.add(other)
                parent_arc[other] = (k, node)
                if other == goal:
                    path = []
                    cur = goal
                    while cur != start:
                        k0, prev = parent_arc[cur]
                        path.append(k0)
                        cur = prev
                    path.reverse()
                    return path
                nxt.append(other)
        frontier = nxt
    raise AssertionError("basis lost connectivity (internal error)")


def _transport_simplex(a, b, C):
    """Optimal plan for the balanced transportation problem.

    Dantzig (most-negative reduced cost) pivoting with deterministic
    tie-breaking; falls back to Bland's rule if an unusually long run of
    pivots suggests degenerate cycling.  Exact on integer inputs: every
    pivot keeps plan entries integral.
    """
    m, n = C.shape
    rows, cols, vals = _northwest_corner(a, b)
    rtol = 1e-10 * max(1.0, float(np.abs(C).max()))
    dantzig_budget = 25 * (m + n) * max(m, n) + 1000
    hard_budget = dantzig_budget + 200 * m * n + 10000
    pivots = 0
    while True:
        u, v, by_row, by_col = _tree_duals(m, n, rows, cols, C)
        red = C - u[:, None] - v[None, :]
        red[rows, cols] = 0.0
        if pivots < dantzig_budget:
            flat = np.argmin(red)
            if red.flat[flat] >= -rtol:
                break
        else:
            negs = np.flatnonzero(red.ravel() < -rtol)
            if len(negs) == 0:
                break
            flat = negs[0]  # Bland: lowest index
        if pivots >= hard_budget:
            raise NotConverged("transportation simplex stalled",
                               float(-red.flat[flat]), pivots)
        i_in, j_in = divmod(int(flat), n)
        path = _basis_cycle(m, rows, cols, by_row, by_col, i_in, j_in)
        minus = path[0::2]
        theta_idx = min(minus, key=lambda k: (vals[k], rows[k] * n + cols[k]))
        theta = vals[theta_idx]
        vals[minus] -= theta
        plus = path[1::2]
        vals[plus] += theta
        rows[theta_idx] = i_in
        cols[theta_idx] = j_in
        vals[theta_idx] = theta
        pivots += 1
    plan = np.zeros((m, n))
    plan[rows, cols] = vals
    return plan, u, v


def mk_exact(a, b, cost) -> tuple[float, np.ndarray]:
    """Exact Monge-Kantorovich cost and one optimal plan.

    Requires equal total masses (relative tolerance EPS_MASS).  Dense
    formulation; refuses instances beyond MK_MAX_BINS bins per side.
    Also serves as the lambda = infinity reference for the entropic
    routines.

    Returns (cost, plan) with plan of shape (len(a), len(b)).
    """
    a = _as_hist(a)
    b = _as_hist(b)
    C = _as_cost(cost)
    if C.shape != (len(a), len(b)):
        raise ValueError(
            f"cost shape {C.shape} does not match histograms ({len(a)}, {len(b)})")
    if max(len(a), len(b)) > MK_MAX_BINS:
        raise ValueError(
            f"dense exact LP capped at {MK_MAX_BINS} bins per side, "
            f"got {C.shape}; use the entropic route for larger instances")
    _check_masses(a, b)
    ia = np.flatnonzero(a > 0)
    jb = np.flatnonzero(b > 0)
    plan = np.zeros((len(a), len(b)))
    if len(ia) == 0 or len(jb) == 0:
        return 0.0, plan
    sub, _, _ = _transport_simplex(a[ia], b[jb], C[np.ix_(ia, jb)])
    plan[np.ix_(ia, jb)] = sub
    return float((plan * C).sum()), plan


# ---------------------------------------------------------------------------
# Sinkhorn scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SinkhornResult:
    reg_cost: float
    transport_cost: float
    plan: np.ndarray
    iterations: int
    residual: float
    potentials: DualPotentials = field(repr=False, default=None)


def _logsumexp(A: np.ndarray, axis: int) -> np.ndarray:
    m = A.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(A - m).sum(axis=axis)) + np.squeeze(m, axis=axis)
    return out


def _plan_entropy(P: np.ndarray) -> float:
    """h(P) = -<P, log P> with the h(0)=0 convention."""
    pos = P > 0
    return float(-(P[pos] * np.log(P[pos])).sum())


def sinkhorn(a, b, cost, lam: float, *, tol: float | None = None,
             max_iter: int = 10000, mode: str = "auto") -> SinkhornResult:
    """Entropy-regularized transport by alternate marginal scaling.

    Solves min_{P in U(a,b)} <P,C> - h(P)/lam, h(P) = -<P, log P>.
    Zero bins are dropped up front and restored as zero rows/columns of the
    plan.  Stops when the l1 marginal residual ||P1-a||_1 + ||P^T 1-b||_1
    drops below ``tol`` (default 1e-9 * total mass).

    mode:
        "auto"  -- plain scaling while lam*max(C) <= 30, log-domain beyond;
        "plain" -- forced kernel scaling (raises NumericalUnderflow if the
                   kernel e^{-lam C} underflows a whole row/column);
        "log"   -- forced log-domain updates (slower, unconditionally safe).

    Raises NotConverged (carrying the final residual) when max_iter is hit.
    """
    a = _as_hist(a)
    b = _as_hist(b)
    C = _as_cost(cost)
    if C.shape != (len(a), len(b)):
        raise ValueError(
            f"cost shape {C.shape} does not match histograms ({len(a)}, {len(b)})")
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be finite and > 0, got {lam}")
    if mode not in ("auto", "plain", "log"):
        raise ValueError(f"unknown mode {mode!r}")
    mass = _check_masses(a, b)
    ia = np.flatnonzero(a > 0)
    jb = np.flatnonzero(b > 0)
    full_plan = np.zeros((len(a), len(b)))
    pot = DualPotentials(np.zeros(len(a)), np.zeros(len(b)))
    if len(ia) == 0 or len(jb) == 0:
        return SinkhornResult(0.0, 0.0, full_plan, 0, 0.0, pot)
    asub, bsub, Csub = a[ia], b[jb], C[np.ix_(ia, jb)]
    if tol is None:
        tol = 1e-9 * mass
    use_log = (mode == "log") or (mode == "auto" and lam * Csub.max() > LOG_DOMAIN_THRESHOLD)

    if use_log:
        P, f, g, iters, res = _sinkhorn_log(asub, bsub, Csub, lam, tol, max_iter)
        phi = np.full(len(a), -np.inf)
        psi = np.full(len(b), -np.inf)
        phi[ia], psi[jb] = f, g
    else:
        P, x, y, iters, res = _sinkhorn_plain(asub, bsub, Csub, lam, tol, max_iter)
        with np.errstate(divide="ignore"):
            phi = np.full(len(a), -np.inf)
            psi = np.full(len(b), -np.inf)
            phi[ia], psi[jb] = np.log(x), np.log(y)
    if res > tol:
        raise NotConverged("sinkhorn did not reach the marginal tolerance",
                           res, iters)
    full_plan[np.ix_(ia, jb)] = P
    transport_cost = float((P * Csub).sum())
    reg_cost = transport_cost - _plan_entropy(P) / lam
    return SinkhornResult(reg_cost, transport_cost, full_plan, iters, res,
                          DualPotentials(phi, psi))


def _sinkhorn_plain(a, b, C, lam, tol, max_iter):
    K = np.exp(-lam * C)
    if np.any(K.sum(axis=1) == 0.0) or np.any(K.sum(axis=0) == 0.0):
        raise NumericalUnderflow(
            "kernel exp(-lambda*C) underflowed an entire row or column; "
            "use the log-domain mode")
    x = np.ones_like(a)
    y = np.ones_like(b)
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Ky = K @ y
        if np.any(Ky == 0.0):
            raise NumericalUnderflow(
                "scaling underflow in plain-domain sinkhorn; use log-domain mode")
        x = a / Ky
        Ktx = K.T @ x
        if np.any(Ktx == 0.0):
            raise NumericalUnderflow(
                "scaling underflow in plain-domain sinkhorn; use log-domain mode")
        y = b / Ktx
        # columns are exact right after the y-update; rows carry the error
        row = x * (K @ y)
        res = float(np.abs(row - a).sum())
        if res <= tol:
            break
    P = x[:, None] * K * y[None, :]
    return P, x, y, it, res


def _sinkhorn_log(a, b, C, lam, tol, max_iter):
    loga = np.log(a)
    logb = np.log(b)
    G = -lam * C
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = loga - _logsumexp(G + g[None, :], axis=1)
        g = logb - _logsumexp(G + f[:, None], axis=0)
        row = np.exp(f + _logsumexp(G + g[None, :], axis=1))
        res = float(np.abs(row - a).sum())
        if res <= tol:
            break
    P = np.exp(f[:, None] + g[None, :] + G)
    return P, f, g, it, res


def _dual_value(phi, psi, a, b, G):
    # D(phi,psi) = <phi,a> + <psi,b> - sum exp(phi_i + psi_j + G_ij), G=-lam*C.
    # Overflow deliberately propagates to -inf so a line search rejects it.
    with np.errstate(over="ignore"):
        total = np.exp(phi[:, None] + psi[None, :] + G).sum()
    return float(phi @ a + psi @ b - total)


def _newton_refine(phi, psi, a, b, G, tol, max_iter):
    """Damped Newton ascent on the entropic dual, gauge fixed at psi[-1].

    The dual is smooth and strictly concave modulo the constant shift
    (phi+c, psi-c), so Newton steps are affine invariant: the kernel
    conditioning that stalls plain scaling does not slow this down.
    """
    m, n = len(a), len(b)
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore"):
            P = np.exp(phi[:, None] + psi[None, :] + G)
        if not np.all(np.isfinite(P)):
            break
        r = P.sum(axis=1)
        c = P.sum(axis=0)
        res = float(np.abs(r - a).sum() + np.abs(c - b).sum())
        if res <= tol:
            break
        grad = np.concatenate([a - r, (b - c)[:-1]])
        H = np.zeros((m + n - 1, m + n - 1))
        H[:m, :m] = np.diag(r)
        H[m:, m:] = np.diag(c[:-1])
        H[:m, m:] = P[:, :-1]
        H[m:, :m] = P[:, :-1].T
        ridge = 1e-12 * max(float(r.max()), float(c.max()), 1.0)
        H[np.diag_indices_from(H)] += ridge
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        d0 = _dual_value(phi, psi, a, b, G)
        slope = float(grad @ step)
        if not np.isfinite(slope) or slope <= 0:
            break
        t = 1.0
        accepted = False
        for _ in range(60):
            phi_t = phi + t * step[:m]
            psi_t = psi.copy()
            psi_t[:-1] += t * step[m:]
            if _dual_value(phi_t, psi_t, a, b, G) >= d0 + 1e-4 * t * slope:
                phi, psi = phi_t, psi_t
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
    P = np.exp(phi[:, None] + psi[None, :] + G)
    res = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
    return P, phi, psi, it, res


def entropic_cost(a, b, cost, lam: float, *, tol: float | None = None,
                  max_iter: int = 10000) -> SinkhornResult:
    """Regularized transport value for energy reporting.

    Computes the same quantity as ``sinkhorn`` but is robust to the regime
    where lam*C is large and the histogram supports barely overlap: there
    the scaling iteration contracts at a rate that can require millions of
    sweeps, so after a bounded number of sweeps this switches to a damped
    Newton method on the dual potentials and polishes the marginals to
    ``tol`` (default 1e-9 * total mass).

    Raises NotConverged if neither stage reaches the tolerance.
    """
    a = _as_hist(a)
    b = _as_hist(b)
    C = _as_cost(cost)
    if C.shape != (len(a), len(b)):
        raise ValueError(
            f"cost shape {C.shape} does not match histograms ({len(a)}, {len(b)})")
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be finite and > 0, got {lam}")
    mass = _check_masses(a, b)
    ia = np.flatnonzero(a > 0)
    jb = np.flatnonzero(b > 0)
    full_plan = np.zeros((len(a), len(b)))
    if len(ia) == 0 or len(jb) == 0:
        return SinkhornResult(0.0, 0.0, full_plan, 0, 0.0,
                              DualPotentials(np.zeros(len(a)), np.zeros(len(b))))
    asub, bsub, Csub = a[ia], b[jb], C[np.ix_(ia, jb)]
    if tol is None:
        tol = 1e-9 * mass
    sweep_cap = min(max_iter, 2000)
    use_log = lam * Csub.max() > LOG_DOMAIN_THRESHOLD
    if use_log:
        P, phi, psi, sweeps, res = _sinkhorn_log(asub, bsub, Csub, lam, tol,
                                                 sweep_cap)
    else:
        try:
            P, x, y, sweeps, res = _sinkhorn_plain(asub, bsub, Csub, lam, tol,
                                                   sweep_cap)
            phi, psi = np.log(x), np.log(y)
        except NumericalUnderflow:
            P, phi, psi, sweeps, res = _sinkhorn_log(asub, bsub, Csub, lam,
                                                     tol, sweep_cap)
    iters = sweeps
    if res > tol:
        P, phi, psi, nit, res = _newton_refine(phi, psi, asub, bsub,
                                               -lam * Csub, tol, 100)
        iters += nit
    if res > tol:
        raise NotConverged("entropic cost evaluation did not reach the "
                           "marginal tolerance", res, iters)
    full_plan[np.ix_(ia, jb)] = P
    phi_full = np.full(len(a), -np.inf)
    psi_full = np.full(len(b), -np.inf)
    phi_full[ia], psi_full[jb] = phi, psi
    transport_cost = float((P * Csub).sum())
    reg_cost = transport_cost - _plan_entropy(P) / lam
    return SinkhornResult(reg_cost, transport_cost, full_plan, iters, res,
                          DualPotentials(phi_full, psi_full))
