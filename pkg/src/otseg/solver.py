"""Matrix-free preconditioned primal-dual solver and projection toolbox.

Solves saddle problems
    min_u max_p  <K u, p> + R(u) + T(u) - F*(p) - G*(p)
with R, F* proximable and T, G* smooth, via

    u+ = prox_{tau R}(u - tau (K^T p + grad T(u)))
    p+ = prox_{sigma F*}(p + sigma K (2 u+ - u) - sigma grad G*(p))

where tau, sigma are diagonal step vectors.  Everything is callback-based;
no operator is ever materialized.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import Diverged, DomainError

__all__ = [
    "SegProblem",
    "Preconditioner",
    "SolveReport",
    "grad",
    "div",
    "tv",
    "grad_row_sums",
    "grad_col_sums",
    "project_box",
    "project_nonneg",
    "project_linf2_ball",
    "project_linf_ball",
    "project_simplex",
    "project_simplex_columns",
    "check_adjoint",
    "build_preconditioner",
    "estimate_opnorm",
    "solve",
]

STEP_FLOOR_SCALE = 1e-8
RESIDUAL_EPS = 1e-12


# ---------------------------------------------------------------------------
# discrete gradient / divergence


def grad(u: np.ndarray) -> np.ndarray:
    """Backward differences with homogeneous Dirichlet boundary.

    v1(i,j) = u(i,j) - u(i-1,j), first row v1(0,j) = u(0,j); v2 analogous
    along columns.  Returns shape (2, h, w).
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 2:
        raise ValueError(f"grad expects a 2-d map, got shape {u.shape}")
    v = np.empty((2,) + u.shape)
    v[0, 0, :] = u[0, :]
    v[0, 1:, :] = u[1:, :] - u[:-1, :]
    v[1, :, 0] = u[:, 0]
    v[1, :, 1:] = u[:, 1:] - u[:, :-1]
    return v


def div(v: np.ndarray) -> np.ndarray:
    """Exact negative adjoint of grad: <grad u, v> = -<u, div v>."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 3 or v.shape[0] != 2:
        raise ValueError(f"div expects shape (2, h, w), got {v.shape}")
    out = np.empty(v.shape[1:])
    out[:-1, :] = v[0, 1:, :] - v[0, :-1, :]
    out[-1, :] = -v[0, -1, :]
    out[:, :-1] += v[1, :, 1:] - v[1, :, :-1]
    out[:, -1] += -v[1, :, -1]
    return out


def tv(u: np.ndarray) -> float:
    """Isotropic total variation sum_x ||(grad u)(x)||_2."""
    g = grad(u)
    return float(np.sqrt(g[0] ** 2 + g[1] ** 2).sum())


def grad_row_sums(height: int, width: int) -> np.ndarray:
    """sum_x |D_{i,x}| per dual row of the gradient, shape (2, h, w).

    1 on the Dirichlet border rows/cols (single +1 entry), 2 elsewhere.
    """
    s = np.full((2, height, width), 2.0)
    s[0, 0, :] = 1.0
    s[1, :, 0] = 1.0
    return s


def grad_col_sums(height: int, width: int) -> np.ndarray:
    """sum_i |D_{i,x}| per pixel: 2 + (has lower neighbor) + (has right)."""
    s = np.full((height, width), 2.0)
    s[:-1, :] += 1.0
    s[:, :-1] += 1.0
    return s


# ---------------------------------------------------------------------------
# projections


def project_box(u: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.clip(u, lo, hi)


def project_nonneg(r: np.ndarray) -> np.ndarray:
    return np.maximum(r, 0.0)


def project_linf2_ball(v: np.ndarray, rho: float) -> np.ndarray:
    """Per-position radial clamp of the leading-axis vector to norm <= rho.

    v has shape (d, ...); each fiber v[:, x] is scaled by
    1 / max(||v[:, x]|| / rho, 1).
    """
    if rho < 0:
        raise DomainError(f"radius must be >= 0, got {rho}")
    v = np.asarray(v, dtype=float)
    norms = np.sqrt((v ** 2).sum(axis=0, keepdims=True))
    if rho == 0:
        return np.zeros_like(v)
    return v / np.maximum(norms / rho, 1.0)


def project_linf_ball(h: np.ndarray, radius: float = 1.0) -> np.ndarray:
    return np.clip(h, -radius, radius)


def project_simplex(vec: np.ndarray, mass: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = mass} by sort-thresholding."""
    if mass <= 0:
        raise DomainError(f"simplex mass must be > 0, got {mass}")
    v = np.asarray(vec, dtype=float).ravel()
    return project_simplex_columns(v[:, None], mass=mass)[:, 0]


def project_simplex_columns(U: np.ndarray, mass: float = 1.0) -> np.ndarray:
    """Column-wise simplex projection, vectorized over many points.

    U has shape (K, n); each column is projected onto the scaled simplex.
    """
    if mass <= 0:
        raise DomainError(f"simplex mass must be > 0, got {mass}")
    U = np.asarray(U, dtype=float)
    K, n = U.shape
    s = -np.sort(-U, axis=0)
    css = np.cumsum(s, axis=0) - mass
    ks = np.arange(1, K + 1, dtype=float)[:, None]
    cond = s - css / ks > 0
    # cond[0] is always True; rho = largest k with the condition satisfied
    rho = K - 1 - np.argmax(cond[::-1, :], axis=0)
    theta = css[rho, np.arange(n)] / (rho + 1.0)
    return np.maximum(U - theta[None, :], 0.0)


# ---------------------------------------------------------------------------
# problem container


@dataclass
class SegProblem:
    """Matrix-free saddle problem description.

    abs_row_sums / abs_col_sums are the exact row/column absolute sums of K
    (closed forms per model) used by build_preconditioner.  smooth_dual_rows
    optionally masks the dual rows on which G* is smooth; the L_Gstar term of
    the preconditioner applies only there.
    """

    n_primal: int
    n_dual: int
    apply_K: Callable[[np.ndarray], np.ndarray]
    apply_Kt: Callable[[np.ndarray], np.ndarray]
    prox_R: Callable[[np.ndarray, np.ndarray], np.ndarray]
    prox_Fstar: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_T: Callable[[np.ndarray], np.ndarray] | None = None
    grad_Gstar: Callable[[np.ndarray], np.ndarray] | None = None
    L_T: float = 0.0
    L_Gstar: float = 0.0
    abs_row_sums: np.ndarray | None = None
    abs_col_sums: np.ndarray | None = None
    smooth_dual_rows: np.ndarray | None = None
    energy: Callable[[np.ndarray], float] | None = None

    def __post_init__(self):
        if self.n_primal < 1 or self.n_dual < 1:
            raise DomainError("primal and dual dimensions must be >= 1")
        if self.L_T < 0 or self.L_Gstar < 0:
            raise DomainError("Lipschitz constants must be >= 0")


@dataclass(frozen=True)
class Preconditioner:
    tau: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name, v in (("tau", self.tau), ("sigma", self.sigma)):
            v = np.asarray(v, dtype=float)
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise DomainError(f"{name} entries must be finite and > 0")
            object.__setattr__(self, name, v)


@dataclass
class SolveReport:
    iterations: int = 0
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    converged: bool = False
    wall_time: float = 0.0
    cancelled: bool = False
    residual_trace: list = field(default_factory=list)
    energy_trace: list = field(default_factory=list)  # (iteration, energy)


def check_adjoint(problem: SegProblem, n_probes: int = 5, seed: int = 0,
                  tol: float = 1e-10) -> float:
    """Random-probe adjoint test; raises on mismatch, returns worst rel err."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        x = rng.standard_normal(problem.n_primal)
        y = rng.standard_normal(problem.n_dual)
        lhs = float(np.dot(problem.apply_K(x), y))
        rhs = float(np.dot(x, problem.apply_Kt(y)))
        scale = max(abs(lhs), abs(rhs), 1.0)
        err = abs(lhs - rhs) / scale
        worst = max(worst, err)
    if worst > tol:
        raise DomainError(f"adjoint probe failed: relative error {worst:.3e} > {tol}")
    return worst


def build_preconditioner(problem: SegProblem, r: float = 1.0,
                         delta: float = 1.0,
                         gamma_primal: float = 1.0) -> Preconditioner:
    """Diagonal steps 1/tau(x) = L_T/gamma + r * colsum(x),
    1/sigma(i) = L_Gstar/delta + (1/r) * rowsum(i).

    L_Gstar is charged only to rows flagged smooth (all rows when no mask is
    set).  Zero-sum rows and columns are floored at 1e-8 * (N/r) resp.
    1e-8 * r so the steps stay finite.
    """
    if r <= 0:
        raise DomainError(f"r must be > 0, got {r}")
    if not 0 < delta < 2:
        raise DomainError(f"delta must lie in (0, 2), got {delta}")
    if not 0 < gamma_primal < 2:
        raise DomainError(f"gamma_primal must lie in (0, 2), got {gamma_primal}")
    if problem.abs_row_sums is None or problem.abs_col_sums is None:
        raise DomainError("problem lacks abs row/col sums; cannot precondition")
    col = np.asarray(problem.abs_col_sums, dtype=float)
    row = np.asarray(problem.abs_row_sums, dtype=float)
    if col.shape != (problem.n_primal,) or row.shape != (problem.n_dual,):
        raise DomainError("abs row/col sums have wrong dimensions")

    inv_tau = problem.L_T / gamma_primal + r * col
    np.maximum(inv_tau, STEP_FLOOR_SCALE * r, out=inv_tau)

    inv_sigma = row / r
    if problem.L_Gstar > 0:
        if problem.smooth_dual_rows is not None:
            inv_sigma = inv_sigma + (problem.L_Gstar / delta) * problem.smooth_dual_rows
        else:
            inv_sigma = inv_sigma + problem.L_Gstar / delta
    np.maximum(inv_sigma, STEP_FLOOR_SCALE * (problem.n_primal / r), out=inv_sigma)

    return Preconditioner(tau=1.0 / inv_tau, sigma=1.0 / inv_sigma)


def estimate_opnorm(apply_K, apply_Kt, n_primal: int, iters: int = 100,
                    seed: int = 0) -> float:
    """Power iteration on K^T K; returns an estimate of ||K||."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_primal)
    nx = np.linalg.norm(x)
    if nx == 0:
        return 0.0
    x /= nx
    est = 0.0
    for _ in range(iters):
        y = apply_Kt(apply_K(x))
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        est = np.sqrt(ny)
        x = y / ny
    return float(est)


def _as_steps(problem: SegProblem, precond) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(precond, Preconditioner):
        tau, sigma = precond.tau, precond.sigma
    else:
        tau, sigma = precond
        tau = np.asarray(tau, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(tau)) or np.any(tau <= 0):
        raise DomainError("tau must be finite and > 0")
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise DomainError("sigma must be finite and > 0")
    if tau.ndim and tau.shape != (problem.n_primal,):
        raise DomainError(f"tau has shape {tau.shape}, expected ({problem.n_primal},)")
    if sigma.ndim and sigma.shape != (problem.n_dual,):
        raise DomainError(f"sigma has shape {sigma.shape}, expected ({problem.n_dual},)")
    return tau, sigma


def solve(problem: SegProblem, precond=None, init=None, tol: float = 1e-6,
          max_iter: int = 5000, callback=None, cancel=None,
          check_every: int = 10) -> tuple[np.ndarray, np.ndarray, SolveReport]:
    """Run the preconditioned primal-dual iteration.

    precond: Preconditioner or (tau, sigma) scalars/vectors; default builds
    one from the problem with r = delta = 1.
    init: (u0, p0) or None for zeros.
    callback(iteration, u, residual) fires every check_every iterations;
    cancel() polled at the same boundaries stops the run with
    report.cancelled = True.

    Stops when r_p + r_d <= tol with r_p = ||u+ - u|| / (mean(tau)||u|| + eps)
    and r_d alike, or at max_iter.  Non-finite iterates raise Diverged.
    """
    if precond is None:
        precond = build_preconditioner(problem)
    tau, sigma = _as_steps(problem, precond)
    tau_bar = float(np.mean(tau))
    sigma_bar = float(np.mean(sigma))

    if init is None:
        u = np.zeros(problem.n_primal)
        p = np.zeros(problem.n_dual)
    else:
        u = np.array(init[0], dtype=float).ravel()
        p = np.array(init[1], dtype=float).ravel()
        if u.shape != (problem.n_primal,) or p.shape != (problem.n_dual,):
            raise DomainError("init vectors have wrong dimensions")

    report = SolveReport()
    t0 = time.perf_counter()
    it = 0
    for it in range(1, max_iter + 1):
        step = problem.apply_Kt(p)
        if problem.grad_T is not None:
            step = step + problem.grad_T(u)
        u_new = problem.prox_R(u - tau * step, tau)

        drive = problem.apply_K(2.0 * u_new - u)
        if problem.grad_Gstar is not None:
            drive = drive - problem.grad_Gstar(p)
        p_new = problem.prox_Fstar(p + sigma * drive, sigma)

        r_p = float(np.linalg.norm(u_new - u)) / (
            tau_bar * float(np.linalg.norm(u)) + RESIDUAL_EPS)
        r_d = float(np.linalg.norm(p_new - p)) / (
            sigma_bar * float(np.linalg.norm(p)) + RESIDUAL_EPS)
        u, p = u_new, p_new
        report.residual_trace.append(r_p + r_d)
        report.primal_residual, report.dual_residual = r_p, r_d

        if it % check_every == 0 or it == max_iter:
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(p))):
                raise Diverged(it)
            if problem.energy is not None:
                report.energy_trace.append((it, float(problem.energy(u))))
            if callback is not None:
                callback(it, u, r_p + r_d)
            if cancel is not None and cancel():
                report.cancelled = True
                break
        if r_p + r_d <= tol:
            report.converged = True
            break

    report.iterations = it
    report.wall_time = time.perf_counter() - t0
    return u, p, report
