"""Discrete gradient, projections, preconditioner, and the saddle solver.

The solver tests lean on closed-form optima (soft-thresholding, Huber) so
no reference solver is needed; the operator tests materialize the dense
matrix from basis vectors and compare against the matrix-free claims.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otseg import (
    Diverged,
    DomainError,
    Preconditioner,
    SegProblem,
    build_preconditioner,
    check_adjoint,
    solve,
)
from otseg.solver import (
    div,
    estimate_opnorm,
    grad,
    grad_col_sums,
    grad_row_sums,
    project_box,
    project_linf2_ball,
    project_linf_ball,
    project_simplex,
    project_simplex_columns,
    tv,
)


def _dense_grad_matrix(h, w):
    """Materialize D from basis vectors; rows in (2, h, w).ravel() order."""
    D = np.zeros((2 * h * w, h * w))
    for k in range(h * w):
        e = np.zeros(h * w)
        e[k] = 1.0
        D[:, k] = grad(e.reshape(h, w)).ravel()
    return D


# ---------------------------------------------------------------------------
# gradient / divergence / tv


def test_grad_single_pixel():
    g = grad(np.array([[3.0]]))
    np.testing.assert_allclose(g, [[[3.0]], [[3.0]]])
    assert tv(np.array([[3.0]])) == pytest.approx(3.0 * np.sqrt(2.0))


def test_tv_center_pixel():
    u = np.zeros((3, 3))
    u[1, 1] = 1.0
    # sqrt(2) at the pixel itself plus unit jumps below and to the right
    assert tv(u) == pytest.approx(2.0 + np.sqrt(2.0), rel=1e-14)


def test_tv_constant_image():
    c, h, w = 0.7, 5, 4
    expected = c * (np.sqrt(2.0) + (h - 1) + (w - 1))
    assert tv(np.full((h, w), c)) == pytest.approx(expected, rel=1e-14)


def test_grad_is_backward_difference():
    u = np.array([[1.0, 4.0], [2.0, 8.0]])
    g = grad(u)
    np.testing.assert_allclose(g[0], [[1.0, 4.0], [1.0, 4.0]])
    np.testing.assert_allclose(g[1], [[1.0, 3.0], [2.0, 6.0]])


def test_div_is_negative_adjoint():
    rng = np.random.default_rng(0)
    for h, w in [(1, 1), (1, 5), (4, 1), (3, 4), (7, 7)]:
        u = rng.standard_normal((h, w))
        v = rng.standard_normal((2, h, w))
        lhs = float((grad(u) * v).sum())
        rhs = -float((u * div(v)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_grad_shape_validation():
    with pytest.raises(ValueError):
        grad(np.zeros(4))
    with pytest.raises(ValueError):
        div(np.zeros((3, 2, 2)))


def test_grad_sums_match_dense_matrix():
    for h, w in [(1, 1), (2, 3), (4, 4)]:
        D = _dense_grad_matrix(h, w)
        np.testing.assert_allclose(np.abs(D).sum(axis=1),
                                   grad_row_sums(h, w).ravel())
        np.testing.assert_allclose(np.abs(D).sum(axis=0),
                                   grad_col_sums(h, w).ravel())


def test_grad_opnorm_below_sqrt8():
    h = w = 16
    est = estimate_opnorm(lambda u: grad(u.reshape(h, w)).ravel(),
                          lambda v: -div(v.reshape(2, h, w)).ravel(),
                          h * w, iters=200)
    assert est <= np.sqrt(8.0) + 1e-9
    # dense SVD agrees with the power iteration on a small grid
    D = _dense_grad_matrix(3, 4)
    top = np.linalg.svd(D, compute_uv=False)[0]
    est_small = estimate_opnorm(lambda u: D @ u, lambda v: D.T @ v, 12, iters=300)
    assert est_small == pytest.approx(top, rel=1e-6)


# ---------------------------------------------------------------------------
# projections


def test_project_box():
    np.testing.assert_allclose(project_box(np.array([-1.0, 0.5, 2.0])),
                               [0.0, 0.5, 1.0])


def test_project_linf2_ball():
    v = np.array([[3.0, 0.1], [4.0, 0.0]])  # fibers (3,4) and (0.1,0)
    out = project_linf2_ball(v, 1.0)
    np.testing.assert_allclose(out[:, 0], [0.6, 0.8])
    np.testing.assert_allclose(out[:, 1], [0.1, 0.0])
    np.testing.assert_allclose(project_linf2_ball(v, 0.0), np.zeros_like(v))
    with pytest.raises(DomainError):
        project_linf2_ball(v, -1.0)


def test_project_linf2_idempotent():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((2, 30))
    once = project_linf2_ball(v, 0.7)
    twice = project_linf2_ball(once, 0.7)
    np.testing.assert_allclose(once, twice, atol=1e-15)
    norms = np.sqrt((once ** 2).sum(axis=0))
    assert norms.max() <= 0.7 + 1e-12


def test_project_linf_ball():
    np.testing.assert_allclose(project_linf_ball(np.array([-2.0, 0.3, 5.0]), 1.0),
                               [-1.0, 0.3, 1.0])


def test_project_simplex_examples():
    np.testing.assert_allclose(project_simplex(np.array([0.5, 0.5, 2.0])),
                               [0.0, 0.0, 1.0])
    v = np.array([0.3, 0.3, 0.4])
    np.testing.assert_allclose(project_simplex(v), v, atol=1e-15)
    np.testing.assert_allclose(project_simplex(np.array([1.0, 0.0]), mass=2.0),
                               [1.5, 0.5])
    with pytest.raises(DomainError):
        project_simplex(v, mass=0.0)


def test_project_simplex_kkt():
    # out = max(v - theta, 0) with sum = mass characterizes the projection:
    # positive entries share one theta, zero entries satisfy v <= theta
    rng = np.random.default_rng(2)
    for _ in range(50):
        k = rng.integers(1, 8)
        v = rng.normal(0.0, 2.0, size=k)
        mass = float(rng.uniform(0.2, 3.0))
        out = project_simplex(v, mass=mass)
        assert out.min() >= 0.0
        assert out.sum() == pytest.approx(mass, rel=1e-12)
        pos = out > 0
        theta = (v[pos] - out[pos]).mean()
        assert np.abs(v[pos] - out[pos] - theta).max() <= 1e-10
        if np.any(~pos):
            assert v[~pos].max() <= theta + 1e-10


def test_project_simplex_columns_matches_single():
    rng = np.random.default_rng(3)
    U = rng.normal(size=(4, 9))
    cols = project_simplex_columns(U, mass=1.0)
    for j in range(9):
        np.testing.assert_allclose(cols[:, j], project_simplex(U[:, j]),
                                   atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=-10, max_value=10), min_size=2, max_size=6))
def test_project_simplex_nonexpansive_property(vals):
    v = np.array(vals)
    out = project_simplex(v)
    assert out.min() >= 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-9)
    # projecting a point already on the simplex returns it
    again = project_simplex(out)
    np.testing.assert_allclose(again, out, atol=1e-9)


# ---------------------------------------------------------------------------
# problem plumbing


def _identity_problem(n, f, with_T=0.0, with_Gstar=0.0):
    """min_u 0.5||u-f||^2 + with_T/2 ||u||^2 + ||u||_1 (huberized by Gstar)."""
    return SegProblem(
        n_primal=n,
        n_dual=n,
        apply_K=lambda u: u.copy(),
        apply_Kt=lambda p: p.copy(),
        prox_R=lambda x, tau: (x + tau * f) / (1.0 + tau),
        prox_Fstar=lambda y, sigma: np.clip(y, -1.0, 1.0),
        grad_T=(lambda u: with_T * u) if with_T else None,
        grad_Gstar=(lambda p: with_Gstar * p) if with_Gstar else None,
        L_T=with_T,
        L_Gstar=with_Gstar,
        abs_row_sums=np.ones(n),
        abs_col_sums=np.ones(n),
    )


def test_check_adjoint_passes_and_fails():
    f = np.zeros(4)
    good = _identity_problem(4, f)
    assert check_adjoint(good) <= 1e-12
    bad = _identity_problem(4, f)
    bad.apply_Kt = lambda p: -p
    with pytest.raises(DomainError, match="adjoint"):
        check_adjoint(bad)


def test_build_preconditioner_formula():
    prob = _identity_problem(3, np.zeros(3), with_T=2.0, with_Gstar=4.0)
    prob.abs_col_sums = np.array([1.0, 2.0, 0.0])
    prob.abs_row_sums = np.array([3.0, 0.0, 1.0])
    pc = build_preconditioner(prob, r=0.5, delta=0.8)
    np.testing.assert_allclose(pc.tau, 1.0 / (2.0 + 0.5 * prob.abs_col_sums))
    np.testing.assert_allclose(pc.sigma, 1.0 / (4.0 / 0.8 + prob.abs_row_sums / 0.5))


def test_build_preconditioner_smooth_mask_and_floor():
    prob = _identity_problem(2, np.zeros(2), with_Gstar=10.0)
    prob.abs_row_sums = np.array([0.0, 2.0])
    prob.abs_col_sums = np.array([0.0, 2.0])
    prob.smooth_dual_rows = np.array([0.0, 1.0])
    pc = build_preconditioner(prob, r=1.0)
    # row 0 is neither smooth nor coupled: floored step, still finite
    assert pc.sigma[0] == pytest.approx(1.0 / (1e-8 * 2.0))
    assert pc.sigma[1] == pytest.approx(1.0 / (10.0 + 2.0))
    assert pc.tau[0] == pytest.approx(1.0 / 1e-8)


def test_build_preconditioner_validation():
    prob = _identity_problem(2, np.zeros(2))
    with pytest.raises(DomainError):
        build_preconditioner(prob, r=0.0)
    with pytest.raises(DomainError):
        build_preconditioner(prob, delta=2.0)
    with pytest.raises(DomainError):
        build_preconditioner(prob, gamma_primal=0.0)
    prob.abs_row_sums = None
    with pytest.raises(DomainError, match="sums"):
        build_preconditioner(prob)


def test_preconditioner_type_validation():
    with pytest.raises(DomainError):
        Preconditioner(tau=np.array([1.0, -1.0]), sigma=np.array([1.0, 1.0]))
    with pytest.raises(DomainError):
        Preconditioner(tau=np.array([1.0]), sigma=np.array([np.inf]))


def test_estimate_opnorm_matches_svd():
    rng = np.random.default_rng(4)
    K = rng.standard_normal((7, 5))
    top = np.linalg.svd(K, compute_uv=False)[0]
    est = estimate_opnorm(lambda x: K @ x, lambda y: K.T @ y, 5, iters=500)
    assert est == pytest.approx(top, rel=1e-8)


# ---------------------------------------------------------------------------
# the iteration itself


def test_solve_soft_threshold_oracle():
    # min_u 0.5||u-f||^2 + ||u||_1 has the closed form soft(f, 1)
    f = np.array([3.0, -2.0, 0.4, 0.0, 1.0])
    prob = _identity_problem(5, f)
    u, p, report = solve(prob, tol=1e-12, max_iter=4000)
    expected = np.sign(f) * np.maximum(np.abs(f) - 1.0, 0.0)
    np.testing.assert_allclose(u, expected, atol=1e-8)
    assert report.converged
    assert np.abs(p).max() <= 1.0 + 1e-12


def test_solve_with_smooth_primal_term():
    # adding T(u) = c/2 ||u||^2 rescales the soft threshold by 1/(1+c)
    f = np.array([4.0, -3.0, 0.2])
    c = 2.0
    prob = _identity_problem(3, f, with_T=c)
    u, _, report = solve(prob, tol=1e-12, max_iter=4000)
    expected = np.sign(f) * np.maximum(np.abs(f) - 1.0, 0.0) / (1.0 + c)
    np.testing.assert_allclose(u, expected, atol=1e-8)
    assert report.converged


def test_solve_with_smooth_dual_term():
    # G*(p) = d/2 ||p||^2 turns the l1 penalty into a Huber penalty:
    # stationarity u - f + min(|u|/d, 1) sign(u) = 0
    f = np.array([0.05, 3.0, -2.5])
    d = 0.1
    prob = _identity_problem(3, f, with_Gstar=d)
    u, _, report = solve(prob, tol=1e-12, max_iter=8000)
    expected = np.where(np.abs(f) <= d * (1.0 + 1.0 / d),  # quadratic zone
                        f / (1.0 + 1.0 / d),
                        f - np.sign(f))
    np.testing.assert_allclose(u, expected, atol=1e-7)
    assert report.converged


def _slow_problem(n=40, seed=8):
    # anisotropic TV on a line graph: takes a few hundred iterations
    rng = np.random.default_rng(seed)
    f = rng.uniform(size=n)
    K = np.diff(np.eye(n), axis=0)
    prob = SegProblem(
        n_primal=n, n_dual=n - 1,
        apply_K=lambda u: K @ u,
        apply_Kt=lambda p: K.T @ p,
        prox_R=lambda x, tau: (x + tau * f) / (1.0 + tau),
        prox_Fstar=lambda y, sigma: np.clip(y, -0.3, 0.3),
        abs_row_sums=np.abs(K).sum(axis=1),
        abs_col_sums=np.abs(K).sum(axis=0),
    )
    return prob, f, K


def test_solve_callback_and_trace():
    prob, _, _ = _slow_problem()
    seen = []
    u, _, report = solve(prob, tol=1e-10, max_iter=5000, check_every=10,
                         callback=lambda it, uu, res: seen.append((it, res)))
    assert report.converged
    assert seen, "callback never fired"
    assert all(it % 10 == 0 for it, _ in seen)
    assert [it for it, _ in seen] == sorted({it for it, _ in seen})
    assert len(report.residual_trace) == report.iterations
    assert report.residual_trace[-1] <= 1e-10
    assert report.wall_time > 0.0


def test_solve_cancel():
    f = np.full(6, 5.0)
    prob = _identity_problem(6, f)
    calls = {"n": 0}

    def cancel():
        calls["n"] += 1
        return calls["n"] >= 3

    _, _, report = solve(prob, tol=0.0, max_iter=10000, check_every=10,
                         cancel=cancel)
    assert report.cancelled
    assert report.iterations == 30  # third poll, at an iteration boundary
    assert not report.converged


def test_solve_energy_trace():
    prob, f, K = _slow_problem(seed=9)
    prob.energy = lambda u: float(0.5 * ((u - f) ** 2).sum()
                                  + 0.3 * np.abs(K @ u).sum())
    _, _, report = solve(prob, tol=1e-11, max_iter=5000, check_every=10)
    assert report.energy_trace
    its = [it for it, _ in report.energy_trace]
    assert all(it % 10 == 0 for it in its)
    energies = [e for _, e in report.energy_trace]
    assert energies[-1] == pytest.approx(min(energies), abs=1e-9)


def test_solve_max_iter_not_converged():
    f = np.full(4, 3.0)
    prob = _identity_problem(4, f)
    _, _, report = solve(prob, tol=1e-15, max_iter=7)
    assert not report.converged
    assert report.iterations == 7


def test_solve_warm_start():
    f = np.array([2.0, -1.5])
    prob = _identity_problem(2, f)
    u1, p1, _ = solve(prob, tol=1e-12, max_iter=4000)
    _, _, report = solve(prob, init=(u1, p1), tol=1e-10, max_iter=4000)
    assert report.iterations <= 20


def test_solve_validation():
    prob = _identity_problem(2, np.zeros(2))
    with pytest.raises(DomainError):
        solve(prob, init=(np.zeros(3), np.zeros(2)))
    with pytest.raises(DomainError):
        solve(prob, precond=(np.array([-1.0, 1.0]), np.ones(2)))
    with pytest.raises(DomainError):
        solve(prob, precond=(np.ones(2), np.zeros(2)))


def test_solve_diverged():
    prob = _identity_problem(2, np.zeros(2))
    prob.grad_T = lambda u: np.full_like(u, np.nan)
    with pytest.raises(Diverged):
        solve(prob, max_iter=50)


def test_solve_scalar_steps_accepted():
    f = np.array([2.0, 0.3, -1.0])
    prob = _identity_problem(3, f)
    u, _, report = solve(prob, precond=(0.5, 0.5), tol=1e-12, max_iter=4000)
    expected = np.sign(f) * np.maximum(np.abs(f) - 1.0, 0.0)
    np.testing.assert_allclose(u, expected, atol=1e-8)
    assert report.converged


def test_tv_denoise_same_answer_for_any_r():
    # end-to-end: min_{u in [0,1]} rho*TV(u) + 0.5||u - f||^2 through the
    # gradient operator; different preconditioner scalings must land on the
    # same minimizer of this strongly convex problem
    rng = np.random.default_rng(5)
    h = w = 12
    f = np.clip(rng.normal(0.4, 0.3, size=(h, w)), 0.0, 1.0)
    f[3:9, 3:9] += 0.5
    f = np.clip(f, 0.0, 1.0).ravel()
    rho = 0.2
    n = h * w

    def make():
        return SegProblem(
            n_primal=n, n_dual=2 * n,
            apply_K=lambda u: grad(u.reshape(h, w)).ravel(),
            apply_Kt=lambda v: -div(v.reshape(2, h, w)).ravel(),
            prox_R=lambda x, tau: np.clip((x + tau * f) / (1.0 + tau), 0.0, 1.0),
            prox_Fstar=lambda y, sigma: project_linf2_ball(
                y.reshape(2, h, w), rho).ravel(),
            abs_row_sums=grad_row_sums(h, w).ravel(),
            abs_col_sums=grad_col_sums(h, w).ravel(),
        )

    sols = []
    for r in (0.2, 1.0, 5.0):
        prob = make()
        check_adjoint(prob)
        pc = build_preconditioner(prob, r=r)
        u, _, report = solve(prob, precond=pc, tol=1e-10, max_iter=20000)
        assert report.converged, f"r={r} did not converge"
        sols.append(u)
    np.testing.assert_allclose(sols[0], sols[1], atol=1e-6)
    np.testing.assert_allclose(sols[1], sols[2], atol=1e-6)
