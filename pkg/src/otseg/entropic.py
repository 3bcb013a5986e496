"""Conjugate calculus for mass-capped entropic transport.

For dual potentials beta = (beta_src, beta_dst) and ground cost C, let

    q(beta) = exp(lam * (L beta - c) - 1)          (entrywise, M x M)

where (L beta)_{ij} = beta_src[i] + beta_dst[j].  The -1 offset comes from
conjugating the plan entropy -<P, log P>; the API keeps that convention
throughout.  With the plan mass capped at N, the conjugate of the
regularized transport cost is

    value(beta) = (N/lam) * s               if s <= 1,
                  (N/lam) * (log s + 1)     if s > 1,      s = <q, 1>,

continuous at s = 1, with gradient N*(Q 1; Q^T 1), divided by s on the
saturated branch.  Everything is evaluated through a shared max-shift so
finite inputs can never produce non-finite outputs.

``prox_g_lambda`` is the proximity operator of the primal counterpart
    g(r) = <r, c + log(r/N)/lam> + indicator(r >= 0)
evaluated entrywise through the Lambert W function in shifted-log form.
"""

from __future__ import annotations

import numpy as np

from .lambertw import _w_from_log

__all__ = [
    "mk_conj_value",
    "mk_conj_grad",
    "mk_conj_value_grad",
    "prox_g_lambda",
    "prox_gstar_lambda",
]


def _shifted_kernel(beta_src, beta_dst, cost, lam):
    """Z = lam*(L beta - c) - 1, its max, and exp(Z - max)."""
    bs = np.asarray(beta_src, dtype=float)
    bd = np.asarray(beta_dst, dtype=float)
    C = np.asarray(cost, dtype=float)
    if C.shape != (len(bs), len(bd)):
        raise ValueError(
            f"cost shape {C.shape} does not match potentials ({len(bs)}, {len(bd)})")
    Z = lam * (bs[:, None] + bd[None, :] - C) - 1.0
    m = float(Z.max())
    E = np.exp(Z - m)
    return m, E


def mk_conj_value_grad(beta_src, beta_dst, cost, lam: float, mass_cap: float):
    """Value and gradient of the capped conjugate in one evaluation.

    Returns (value, grad_src, grad_dst).  See module docstring for the
    branch structure; the two branches agree at <q,1> = 1 and the gradient
    is continuous there as well.
    """
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be finite and > 0, got {lam}")
    if not (np.isfinite(mass_cap) and mass_cap > 0):
        raise ValueError(f"mass cap must be finite and > 0, got {mass_cap}")
    m, E = _shifted_kernel(beta_src, beta_dst, cost, lam)
    sE = float(E.sum())  # <q,1> = exp(m) * sE
    log_s = m + np.log(sE)
    n_over_lam = mass_cap / lam
    if log_s <= 0.0:
        # unsaturated branch: s <= 1 forces m <= 0, so exp(m) cannot overflow
        scale = mass_cap * np.exp(m)
        value = n_over_lam * np.exp(log_s)
    else:
        scale = mass_cap / sE
        value = n_over_lam * (log_s + 1.0)
    grad_src = scale * E.sum(axis=1)
    grad_dst = scale * E.sum(axis=0)
    return float(value), grad_src, grad_dst


def mk_conj_value(beta_src, beta_dst, cost, lam: float, mass_cap: float) -> float:
    value, _, _ = mk_conj_value_grad(beta_src, beta_dst, cost, lam, mass_cap)
    return value


def mk_conj_grad(beta_src, beta_dst, cost, lam: float, mass_cap: float):
    """Gradient of mk_conj_value w.r.t. (beta_src, beta_dst)."""
    _, gs, gd = mk_conj_value_grad(beta_src, beta_dst, cost, lam, mass_cap)
    return gs, gd


def prox_g_lambda(r, tau, lam: float, mass_cap: float, c):
    """prox of tau * g at r, entrywise, g(r) = <r, c + log(r/N)/lam> on r >= 0.

    Closed form (tau/lam) * W((lam/tau) * N * exp(lam*(r/tau - c) - 1)),
    evaluated as W(e^t) with t = log(lam*N/tau) + lam*(r/tau - c) - 1 so the
    argument never overflows.  ``tau`` may be a scalar or a per-entry step
    vector (the function is separable).
    """
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be finite and > 0, got {lam}")
    if not (np.isfinite(mass_cap) and mass_cap > 0):
        raise ValueError(f"mass cap must be finite and > 0, got {mass_cap}")
    t = np.log(lam * mass_cap / tau) + lam * (r / tau - c) - 1.0
    return (tau / lam) * _w_from_log(t)


def prox_gstar_lambda(p, sigma, lam: float, mass_cap: float, c):
    """prox of sigma * g* at p, g*(q) = (N/lam) <exp(lam*(q-c)-1), 1>.

    Closed form p - (1/lam) * W(lam*sigma*N * exp(lam*(p-c)-1)); related to
    prox_g_lambda by Moreau's identity, which the tests verify.
    """
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    t = np.log(lam * mass_cap * sigma) + lam * (p - c) - 1.0
    return p - _w_from_log(t) / lam
