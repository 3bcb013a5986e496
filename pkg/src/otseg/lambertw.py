"""Principal branch of the Lambert W function on the nonnegative reals.

Only the regime z >= 0 is needed here (entropic proximity operators feed
strictly positive arguments).  Arguments can be passed either directly or
as a (scale, exponent) pair meaning ``z = scale * exp(exponent)``; the pair
form never materializes ``exp(exponent)``, so exponents far beyond the
double-precision range are fine.

Internally everything is solved in log form: W(e^t) is the unique w > 0
with ``w + log(w) = t``, a strictly increasing function of w, which Halley's
method handles without ever overflowing.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

__all__ = ["lambert_w", "lambert_w_exp"]

_MAX_ITER = 20
# Below this value of t = log(z), W(e^t) = e^t*(1 - e^t) to ~1e-48 relative
# accuracy, and log(w) in the Halley loop would start losing precision.
_SERIES_CUTOFF = -37.0


def _w_from_log(t: np.ndarray) -> np.ndarray:
    """Solve w + log(w) = t elementwise (t real, possibly -inf)."""
    t = np.asarray(t, dtype=float)
    shape = t.shape
    t = np.atleast_1d(t).ravel()
    w = np.empty_like(t)

    tiny = t < _SERIES_CUTOFF  # includes -inf
    if np.any(tiny):
        z = np.exp(t[tiny])
        w[tiny] = z * (1.0 - z)

    main = ~tiny
    if np.any(main):
        tm = t[main]
        # seed: log1p(z) for z < e  <=>  t < 1; asymptotic t - log t above
        small = tm < 1.0
        w0 = np.empty_like(tm)
        w0[small] = np.log1p(np.exp(tm[small]))
        big = ~small
        w0[big] = tm[big] - np.log(tm[big])
        wm = w0
        for _ in range(_MAX_ITER):
            g = wm + np.log(wm) - tm
            gp = 1.0 + 1.0 / wm
            # Halley step for g(w) = w + log w - t, g'' = -1/w^2
            step = 2.0 * g * gp / (2.0 * gp * gp + g / (wm * wm))
            wn = wm - step
            # the iteration is safely interior; guard against a wild first step
            bad = wn <= 0.0
            if np.any(bad):
                wn = np.where(bad, wm / 2.0, wn)
            done = np.abs(wn - wm) <= 1e-16 * (1.0 + np.abs(wn))
            wm = wn
            if np.all(done):
                break
        w[main] = wm
    return w.reshape(shape)


def lambert_w_exp(scale, exponent):
    """W(scale * e^exponent) without forming e^exponent.

    Parameters
    ----------
    scale : array_like, >= 0
    exponent : array_like, real (broadcast against scale)

    Returns
    -------
    ndarray (or scalar) of W values, >= 0.
    """
    scale = np.asarray(scale, dtype=float)
    exponent = np.asarray(exponent, dtype=float)
    if np.any(np.isnan(scale)) or np.any(np.isposinf(scale)) or np.any(scale < 0):
        raise DomainError("lambert_w requires a finite nonnegative argument")
    if np.any(np.isnan(exponent)) or np.any(np.isposinf(exponent)):
        raise DomainError("lambert_w exponent must be finite or -inf")
    with np.errstate(divide="ignore"):  # log(0) = -inf is the intended path
        t = np.log(scale) + exponent
    out = _w_from_log(t)
    if out.ndim == 0:
        return float(out)
    return out


def lambert_w(z):
    """W(z) for z >= 0, with |W e^W - z| <= 1e-12 * max(1, z).

    Raises DomainError for negative or non-finite input.
    """
    return lambert_w_exp(z, 0.0)
