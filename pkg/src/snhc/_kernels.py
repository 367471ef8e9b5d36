"""Compiled evaluation and iteration loops for piecewise central maps.

A map is passed around as three arrays: ``knots`` (n+1 breakpoints),
``kinds`` (n piece codes) and ``coef`` (n x 4 coefficients).  Piece codes:

* ``AFFINE``: ``c0 + c1 * (x - c2)``
* ``QUADRATIC``: ``x + x*x - c0``
* ``CUBIC``: ``c0 + u*(c1 + u*(c2 + u*c3))`` with ``u = x - knots[j]``

Every kernel signals leaving the domain by returning NaN (values) or a
negative step count so that callers can raise the proper exception.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

AFFINE = 0
QUADRATIC = 1
CUBIC = 2

_NEWTON_MAX = 200


@njit(cache=True)
def piece_of(knots, x):
    """Index of the piece containing ``x``, or -1 outside the domain."""
    n = knots.shape[0] - 1
    if not (knots[0] <= x <= knots[n]):
        return -1
    lo = 0
    hi = n - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if knots[mid] <= x:
            lo = mid
        else:
            hi = mid - 1
    return lo


@njit(cache=True)
def eval_piece(knots, kinds, coef, j, x):
    k = kinds[j]
    if k == AFFINE:
        return coef[j, 0] + coef[j, 1] * (x - coef[j, 2])
    if k == QUADRATIC:
        return x + x * x - coef[j, 0]
    u = x - knots[j]
    return coef[j, 0] + u * (coef[j, 1] + u * (coef[j, 2] + u * coef[j, 3]))


@njit(cache=True)
def deriv_piece(knots, kinds, coef, j, x):
    k = kinds[j]
    if k == AFFINE:
        return coef[j, 1]
    if k == QUADRATIC:
        return 1.0 + 2.0 * x
    u = x - knots[j]
    return coef[j, 1] + u * (2.0 * coef[j, 2] + 3.0 * u * coef[j, 3])


@njit(cache=True)
def second_piece(knots, kinds, coef, j, x):
    k = kinds[j]
    if k == AFFINE:
        return 0.0
    if k == QUADRATIC:
        return 2.0
    u = x - knots[j]
    return 2.0 * coef[j, 2] + 6.0 * u * coef[j, 3]


@njit(cache=True)
def f_eval(knots, kinds, coef, x):
    j = piece_of(knots, x)
    if j < 0:
        return np.nan
    return eval_piece(knots, kinds, coef, j, x)


@njit(cache=True)
def f_deriv(knots, kinds, coef, x):
    j = piece_of(knots, x)
    if j < 0:
        return np.nan
    return deriv_piece(knots, kinds, coef, j, x)


@njit(cache=True)
def f_second(knots, kinds, coef, x):
    j = piece_of(knots, x)
    if j < 0:
        return np.nan
    return second_piece(knots, kinds, coef, j, x)


@njit(cache=True)
def f_inverse(knots, kinds, coef, y):
    """Inverse of the map; NaN when ``y`` is outside the range."""
    n = knots.shape[0] - 1
    ylo = eval_piece(knots, kinds, coef, 0, knots[0])
    yhi = eval_piece(knots, kinds, coef, n - 1, knots[n])
    if not (ylo <= y <= yhi):
        return np.nan
    # piece whose image contains y; images are ordered because the map increases
    j = n - 1
    for i in range(n):
        if y <= eval_piece(knots, kinds, coef, i, knots[i + 1]):
            j = i
            break
    k = kinds[j]
    if k == AFFINE:
        return coef[j, 2] + (y - coef[j, 0]) / coef[j, 1]
    if k == QUADRATIC:
        c = y + coef[j, 0]
        return 2.0 * c / (1.0 + math.sqrt(1.0 + 4.0 * c))
    # safeguarded Newton on the cubic
    a = knots[j]
    b = knots[j + 1]
    x = a + (b - a) * 0.5
    for _ in range(_NEWTON_MAX):
        fx = eval_piece(knots, kinds, coef, j, x) - y
        if fx > 0.0:
            b = x
        else:
            a = x
        d = deriv_piece(knots, kinds, coef, j, x)
        xn = x - fx / d
        if not (a < xn < b):
            xn = 0.5 * (a + b)
        if abs(xn - x) <= 1e-16 * max(1.0, abs(x)) or b - a <= 1e-16 * max(1.0, abs(x)):
            return xn
        x = xn
    return np.nan


@njit(cache=True)
def iterate_forward(knots, kinds, coef, x, n):
    """Return (value, steps_done); steps_done < n means the orbit left the domain."""
    for i in range(n):
        y = f_eval(knots, kinds, coef, x)
        if math.isnan(y):
            return x, i
        x = y
    return x, n


@njit(cache=True)
def iterate_backward(knots, kinds, coef, x, n):
    for i in range(n):
        y = f_inverse(knots, kinds, coef, x)
        if math.isnan(y):
            return x, i
        x = y
    return x, n


@njit(cache=True)
def iterate_with_deriv(knots, kinds, coef, x, n):
    """Forward iterate and the derivative of the n-fold composition."""
    d = 1.0
    for i in range(n):
        j = piece_of(knots, x)
        if j < 0:
            return np.nan, np.nan, i
        d *= deriv_piece(knots, kinds, coef, j, x)
        x = eval_piece(knots, kinds, coef, j, x)
    return x, d, n


@njit(cache=True)
def first_entry(knots, kinds, coef, x, lo, hi, direction, cap):
    """Least n >= 0 with the n-th iterate in [lo, hi].

    Returns (n, value).  n = -1 when the cap is exhausted, n = -2 when the
    orbit leaves the domain first.
    """
    for i in range(cap + 1):
        if lo <= x <= hi:
            return i, x
        if i == cap:
            break
        if direction > 0:
            y = f_eval(knots, kinds, coef, x)
        else:
            y = f_inverse(knots, kinds, coef, x)
        if math.isnan(y):
            return -2, x
        x = y
    return -1, x


@njit(cache=True)
def enter_from_left(knots, kinds, coef, y, a, cap):
    """Least i >= 0 with F^i(y) >= a for an orbit increasing towards a.

    Returns (i, F^i(y), derivative of F^i at y); i = -1 on budget exhaustion.
    """
    d = 1.0
    for i in range(cap + 1):
        if y >= a:
            return i, y, d
        j = piece_of(knots, y)
        if j < 0:
            return -2, y, d
        d *= deriv_piece(knots, kinds, coef, j, y)
        y = eval_piece(knots, kinds, coef, j, y)
    return -1, y, d


@njit(cache=True)
def backward_chain(knots, kinds, coef, x, lower, cap):
    """Backward orbit of ``x`` collected while it stays strictly above ``lower``.

    Returns the array of points x, F^{-1}(x), ... up to the first one that
    is <= lower (excluded), truncated at ``cap`` entries.
    """
    out = np.empty(cap, dtype=np.float64)
    m = 0
    while m < cap and x > lower:
        out[m] = x
        m += 1
        y = f_inverse(knots, kinds, coef, x)
        if math.isnan(y) or y >= x:
            break
        x = y
    return out[:m]


@njit(cache=True)
def backward_table(knots, kinds, coef, z, imin, imax):
    """Backward images of the points ``z`` for i = imin..imax.

    Returns (pts, dpts) with shape (imax-imin+1, len(z)); ``pts[r, c]`` is
    F^{-(imin+r)}(z[c]) and ``dpts`` the derivative of F^{imin+r} at that
    point (forward derivative, i.e. product of F' along the segment).
    """
    m = z.shape[0]
    rows = imax - imin + 1
    pts = np.empty((rows, m), dtype=np.float64)
    dpts = np.empty((rows, m), dtype=np.float64)
    for c in range(m):
        x = z[c]
        d = 1.0
        for i in range(1, imax + 1):
            y = f_inverse(knots, kinds, coef, x)
            d *= deriv_piece(knots, kinds, coef, piece_of(knots, y), y)
            x = y
            if i >= imin:
                pts[i - imin, c] = x
                dpts[i - imin, c] = d
        if imin == 0:
            pts[0, c] = z[c]
            dpts[0, c] = 1.0
    return pts, dpts


@njit(cache=True)
def eval_array(knots, kinds, coef, xs):
    out = np.empty_like(xs)
    for i in range(xs.shape[0]):
        out[i] = f_eval(knots, kinds, coef, xs[i])
    return out


@njit(cache=True)
def deriv_array(knots, kinds, coef, xs):
    out = np.empty_like(xs)
    for i in range(xs.shape[0]):
        out[i] = f_deriv(knots, kinds, coef, xs[i])
    return out


@njit(cache=True)
def second_array(knots, kinds, coef, xs):
    out = np.empty_like(xs)
    for i in range(xs.shape[0]):
        out[i] = f_second(knots, kinds, coef, xs[i])
    return out


@njit(cache=True)
def inverse_array(knots, kinds, coef, ys):
    out = np.empty_like(ys)
    for i in range(ys.shape[0]):
        out[i] = f_inverse(knots, kinds, coef, ys[i])
    return out


@njit(cache=True)
def iterate_array(knots, kinds, coef, xs, n):
    """Iterate every entry n times (n may be negative); NaN marks exits."""
    out = np.empty_like(xs)
    for i in range(xs.shape[0]):
        if n >= 0:
            v, done = iterate_forward(knots, kinds, coef, xs[i], n)
            out[i] = v if done == n else np.nan
        else:
            v, done = iterate_backward(knots, kinds, coef, xs[i], -n)
            out[i] = v if done == -n else np.nan
    return out


@njit(cache=True)
def iterate_deriv_array(knots, kinds, coef, xs, n):
    vals = np.empty_like(xs)
    ders = np.empty_like(xs)
    for i in range(xs.shape[0]):
        v, d, done = iterate_with_deriv(knots, kinds, coef, xs[i], n)
        vals[i] = v
        ders[i] = d
    return vals, ders


# ---------------------------------------------------------------------------
# double-double evaluation, used where long orbit segments must be replayed
# to well below binary64 resolution (onto-ness of return branches)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit(cache=True)
def _quick_two_sum(a, b):
    s = a + b
    return s, b - (s - a)


@njit(cache=True)
def _split(a):
    c = 134217729.0 * a
    hi = c - (c - a)
    return hi, a - hi


@njit(cache=True)
def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(cache=True)
def dd_add(ah, al, bh, bl):
    s, e = _two_sum(ah, bh)
    e += al + bl
    return _quick_two_sum(s, e)


@njit(cache=True)
def dd_mul(ah, al, bh, bl):
    p, e = _two_prod(ah, bh)
    e += ah * bl + al * bh
    return _quick_two_sum(p, e)


@njit(cache=True)
def eval_piece_dd(knots, kinds, coef, j, xh, xl):
    k = kinds[j]
    if k == AFFINE:
        uh, ul = dd_add(xh, xl, -coef[j, 2], 0.0)
        vh, vl = dd_mul(uh, ul, coef[j, 1], 0.0)
        return dd_add(vh, vl, coef[j, 0], 0.0)
    if k == QUADRATIC:
        qh, ql = dd_mul(xh, xl, xh, xl)
        rh, rl = dd_add(xh, xl, qh, ql)
        return dd_add(rh, rl, -coef[j, 0], 0.0)
    uh, ul = dd_add(xh, xl, -knots[j], 0.0)
    ph, pl = coef[j, 3], 0.0
    for c in (2, 1, 0):
        ph, pl = dd_mul(ph, pl, uh, ul)
        ph, pl = dd_add(ph, pl, coef[j, c], 0.0)
    return ph, pl


@njit(cache=True)
def f_eval_dd(knots, kinds, coef, xh, xl):
    j = piece_of(knots, xh)
    if j < 0:
        return np.nan, 0.0
    return eval_piece_dd(knots, kinds, coef, j, xh, xl)


@njit(cache=True)
def f_inverse_dd(knots, kinds, coef, yh, yl):
    x = f_inverse(knots, kinds, coef, yh)
    if math.isnan(x):
        return np.nan, 0.0
    xh, xl = x, 0.0
    for _ in range(2):
        j = piece_of(knots, xh)
        if j < 0:
            return np.nan, 0.0
        fh, fl = eval_piece_dd(knots, kinds, coef, j, xh, xl)
        rh, rl = dd_add(fh, fl, -yh, -yl)
        d = deriv_piece(knots, kinds, coef, j, xh)
        xh, xl = dd_add(xh, xl, -(rh + rl) / d, 0.0)
    return xh, xl


@njit(cache=True)
def backward_until_dd(knots, kinds, coef, xh, xl, bound, cap):
    """Least n with the n-th backward image (in double-double) strictly below ``bound``."""
    for i in range(cap + 1):
        if xh + xl < bound:
            return i, xh, xl
        if i == cap:
            break
        yh, yl = f_inverse_dd(knots, kinds, coef, xh, xl)
        if math.isnan(yh):
            return -2, xh, xl
        xh, xl = yh, yl
    return -1, xh, xl


@njit(cache=True)
def backward_chain_dd(knots, kinds, coef, xh, xl, lower, cap):
    his = np.empty(cap, dtype=np.float64)
    los = np.empty(cap, dtype=np.float64)
    m = 0
    while m < cap and xh + xl > lower:
        his[m] = xh
        los[m] = xl
        m += 1
        yh, yl = f_inverse_dd(knots, kinds, coef, xh, xl)
        if math.isnan(yh) or yh >= xh:
            break
        xh, xl = yh, yl
    return his[:m], los[:m]


@njit(cache=True)
def forward_dd(knots, kinds, coef, xh, xl, n):
    for _ in range(n):
        yh, yl = f_eval_dd(knots, kinds, coef, xh, xl)
        if math.isnan(yh):
            return np.nan, 0.0
        xh, xl = yh, yl
    return xh, xl


@njit(cache=True)
def orbit_dd_sweep(knots, kinds, coef, xh, xl, n0, count):
    """Forward orbit in double-double at steps n0, n0+1, ..., n0+count-1."""
    his = np.empty(count, dtype=np.float64)
    los = np.empty(count, dtype=np.float64)
    xh, xl = forward_dd(knots, kinds, coef, xh, xl, n0)
    for i in range(count):
        his[i] = xh
        los[i] = xl
        if i + 1 < count:
            xh, xl = f_eval_dd(knots, kinds, coef, xh, xl)
    return his, los


@njit(cache=True)
def shifted_power_dd(knots, kinds, coef, xh, xl, n, off_h, off_l):
    """Entrywise F^n(x) + off in double-double."""
    m = xh.shape[0]
    oh = np.empty(m, dtype=np.float64)
    ol = np.empty(m, dtype=np.float64)
    for c in range(m):
        yh, yl = forward_dd(knots, kinds, coef, xh[c], xl[c], n)
        oh[c], ol[c] = dd_add(yh, yl, off_h, off_l)
    return oh, ol
