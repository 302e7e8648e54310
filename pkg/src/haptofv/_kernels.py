"""Fused loop kernels for the time-stepping hot path.

These mirror the vectorized operators in :mod:`haptofv.dynamics` face by face;
the test suite checks agreement with the numpy path to round-off.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _pair_sums(f, vxh, vyh, sx, sy):
    """Per-cell sums of the valid neighbour differences along x and y."""
    nx, ny = f.shape
    for i in range(nx):
        for j in range(ny):
            sx[i, j] = 0.0
            sy[i, j] = 0.0
    for i in range(nx - 1):
        for j in range(ny):
            d = (f[i + 1, j] - f[i, j]) * vxh[i, j]
            sx[i + 1, j] += d
            sx[i, j] += d
    for i in range(nx):
        for j in range(ny - 1):
            d = (f[i, j + 1] - f[i, j]) * vyh[i, j]
            sy[i, j + 1] += d
            sy[i, j] += d


def _primal_transport(u, w, xact, yact, vxh, vyh, inv_xt, inv_yt,
                      x11, x12, xdx, y12, y22, ydy, hx, hy, chi, out):
    """Flux divergence of the primal u-equation into ``out``; returns max |v|."""
    nx, ny = u.shape
    sxu = np.empty_like(u)
    syu = np.empty_like(u)
    sxw = np.empty_like(u)
    syw = np.empty_like(u)
    _pair_sums(u, vxh, vyh, sxu, syu)
    if chi != 0.0:
        _pair_sums(w, vxh, vyh, sxw, syw)
    vmax = 0.0
    for i in range(nx):
        for j in range(ny):
            out[i, j] = 0.0
    for i in range(nx - 1):
        for j in range(ny):
            if not xact[i, j]:
                continue
            gn = (u[i + 1, j] - u[i, j]) / hx
            gt = (syu[i, j] + syu[i + 1, j]) * inv_xt[i, j]
            v = xdx[i, j]
            if chi != 0.0:
                wn = (w[i + 1, j] - w[i, j]) / hx
                wt = (syw[i, j] + syw[i + 1, j]) * inv_xt[i, j]
                v = v - chi * (x11[i, j] * wn + x12[i, j] * wt)
            up = u[i + 1, j] if v > 0 else u[i, j]
            J = (x11[i, j] * gn + x12[i, j] * gt + up * v) / hx
            out[i, j] += J
            out[i + 1, j] -= J
            if abs(v) > vmax:
                vmax = abs(v)
    for i in range(nx):
        for j in range(ny - 1):
            if not yact[i, j]:
                continue
            gn = (u[i, j + 1] - u[i, j]) / hy
            gt = (sxu[i, j] + sxu[i, j + 1]) * inv_yt[i, j]
            v = ydy[i, j]
            if chi != 0.0:
                wn = (w[i, j + 1] - w[i, j]) / hy
                wt = (sxw[i, j] + sxw[i, j + 1]) * inv_yt[i, j]
                v = v - chi * (y12[i, j] * wt + y22[i, j] * wn)
            up = u[i, j + 1] if v > 0 else u[i, j]
            J = (y12[i, j] * gt + y22[i, j] * gn + up * v) / hy
            out[i, j] += J
            out[i, j + 1] -= J
            if abs(v) > vmax:
                vmax = abs(v)
    return vmax


def _transformed_transport(a, w, xact, yact, vxh, vyh, inv_xt, inv_yt,
                           x11, x12, xdx, y12, y22, ydy, hx, hy, chi, out):
    """e^{chi w}-weighted flux divergence of the a-equation (not yet divided by
    the cell factor) into ``out``.

    Returns the max |v| of the primal drift ``div D - chi D grad w`` so that
    both formulations share one step-size rule.
    """
    nx, ny = a.shape
    sxa = np.empty_like(a)
    sya = np.empty_like(a)
    sxw = np.empty_like(a)
    syw = np.empty_like(a)
    E = np.empty_like(a)
    _pair_sums(a, vxh, vyh, sxa, sya)
    _pair_sums(w, vxh, vyh, sxw, syw)
    for i in range(nx):
        for j in range(ny):
            out[i, j] = 0.0
            E[i, j] = math.exp(chi * w[i, j])
    vmax = 0.0
    for i in range(nx - 1):
        for j in range(ny):
            if not xact[i, j]:
                continue
            Ef = 0.5 * (E[i, j] + E[i + 1, j])
            gn = (a[i + 1, j] - a[i, j]) / hx
            gt = (sya[i, j] + sya[i + 1, j]) * inv_xt[i, j]
            v = xdx[i, j]
            up = a[i + 1, j] if v > 0 else a[i, j]
            J = Ef * (x11[i, j] * gn + x12[i, j] * gt + up * v) / hx
            out[i, j] += J
            out[i + 1, j] -= J
            wn = (w[i + 1, j] - w[i, j]) / hx
            wt = (syw[i, j] + syw[i + 1, j]) * inv_xt[i, j]
            vp = abs(v - chi * (x11[i, j] * wn + x12[i, j] * wt))
            if vp > vmax:
                vmax = vp
    for i in range(nx):
        for j in range(ny - 1):
            if not yact[i, j]:
                continue
            Ef = 0.5 * (E[i, j] + E[i, j + 1])
            gn = (a[i, j + 1] - a[i, j]) / hy
            gt = (sxa[i, j] + sxa[i, j + 1]) * inv_yt[i, j]
            v = ydy[i, j]
            up = a[i, j + 1] if v > 0 else a[i, j]
            J = Ef * (y12[i, j] * gt + y22[i, j] * gn + up * v) / hy
            out[i, j] += J
            out[i, j + 1] -= J
            wn = (w[i, j + 1] - w[i, j]) / hy
            wt = (sxw[i, j] + sxw[i, j + 1]) * inv_yt[i, j]
            vp = abs(v - chi * (y12[i, j] * wt + y22[i, j] * wn))
            if vp > vmax:
                vmax = vp
    return vmax


def _power(x, e):
    if e == 1.0:
        return x
    if e == 2.0:
        return x * x
    return x ** e


def _primal_update(u, w, transport, mask, mu, r_eff, dt, area, u_new, w_new):
    """Euler step for u, exponential step for w.

    Returns ``(clips, mass_old, mass_new, source, finite)``.
    """
    nx, ny = u.shape
    clips = 0
    m_old = 0.0
    m_new = 0.0
    src = 0.0
    finite = True
    for i in range(nx):
        for j in range(ny):
            if not mask[i, j]:
                u_new[i, j] = 0.0
                w_new[i, j] = 0.0
                continue
            uc = u[i, j]
            react = mu * uc * (1.0 - _power(uc, r_eff - 1.0))
            rate = transport[i, j] + react
            if not math.isfinite(rate):
                finite = False
            trial = uc + dt * rate
            if trial < 0.0:
                clips += 1
                trial = 0.0
            u_new[i, j] = trial
            w_new[i, j] = w[i, j] * math.exp(-uc * dt)
            m_old += uc
            m_new += trial
            src += react
    return clips, m_old * area, m_new * area, src * area, finite


def _transformed_update(a, w, transport, mask, mu, r_eff, chi, dt, a_new, w_new):
    nx, ny = a.shape
    clips = 0
    finite = True
    for i in range(nx):
        for j in range(ny):
            if not mask[i, j]:
                a_new[i, j] = 0.0
                w_new[i, j] = 0.0
                continue
            ac = a[i, j]
            E = math.exp(chi * w[i, j])
            uc = ac * E
            rate = transport[i, j] / E + mu * ac * (1.0 - _power(uc, r_eff - 1.0))
            if not math.isfinite(rate):
                finite = False
            trial = ac + dt * rate
            if trial < 0.0:
                clips += 1
                trial = 0.0
            wn = w[i, j] * math.exp(-uc * dt)
            w_new[i, j] = wn
            a_new[i, j] = trial * math.exp(chi * (w[i, j] - wn))
    return clips, finite


def _umax(u, mask):
    m = 0.0
    nx, ny = u.shape
    for i in range(nx):
        for j in range(ny):
            if mask[i, j] and u[i, j] > m:
                m = u[i, j]
    return m


def _umax_transformed(a, w, mask, chi):
    m = 0.0
    nx, ny = a.shape
    for i in range(nx):
        for j in range(ny):
            if mask[i, j]:
                val = a[i, j] * math.exp(chi * w[i, j])
                if val > m:
                    m = val
    return m


if njit is not None:
    _pair_sums = njit(cache=True)(_pair_sums)
    _power = njit(cache=True)(_power)
    primal_transport = njit(cache=True)(_primal_transport)
    transformed_transport = njit(cache=True)(_transformed_transport)
    primal_update = njit(cache=True)(_primal_update)
    transformed_update = njit(cache=True)(_transformed_update)
    umax = njit(cache=True)(_umax)
    umax_transformed = njit(cache=True)(_umax_transformed)
    AVAILABLE = True
else:  # pragma: no cover
    AVAILABLE = False


def tensor_args(D, grid):
    st = grid._stencil
    xf, yf = D.xfaces, D.yfaces
    c = np.ascontiguousarray
    return (
        c(grid.xface_active), c(grid.yface_active), c(st["vx"] / grid.hx), c(st["vy"] / grid.hy),
        c(st["inv_xface_t"]), c(st["inv_yface_t"]),
        c(xf.d11), c(xf.d12), c(xf.divx), c(yf.d12), c(yf.d22), c(yf.divy),
        float(grid.hx), float(grid.hy),
    )
