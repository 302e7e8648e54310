"""Weak-form residuals of a discrete trajectory.

For a test function ``phi(x, y, t) = S(x, y) q(t)`` the two identities audited are

    int int u phi_t + int u0 phi(0)
        = int int grad u . D grad phi + int int u div D . grad phi
          - chi int int u grad w . D grad phi - mu int int u (1 - u^(r-1)) phi

    int int w phi_t + int w0 phi(0) = int int u w phi

Space integrals are cell-centred midpoint sums with the reconstructed cell
gradient and the cell samples of ``D``.  In time, every space integral is
interpolated linearly between stored outputs and integrated exactly against
``q`` or ``q'`` (the product form of the trapezoid rule), so a field that is
constant in time reproduces ``q(T) - q(0)`` to round-off.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .grid import Grid, cell_gradient

__all__ = [
    "TestFunction",
    "default_library",
    "WeakAudit",
    "Residual",
    "ResidualReport",
    "residual_u",
    "residual_w",
    "audit",
]

U_TERMS = ("u_phi_t", "u0_phi0", "diffusion", "myopic", "taxis", "logistic")
W_TERMS = ("w_phi_t", "w0_phi0", "uw_phi")

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Separable test function ``px(x) py(y) q(t)``.

    Each factor callable returns ``(value, derivative)``.  ``q`` vanishes for
    ``t >= t_end``.
    """

    __test__ = False  # not a pytest class

    id: int
    px: Callable
    py: Callable
    q: Callable
    t_end: float
    box: tuple[float, float, float, float]
    kind: str = "bump"
    scale: float = 1.0

    def spatial(self, x, y):
        """``(S, dS/dx, dS/dy)`` at the given points."""
        fx, dfx = self.px(np.asarray(x, float))
        fy, dfy = self.py(np.asarray(y, float))
        c = self.scale
        return c * fx * fy, c * dfx * fy, c * fx * dfy

    def time(self, t):
        return self.q(np.asarray(t, float))

    def __call__(self, x, y, t):
        return self.spatial(x, y)[0] * self.time(t)[0]

    def grad(self, x, y, t):
        _, sx, sy = self.spatial(x, y)
        q = self.time(t)[0]
        return sx * q, sy * q

    def phi_t(self, x, y, t):
        return self.spatial(x, y)[0] * self.time(t)[1]

    def scaled(self, c: float) -> "TestFunction":
        return TestFunction(self.id, self.px, self.py, self.q, self.t_end, self.box, self.kind, self.scale * c)


# --------------------------------------------------------------------------
# library


def _time_factor(t_end: float, c: float):
    """``(1 - t/t_end)_+^4 (1 + c t/t_end)`` and its derivative."""

    def q(t):
        tau = t / t_end
        s = np.clip(1.0 - tau, 0.0, None)
        val = s**4 * (1.0 + c * tau)
        der = (-4.0 * s**3 * (1.0 + c * tau) + s**4 * c) / t_end
        return val, der

    return q


def _constant_factor():
    def f(x):
        return np.ones_like(x), np.zeros_like(x)

    return f


def _bump_factor(lo: float, hi: float, coef: np.ndarray):
    """``exp(-1/(1 - xi^2)) * poly(xi)`` on the mapped interval, zero outside."""
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    poly = np.polynomial.Polynomial(coef)
    dpoly = poly.deriv()

    def f(x):
        xi = (x - mid) / half
        inside = np.abs(xi) < 1.0
        z = np.where(inside, 1.0 - xi * xi, 1.0)
        b = np.where(inside, np.exp(-1.0 / z), 0.0)
        db = np.where(inside, b * (-2.0 * xi / (z * z)), 0.0)
        return b * poly(xi), (db * poly(xi) + b * dpoly(xi)) / half

    return f


def _cosine_factor(lo: float, hi: float, w: float, phase: float):
    """``cos(w xi + phase)`` on the mapped interval.

    With ``w`` in ``[pi/4, 3pi/4]`` and ``phase`` in ``[0, pi/3]`` the mean
    over the interval stays bounded away from zero, so the normalizing terms
    of a spatially uniform trajectory do not cancel.
    """
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)

    def f(x):
        xi = (x - mid) / half
        return np.cos(w * xi + phase), -w * np.sin(w * xi + phase) / half

    return f


def default_library(k: int, T: float, seed: int = 0,
                    box: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)) -> list[TestFunction]:
    """Seeded library of ``k`` separable test functions supported in ``t < 0.8 T``.

    Element 0 is constant in space with time factor ``(1 - t/T')_+^4``,
    ``T' = 0.8 T``.  The remaining elements alternate between smooth bumps
    that vanish with all derivatives on the bounding box and cosine factors
    that do not vanish on the boundary.
    """
    if k < 1:
        raise ValueError("library size must be >= 1")
    if not T > 0:
        raise ValueError("T must be positive")
    t_end = 0.8 * T
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = box
    lib = [TestFunction(0, _constant_factor(), _constant_factor(), _time_factor(t_end, 0.0), t_end, box, "constant")]
    for i in range(1, k):
        c = float(rng.uniform(-0.5, 1.0))
        if i % 2 == 1:
            cx = np.concatenate([[1.0], rng.uniform(-0.5, 0.5, 2)])
            cy = np.concatenate([[1.0], rng.uniform(-0.5, 0.5, 2)])
            lib.append(TestFunction(i, _bump_factor(x0, x1, cx), _bump_factor(y0, y1, cy),
                                    _time_factor(t_end, c), t_end, box, "bump"))
        else:
            wx, wy = (float(v) for v in rng.uniform(0.25 * math.pi, 0.75 * math.pi, 2))
            px, py = (float(v) for v in rng.uniform(0.0, math.pi / 3, 2))
            lib.append(TestFunction(i, _cosine_factor(x0, x1, wx, px), _cosine_factor(y0, y1, wy, py),
                                    _time_factor(t_end, c), t_end, box, "boundary"))
    return lib


# --------------------------------------------------------------------------
# time quadrature


def hat_weights(times: np.ndarray, fn: Callable, breaks: Sequence[float] = ()) -> np.ndarray:
    """``int hat_k(t) fn(t) dt`` for the piecewise-linear hat basis on ``times``.

    Four-point Gauss-Legendre per subinterval, with subintervals split at
    ``breaks`` so that piecewise polynomials of degree <= 6 are exact.
    """
    times = np.asarray(times, float)
    out = np.zeros(len(times))
    for k in range(len(times) - 1):
        a, b = times[k], times[k + 1]
        cuts = [a] + [c for c in breaks if a < c < b] + [b]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            tq = 0.5 * (hi - lo) * _GL_X + 0.5 * (hi + lo)
            wq = 0.5 * (hi - lo) * _GL_W
            f = fn(tq)
            lam = (tq - a) / (b - a)
            out[k] += np.sum(wq * f * (1.0 - lam))
            out[k + 1] += np.sum(wq * f * lam)
    return out


# --------------------------------------------------------------------------
# residuals


@dataclass(frozen=True)
class Residual:
    """Signed and normalized residuals with their constituent terms."""

    phi_id: int
    terms_u: dict
    terms_w: dict

    @staticmethod
    def _normalize(signed: float, terms: dict) -> float:
        scale = max(abs(v) for v in terms.values())
        if scale == 0.0:
            return 0.0
        return abs(signed) / scale

    @property
    def signed_u(self) -> float:
        t = self.terms_u
        return (t["u_phi_t"] + t["u0_phi0"]) - (t["diffusion"] + t["myopic"] - t["taxis"] - t["logistic"])

    @property
    def signed_w(self) -> float:
        t = self.terms_w
        return t["w_phi_t"] + t["w0_phi0"] - t["uw_phi"]

    @property
    def raw_u(self) -> float:
        return abs(self.signed_u)

    @property
    def raw_w(self) -> float:
        return abs(self.signed_w)

    @property
    def residual_u(self) -> float:
        return self._normalize(self.signed_u, self.terms_u)

    @property
    def residual_w(self) -> float:
        return self._normalize(self.signed_w, self.terms_w)


class WeakAudit:
    """Precomputed per-output space fields of a trajectory.

    ``system="generated"`` audits the system that produced the trajectory
    (``r_eff`` and the stored, possibly regularized, tensor);
    ``system="target"`` audits the unregularized system (``r`` and the tensor
    with the ``2 eps`` diagonal shift removed).
    """

    def __init__(self, trajectory, D=None, params=None, system: str = "generated"):
        if system not in ("generated", "target"):
            raise ValueError(f"unknown system {system!r}")
        grid: Grid = trajectory.grid
        params = trajectory.params if params is None else params
        D = trajectory.tensor if D is None else D
        cells = D.cells
        r = params.r_eff
        if system == "target":
            r = params.r
            if D.eps > 0:
                cells = cells.shifted(-2.0 * D.eps)
        states = trajectory.primal_states()
        if len(states) < 2:
            raise ValueError("a weak audit needs at least two output times")
        self.grid = grid
        self.params = params
        self.times = np.array([s.t for s in states])
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("output times must increase")
        m = grid.mask
        self.area = grid.cell_area
        X, Y = grid.centers
        self.x, self.y = X[m], Y[m]
        chi, mu = params.chi, params.mu
        d11, d12, d22 = cells.d11[m], cells.d12[m], cells.d22[m]
        dvx, dvy = cells.divx[m], cells.divy[m]
        n = len(states)
        size = int(m.sum())
        self.U = np.empty((n, size))
        self.W = np.empty((n, size))
        self.Fx = np.empty((n, size))  # D grad u
        self.Fy = np.empty((n, size))
        self.Mx = np.empty((n, size))  # u div D
        self.My = np.empty((n, size))
        self.Tx = np.empty((n, size))  # chi u D grad w
        self.Ty = np.empty((n, size))
        self.L = np.empty((n, size))  # mu u (1 - u^(r-1))
        self.UW = np.empty((n, size))
        for k, s in enumerate(states):
            u = np.where(m, s.u, 0.0)
            w = np.where(m, s.w, 0.0)
            gx, gy = cell_gradient(u, grid)
            wx, wy = cell_gradient(w, grid)
            uk, wk = u[m], w[m]
            gx, gy, wx, wy = gx[m], gy[m], wx[m], wy[m]
            self.U[k], self.W[k] = uk, wk
            self.Fx[k] = d11 * gx + d12 * gy
            self.Fy[k] = d12 * gx + d22 * gy
            self.Mx[k] = uk * dvx
            self.My[k] = uk * dvy
            self.Tx[k] = chi * uk * (d11 * wx + d12 * wy)
            self.Ty[k] = chi * uk * (d12 * wx + d22 * wy)
            self.L[k] = mu * uk * (1.0 - uk ** (r - 1.0))
            self.UW[k] = uk * wk
        for name in ("U", "W", "Fx", "Fy", "Mx", "My", "Tx", "Ty", "L", "UW"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in trajectory field {name}")

    def evaluate(self, phi: TestFunction) -> Residual:
        S, Sx, Sy = phi.spatial(self.x, self.y)
        a = self.area
        breaks = (phi.t_end,)
        wq = hat_weights(self.times, lambda t: phi.time(t)[0], breaks)
        wdq = hat_weights(self.times, lambda t: phi.time(t)[1], breaks)
        q0 = float(phi.time(0.0)[0])

        def st(field_arr, vec):
            return (field_arr @ vec) * a

        def grad_term(Ax, Ay):
            return float(wq @ (st(Ax, Sx) + st(Ay, Sy)))

        US = st(self.U, S)
        WS = st(self.W, S)
        terms_u = {
            "u_phi_t": float(wdq @ US),
            "u0_phi0": q0 * float(US[0]),
            "diffusion": grad_term(self.Fx, self.Fy),
            "myopic": grad_term(self.Mx, self.My),
            "taxis": grad_term(self.Tx, self.Ty),
            "logistic": float(wq @ st(self.L, S)),
        }
        terms_w = {
            "w_phi_t": float(wdq @ WS),
            "w0_phi0": q0 * float(WS[0]),
            "uw_phi": float(wq @ st(self.UW, S)),
        }
        for name, v in {**terms_u, **terms_w}.items():
            if not math.isfinite(v):
                raise FloatingPointError(
                    f"non-finite weak-form term {name} for phi {phi.id}: u terms {terms_u}, w terms {terms_w}")
        return Residual(phi.id, terms_u, terms_w)


def residual_u(trajectory, D, params, phi: TestFunction, system: str = "generated") -> float:
    """Normalized residual of the u-identity for one test function."""
    return WeakAudit(trajectory, D, params, system).evaluate(phi).residual_u


def residual_w(trajectory, phi: TestFunction) -> float:
    """Normalized residual of the w-identity for one test function."""
    return WeakAudit(trajectory).evaluate(phi).residual_w


@dataclass
class ResidualReport:
    rows: list[dict] = field(default_factory=list)

    def extend(self, refinement, residuals: Sequence[Residual]) -> None:
        for res in residuals:
            row = {"phi_id": res.phi_id, "refinement": refinement,
                   "residual_u": res.residual_u, "residual_w": res.residual_w,
                   "raw_u": res.raw_u, "raw_w": res.raw_w}
            row.update(res.terms_u)
            row.update(res.terms_w)
            self.rows.append(row)

    def max_residual(self, refinement=None) -> float:
        rows = [r for r in self.rows if refinement is None or r["refinement"] == refinement]
        if not rows:
            return 0.0
        return max(max(r["residual_u"], r["residual_w"]) for r in rows)

    def column(self, key: str, refinement=None) -> np.ndarray:
        return np.array([r[key] for r in self.rows if refinement is None or r["refinement"] == refinement])

    def to_csv(self, path: str | Path) -> None:
        keys = ["phi_id", "refinement", "residual_u", "residual_w", "raw_u", "raw_w", *U_TERMS, *W_TERMS]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(keys)
            for r in self.rows:
                wr.writerow([r[k] if isinstance(r[k], (int, str)) else repr(float(r[k])) for k in keys])


def audit(trajectory, library: Sequence[TestFunction], refinement=None, threads: int = 1,
          system: str = "generated", report: ResidualReport | None = None) -> ResidualReport:
    """Evaluate every test function; results are assembled in library order."""
    wa = WeakAudit(trajectory, system=system)
    report = ResidualReport() if report is None else report
    label = trajectory.grid.nx if refinement is None else refinement
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(wa.evaluate, library))
    else:
        results = [wa.evaluate(phi) for phi in library]
    report.extend(label, results)
    return report
