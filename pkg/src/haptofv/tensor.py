"""Diffusion/taxis tensor fields sampled on a :class:`~haptofv.grid.Grid`.

A :class:`TensorField` stores the three independent entries of a symmetric
2x2 matrix at cell centres and at both face families, together with the
column-wise divergence ``div D = (d_x D_11 + d_y D_21, d_x D_12 + d_y D_22)``.

The two degenerate prototypes on the unit disk are

* ``D1(x) = |x|^s I`` (single degenerate point), ``div D1 = s |x|^(s-2) x``;
* ``D2(x) = |x_1|^s I`` (degenerate line), ``div D2 = (s |x_1|^(s-2) x_1, 0)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .grid import Grid, cell_integral

__all__ = [
    "SingularSampleError",
    "TensorField",
    "PSDReport",
    "DivergenceEstimateFit",
    "HypothesisCheck",
    "eval_prototype_d1",
    "eval_prototype_d2",
    "prototype",
    "constant",
    "from_function",
    "from_csv",
    "regularize",
    "validate_psd",
    "default_battery",
    "fit_divergence_estimate",
    "beta_admissible_range",
    "validate_theorem_hypotheses",
    "min_eigenvalue",
]


class SingularSampleError(ValueError):
    """Raised when a prototype divergence is sampled at its singular point."""


def min_eigenvalue(d11, d12, d22):
    d11, d12, d22 = np.asarray(d11), np.asarray(d12), np.asarray(d22)
    return 0.5 * (d11 + d22) - np.hypot(0.5 * (d11 - d22), d12)


def max_eigenvalue(d11, d12, d22):
    d11, d12, d22 = np.asarray(d11), np.asarray(d12), np.asarray(d22)
    return 0.5 * (d11 + d22) + np.hypot(0.5 * (d11 - d22), d12)


@dataclass(frozen=True)
class Samples:
    """Matrix entries and divergence at one family of sample points."""

    d11: np.ndarray
    d12: np.ndarray
    d22: np.ndarray
    divx: np.ndarray
    divy: np.ndarray

    def shifted(self, delta: float) -> "Samples":
        return replace(self, d11=self.d11 + delta, d22=self.d22 + delta)


@dataclass(frozen=True, eq=False)
class TensorField:
    cells: Samples
    xfaces: Samples
    yfaces: Samples
    tag: str = "user"
    s: float | None = None
    analytic_divergence: bool = False
    eps: float = 0.0
    meta: dict = field(default_factory=dict)

    def matrix_at_cells(self) -> np.ndarray:
        c = self.cells
        return np.stack([np.stack([c.d11, c.d12], -1), np.stack([c.d12, c.d22], -1)], -2)

    def all_samples(self, grid: Grid):
        """Yield ``(name, samples, active mask)`` for cells and interior faces."""
        yield "cell", self.cells, grid.mask
        yield "xface", self.xfaces, grid.xface_active
        yield "yface", self.yfaces, grid.yface_active


# --------------------------------------------------------------------------
# prototypes


def _d1_entries(x, y, s):
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    r = np.hypot(x, y)
    scale = r**s
    at_origin = r == 0.0
    if np.any(at_origin) and s <= 1:
        raise SingularSampleError(
            f"div D1 is singular at the origin for s={s} <= 1; shift the grid or use an even cell count"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(at_origin, 0.0, s * r ** (s - 2.0))
    return scale, scale, fac * x, fac * y


def _d2_entries(x, y, s):
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    ax = np.abs(x)
    scale = ax**s
    with np.errstate(divide="ignore", invalid="ignore"):
        divx = np.where(ax == 0.0, 0.0, s * ax ** (s - 2.0) * x)
    return scale, scale, divx, np.zeros_like(x)


def eval_prototype_d1(x: Sequence[float], s: float):
    """Return ``(matrix, divergence)`` of ``|x|^s I`` at one point."""
    if s <= 0:
        raise ValueError("D1 requires s > 0")
    scale, _, dx, dy = _d1_entries(x[0], x[1], s)
    return float(scale) * np.eye(2), np.array([float(dx), float(dy)])


def eval_prototype_d2(x: Sequence[float], s: float):
    """Return ``(matrix, divergence)`` of ``|x_1|^s I`` at one point."""
    if s <= 1:
        raise ValueError("D2 requires s > 1")
    scale, _, dx, dy = _d2_entries(x[0], x[1], s)
    return float(scale) * np.eye(2), np.array([float(dx), float(dy)])


def _sample(grid: Grid, fn) -> tuple[Samples, Samples, Samples]:
    out = []
    for X, Y in (grid.centers, grid.xface_centers, grid.yface_centers):
        d11, d22, dx, dy = fn(X, Y)
        out.append(Samples(d11, np.zeros_like(d11), d22, dx, dy))
    return tuple(out)


def prototype(grid: Grid, kind: str, s: float) -> TensorField:
    """Sample a prototype (``"D1"`` or ``"D2"``) analytically on cells and faces."""
    kind = kind.upper()
    if kind == "D1":
        if s <= 0:
            raise ValueError("D1 requires s > 0")
        cells, xf, yf = _sample(grid, lambda X, Y: _d1_entries(X, Y, s))
    elif kind == "D2":
        if s <= 1:
            raise ValueError("D2 requires s > 1")
        cells, xf, yf = _sample(grid, lambda X, Y: _d2_entries(X, Y, s))
    else:
        raise ValueError(f"unknown prototype {kind!r}")
    return TensorField(cells, xf, yf, tag=kind, s=float(s), analytic_divergence=True)


def constant(grid: Grid, matrix) -> TensorField:
    """Spatially constant tensor; the divergence vanishes identically."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (2, 2):
        raise ValueError("constant tensor must be 2x2")
    if abs(m[0, 1] - m[1, 0]) > 1e-14 * max(1.0, np.abs(m).max()):
        raise ValueError("constant tensor must be symmetric")

    def build(shape):
        z = np.zeros(shape)
        return Samples(z + m[0, 0], z + m[0, 1], z + m[1, 1], z.copy(), z.copy())

    X, _ = grid.centers
    XF, _ = grid.xface_centers
    YF, _ = grid.yface_centers
    return TensorField(build(X.shape), build(XF.shape), build(YF.shape), tag="constant",
                       analytic_divergence=True)


def _fd_divergence(grid: Grid, d11, d12, d22):
    def grad(f, axis, h):
        if f.shape[axis] < 2:
            return np.zeros_like(f)
        return np.gradient(f, h, axis=axis, edge_order=1 if f.shape[axis] < 3 else 2)

    divx = grad(d11, 0, grid.hx) + grad(d12, 1, grid.hy)
    divy = grad(d12, 0, grid.hx) + grad(d22, 1, grid.hy)
    return divx, divy


def _faces_by_average(cells: Samples) -> tuple[Samples, Samples]:
    def avg(a, axis):
        return 0.5 * (a[:-1, :] + a[1:, :]) if axis == 0 else 0.5 * (a[:, :-1] + a[:, 1:])

    names = ("d11", "d12", "d22", "divx", "divy")
    xf = Samples(*(avg(getattr(cells, n), 0) for n in names))
    yf = Samples(*(avg(getattr(cells, n), 1) for n in names))
    return xf, yf


def from_function(grid: Grid, entries: Callable, divergence: Callable | None = None,
                  tag: str = "user") -> TensorField:
    """Tensor from ``entries(x, y) -> (d11, d12, d22)``.

    With ``divergence(x, y) -> (divx, divy)`` all samples are analytic; without
    it the divergence is taken by finite differences of the cell samples and
    face values are arithmetic averages of adjacent cells.
    """
    if divergence is not None:
        out = []
        for X, Y in (grid.centers, grid.xface_centers, grid.yface_centers):
            d11, d12, d22 = (np.broadcast_to(np.asarray(a, float), X.shape).copy()
                             for a in entries(X, Y))
            dx, dy = (np.broadcast_to(np.asarray(a, float), X.shape).copy()
                      for a in divergence(X, Y))
            out.append(Samples(d11, d12, d22, dx, dy))
        return TensorField(*out, tag=tag, analytic_divergence=True)
    X, Y = grid.centers
    d11, d12, d22 = (np.broadcast_to(np.asarray(a, float), X.shape).copy() for a in entries(X, Y))
    return from_cell_samples(grid, d11, d12, d22, tag=tag)


def from_cell_samples(grid: Grid, d11, d12, d22, tag: str = "user") -> TensorField:
    divx, divy = _fd_divergence(grid, d11, d12, d22)
    cells = Samples(np.asarray(d11, float), np.asarray(d12, float), np.asarray(d22, float), divx, divy)
    xf, yf = _faces_by_average(cells)
    return TensorField(cells, xf, yf, tag=tag, analytic_divergence=False)


def from_csv(path: str | Path, grid: Grid) -> TensorField:
    """Read cell-centre samples from a CSV with columns ``x, y, d11, d12, d22``.

    Every row must sit on a cell centre of ``grid`` (to within a quarter cell);
    cells without a row are filled with the zero matrix and must be inactive.
    """
    d = {k: np.zeros((grid.nx, grid.ny)) for k in ("d11", "d12", "d22")}
    seen = np.zeros((grid.nx, grid.ny), dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"x", "y", "d11", "d12", "d22"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"tensor CSV lacks columns {sorted(missing)}")
        for row in reader:
            x, y = float(row["x"]), float(row["y"])
            fi = (x - grid.origin[0]) / grid.hx - 0.5
            fj = (y - grid.origin[1]) / grid.hy - 0.5
            i, j = int(round(fi)), int(round(fj))
            if not (0 <= i < grid.nx and 0 <= j < grid.ny) or abs(fi - i) > 0.25 or abs(fj - j) > 0.25:
                raise ValueError(f"tensor CSV point ({x}, {y}) is not a cell centre of the grid")
            for k in d:
                d[k][i, j] = float(row[k])
            seen[i, j] = True
    if np.any(grid.mask & ~seen):
        raise ValueError("tensor CSV does not cover every active cell")
    return from_cell_samples(grid, d["d11"], d["d12"], d["d22"], tag="user")


# --------------------------------------------------------------------------
# regularization and validation


def regularize(D: TensorField, eps: float) -> TensorField:
    """Uniformly positive definite shift ``D_eps = D + 2 eps I``.

    The divergence is unchanged, so ``D + eps <= D_eps <= D + 3 eps`` holds with
    slack ``eps`` on both sides and any divergence estimate of ``D`` transfers.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return replace(
        D,
        cells=D.cells.shifted(2 * eps),
        xfaces=D.xfaces.shifted(2 * eps),
        yfaces=D.yfaces.shifted(2 * eps),
        eps=D.eps + eps,
    )


@dataclass(frozen=True)
class PSDReport:
    passed: bool
    min_eigenvalue: float
    scale: float
    where: str

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"psd {status}: min eigenvalue {self.min_eigenvalue:.6g} at {self.where}"


def validate_psd(D: TensorField, grid: Grid | None = None, rtol: float = 1e-12) -> PSDReport:
    """Smallest eigenvalue over all samples; passes iff >= ``-rtol * scale``."""
    lo, where, scale = np.inf, "", 0.0
    families = (
        D.all_samples(grid)
        if grid is not None
        else (("cell", D.cells, None), ("xface", D.xfaces, None), ("yface", D.yfaces, None))
    )
    for name, smp, active in families:
        lam = min_eigenvalue(smp.d11, smp.d12, smp.d22)
        lam_hi = np.abs(max_eigenvalue(smp.d11, smp.d12, smp.d22))
        if active is not None:
            lam = np.where(active, lam, np.inf)
            lam_hi = np.where(active, lam_hi, 0.0)
        if lam.size == 0:
            continue
        scale = max(scale, float(np.max(lam_hi)))
        k = np.unravel_index(np.argmin(lam), lam.shape)
        if lam[k] < lo:
            lo, where = float(lam[k]), f"{name}{tuple(int(v) for v in k)}"
    passed = lo >= -rtol * max(scale, np.finfo(float).tiny)
    return PSDReport(bool(passed), lo, scale, where)


# --------------------------------------------------------------------------
# divergence estimate


@dataclass(frozen=True)
class RatioRecord:
    name: str
    numerator: float
    quadratic: float
    ratio: float


@dataclass(frozen=True)
class DivergenceEstimateFit:
    """Largest observed ratio over a finite battery of test fields.

    A finite battery only bounds the true constant from below: the fit can
    falsify a claimed constant but never certify one.
    """

    beta: float
    C: float
    n_fields: int
    records: tuple[RatioRecord, ...]

    def worst(self) -> RatioRecord:
        return max(self.records, key=lambda r: r.ratio)


TestField = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def default_battery(seed: int = 0, n: int = 100, degree: int = 4,
                    box: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)):
    """Seeded battery of continuous vector fields as ``(name, callable)`` pairs.

    Constants and coordinate fields first, then random trigonometric
    polynomials of degree <= ``degree`` in each variable (coefficients decay
    like ``1/(1+m+n)``).
    """
    x0, x1, y0, y1 = box
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    lx, ly = 0.5 * (x1 - x0), 0.5 * (y1 - y0)

    def const(a, b):
        return lambda X, Y: (np.full(np.shape(X), a, float), np.full(np.shape(X), b, float))

    fixed = [
        ("const(1,0)", const(1.0, 0.0)),
        ("const(0,1)", const(0.0, 1.0)),
        ("const(1,1)", const(1.0, 1.0)),
        ("const(1,-1)", const(1.0, -1.0)),
        ("coord(x,0)", lambda X, Y: (np.asarray(X, float), np.zeros(np.shape(X)))),
        ("coord(0,y)", lambda X, Y: (np.zeros(np.shape(X)), np.asarray(Y, float))),
        ("coord(x,y)", lambda X, Y: (np.asarray(X, float), np.asarray(Y, float))),
        ("coord(-y,x)", lambda X, Y: (-np.asarray(Y, float), np.asarray(X, float))),
    ]
    fields = fixed[: min(n, len(fixed))]
    rng = np.random.default_rng(seed)
    m = np.arange(degree + 1)
    decay = 1.0 / (1.0 + m[:, None] + m[None, :])

    def trig(coef):
        def phi(X, Y):
            xi = np.pi * (np.asarray(X, float) - cx) / lx
            eta = np.pi * (np.asarray(Y, float) - cy) / ly
            bx = np.stack([np.cos(k * xi) for k in m] + [np.sin(k * xi) for k in m[1:]])
            by = np.stack([np.cos(k * eta) for k in m] + [np.sin(k * eta) for k in m[1:]])
            comps = []
            for c in coef:
                comps.append(np.einsum("ab,a...,b...->...", c, bx, by))
            return comps[0], comps[1]
        return phi

    nb = 2 * degree + 1
    full_decay = np.ones((nb, nb))
    full_decay[: degree + 1, : degree + 1] = decay
    full_decay[degree + 1:, : degree + 1] = decay[1:, :]
    full_decay[: degree + 1, degree + 1:] = decay[:, 1:]
    full_decay[degree + 1:, degree + 1:] = decay[1:, 1:]
    for k in range(n - len(fields)):
        coef = rng.standard_normal((2, nb, nb)) * full_decay
        fields.append((f"trig{k:03d}", trig(coef)))
    return fields


def _field_values(phi, grid: Grid):
    if callable(phi):
        X, Y = grid.centers
        p1, p2 = phi(X, Y)
    else:
        p1, p2 = phi
    return np.broadcast_to(np.asarray(p1, float), grid.mask.shape), np.broadcast_to(
        np.asarray(p2, float), grid.mask.shape
    )


def divergence_ratio(D: TensorField, beta: float, phi, grid: Grid) -> tuple[float, float, float]:
    """``(numerator, int (Phi.D Phi)^beta, ratio)`` for one test field."""
    p1, p2 = _field_values(phi, grid)
    c = D.cells
    num = cell_integral(np.abs(c.divx * p1 + c.divy * p2), grid)
    quad = np.abs(c.d11 * p1 * p1 + 2 * c.d12 * p1 * p2 + c.d22 * p2 * p2)
    den = cell_integral(quad**beta, grid)
    return num, den, num / (den + 1.0)


def fit_divergence_estimate(D: TensorField, beta: float, test_fields, grid: Grid) -> DivergenceEstimateFit:
    """Fit the divergence-estimate constant over a battery of test fields.

    ``test_fields`` holds callables ``(x, y) -> (phi1, phi2)``, pairs of per-cell
    arrays, or ``(name, field)`` tuples of either.
    """
    if not 0.5 <= beta < 1.0:
        raise ValueError(f"beta must lie in [1/2, 1), got {beta}")
    test_fields = list(test_fields)
    if not test_fields:
        raise ValueError("empty test-field battery")
    records = []
    for k, item in enumerate(test_fields):
        if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], str):
            name, phi = item
        else:
            name, phi = f"field{k:03d}", item
        try:
            num, den, ratio = divergence_ratio(D, beta, phi, grid)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"non-finite divergence-estimate integral for {name}; is div D singular on an active cell?"
            ) from exc
        records.append(RatioRecord(name, num, den, ratio))
    C = max(r.ratio for r in records)
    return DivergenceEstimateFit(beta, C, len(records), tuple(records))


def beta_admissible_range(prototype: str, s: float, n: int = 2) -> tuple[float, float]:
    """Open interval of exponents for which a prototype admits the estimate."""
    prototype = prototype.upper()
    if prototype == "D1":
        if s <= 0:
            raise ValueError("D1 requires s > 0")
        denom = s - 2 + 2 * n
        if denom <= 0:
            raise ValueError(f"empty admissible range for D1 with s={s}, n={n}")
        lo = max(n / denom, 0.5)
    elif prototype == "D2":
        if s <= 1:
            raise ValueError("D2 requires s > 1")
        lo = max(1.0 / s, 0.5)
    else:
        raise ValueError(f"unknown prototype {prototype!r}")
    if lo >= 1.0:
        raise ValueError(f"empty admissible range for {prototype} with s={s}, n={n}")
    return (lo, 1.0)


@dataclass(frozen=True)
class HypothesisCheck:
    passed: bool
    message: str

    def __bool__(self):
        return self.passed


def validate_theorem_hypotheses(beta: float, r: float) -> HypothesisCheck:
    """Check ``beta in [1/2, 1)``, ``r in [2, inf)`` and ``beta/(1-beta) <= r``."""
    if not 0.5 <= beta < 1.0:
        return HypothesisCheck(False, f"beta={beta} violates beta in [1/2, 1)")
    if not r >= 2.0:
        return HypothesisCheck(False, f"r={r} violates r in [2, inf)")
    ratio = beta / (1.0 - beta)
    if ratio > r * (1 + 1e-12):
        return HypothesisCheck(False, f"beta/(1-beta) = {ratio:.6g} > r = {r:.6g} violates beta/(1-beta) <= r")
    return HypothesisCheck(True, f"beta/(1-beta) = {ratio:.6g} <= r = {r:.6g}")
