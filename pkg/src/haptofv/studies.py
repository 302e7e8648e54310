"""Scenarios and multi-run studies.

A :class:`Scenario` bundles tensor, initial data, parameters, grid and output
stride; presets ship as config files in ``haptofv/presets``.  Studies run
independent members in a thread pool and assemble results in input order, so
tables do not depend on the thread count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np

from .dynamics import Params, State, Trajectory, cfl_dt, output_schedule, run, transform
from .grid import Grid, build_grid, cell_integral
from .io import Config, ConfigError, eval_expression, load_config, parse_config
from .tensor import (
    TensorField,
    beta_admissible_range,
    constant,
    from_csv,
    prototype,
    regularize,
    validate_theorem_hypotheses,
)
from .weakcheck import ResidualReport, audit, default_library

__all__ = [
    "Scenario",
    "PRESETS",
    "load_preset",
    "preset_names",
    "ode_oracle",
    "logistic_closed_form",
    "EpsilonStudy",
    "epsilon_study",
    "RefinementStudy",
    "refinement_study",
    "CrosscheckStudy",
    "formulation_crosscheck",
    "WeakStudy",
    "weak_study",
    "lr_distance",
    "restrict",
]

log = logging.getLogger(__name__)

ROUNDOFF = 1e-14


def preset_names() -> list[str]:
    files = resources.files("haptofv").joinpath("presets").iterdir()
    return sorted(f.name[:-4] for f in files if f.name.endswith(".cfg"))


PRESETS = tuple(preset_names())


def load_preset(name: str) -> "Scenario":
    res = resources.files("haptofv").joinpath("presets", f"{name}.cfg")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return Scenario.from_config(parse_config(res.read_text(), f"preset:{name}"))


# --------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class Scenario:
    name: str
    tensor_kind: str = "identity"
    s: float = 2.0
    matrix: tuple[float, ...] | None = None
    angle: float = 0.0
    eigs: tuple[float, ...] | None = None
    tensor_file: str | None = None
    u0: str = "1"
    w0: str = "1"
    params: Params = field(default_factory=lambda: Params(chi=1.0, mu=1.0, r=2.0))
    nx: int = 64
    ny: int = 64
    domain: str = "square"
    stride: float | None = None
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: Config) -> "Scenario":
        params = Params(
            chi=cfg["params.chi"], mu=cfg["params.mu"], r=cfg["params.r"], eps=cfg["params.eps"],
            T=cfg["params.T"], cfl=cfg["params.cfl"], dt_max=cfg["params.dt_max"],
            beta=cfg["params.beta"], A=cfg["params.A"],
        )
        nx = cfg["grid.nx"]
        sc = cls(
            name=cfg["scenario.name"], tensor_kind=cfg["tensor.kind"], s=cfg["tensor.s"],
            matrix=cfg["tensor.matrix"], angle=cfg["tensor.angle"], eigs=cfg["tensor.eigs"],
            tensor_file=cfg["tensor.file"], u0=cfg["init.u0"], w0=cfg["init.w0"], params=params,
            nx=nx, ny=cfg.get("grid.ny", nx), domain=cfg["grid.domain"],
            stride=cfg["output.stride"], seed=cfg["seed"],
        )
        return sc

    @classmethod
    def from_file(cls, path) -> "Scenario":
        return cls.from_config(load_config(path))

    # ---- validation

    def validate(self, check_hypotheses: bool = True) -> None:
        """Raise ``ValueError`` (``ConfigError`` for config-shaped problems)."""
        self.params.validate(check_hypotheses=check_hypotheses)
        kind = self.tensor_kind
        if kind in ("D1", "D2"):
            if not self.s > 0:
                raise ConfigError(f"prototype exponent s must be > 0, got {self.s}")
            if self.params.beta is not None:
                lo, hi = beta_admissible_range(kind, self.s, 2)
                if not lo < self.params.beta < hi:
                    raise ConfigError(
                        f"beta={self.params.beta} outside the admissible range ({lo:g}, {hi:g}) for {kind} s={self.s:g}")
        elif kind == "constant":
            if self.matrix is None or len(self.matrix) != 3:
                raise ConfigError("tensor.matrix must give d11,d12,d22 for a constant tensor")
        elif kind == "anisotropic":
            if self.eigs is None or len(self.eigs) != 2 or min(self.eigs) < 0:
                raise ConfigError("tensor.eigs must give two nonnegative eigenvalues")
        elif kind == "file":
            if not self.tensor_file:
                raise ConfigError("tensor.file is required for tensor.kind = file")
        elif kind != "identity":
            raise ConfigError(f"unknown tensor.kind {kind!r}")
        if self.params.eps == 0 and self.params.beta is not None:
            verdict = validate_theorem_hypotheses(self.params.beta, self.params.r)
            if check_hypotheses and not verdict:
                raise ConfigError(verdict.message)
        g = self.grid()
        for label, arr in zip(("init.u0", "init.w0"), self.initial(g)):
            bad = g.mask & ~(np.isfinite(arr) & (arr >= 0))
            if bad.any():
                raise ConfigError(f"{label} must be finite and nonnegative on the domain")

    # ---- construction

    def grid(self, n: int | None = None) -> Grid:
        if n is None:
            return build_grid(self.nx, self.ny, self.domain)
        return build_grid(n, int(round(n * self.ny / self.nx)), self.domain)

    def base_tensor(self, grid: Grid) -> TensorField:
        """The unregularized tensor on ``grid``."""
        kind = self.tensor_kind
        if kind in ("D1", "D2"):
            return prototype(grid, kind, self.s)
        if kind == "identity":
            return constant(grid, np.eye(2))
        if kind == "constant":
            d11, d12, d22 = self.matrix
            return constant(grid, np.array([[d11, d12], [d12, d22]]))
        if kind == "anisotropic":
            c, s = math.cos(self.angle), math.sin(self.angle)
            R = np.array([[c, -s], [s, c]])
            return constant(grid, R @ np.diag(self.eigs) @ R.T)
        if kind == "file":
            return from_csv(self.tensor_file, grid)
        raise ConfigError(f"unknown tensor.kind {kind!r}")

    def tensor(self, grid: Grid, eps: float | None = None) -> TensorField:
        eps = self.params.eps if eps is None else eps
        D = self.base_tensor(grid)
        return regularize(D, eps) if eps > 0 else D

    def initial(self, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
        X, Y = grid.centers
        u0 = eval_expression(self.u0, X, Y)
        w0 = eval_expression(self.w0, X, Y)
        return np.where(grid.mask, u0, 0.0), np.where(grid.mask, w0, 0.0)

    def output_stride(self, T: float | None = None) -> float:
        T = self.params.T if T is None else T
        return self.stride if self.stride else T / 100.0

    def with_params(self, **kw) -> "Scenario":
        return replace(self, params=replace(self.params, **kw))

    def simulate(self, n: int | None = None, *, eps: float | None = None, T: float | None = None,
                 stride: float | None = None, formulation: str = "primal", dt_max: float | None = None,
                 hooks=(), check_hypotheses: bool = True) -> Trajectory:
        """Run the scenario, optionally overriding resolution, ``eps``, ``T`` or stride."""
        kw = {}
        if eps is not None:
            kw["eps"] = eps
        if T is not None:
            kw["T"] = T
        if dt_max is not None:
            kw["dt_max"] = dt_max
        params = replace(self.params, **kw)
        grid = self.grid(n)
        D = self.tensor(grid, params.eps)
        u0, w0 = self.initial(grid)
        return run(params, D, u0, w0, grid, stride=stride or self.output_stride(params.T),
                   hooks=hooks, formulation=formulation, check_hypotheses=check_hypotheses)

    def initial_dt(self, n: int | None = None) -> float:
        grid = self.grid(n)
        u0, w0 = self.initial(grid)
        return cfl_dt(State(u0, w0), self.tensor(grid), self.params, grid)


# --------------------------------------------------------------------------
# ODE oracle


def logistic_closed_form(u0: float, mu: float, t: float) -> float:
    """Solution of ``u' = mu u (1 - u)``."""
    if u0 == 0:
        return 0.0
    return u0 / (u0 + (1.0 - u0) * math.exp(-mu * t))


def ode_oracle(u0: float, w0: float, params: Params, T: float | None = None,
               n_steps: int = 100_000) -> tuple[float, float]:
    """Classic RK4 for ``u' = mu u (1 - u^(r_eff-1))``, ``w' = -u w``.

    For ``r_eff = 2`` the result is checked against the closed form and a
    ``RuntimeError`` is raised if they disagree beyond ``1e-9`` relative.
    """
    if u0 < 0 or w0 < 0:
        raise ValueError("initial values must be nonnegative")
    T = params.T if T is None else T
    mu, r = params.mu, params.r_eff
    if T == 0:
        return float(u0), float(w0)
    h = T / n_steps

    def f(u, w):
        return mu * u * (1.0 - u ** (r - 1.0)), -u * w

    u, w = float(u0), float(w0)
    for _ in range(n_steps):
        k1u, k1w = f(u, w)
        k2u, k2w = f(u + 0.5 * h * k1u, w + 0.5 * h * k1w)
        k3u, k3w = f(u + 0.5 * h * k2u, w + 0.5 * h * k2w)
        k4u, k4w = f(u + h * k3u, w + h * k3w)
        u += h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
        w += h / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
    if r == 2.0:
        exact = logistic_closed_form(u0, mu, T)
        if abs(u - exact) > 1e-9 * max(1.0, abs(exact)):
            raise RuntimeError(f"RK4 {u!r} disagrees with closed form {exact!r}")
    return u, w


# --------------------------------------------------------------------------
# helpers


def _map(fn, items, threads: int):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def trapezoid_weights(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, float)
    w = np.zeros(len(t))
    if len(t) > 1:
        dt = np.diff(t)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
    return w


def lr_distance(a: Trajectory, b: Trajectory, r: float) -> float:
    """Discrete ``L^r(Omega x (0, T))`` distance of ``u`` between two runs on a
    shared grid and output schedule."""
    ta, tb = a.times, b.times
    if len(ta) != len(tb) or not np.allclose(ta, tb, rtol=0, atol=1e-12):
        raise ValueError("trajectories do not share an output schedule")
    grid = a.grid
    wt = trapezoid_weights(ta)
    total = 0.0
    for k, (sa, sb) in enumerate(zip(a.primal_states(), b.primal_states())):
        total += wt[k] * cell_integral(np.abs(sa.u - sb.u) ** r, grid)
    return total ** (1.0 / r)


def restrict(fine: np.ndarray, fine_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 average onto the next coarser grid; the mask keeps coarse cells whose
    four children are all active."""
    nx, ny = fine.shape
    if nx % 2 or ny % 2:
        raise ValueError("restriction needs even cell counts")
    f = np.where(fine_mask, fine, 0.0)
    coarse = 0.25 * (f[0::2, 0::2] + f[1::2, 0::2] + f[0::2, 1::2] + f[1::2, 1::2])
    m = fine_mask[0::2, 0::2] & fine_mask[1::2, 0::2] & fine_mask[0::2, 1::2] & fine_mask[1::2, 1::2]
    return coarse, m


def _l1_on_common(coarse_u: np.ndarray, coarse_grid: Grid, fine_u: np.ndarray, fine_grid: Grid) -> float:
    r, m = restrict(fine_u, fine_grid.mask)
    m = m & coarse_grid.mask
    return float(np.sum(np.abs(coarse_u - r)[m]) * coarse_grid.cell_area)


def _fail_on_abort(traj: Trajectory, label: str) -> None:
    if traj.report.aborted:
        raise RuntimeError(f"member run {label} aborted: {traj.report.abort_reason}")


# --------------------------------------------------------------------------
# epsilon study


@dataclass
class EpsilonStudy:
    eps: list[float]
    distances: list[float]
    r_metric: float
    violations: int
    slope: float | None
    aborted: str = ""

    @property
    def passed(self) -> bool:
        return not self.aborted and self.violations <= 1

    def rows(self) -> list[list]:
        return [[j, self.eps[j], self.eps[j + 1], d] for j, d in enumerate(self.distances)]

    header = ["j", "eps_j", "eps_j1", "distance"]


def epsilon_study(scenario: Scenario, eps_list: Sequence[float], r_metric: float | None = None,
                  n: int | None = None, T: float | None = None, threads: int = 1) -> EpsilonStudy:
    """Pairwise ``L^r`` distances between consecutive members of the regularized family."""
    eps_list = [float(e) for e in eps_list]
    if any(not 0 < e < 1 for e in eps_list):
        raise ValueError("every eps must lie in (0, 1)")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    r_metric = scenario.params.r if r_metric is None else float(r_metric)
    if len(eps_list) < 2:
        return EpsilonStudy(eps_list, [], r_metric, 0, None)

    def member(eps):
        return scenario.simulate(n, eps=eps, T=T)

    trajs = _map(member, eps_list, threads)
    dists: list[float] = []
    for j in range(len(trajs) - 1):
        for k in (j, j + 1):
            if trajs[k].report.aborted:
                return EpsilonStudy(eps_list, dists, r_metric, 0, None,
                                    aborted=f"eps={eps_list[k]}: {trajs[k].report.abort_reason}")
        dists.append(lr_distance(trajs[j], trajs[j + 1], r_metric))
    violations = sum(1 for a, b in zip(dists, dists[1:]) if b > a)
    slope = None
    if len(dists) >= 2 and all(d > 0 for d in dists):
        slope = float(np.polyfit(np.log(eps_list[:-1]), np.log(dists), 1)[0])
    return EpsilonStudy(eps_list, dists, r_metric, violations, slope)


# --------------------------------------------------------------------------
# refinement study


@dataclass
class RefinementStudy:
    levels: list[int]
    differences: list[float]
    orders: list[float | None]
    dt_max: float
    min_order: float = 0.9

    @property
    def converged_to_roundoff(self) -> bool:
        return bool(self.differences) and self.differences[-1] < ROUNDOFF

    @property
    def order(self) -> float | None:
        return self.orders[-1] if self.orders else None

    @property
    def passed(self) -> bool:
        if self.converged_to_roundoff:
            return True
        return self.order is not None and self.order >= self.min_order

    header = ["coarse", "fine", "l1_difference", "observed_order"]

    def rows(self) -> list[list]:
        rows = []
        for k, d in enumerate(self.differences):
            p = self.orders[k - 1] if k >= 1 else None
            rows.append([self.levels[k], self.levels[k + 1], d, "" if p is None else p])
        return rows


def refinement_study(scenario: Scenario, levels: Sequence[int], T: float | None = None,
                     threads: int = 1, min_order: float = 0.9) -> RefinementStudy:
    """Observed order from successive L1 differences at the final time.

    Every level is stepped with the same time step ceiling (the finest level's
    initial CFL step), so time-stepping error is common to all levels and the
    differences measure the spatial discretization.
    """
    levels = [int(n) for n in levels]
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    if any(b != 2 * a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be dyadic, each twice the previous")
    dt_max = min(scenario.initial_dt(n) for n in levels)

    def member(n):
        return scenario.simulate(n, T=T, dt_max=dt_max, stride=T or scenario.params.T)

    trajs = _map(member, levels, threads)
    for n, tr in zip(levels, trajs):
        _fail_on_abort(tr, f"n={n}")
    diffs = [
        _l1_on_common(trajs[k].final.u, trajs[k].grid, trajs[k + 1].final.u, trajs[k + 1].grid)
        for k in range(len(levels) - 1)
    ]
    orders: list[float | None] = []
    for a, b in zip(diffs, diffs[1:]):
        orders.append(math.log2(a / b) if b >= ROUNDOFF and a > 0 else None)
    return RefinementStudy(levels, diffs, orders, dt_max, min_order)


# --------------------------------------------------------------------------
# formulation cross-check


@dataclass
class CrosscheckStudy:
    levels: list[int]
    discrepancy: list[float]
    T: float

    @property
    def monotone(self) -> bool:
        d = self.discrepancy
        return all(b < a for a, b in zip(d, d[1:])) or max(d, default=0.0) < ROUNDOFF

    @property
    def passed(self) -> bool:
        return self.monotone

    header = ["level", "max_abs_discrepancy"]

    def rows(self) -> list[list]:
        return [[n, d] for n, d in zip(self.levels, self.discrepancy)]


def crosscheck_pair(scenario: Scenario, n: int | None = None, T: float | None = None):
    """Run both formulations; return ``(primal, transformed)`` trajectories."""
    kw = dict(T=T, stride=T or scenario.params.T)
    return (scenario.simulate(n, formulation="primal", **kw),
            scenario.simulate(n, formulation="transformed", **kw))


def formulation_crosscheck(scenario: Scenario, T: float | None = None, levels: Sequence[int] | None = None,
                           threads: int = 1) -> CrosscheckStudy:
    """``max |u - a e^(chi w)|`` at ``T`` per level, with ``a`` and ``w`` from
    the transformed integrator."""
    levels = [scenario.nx] if levels is None else [int(n) for n in levels]
    T = scenario.params.T if T is None else T
    chi = scenario.params.chi

    def member(n):
        p, t = crosscheck_pair(scenario, n, T)
        _fail_on_abort(p, f"primal n={n}")
        _fail_on_abort(t, f"transformed n={n}")
        m = p.grid.mask
        a, w = t.final.a, t.final.w
        return float(np.max(np.abs(p.final.u - a * np.exp(chi * w))[m], initial=0.0))

    return CrosscheckStudy(levels, _map(member, levels, threads), T)


# --------------------------------------------------------------------------
# weak-residual study


@dataclass
class WeakStudy:
    levels: list[int]
    report: ResidualReport
    threshold: float
    min_order: float = 0.9

    def max_u(self, n: int) -> float:
        return float(self.report.column("residual_u", n).max())

    def max_w(self, n: int) -> float:
        return float(self.report.column("residual_w", n).max())

    def orders(self, key: str) -> list[float]:
        vals = [float(self.report.column(key, n).max()) for n in self.levels]
        return [math.log2(a / b) if a > 0 and b > 0 else math.inf for a, b in zip(vals, vals[1:])]

    @property
    def passed(self) -> bool:
        fine = self.levels[-1]
        ok_order = all(p >= self.min_order for k in ("residual_u", "residual_w") for p in self.orders(k))
        return ok_order and self.report.max_residual(fine) <= self.threshold

    header = ["level", "max_residual_u", "max_residual_w", "order_u", "order_w"]

    def rows(self) -> list[list]:
        ou, ow = self.orders("residual_u"), self.orders("residual_w")
        rows = []
        for k, n in enumerate(self.levels):
            rows.append([n, self.max_u(n), self.max_w(n),
                         "" if k == 0 else ou[k - 1], "" if k == 0 else ow[k - 1]])
        return rows


def weak_study(scenario: Scenario, levels: Sequence[int] = (32, 64, 128), k: int = 10,
               threshold: float = 1e-2, threads: int = 1, base_stride: float | None = None,
               system: str = "generated") -> WeakStudy:
    """Weak-form residuals of a ``k``-function library at each level.

    The output stride shrinks with the mesh width so that space and time are
    refined together.  The ratio is anchored at the scenario's own resolution:
    level ``n`` stores every ``base_stride * scenario.nx / n`` time units,
    ``base_stride`` defaulting to the scenario stride.  The observed order is
    taken on the library maximum.
    """
    levels = [int(n) for n in levels]
    lib = default_library(k, scenario.params.T, seed=scenario.seed, box=scenario.grid(levels[0]).domain.bounds)
    base = scenario.output_stride() if base_stride is None else base_stride
    n0 = scenario.nx

    def member(n):
        tr = scenario.simulate(n, stride=base * n0 / n)
        _fail_on_abort(tr, f"n={n}")
        return tr

    report = ResidualReport()
    for n, tr in zip(levels, _map(member, levels, threads)):
        audit(tr, lib, refinement=n, threads=threads, system=system, report=report)
    return WeakStudy(levels, report, threshold)
