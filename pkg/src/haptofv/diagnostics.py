"""Monitored quantities along a trajectory and the inequality verdicts built on them.

All spatial integrals go through :func:`haptofv.grid.cell_integral` (midpoint
rule over active cells); running time integrals use the trapezoid rule on the
output times.  Singular integrands are floored: cells with ``u`` or ``w`` at or
below ``1e-12`` are dropped from the corresponding integral and counted.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid, cell_gradient, cell_integral, face_gradients
from .tensor import TensorField

__all__ = [
    "W_FLOOR",
    "U_FLOOR",
    "EnergyEntry",
    "EnergyReport",
    "Verdict",
    "DiagnosticsReport",
    "Monitor",
    "energy",
    "moser_ladder",
    "gradw_l4",
    "auxiliary_q",
    "verdicts",
    "diagnose",
    "quadratic_form_cells",
]

log = logging.getLogger(__name__)

W_FLOOR = 1e-12
U_FLOOR = 1e-12
MASS_TOL = 1e-10
MASS_IDENTITY_TOL = 1e-12
I_MAX = 6


def quadratic_form_cells(f: np.ndarray, D: TensorField, grid: Grid) -> np.ndarray:
    """Per-cell ``grad f . D grad f`` as the mean over the cell's interior faces.

    Face gradients carry the reconstructed tangential component, and the face
    matrix is the stored face sample of ``D``.
    """
    (gxn, gxt), (gyt, gyn) = face_gradients(f, grid)
    xf, yf = D.xfaces, D.yfaces
    qx = xf.d11 * gxn * gxn + 2.0 * xf.d12 * gxn * gxt + xf.d22 * gxt * gxt
    qy = yf.d11 * gyt * gyt + 2.0 * yf.d12 * gyt * gyn + yf.d22 * gyn * gyn
    ax = grid.xface_active
    ay = grid.yface_active
    qx = np.where(ax, qx, 0.0)
    qy = np.where(ay, qy, 0.0)
    total = np.zeros(grid.mask.shape)
    count = np.zeros(grid.mask.shape)
    total[:-1, :] += qx
    total[1:, :] += qx
    total[:, :-1] += qy
    total[:, 1:] += qy
    count[:-1, :] += ax
    count[1:, :] += ax
    count[:, :-1] += ay
    count[:, 1:] += ay
    return np.where(count > 0, total / np.maximum(count, 1.0), 0.0)


def _floored_ratio(num: np.ndarray, den: np.ndarray, floor: float, grid: Grid):
    keep = grid.mask & (den > floor)
    out = np.zeros(grid.mask.shape)
    out[keep] = num[keep] / den[keep]
    return out, int((grid.mask & ~keep).sum())


def _xlogx(u: np.ndarray) -> np.ndarray:
    pos = u > 0
    return np.where(pos, u * np.log(np.where(pos, u, 1.0)), 0.0)


# --------------------------------------------------------------------------
# energy


@dataclass(frozen=True)
class EnergyEntry:
    """Energy terms at one time.

    ``dsp1`` and ``dsp2`` are the instantaneous integrands of the dissipation
    integrals; :class:`EnergyReport` accumulates them in time.
    """

    t: float
    E1: float
    E2: float
    dsp1: float
    dsp2: float
    w_excluded: int
    u_excluded: int

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.E1, self.E2, self.dsp1, self.dsp2))


def energy(state, D: TensorField, params, grid: Grid) -> EnergyEntry:
    """``E1 = int u ln u``, ``E2 = int (grad w . D grad w)/w`` and the two
    dissipation integrands ``(grad u . D grad u)/u`` and ``u^r_eff ln u``."""
    u = np.where(grid.mask, state.u, 0.0)
    w = np.where(grid.mask, state.w, 0.0)
    e1 = cell_integral(_xlogx(u), grid)
    e2_cells, w_ex = _floored_ratio(quadratic_form_cells(w, D, grid), w, W_FLOOR, grid)
    d1_cells, u_ex = _floored_ratio(quadratic_form_cells(u, D, grid), u, U_FLOOR, grid)
    r = params.r_eff
    d2_cells = np.where(u > 0, u ** r * np.log(np.where(u > 0, u, 1.0)), 0.0)
    if w_ex or u_ex:
        log.debug("energy at t=%.6g: %d w-floor and %d u-floor exclusions", state.t, w_ex, u_ex)
    return EnergyEntry(
        float(state.t), e1, cell_integral(e2_cells, grid),
        cell_integral(d1_cells, grid), cell_integral(d2_cells, grid), w_ex, u_ex,
    )


def _running_trapezoid(t: np.ndarray, f: np.ndarray) -> np.ndarray:
    out = np.zeros(len(t))
    if len(t) > 1:
        out[1:] = np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))
    return out


@dataclass
class EnergyReport:
    entries: list[EnergyEntry] = field(default_factory=list)

    def append(self, entry: EnergyEntry) -> None:
        self.entries.append(entry)

    @property
    def t(self) -> np.ndarray:
        return np.array([e.t for e in self.entries])

    @property
    def E1(self) -> np.ndarray:
        return np.array([e.E1 for e in self.entries])

    @property
    def E2(self) -> np.ndarray:
        return np.array([e.E2 for e in self.entries])

    @property
    def Dsp1(self) -> np.ndarray:
        return _running_trapezoid(self.t, np.array([e.dsp1 for e in self.entries]))

    @property
    def Dsp2(self) -> np.ndarray:
        return _running_trapezoid(self.t, np.array([e.dsp2 for e in self.entries]))

    @property
    def finite(self) -> bool:
        arrays = (self.E1, self.E2, self.Dsp1, self.Dsp2)
        return all(bool(np.all(np.isfinite(a))) for a in arrays)

    @property
    def verdictbound(self) -> str:
        return "finite" if self.finite else "nonfinite"


# --------------------------------------------------------------------------
# single-time monitors


def moser_ladder(state, grid: Grid, i_max: int = I_MAX, chi: float | None = None) -> np.ndarray:
    """``J_i = (int a^(2^i))^(2^-i)`` for ``i = 0..i_max``.

    ``state`` is either a transformed state (uses ``a``) or a primal state
    together with ``chi``.  Powers are taken of ``a / max a`` so that nothing
    overflows; a non-finite result saturates at ``max(a) * area^(2^-i)``.
    """
    if i_max > I_MAX:
        raise ValueError(f"i_max must be <= {I_MAX}")
    if hasattr(state, "a"):
        a = state.a
    else:
        if chi is None:
            raise ValueError("chi is required for a primal state")
        a = state.u * np.exp(-chi * state.w)
    a = np.where(grid.mask, a, 0.0)
    amax = float(a[grid.mask].max(initial=0.0))
    out = np.zeros(i_max + 1)
    if amax <= 0:
        return out
    scaled = a / amax
    for i in range(i_max + 1):
        p = 2.0**i
        val = amax * cell_integral(scaled**p, grid) ** (1.0 / p)
        if not math.isfinite(val):
            val = amax * grid.active_area ** (1.0 / p)
        out[i] = val
    return out


def gradw_l4(state, grid: Grid) -> float:
    """``int |grad w|^4`` with the cell-centred reconstructed gradient."""
    gx, gy = cell_gradient(state.w, grid)
    return cell_integral((gx * gx + gy * gy) ** 2, grid)


@dataclass(frozen=True)
class AuxiliaryQ:
    Q1: float
    Q2: float
    excluded: int

    def __iter__(self):
        return iter((self.Q1, self.Q2))


def auxiliary_q(state, D: TensorField, grid: Grid) -> AuxiliaryQ:
    """``Q1 = int u^(-1/2) |div D . grad u|`` and ``Q2 = int u^(-3/2) grad u . D grad u``."""
    u = np.where(grid.mask, state.u, 0.0)
    keep = grid.mask & (u > U_FLOOR)
    gx, gy = cell_gradient(u, grid)
    c = D.cells
    drift = np.abs(c.divx * gx + c.divy * gy)
    quad = quadratic_form_cells(u, D, grid)
    safe = np.where(keep, u, 1.0)
    q1 = np.where(keep, drift / np.sqrt(safe), 0.0)
    q2 = np.where(keep, quad / safe**1.5, 0.0)
    return AuxiliaryQ(cell_integral(q1, grid), cell_integral(q2, grid), int((grid.mask & ~keep).sum()))


# --------------------------------------------------------------------------
# trajectory aggregation


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


COLUMNS = (
    "t", "mass", "mass_bound_margin", "u_max", "u_min", "w_max", "w_min",
    *(f"moser_J{i}" for i in range(I_MAX + 1)),
    "gradw_l4", "Q1", "Q2", "q_excluded", "q1_bound_ratio",
    "E1", "E2", "Dsp1", "Dsp2", "w_excluded", "clips",
)


class Monitor:
    """Hook for :func:`haptofv.dynamics.run` that records every monitor.

    Call with primal states in time order; read the results through
    :meth:`report`.
    """

    def __init__(self, D: TensorField, params, grid: Grid):
        self.D = D
        self.params = params
        self.grid = grid
        self.rows: list[dict] = []
        self.energy = EnergyReport()
        self.m0: float | None = None
        self.w0_max: float | None = None
        self._w_prev: np.ndarray | None = None
        self._t_prev: float | None = None
        self.w_monotone_violation: str = ""
        self.w_max_violation: str = ""
        self.negative: str = ""

    def __call__(self, state) -> None:
        grid, params = self.grid, self.params
        m = grid.mask
        u = np.where(m, state.u, 0.0)
        w = np.where(m, state.w, 0.0)
        mass = cell_integral(u, grid)
        if self.m0 is None:
            self.m0 = mass
            self.w0_max = float(w[m].max(initial=0.0))
        if self._t_prev is not None and not state.t > self._t_prev:
            raise ValueError("states must be supplied in increasing time order")
        if self._w_prev is not None and not self.w_monotone_violation:
            up = m & (w > self._w_prev)
            if up.any():
                i, j = np.argwhere(up)[0]
                self.w_monotone_violation = f"w increased at cell ({i}, {j}) at t={state.t:.6g}"
        w_max = float(w[m].max(initial=0.0))
        if w_max > self.w0_max and not self.w_max_violation:
            self.w_max_violation = f"max w = {w_max!r} > max w0 = {self.w0_max!r} at t={state.t:.6g}"
        if not self.negative:
            neg = m & ((u < 0) | (w < 0))
            if neg.any():
                i, j = np.argwhere(neg)[0]
                self.negative = f"negative value at cell ({i}, {j}) at t={state.t:.6g}: u={u[i, j]!r}, w={w[i, j]!r}"
        self._w_prev = w
        self._t_prev = state.t

        entry = energy(state, self.D, params, grid)
        self.energy.append(entry)
        q = auxiliary_q(state, self.D, grid)
        ladder = moser_ladder(state, grid, I_MAX, chi=params.chi)
        bound = params.mu * grid.active_area * state.t + self.m0
        ratio = math.nan
        if params.B is not None:
            ratio = q.Q1 / (2.0 * params.B * (entry.dsp1 + 1.0 + grid.active_area))
        row = {
            "t": float(state.t),
            "mass": mass,
            "mass_bound_margin": bound - mass,
            "u_max": float(u[m].max(initial=0.0)),
            "u_min": float(u[m].min(initial=0.0)),
            "w_max": w_max,
            "w_min": float(w[m].min(initial=0.0)),
            **{f"moser_J{i}": float(v) for i, v in enumerate(ladder)},
            "gradw_l4": gradw_l4(state, grid),
            "Q1": q.Q1,
            "Q2": q.Q2,
            "q_excluded": q.excluded,
            "q1_bound_ratio": ratio,
            "E1": entry.E1,
            "E2": entry.E2,
            "w_excluded": entry.w_excluded,
            "clips": int(getattr(state, "clips", 0)),
        }
        self.rows.append(row)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {k: np.array([r[k] for r in self.rows], dtype=float) for k in COLUMNS if k not in ("Dsp1", "Dsp2")}
        cols["Dsp1"] = self.energy.Dsp1
        cols["Dsp2"] = self.energy.Dsp2
        return {k: cols[k] for k in COLUMNS}

    def report(self, run_report=None) -> "DiagnosticsReport":
        cols = self.columns()
        out: list[Verdict] = []
        margin = cols["mass_bound_margin"]
        worst = float(margin.min()) if margin.size else 0.0
        out.append(Verdict("mass_bound", worst >= -MASS_TOL, f"min margin {worst:.3e} (tolerance {-MASS_TOL:g})"))
        out.append(Verdict("w_max_principle", not self.w_max_violation, self.w_max_violation or "max w(t) <= max w0"))
        out.append(Verdict("w_monotone", not self.w_monotone_violation,
                           self.w_monotone_violation or "w cellwise nonincreasing"))
        out.append(Verdict("positivity", not self.negative, self.negative or "u, w >= 0 at every output"))
        bad = [k for k, v in cols.items() if not np.all(np.isfinite(v)) and k != "q1_bound_ratio"]
        out.append(Verdict("finite", not bad, "non-finite: " + ", ".join(bad) if bad else "all monitors finite"))
        dsp1 = cols["Dsp1"]
        mono = bool(np.all(np.diff(dsp1) >= 0))
        out.append(Verdict("dsp1_monotone", mono, "Dsp1 nondecreasing" if mono else "Dsp1 decreased"))
        if run_report is not None:
            out.append(Verdict("clips", run_report.clips == 0, f"{run_report.clips} positivity clips"))
            md = run_report.mass_defect_max
            out.append(Verdict("mass_identity", md <= MASS_IDENTITY_TOL,
                               f"max per-step relative defect {md:.3e}"))
            out.append(Verdict("completed", not run_report.aborted, run_report.abort_reason or "run reached T"))
        return DiagnosticsReport(cols, out, self.energy)


@dataclass
class DiagnosticsReport:
    """Time series of every monitor (``columns``) and the verdict list.

    Energy values are reported as trends only: the bounding constant of the
    energy inequality depends on the horizon and is not computable here.
    """

    columns: dict[str, np.ndarray]
    verdicts: list[Verdict]
    energy: EnergyReport

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def failures(self) -> list[Verdict]:
        return [v for v in self.verdicts if not v.passed]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.columns[key]

    def to_csv(self, path: str | Path) -> None:
        keys = list(self.columns)
        n = len(self.columns["t"])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(keys)
            for i in range(n):
                wr.writerow([_fmt(self.columns[k][i]) for k in keys])

    def summary(self) -> str:
        return "\n".join(v.line() for v in self.verdicts)


def _fmt(v) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def verdicts(trajectory, D: TensorField | None = None) -> DiagnosticsReport:
    """Replay a trajectory through a :class:`Monitor` and evaluate all verdicts."""
    D = trajectory.tensor if D is None else D
    mon = Monitor(D, trajectory.params, trajectory.grid)
    for s in trajectory.primal_states():
        mon(s)
    return mon.report(trajectory.report)


diagnose = verdicts
