"""Finite-volume integrator for the haptotaxis system and its transformed form.

Primal system::

    u_t = div(D grad u + u div D) - chi div(u D grad w) + mu u (1 - u^(r_eff - 1))
    w_t = -u w

Transformed system for ``a = u exp(-chi w)``::

    a_t = e^{-chi w} div(e^{chi w} D grad a) + e^{-chi w} div(a e^{chi w} div D)
          + mu a (1 - a^(r_eff-1) e^{chi (r_eff-1) w}) + chi a^2 w e^{chi w}
    w_t = -a e^{chi w} w

Fluxes live on interior faces and boundary faces carry none, which is the
discrete no-flux condition.  The drift ``v = div D - chi D grad w`` is upwinded
(donor cell), diffusion uses the two-point normal difference plus a
reconstructed tangential gradient for the off-diagonal entries.  Time stepping
is forward Euler for ``u`` followed by the exact exponential update of ``w``
with ``u`` frozen at the start of the step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K
from .grid import Grid, cell_integral, face_gradients
from .tensor import TensorField, max_eigenvalue, prototype, regularize, validate_theorem_hypotheses

__all__ = [
    "Params",
    "State",
    "TransformedState",
    "RunReport",
    "Trajectory",
    "NonFiniteStateError",
    "TimeStepUnderflowError",
    "assemble_rates",
    "assemble_rates_a",
    "logistic",
    "step_w_exact",
    "cfl_dt",
    "step",
    "step_a",
    "transform",
    "inverse_transform",
    "output_schedule",
    "run",
]

log = logging.getLogger(__name__)

DT_UNDERFLOW = 1e-12
_TINY = 1e-300


class NonFiniteStateError(FloatingPointError):
    pass


class TimeStepUnderflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class Params:
    chi: float
    mu: float
    r: float
    eps: float = 0.0
    T: float = 1.0
    cfl: float = 0.5
    dt_max: float = 1e-2
    beta: float | None = None
    A: float | None = None

    @property
    def r_eff(self) -> float:
        return self.r + self.eps

    @property
    def B(self) -> float | None:
        return None if self.A is None else self.A + 1.0

    def validate(self, check_hypotheses: bool = True) -> None:
        """Raise ``ValueError`` naming the first violated constraint."""
        if not self.chi > 0:
            raise ValueError(f"chi must be > 0, got {self.chi}")
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if not self.r >= 2:
            raise ValueError(f"r={self.r} violates the requirement r in [2, inf)")
        if not 0 <= self.eps < 1:
            raise ValueError(f"eps must lie in [0, 1), got {self.eps}")
        if not self.T >= 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if not 0 < self.cfl <= 1:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not self.dt_max > 0:
            raise ValueError(f"dt_max must be > 0, got {self.dt_max}")
        if self.A is not None and self.A < 0:
            raise ValueError("divergence constant A must be >= 0")
        if check_hypotheses and self.eps == 0 and self.beta is not None:
            verdict = validate_theorem_hypotheses(self.beta, self.r)
            if not verdict:
                raise ValueError(verdict.message)


@dataclass(frozen=True, eq=False)
class State:
    u: np.ndarray
    w: np.ndarray
    t: float = 0.0
    clips: int = 0


@dataclass(frozen=True, eq=False)
class TransformedState:
    a: np.ndarray
    w: np.ndarray
    t: float = 0.0
    clips: int = 0


def transform(state: State, chi: float) -> TransformedState:
    return TransformedState(state.u * np.exp(-chi * state.w), state.w, state.t, state.clips)


def inverse_transform(state: TransformedState, chi: float) -> State:
    return State(state.a * np.exp(chi * state.w), state.w, state.t, state.clips)


# --------------------------------------------------------------------------
# spatial operators


def logistic(u: np.ndarray, params: Params) -> np.ndarray:
    return params.mu * u * (1.0 - u ** (params.r_eff - 1.0))


def _upwind(v, left, right):
    return np.where(v > 0, right, left)


def _divergence(Jx, Jy, grid: Grid) -> np.ndarray:
    """Cell rate from face fluxes; two-pass accumulation in index order."""
    out = np.zeros(grid.mask.shape)
    qx = Jx / grid.hx
    qy = Jy / grid.hy
    out[:-1, :] += qx
    out[1:, :] -= qx
    out[:, :-1] += qy
    out[:, 1:] -= qy
    return out


def _drift(w, D: TensorField, chi: float, grid: Grid):
    """Normal drift ``(div D - chi D grad w) . n`` on x- and y-faces."""
    xf, yf = D.xfaces, D.yfaces
    if chi == 0.0:
        return xf.divx, yf.divy
    (wxn, wxt), (wyt, wyn) = face_gradients(w, grid)
    vx = xf.divx - chi * (xf.d11 * wxn + xf.d12 * wxt)
    vy = yf.divy - chi * (yf.d12 * wyt + yf.d22 * wyn)
    return vx, vy


def _primal_fluxes(u, w, D: TensorField, chi: float, grid: Grid):
    xf, yf = D.xfaces, D.yfaces
    (gxn, gxt), (gyt, gyn) = face_gradients(u, grid)
    vx, vy = _drift(w, D, chi, grid)
    Jx = xf.d11 * gxn + xf.d12 * gxt + _upwind(vx, u[:-1, :], u[1:, :]) * vx
    Jy = yf.d12 * gyt + yf.d22 * gyn + _upwind(vy, u[:, :-1], u[:, 1:]) * vy
    Jx = np.where(grid.xface_active, Jx, 0.0)
    Jy = np.where(grid.yface_active, Jy, 0.0)
    return Jx, Jy, vx, vy


def _check_finite(rate, what: str, state, grid: Grid):
    bad = ~np.isfinite(rate) & grid.mask
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise NonFiniteStateError(
            f"non-finite {what} at cell ({i}, {j}), t={state.t:.6g}: "
            f"{int(bad.sum())} bad cells; local values "
            + ", ".join(f"{k}={float(getattr(state, k)[i, j])!r}" for k in ("u", "a", "w") if hasattr(state, k))
        )


def assemble_rates(state: State, D: TensorField, params: Params, grid: Grid) -> np.ndarray:
    """Per-cell ``du/dt`` of the primal system (zero on inactive cells)."""
    u = np.where(grid.mask, state.u, 0.0)
    Jx, Jy, _, _ = _primal_fluxes(u, state.w, D, params.chi, grid)
    rate = np.where(grid.mask, _divergence(Jx, Jy, grid) + logistic(u, params), 0.0)
    _check_finite(rate, "du/dt", state, grid)
    return rate


def _transformed_fluxes(a, w, D: TensorField, chi: float, grid: Grid):
    xf, yf = D.xfaces, D.yfaces
    E = np.exp(chi * w)
    Ex = 0.5 * (E[:-1, :] + E[1:, :])
    Ey = 0.5 * (E[:, :-1] + E[:, 1:])
    (gxn, gxt), (gyt, gyn) = face_gradients(a, grid)
    Jx = Ex * (xf.d11 * gxn + xf.d12 * gxt + _upwind(xf.divx, a[:-1, :], a[1:, :]) * xf.divx)
    Jy = Ey * (yf.d12 * gyt + yf.d22 * gyn + _upwind(yf.divy, a[:, :-1], a[:, 1:]) * yf.divy)
    Jx = np.where(grid.xface_active, Jx, 0.0)
    Jy = np.where(grid.yface_active, Jy, 0.0)
    return Jx, Jy, E


def _transformed_parts(state: TransformedState, D: TensorField, params: Params, grid: Grid):
    """Return ``(transport + logistic, chi a^2 w e^{chi w})`` for the a-equation."""
    chi = params.chi
    a = np.where(grid.mask, state.a, 0.0)
    w = np.where(grid.mask, state.w, 0.0)
    Jx, Jy, E = _transformed_fluxes(a, w, D, chi, grid)
    u = a * E
    transport = _divergence(Jx, Jy, grid) / E + logistic(u, params) / E
    taxis = chi * a * a * w * E
    transport = np.where(grid.mask, transport, 0.0)
    taxis = np.where(grid.mask, taxis, 0.0)
    _check_finite(transport + taxis, "da/dt", state, grid)
    return transport, taxis


def assemble_rates_a(state: TransformedState, D: TensorField, params: Params, grid: Grid) -> np.ndarray:
    """Per-cell ``da/dt`` of the transformed system."""
    transport, taxis = _transformed_parts(state, D, params, grid)
    return transport + taxis


def step_w_exact(state: State, dt: float) -> State:
    """``w <- w exp(-u dt)`` with ``u`` frozen; ``t`` is left to the caller."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return replace(state, w=state.w * np.exp(-state.u * dt))


# --------------------------------------------------------------------------
# time step control


def _lambda_max(D: TensorField, grid: Grid) -> float:
    lam = 0.0
    for smp, act in ((D.xfaces, grid.xface_active), (D.yfaces, grid.yface_active)):
        if act.any():
            lam = max(lam, float(np.max(max_eigenvalue(smp.d11, smp.d12, smp.d22)[act])))
    return lam


def _dt_bound(lam_max, v_max, u_max, params: Params, grid: Grid) -> float:
    h = grid.h
    bounds = [h * h / (4.0 * lam_max) if lam_max > 0 else math.inf,
              h / (v_max + _TINY)]
    r = params.r_eff
    bounds.append(1.0 / (params.mu * r * u_max ** (r - 1.0) + _TINY))
    dt = min(params.cfl * min(bounds), params.dt_max)
    if dt < DT_UNDERFLOW:
        raise TimeStepUnderflowError(f"time step {dt:.3e} below {DT_UNDERFLOW:g}")
    return dt


def _vmax(vx, vy, grid: Grid) -> float:
    vm = 0.0
    if grid.xface_active.any():
        vm = max(vm, float(np.max(np.abs(vx[grid.xface_active]))))
    if grid.yface_active.any():
        vm = max(vm, float(np.max(np.abs(vy[grid.yface_active]))))
    return vm


def cfl_dt(state: State, D: TensorField, params: Params, grid: Grid) -> float:
    """Explicit step size.

    ``min(cfl * min(h^2/(4 lam_max), h/|v|_max, 1/(mu r_eff max(u)^(r_eff-1))), dt_max)``
    where ``v`` is the combined drift on interior faces.
    """
    vx, vy = _drift(np.where(grid.mask, state.w, 0.0), D, params.chi, grid)
    u_max = float(np.max(state.u[grid.mask])) if grid.n_active else 0.0
    return _dt_bound(_lambda_max(D, grid), _vmax(vx, vy, grid), max(u_max, 0.0), params, grid)


# --------------------------------------------------------------------------
# single steps


@dataclass
class StepInfo:
    dt: float
    clips: int
    mass_defect: float


def _clamp(dt: float, t: float, t_stop: float | None) -> float:
    """Shorten (or stretch by < 0.1%) ``dt`` so the step lands on ``t_stop``."""
    if t_stop is None:
        return dt
    remaining = t_stop - t
    if dt >= remaining or remaining - dt < 1e-3 * dt:
        return remaining
    return dt


def _advance(state: State, D: TensorField, params: Params, grid: Grid, dt: float | None,
             lam_max: float | None = None, t_stop: float | None = None):
    u = np.where(grid.mask, state.u, 0.0)
    w = np.where(grid.mask, state.w, 0.0)
    Jx, Jy, vx, vy = _primal_fluxes(u, w, D, params.chi, grid)
    react = np.where(grid.mask, logistic(u, params), 0.0)
    transport = np.where(grid.mask, _divergence(Jx, Jy, grid), 0.0)
    _check_finite(transport + react, "du/dt", state, grid)
    if dt is None:
        lam = _lambda_max(D, grid) if lam_max is None else lam_max
        dt = _dt_bound(lam, _vmax(vx, vy, grid), float(u[grid.mask].max(initial=0.0)), params, grid)
        dt = _clamp(dt, state.t, t_stop)
    trial = u + dt * (transport + react)
    neg = (trial < 0) & grid.mask
    clips = int(neg.sum())
    if clips:
        log.warning("positivity clip on %d cells at t=%.6g", clips, state.t)
    u_new = np.where(grid.mask, np.maximum(trial, 0.0), 0.0)
    w_new = np.where(grid.mask, w * np.exp(-u * dt), 0.0)

    m_old, m_new = cell_integral(u, grid), cell_integral(u_new, grid)
    src = dt * cell_integral(react, grid)
    scale = max(abs(m_old), abs(m_new), abs(src), _TINY)
    defect = abs(m_new - m_old - src) / scale if scale > _TINY else 0.0
    t_new = t_stop if (t_stop is not None and dt == t_stop - state.t) else state.t + dt
    new = State(u_new, w_new, t_new, state.clips + clips)
    return new, StepInfo(dt, clips, defect)


def step(state: State, D: TensorField, params: Params, grid: Grid, dt: float | None = None) -> State:
    """One explicit step (CFL-limited unless ``dt`` is given).

    Negative trial values of ``u`` are clipped to zero and counted in
    ``State.clips``; a healthy run never clips.
    """
    return _advance(state, D, params, grid, dt)[0]


def _advance_a(state: TransformedState, D: TensorField, params: Params, grid: Grid, dt: float | None,
               lam_max: float | None = None, t_stop: float | None = None):
    chi = params.chi
    transport, _ = _transformed_parts(state, D, params, grid)
    a = np.where(grid.mask, state.a, 0.0)
    w = np.where(grid.mask, state.w, 0.0)
    E = np.exp(chi * w)
    if dt is None:
        lam = _lambda_max(D, grid) if lam_max is None else lam_max
        vx, vy = _drift(w, D, chi, grid)
        u_max = float((a * E)[grid.mask].max(initial=0.0))
        dt = _dt_bound(lam, _vmax(vx, vy, grid), u_max, params, grid)
        dt = _clamp(dt, state.t, t_stop)
    trial = a + dt * transport
    neg = (trial < 0) & grid.mask
    clips = int(neg.sum())
    a_star = np.maximum(trial, 0.0)
    w_new = np.where(grid.mask, w * np.exp(-a * E * dt), 0.0)
    # chi a^2 w e^{chi w} = -chi a w_t, integrated exactly along the w update
    a_new = np.where(grid.mask, a_star * np.exp(chi * (w - w_new)), 0.0)
    t_new = t_stop if (t_stop is not None and dt == t_stop - state.t) else state.t + dt
    new = TransformedState(a_new, w_new, t_new, state.clips + clips)
    return new, StepInfo(dt, clips, 0.0)


def step_a(state: TransformedState, D: TensorField, params: Params, grid: Grid,
           dt: float | None = None) -> TransformedState:
    """One step of the transformed system.

    Transport and logistic parts use forward Euler; the remaining growth term
    ``chi a^2 w e^{chi w}`` equals ``-chi a w_t`` and is integrated exactly
    along the exponential ``w`` update, so a spatially uniform state follows
    the primal scheme to round-off.
    """
    return _advance_a(state, D, params, grid, dt)[0]


def _advance_fast(state: State, D: TensorField, params: Params, grid: Grid, kargs,
                  lam_max: float, t_stop: float | None):
    """Loop-kernel version of :func:`_advance` used by :func:`run`."""
    u, w = state.u, state.w
    transport = np.empty_like(u)
    vmax = K.primal_transport(u, w, *kargs, float(params.chi), transport)
    dt = _dt_bound(lam_max, vmax, K.umax(u, grid.mask), params, grid)
    dt = _clamp(dt, state.t, t_stop)
    u_new = np.empty_like(u)
    w_new = np.empty_like(w)
    clips, m_old, m_new, src, finite = K.primal_update(
        u, w, transport, grid.mask, float(params.mu), float(params.r_eff), dt, grid.cell_area, u_new, w_new)
    if not finite:
        # the reference path raises with a cell-level message
        return _advance(state, D, params, grid, dt, lam_max, t_stop)
    if clips:
        log.warning("positivity clip on %d cells at t=%.6g", clips, state.t)
    src *= dt
    scale = max(abs(m_old), abs(m_new), abs(src), _TINY)
    defect = abs(m_new - m_old - src) / scale if scale > _TINY else 0.0
    t_new = t_stop if (t_stop is not None and dt == t_stop - state.t) else state.t + dt
    return State(u_new, w_new, t_new, state.clips + clips), StepInfo(dt, clips, defect)


def _advance_a_fast(state: TransformedState, D: TensorField, params: Params, grid: Grid, kargs,
                    lam_max: float, t_stop: float | None):
    """Loop-kernel version of :func:`_advance_a` used by :func:`run`."""
    a, w = state.a, state.w
    chi = float(params.chi)
    transport = np.empty_like(a)
    vmax = K.transformed_transport(a, w, *kargs, chi, transport)
    dt = _dt_bound(lam_max, vmax, K.umax_transformed(a, w, grid.mask, chi), params, grid)
    dt = _clamp(dt, state.t, t_stop)
    a_new = np.empty_like(a)
    w_new = np.empty_like(w)
    clips, finite = K.transformed_update(
        a, w, transport, grid.mask, float(params.mu), float(params.r_eff), chi, dt, a_new, w_new)
    if not finite:
        return _advance_a(state, D, params, grid, dt, lam_max, t_stop)
    t_new = t_stop if (t_stop is not None and dt == t_stop - state.t) else state.t + dt
    return TransformedState(a_new, w_new, t_new, state.clips + clips), StepInfo(dt, clips, 0.0)


# --------------------------------------------------------------------------
# driver


@dataclass
class RunReport:
    formulation: str = "primal"
    steps: int = 0
    clips: int = 0
    dt_history: list[float] = field(default_factory=list)
    mass_defect_max: float = 0.0
    aborted: bool = False
    abort_reason: str = ""
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        dts = np.asarray(self.dt_history) if self.dt_history else np.zeros(1)
        return {
            "formulation": self.formulation,
            "steps": self.steps,
            "clips": self.clips,
            "dt_min": float(dts.min()),
            "dt_max": float(dts.max()),
            "dt_mean": float(dts.mean()),
            "mass_identity_max_defect": self.mass_defect_max,
            "aborted": int(self.aborted),
            "abort_reason": self.abort_reason,
        }


@dataclass
class Trajectory:
    grid: Grid
    params: Params
    tensor: TensorField
    states: list
    report: RunReport

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def final(self):
        return self.states[-1]

    def primal_states(self) -> list[State]:
        if self.report.formulation == "transformed":
            return [inverse_transform(s, self.params.chi) for s in self.states]
        return list(self.states)


def output_schedule(T: float, stride: float | None) -> np.ndarray:
    """Equally spaced output times ``0, stride, ..., T`` (``T`` always included)."""
    if T == 0:
        return np.array([0.0])
    if stride is None or stride <= 0 or stride >= T:
        return np.array([0.0, T])
    n = max(1, int(round(T / stride)))
    return np.linspace(0.0, T, n + 1)


def _coerce_tensor(D, params: Params, grid: Grid) -> TensorField:
    if isinstance(D, tuple):
        kind, s, *rest = D
        D = prototype(grid, kind, s)
        eps = rest[0] if rest else params.eps
        if eps > 0:
            D = regularize(D, eps)
        return D
    if params.eps > 0 and D.eps == 0:
        D = regularize(D, params.eps)
    return D


def run(
    params: Params,
    D: TensorField | tuple,
    u0: np.ndarray,
    w0: np.ndarray,
    grid: Grid,
    *,
    stride: float | None = None,
    output_times: Sequence[float] | None = None,
    hooks: Iterable[Callable] = (),
    formulation: str = "primal",
    check_hypotheses: bool = True,
    fast: bool = True,
) -> Trajectory:
    """Integrate from ``t = 0`` to ``params.T`` and return the stored states.

    ``D`` may be a tensor field or ``(prototype, s[, eps])``.  With
    ``params.eps > 0`` an unregularized field is replaced by ``D + 2 eps I``.
    Steps are truncated so that every output time is hit exactly.  Each hook
    is called with the primal :class:`State` at every output time.  Dt
    underflow and non-finite rates end the run early with ``report.aborted``
    set and the states computed so far.  ``fast=False`` forces the vectorized
    reference operators instead of the compiled loop kernels.
    """
    params.validate(check_hypotheses=check_hypotheses)
    if formulation not in ("primal", "transformed"):
        raise ValueError(f"unknown formulation {formulation!r}")
    D = _coerce_tensor(D, params, grid)
    u0 = np.where(grid.mask, np.asarray(u0, float), 0.0)
    w0 = np.where(grid.mask, np.asarray(w0, float), 0.0)
    for name, arr in (("u0", u0), ("w0", w0)):
        if arr.shape != grid.mask.shape:
            raise ValueError(f"{name} has shape {arr.shape}, grid is {grid.mask.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError(f"{name} must be finite and nonnegative")

    times = output_schedule(params.T, stride) if output_times is None else np.asarray(output_times, float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("output times must start at 0 and increase")
    hooks = list(hooks)
    report = RunReport(formulation=formulation)
    lam = _lambda_max(D, grid)

    state = State(u0, w0, 0.0)
    if formulation == "transformed":
        state = transform(state, params.chi)
        state = TransformedState(np.ascontiguousarray(state.a), np.ascontiguousarray(state.w), 0.0)
    if fast and K.AVAILABLE:
        kargs = K.tensor_args(D, grid)
        stepper = _advance_a_fast if formulation == "transformed" else _advance_fast

        def advance(s, t_stop):
            return stepper(s, D, params, grid, kargs, lam, t_stop)
    else:
        stepper = _advance_a if formulation == "transformed" else _advance

        def advance(s, t_stop):
            return stepper(s, D, params, grid, None, lam, t_stop)

    def emit(s):
        states.append(s)
        primal = inverse_transform(s, params.chi) if formulation == "transformed" else s
        for hook in hooks:
            hook(primal)

    states: list = []
    tick = time.perf_counter()
    emit(state)
    for t_next in times[1:]:
        while state.t < t_next:
            try:
                state_new, info = advance(state, float(t_next))
            except (NonFiniteStateError, TimeStepUnderflowError) as exc:
                report.aborted = True
                report.abort_reason = str(exc)
                log.error("run aborted: %s", exc)
                report.wall_time = time.perf_counter() - tick
                return Trajectory(grid, params, D, states, report)
            state = state_new
            report.steps += 1
            report.clips += info.clips
            report.dt_history.append(info.dt)
            report.mass_defect_max = max(report.mass_defect_max, info.mass_defect)
        emit(state)
    report.wall_time = time.perf_counter() - tick
    return Trajectory(grid, params, D, states, report)
