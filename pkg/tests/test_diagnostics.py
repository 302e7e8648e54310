import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haptofv.diagnostics import (
    COLUMNS,
    Monitor,
    auxiliary_q,
    energy,
    gradw_l4,
    moser_ladder,
    verdicts,
)
from haptofv.dynamics import Params, RunReport, State, Trajectory, TransformedState, run
from haptofv.grid import build_grid
from haptofv.tensor import constant, prototype

P = Params(chi=1.0, mu=1.0, r=2.0)


def _const(g, u, w):
    return State(np.full(g.mask.shape, float(u)), np.full(g.mask.shape, float(w)))


def _gauss_2d(f, n=2000):
    x, wt = np.polynomial.legendre.leggauss(n)
    total = 0.0
    for xi, wi in zip(x, wt):
        total += wi * np.dot(wt, f(xi, x))
    return total


def test_energy_uniform_one():
    g = build_grid(16, 16)
    e = energy(_const(g, 1.0, 0.3), constant(g, np.eye(2)), P, g)
    assert e.E1 == 0.0 and e.E2 == 0.0 and e.dsp1 == 0.0


def test_energy_uniform_e():
    g = build_grid(16, 16)
    e = energy(_const(g, math.e, 1.0), constant(g, np.eye(2)), P, g)
    assert e.E1 == pytest.approx(4 * math.e, rel=1e-14)


def test_energy_e1_against_quadrature():
    g = build_grid(128, 128)
    X, Y = g.centers

    def f(x, y):
        return 1 + 0.5 * np.cos(np.pi * x) * np.cos(np.pi * y)

    oracle = _gauss_2d(lambda x, y: f(x, y) * np.log(f(x, y)))
    e = energy(State(f(X, Y), np.ones_like(X)), constant(g, np.eye(2)), P, g)
    assert abs(e.E1 - oracle) < 1e-2


def test_energy_e2_linear_w():
    # w = 2 + x, D = I: (grad w . grad w)/w = 1/(2 + x), integral 2 ln 3
    g = build_grid(128, 128)
    X, _ = g.centers
    e = energy(State(np.ones_like(X), 2 + X), constant(g, np.eye(2)), P, g)
    assert e.E2 == pytest.approx(2 * math.log(3), rel=1e-3)


def test_energy_w_floor_exclusions():
    g = build_grid(8, 8)
    w = np.ones((8, 8))
    w[3, 3] = 0.0
    e = energy(State(np.ones((8, 8)), w), constant(g, np.eye(2)), P, g)
    assert e.w_excluded == 1 and math.isfinite(e.E2)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_e1_lower_bound(seed):
    r = np.random.default_rng(seed)
    g = build_grid(12, 12, "disk")
    u = r.random(g.mask.shape) ** 3 * 2
    u[r.random(u.shape) < 0.2] = 0.0
    e = energy(State(u, np.ones_like(u)), constant(g, np.eye(2)), P, g)
    assert e.E1 >= -g.active_area / math.e


def test_moser_constant():
    g = build_grid(8, 8)
    J = moser_ladder(TransformedState(np.ones((8, 8)), np.zeros((8, 8))), g, 6)
    np.testing.assert_allclose(J[:3], [4.0, 2.0, math.sqrt(2)], rtol=1e-14)
    np.testing.assert_allclose(J, 4.0 ** (2.0 ** -np.arange(7)), rtol=1e-14)


def test_moser_zero_and_primal():
    g = build_grid(8, 8)
    assert np.all(moser_ladder(TransformedState(np.zeros((8, 8)), np.ones((8, 8))), g) == 0)
    s = _const(g, 2.0, 1.0)
    J = moser_ladder(s, g, 2, chi=math.log(2))
    np.testing.assert_allclose(J, [4.0, 2.0, math.sqrt(2)], rtol=1e-14)
    with pytest.raises(ValueError):
        moser_ladder(s, g, 2)
    with pytest.raises(ValueError):
        moser_ladder(s, g, 7, chi=1.0)


def test_moser_no_overflow():
    g = build_grid(8, 8)
    J = moser_ladder(TransformedState(np.full((8, 8), 1e200), np.zeros((8, 8))), g)
    assert np.all(np.isfinite(J))
    assert J[6] == pytest.approx(1e200 * 4 ** (1 / 64), rel=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_moser_power_means_nondecreasing(seed):
    r = np.random.default_rng(seed)
    g = build_grid(10, 10, "disk")
    a = r.random(g.mask.shape) * r.uniform(0.1, 100)
    J = moser_ladder(TransformedState(a, np.zeros_like(a)), g)
    means = J / g.active_area ** (2.0 ** -np.arange(7))
    assert np.all(np.diff(means) >= -1e-12 * means.max())


def test_gradw_l4_examples():
    g = build_grid(128, 128)
    X, _ = g.centers
    assert gradw_l4(_const(g, 1, 0.5), g) == 0.0
    assert gradw_l4(State(np.ones_like(X), X), g) == pytest.approx(4.0, abs=1e-6)
    # int (2x)^4 over [-1, 1]^2 = 16 * (2/5) * 2
    assert gradw_l4(State(np.ones_like(X), X**2), g) == pytest.approx(12.8, rel=1e-2)


def test_auxiliary_q_examples():
    g = build_grid(16, 16, "disk")
    q = auxiliary_q(_const(g, 1.3, 1.0), prototype(g, "D1", 2.0), g)
    assert tuple(q) == (0.0, 0.0)
    X, Y = g.centers
    q = auxiliary_q(State(2 + X * Y, np.ones_like(X)), constant(g, [[1, 0.2], [0.2, 1]]), g)
    assert q.Q1 == 0.0 and q.Q2 > 0


def test_auxiliary_q2_oracle():
    g = build_grid(128, 128, "rect:0,1,0,1")
    X, _ = g.centers
    q = auxiliary_q(State(1 + X, np.ones_like(X)), constant(g, np.eye(2)), g)
    assert q.Q2 == pytest.approx(2 * (1 - 1 / math.sqrt(2)), rel=1e-2)


def test_auxiliary_q_floor_count():
    g = build_grid(8, 8)
    u = np.ones((8, 8))
    u[0, :] = 0.0
    assert auxiliary_q(State(u, u), constant(g, np.eye(2)), g).excluded == 8


def _fixed_point_traj(g, n=5, dt=0.1):
    params = Params(chi=1, mu=1, r=2, T=dt * (n - 1))
    states = [State(np.ones(g.mask.shape), np.full(g.mask.shape, 0.5 * math.exp(-k * dt)), k * dt) for k in range(n)]
    return Trajectory(g, params, constant(g, np.eye(2)), states, RunReport())


def test_fixed_point_verdicts():
    g = build_grid(16, 16, "disk")
    traj = _fixed_point_traj(g)
    rep = verdicts(traj)
    assert rep.passed, rep.summary()
    np.testing.assert_allclose(rep["mass_bound_margin"], traj.params.mu * g.active_area * traj.times, rtol=1e-14)
    assert list(rep.columns) == list(COLUMNS)


def test_injected_negative_cell_named():
    g = build_grid(8, 8)
    traj = _fixed_point_traj(g)
    bad = traj.states[2].u.copy()
    bad[3, 5] = -1e-3
    traj.states[2] = State(bad, traj.states[2].w, traj.states[2].t)
    rep = verdicts(traj)
    assert not rep.passed
    (fail,) = [v for v in rep.failures() if v.name == "positivity"]
    assert "(3, 5)" in fail.detail and "t=0.2" in fail.detail


def test_w_increase_detected():
    g = build_grid(8, 8)
    traj = _fixed_point_traj(g)
    w = traj.states[3].w.copy()
    w[1, 1] = 0.6
    traj.states[3] = State(traj.states[3].u, w, traj.states[3].t)
    names = {v.name for v in verdicts(traj).failures()}
    assert {"w_monotone", "w_max_principle"} <= names


def test_run_report_verdicts():
    g = build_grid(8, 8)
    traj = _fixed_point_traj(g)
    traj.report.clips = 2
    traj.report.aborted = True
    traj.report.abort_reason = "time step below"
    names = {v.name for v in verdicts(traj).failures()}
    assert {"clips", "completed"} <= names


def test_monitor_rejects_time_reversal():
    g = build_grid(4, 4)
    mon = Monitor(constant(g, np.eye(2)), P, g)
    mon(_const(g, 1, 1))
    with pytest.raises(ValueError):
        mon(_const(g, 1, 1))


def test_d1_degenerate_short_run_passes(tmp_path):
    g = build_grid(32, 32, "disk")
    X, Y = g.centers
    u0 = np.maximum(0, 1 + 0.5 * np.cos(np.pi * X) * np.cos(np.pi * Y))
    p = Params(chi=1, mu=1, r=3, eps=0.01, T=0.2, beta=0.75)
    traj = run(p, ("D1", 2.0), u0, np.ones_like(u0), g, stride=0.05)
    rep = verdicts(traj)
    assert rep.passed, rep.summary()
    assert np.all(np.diff(rep["w_max"]) <= 0)
    rep.to_csv(tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert header == list(COLUMNS)
