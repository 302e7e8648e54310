import numpy as np

from haptofv.diagnostics import verdicts
from haptofv.dynamics import Params, run
from haptofv.grid import build_grid
from haptofv.plotting import plot_diagnostics, plot_loglog, plot_series, plot_state


def _is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_figures_written(tmp_path):
    g = build_grid(16, 16, "disk")
    X, _ = g.centers
    traj = run(Params(chi=1, mu=1, r=2, T=0.05), ("D2", 2.0), np.where(X < 0, 1.0, 0.0), np.ones_like(X), g,
               stride=0.01)
    diag = verdicts(traj)
    paths = [
        plot_state(traj.final, g, tmp_path / "s.png", title="t = 0.05"),
        plot_diagnostics(diag.columns, tmp_path / "d.png"),
        plot_loglog([0.1, 0.05, 0.025], [1e-2, 5e-3, 2.5e-3], tmp_path / "l.png", "h", "err", slope=1.0),
        plot_series([32, 64], {"a": [1.0, 0.5]}, tmp_path / "p.png", "n", logy=True),
    ]
    for p in paths:
        assert p.is_file() and _is_png(p)


def test_loglog_tolerates_zeros(tmp_path):
    p = plot_loglog([1, 2], [0.0, 0.0], tmp_path / "z.png", "x", "y", slope=2.0)
    assert _is_png(p)
