"""Config parsing and trajectory file formats.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Unknown
keys, duplicate keys and malformed values raise :class:`ConfigError`.

A run directory holds::

    config.cfg          copy of the resolved config
    times.csv           index,t,file
    state_00000.csv     x,y,u,w for every active cell, one file per output
    state_00000.vtk     legacy VTK structured points (cell data u, w, mask)
    run_report.txt      key=value run summary
    diagnostics.csv     one row per output time
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .dynamics import RunReport, State, Trajectory
from .grid import Grid

__all__ = [
    "ConfigError",
    "TrajectoryFormatError",
    "Config",
    "KEYS",
    "parse_config",
    "load_config",
    "eval_expression",
    "write_state_csv",
    "read_state_csv",
    "write_vtk",
    "write_key_values",
    "read_key_values",
    "write_table",
    "save_trajectory",
    "load_trajectory",
]


class ConfigError(ValueError):
    pass


class TrajectoryFormatError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise ValueError(f"expected integers, got {text!r}")
    return tuple(int(v) for v in vals)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default)
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "scenario.name": (_str, "custom"),
    "tensor.kind": (_str, "identity"),
    "tensor.s": (float, 2.0),
    "tensor.matrix": (_floats, None),
    "tensor.angle": (float, 0.0),
    "tensor.eigs": (_floats, None),
    "tensor.file": (_str, None),
    "params.chi": (float, 1.0),
    "params.mu": (float, 1.0),
    "params.r": (float, 2.0),
    "params.eps": (float, 0.0),
    "params.beta": (float, None),
    "params.A": (float, None),
    "params.T": (float, 1.0),
    "params.cfl": (float, 0.5),
    "params.dt_max": (float, 1e-2),
    "grid.nx": (_int, 64),
    "grid.ny": (_int, None),
    "grid.domain": (_str, "square"),
    "init.u0": (_str, "1"),
    "init.w0": (_str, "1"),
    "output.dir": (_str, "out"),
    "output.stride": (float, None),
    "output.vtk": (_bool, True),
    "output.figures": (_bool, True),
    "study.kind": (_str, None),
    "study.levels": (_ints, (32, 64, 128)),
    "study.eps_list": (_floats, None),
    "study.r_metric": (float, None),
    "study.min_order": (float, 0.9),
    "study.formulation": (_str, "primal"),
    "weakcheck.k": (_int, 10),
    "weakcheck.threshold": (float, 1e-2),
    "weakcheck.system": (_str, "generated"),
    "seed": (_int, 0),
}


@dataclass
class Config:
    values: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, str] = field(default_factory=dict)
    source: str = "<string>"

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise KeyError(key)
        return self.values.get(key, KEYS[key][1])

    def get(self, key: str, default=None):
        v = self[key]
        return default if v is None else v

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def with_overrides(self, **kv) -> "Config":
        """Copy with ``key=value`` overrides; use ``__`` for the dot."""
        text = dict(self.raw)
        for k, v in kv.items():
            text[k.replace("__", ".")] = v if isinstance(v, str) else _render(v)
        return parse_config("\n".join(f"{k} = {v}" for k, v in text.items()), self.source)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.raw.items())


def _render(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, source: str = "<string>") -> Config:
    cfg = Config(source=source)
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        key, value = (p.strip() for p in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in cfg.raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parser = KEYS[key][0]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        cfg.raw[key] = value
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


_EXPR_NAMES = {
    "pi": math.pi, "e": math.e,
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh, "arctan2": np.arctan2,
    "maximum": np.maximum, "minimum": np.minimum, "where": np.where, "clip": np.clip,
}


def eval_expression(expr: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate an initial-data expression in ``x`` and ``y``.

    Only arithmetic and the numpy functions in ``_EXPR_NAMES`` are available.
    """
    if "__" in expr:
        raise ConfigError(f"illegal expression {expr!r}")
    try:
        code = compile(expr, "<init>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {expr!r}: {exc.msg}") from None
    for name in code.co_names:
        if name not in _EXPR_NAMES and name not in ("x", "y"):
            raise ConfigError(f"unknown name {name!r} in expression {expr!r}")
    try:
        val = eval(code, {"__builtins__": {}}, {**_EXPR_NAMES, "x": x, "y": y})
    except Exception as exc:
        raise ConfigError(f"cannot evaluate expression {expr!r}: {exc}") from None
    return np.broadcast_to(np.asarray(val, dtype=float), np.broadcast(x, y).shape).copy()


# --------------------------------------------------------------------------
# files


def write_state_csv(path: str | Path, state: State, grid: Grid) -> None:
    X, Y = grid.centers
    m = grid.mask
    data = np.column_stack([X[m], Y[m], np.asarray(state.u)[m], np.asarray(state.w)[m]])
    np.savetxt(path, data, delimiter=",", header="x,y,u,w", comments="", fmt="%.17g")


def read_state_csv(path: str | Path, grid: Grid, t: float = 0.0) -> State:
    try:
        with open(path) as fh:
            header = fh.readline().strip()
        if header != "x,y,u,w":
            raise TrajectoryFormatError(f"{path}: expected header x,y,u,w, got {header!r}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        if isinstance(exc, TrajectoryFormatError):
            raise
        raise TrajectoryFormatError(f"{path}: {exc}") from None
    if data.shape != (grid.n_active, 4):
        raise TrajectoryFormatError(f"{path}: expected {grid.n_active} rows of 4 columns, got {data.shape}")
    i = np.rint((data[:, 0] - grid.origin[0]) / grid.hx - 0.5).astype(int)
    j = np.rint((data[:, 1] - grid.origin[1]) / grid.hy - 0.5).astype(int)
    if (i.min() < 0 or j.min() < 0 or i.max() >= grid.nx or j.max() >= grid.ny
            or not np.all(grid.mask[i, j])):
        raise TrajectoryFormatError(f"{path}: coordinates do not match the grid")
    u = np.zeros(grid.mask.shape)
    w = np.zeros(grid.mask.shape)
    u[i, j] = data[:, 2]
    w[i, j] = data[:, 3]
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(w))):
        raise TrajectoryFormatError(f"{path}: non-finite values")
    return State(u, w, t)


def write_vtk(path: str | Path, state: State, grid: Grid, title: str = "haptofv state") -> None:
    """Legacy ASCII VTK structured points with cell data ``u``, ``w`` and ``mask``."""
    nx, ny = grid.nx, grid.ny
    lines = [
        "# vtk DataFile Version 3.0",
        f"{title} t={state.t!r}",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} 1",
        f"ORIGIN {grid.origin[0]!r} {grid.origin[1]!r} 0",
        f"SPACING {grid.hx!r} {grid.hy!r} 1",
        f"CELL_DATA {nx * ny}",
    ]
    # VTK ordering runs x fastest
    for name, arr in (("u", state.u), ("w", state.w), ("mask", grid.mask.astype(float))):
        vals = np.where(grid.mask, arr, 0.0).T.ravel()
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(" ".join(f"{v:.17g}" for v in vals[k:k + 8]) for k in range(0, vals.size, 8))
    Path(path).write_text("\n".join(lines) + "\n")


def write_key_values(path: str | Path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={_render(v) if not isinstance(v, str) else v}\n")


def read_key_values(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_table(path: str | Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([_cell(v) for v in row])


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def save_trajectory(out: str | Path, trajectory: Trajectory, vtk: bool = True) -> list[Path]:
    """Write per-output CSV (and VTK) files plus ``times.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    grid = trajectory.grid
    written = []
    rows = []
    for k, s in enumerate(trajectory.primal_states()):
        name = f"state_{k:05d}.csv"
        write_state_csv(out / name, s, grid)
        if vtk:
            write_vtk(out / f"state_{k:05d}.vtk", s, grid)
        rows.append([k, float(s.t), name])
        written.append(out / name)
    write_table(out / "times.csv", ["index", "t", "file"], rows)
    return written


def load_trajectory(directory: str | Path, grid: Grid, params, tensor) -> Trajectory:
    """Rebuild a trajectory from the files written by :func:`save_trajectory`."""
    directory = Path(directory)
    tfile = directory / "times.csv"
    if not tfile.is_file():
        raise TrajectoryFormatError(f"{directory}: missing times.csv")
    try:
        with open(tfile, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise TrajectoryFormatError(str(exc)) from None
    if not rows or rows[0] != ["index", "t", "file"]:
        raise TrajectoryFormatError(f"{tfile}: bad header")
    states = []
    for row in rows[1:]:
        if len(row) != 3:
            raise TrajectoryFormatError(f"{tfile}: malformed row {row}")
        try:
            t = float(row[1])
        except ValueError:
            raise TrajectoryFormatError(f"{tfile}: bad time {row[1]!r}") from None
        states.append(read_state_csv(directory / row[2], grid, t))
    if not states:
        raise TrajectoryFormatError(f"{tfile}: no states")
    report = RunReport()
    rfile = directory / "run_report.txt"
    if rfile.is_file():
        kv = read_key_values(rfile)
        report.clips = int(kv.get("clips", 0))
        report.steps = int(kv.get("steps", 0))
        report.aborted = kv.get("aborted", "0") == "1"
        report.abort_reason = kv.get("abort_reason", "")
        report.mass_defect_max = float(kv.get("mass_identity_max_defect", 0.0))
    return Trajectory(grid, params, tensor, states, report)
