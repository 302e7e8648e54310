"""Structured cell-centred 2D mesh with cell masking.

Cells are indexed ``[i, j]`` with ``i`` along x and ``j`` along y.  Faces come in
two families:

* x-faces, shape ``(nx - 1, ny)``: face ``(i, j)`` separates cell ``(i, j)``
  (left) from ``(i + 1, j)`` (right), unit normal ``+e_x``;
* y-faces, shape ``(nx, ny - 1)``: face ``(i, j)`` separates ``(i, j)`` from
  ``(i, j + 1)``, unit normal ``+e_y``.

A face is interior when both adjacent cells are active.  Everything else that
touches exactly one active cell (including the outer rectangle) is a boundary
face and carries zero flux.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "Rectangle",
    "Disk",
    "Grid",
    "build_grid",
    "parse_domain",
    "cell_integral",
    "face_gradient",
    "face_gradients",
    "cell_gradient",
]


@dataclass(frozen=True)
class Rectangle:
    x0: float = -1.0
    x1: float = 1.0
    y0: float = -1.0
    y1: float = 1.0

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.x0, self.x1, self.y0, self.y1


@dataclass(frozen=True)
class Disk:
    """Disk of ``radius`` about ``center`` inside the bounding ``box``."""

    radius: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)
    box: Rectangle = field(default_factory=Rectangle)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.box.bounds


def parse_domain(text: str) -> Rectangle | Disk:
    """Parse a domain descriptor.

    ``square`` is ``[-1, 1]^2``; ``disk`` the unit disk in that square;
    ``rect:x0,x1,y0,y1`` an arbitrary rectangle; ``disk:R`` a disk of radius R
    centred at the origin in ``[-R, R]^2``.
    """
    text = text.strip().lower()
    if text == "square":
        return Rectangle()
    if text == "disk":
        return Disk()
    if text.startswith("rect:"):
        vals = [float(v) for v in text[5:].split(",")]
        if len(vals) != 4:
            raise ValueError(f"rect domain needs 4 numbers, got {text!r}")
        return Rectangle(*vals)
    if text.startswith("disk:"):
        radius = float(text[5:])
        return Disk(radius, (0.0, 0.0), Rectangle(-radius, radius, -radius, radius))
    raise ValueError(f"unknown domain descriptor {text!r}")


@dataclass(frozen=True, eq=False)
class Grid:
    nx: int
    ny: int
    origin: tuple[float, float]
    extent: tuple[float, float]
    mask: np.ndarray
    domain: Rectangle | Disk

    def __post_init__(self):
        self.mask.setflags(write=False)

    @property
    def hx(self) -> float:
        return self.extent[0] / self.nx

    @property
    def hy(self) -> float:
        return self.extent[1] / self.ny

    @property
    def h(self) -> float:
        return min(self.hx, self.hy)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def xc(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.hx

    @property
    def yc(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.hy

    @property
    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xc, self.yc, indexing="ij")

    @property
    def xface_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xf = self.origin[0] + np.arange(1, self.nx) * self.hx
        return np.meshgrid(xf, self.yc, indexing="ij")

    @property
    def yface_centers(self) -> tuple[np.ndarray, np.ndarray]:
        yf = self.origin[1] + np.arange(1, self.ny) * self.hy
        return np.meshgrid(self.xc, yf, indexing="ij")

    @cached_property
    def xface_active(self) -> np.ndarray:
        return self.mask[:-1, :] & self.mask[1:, :]

    @cached_property
    def yface_active(self) -> np.ndarray:
        return self.mask[:, :-1] & self.mask[:, 1:]

    @cached_property
    def _stencil(self):
        """Per-grid weights for tangential and cell-centred gradient averages."""
        vx = self.xface_active.astype(float)
        vy = self.yface_active.astype(float)
        # number of valid y-pairs touching each cell, then summed over x-face pairs
        cy = np.zeros(self.mask.shape)
        cy[:, 1:] += vy
        cy[:, :-1] += vy
        cx = np.zeros(self.mask.shape)
        cx[1:, :] += vx
        cx[:-1, :] += vx
        cxf = cy[:-1, :] + cy[1:, :]
        cyf = cx[:, :-1] + cx[:, 1:]
        inv = lambda c: np.where(c > 0, 1.0 / np.maximum(c, 1.0), 0.0)
        return {
            "vx": vx, "vy": vy,
            "inv_xface_t": inv(cxf), "inv_yface_t": inv(cyf),
            "inv_cell_x": inv(cx), "inv_cell_y": inv(cy),
        }

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    @property
    def active_area(self) -> float:
        return self.n_active * self.cell_area

    def flat_index(self, i, j):
        return np.asarray(i) * self.ny + np.asarray(j)

    @property
    def faces(self) -> np.ndarray:
        """Interior faces as rows ``(left_cell, right_cell, axis)`` of flat indices."""
        ix, jx = np.nonzero(self.xface_active)
        iy, jy = np.nonzero(self.yface_active)
        left = np.concatenate([self.flat_index(ix, jx), self.flat_index(iy, jy)])
        right = np.concatenate([self.flat_index(ix + 1, jx), self.flat_index(iy, jy + 1)])
        axis = np.concatenate([np.zeros(ix.size, int), np.ones(iy.size, int)])
        return np.stack([left, right, axis], axis=1)

    @property
    def boundary_faces(self) -> np.ndarray:
        """Faces with exactly one active cell, rows ``(cell, axis, side)``.

        ``side`` is -1 for the low face of the cell along ``axis``, +1 for the
        high face.
        """
        m = np.pad(self.mask, 1, constant_values=False)
        core = m[1:-1, 1:-1]
        rows = []
        for axis, side, nb in (
            (0, -1, m[:-2, 1:-1]),
            (0, 1, m[2:, 1:-1]),
            (1, -1, m[1:-1, :-2]),
            (1, 1, m[1:-1, 2:]),
        ):
            i, j = np.nonzero(core & ~nb)
            rows.append(
                np.stack([self.flat_index(i, j), np.full(i.size, axis), np.full(i.size, side)], axis=1)
            )
        return np.concatenate(rows, axis=0)

    def in_domain(self, x, y) -> np.ndarray:
        if isinstance(self.domain, Disk):
            cx, cy = self.domain.center
            return (x - cx) ** 2 + (y - cy) ** 2 < self.domain.radius**2
        return np.ones(np.broadcast(x, y).shape, dtype=bool)


def build_grid(nx: int, ny: int, domain: Rectangle | Disk | str = "square") -> Grid:
    """Build a uniform grid over the bounding box of ``domain``.

    Disk domains use a staircase mask: a cell is active iff its centre lies
    strictly inside the disk.
    """
    if isinstance(domain, str):
        domain = parse_domain(domain)
    if int(nx) != nx or int(ny) != ny or nx <= 0 or ny <= 0:
        raise ValueError(f"cell counts must be positive integers, got ({nx}, {ny})")
    nx, ny = int(nx), int(ny)
    x0, x1, y0, y1 = domain.bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounding box {domain.bounds}")
    if isinstance(domain, Disk):
        cx, cy = domain.center
        R = domain.radius
        if R <= 0:
            raise ValueError("disk radius must be positive")
        if cx - R < x0 or cx + R > x1 or cy - R < y0 or cy + R > y1:
            raise ValueError("disk does not fit inside its bounding box")
    grid = Grid(nx, ny, (x0, y0), (x1 - x0, y1 - y0), np.ones((nx, ny), dtype=bool), domain)
    if isinstance(domain, Disk):
        X, Y = grid.centers
        grid = Grid(nx, ny, grid.origin, grid.extent, grid.in_domain(X, Y), domain)
    return grid


def cell_integral(field: np.ndarray, grid: Grid) -> float:
    """Midpoint-rule integral of a per-cell field over the active cells."""
    vals = np.asarray(field, dtype=float)
    if vals.ndim == 0:
        vals = np.full(grid.mask.shape, float(vals))
    vals = vals[grid.mask]
    total = float(vals.sum()) * grid.cell_area
    if not np.isfinite(total):
        raise FloatingPointError("non-finite value in cell_integral")
    return total


def _masked_diffs(f: np.ndarray, grid: Grid):
    st = grid._stencil
    dx = (f[1:, :] - f[:-1, :]) * (st["vx"] / grid.hx)
    dy = (f[:, 1:] - f[:, :-1]) * (st["vy"] / grid.hy)
    return dx, dy


def _pair_sums(d: np.ndarray, axis: int, shape) -> np.ndarray:
    """For each cell, the sum of the valid neighbour differences along ``axis``."""
    s = np.zeros(shape)
    if axis == 0:
        s[1:, :] += d
        s[:-1, :] += d
    else:
        s[:, 1:] += d
        s[:, :-1] += d
    return s


def face_gradients(field: np.ndarray, grid: Grid):
    """Gradients at all x-faces and y-faces.

    Returns ``((gx_n, gx_t), (gy_t, gy_n))``: on x-faces the normal (x) and
    tangential (y) components, on y-faces the tangential (x) and normal (y)
    components.  The tangential component is the mean of the valid neighbour
    differences of the two adjacent cells (four in the interior, fewer next to
    the mask edge).  Values on non-interior faces are meaningless but finite.
    """
    f = np.where(grid.mask, field, 0.0)
    st = grid._stencil
    gxn = (f[1:, :] - f[:-1, :]) / grid.hx
    gyn = (f[:, 1:] - f[:, :-1]) / grid.hy
    dx, dy = _masked_diffs(f, grid)
    sy = _pair_sums(dy, 1, f.shape)
    gxt = (sy[:-1, :] + sy[1:, :]) * st["inv_xface_t"]
    sx = _pair_sums(dx, 0, f.shape)
    gyt = (sx[:, :-1] + sx[:, 1:]) * st["inv_yface_t"]
    return (gxn, gxt), (gyt, gyn)


def face_gradient(field: np.ndarray, face: tuple[int, int, int], grid: Grid) -> np.ndarray:
    """Gradient ``(d/dx, d/dy)`` at one interior face ``(axis, i, j)``."""
    axis, i, j = face
    active = grid.xface_active if axis == 0 else grid.yface_active
    if not active[i, j]:
        raise ValueError(f"face {face} is not interior")
    (gxn, gxt), (gyt, gyn) = face_gradients(field, grid)
    if axis == 0:
        return np.array([gxn[i, j], gxt[i, j]])
    return np.array([gyt[i, j], gyn[i, j]])


def cell_gradient(field: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred gradient as the mean of the normal gradients on the cell's
    interior faces (central difference inside, one-sided at the mask edge)."""
    f = np.where(grid.mask, field, 0.0)
    st = grid._stencil
    dx, dy = _masked_diffs(f, grid)
    gx = _pair_sums(dx, 0, f.shape) * st["inv_cell_x"]
    gy = _pair_sums(dy, 1, f.shape) * st["inv_cell_y"]
    return gx, gy
