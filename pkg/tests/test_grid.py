import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from haptofv.grid import (
    Disk,
    Rectangle,
    build_grid,
    cell_gradient,
    cell_integral,
    face_gradient,
    face_gradients,
    parse_domain,
)


def test_two_by_two_square():
    g = build_grid(2, 2, Rectangle())
    assert g.n_active == 4
    assert g.hx == 1.0 and g.hy == 1.0


@given(st.integers(1, 40), st.integers(1, 40))
def test_rectangle_all_active(nx, ny):
    g = build_grid(nx, ny, "square")
    assert g.n_active == nx * ny
    assert g.active_area == pytest.approx(4.0)


def test_disk_area_256():
    g = build_grid(256, 256, "disk")
    assert abs(g.active_area - math.pi) / math.pi < 0.02


def test_disk_area_converges_first_order():
    errs = [abs(build_grid(n, n, "disk").active_area - math.pi) for n in (32, 64, 128, 256)]
    # staircase error shrinks roughly like h; allow for the oscillation of lattice counts
    assert errs[-1] < errs[0]
    assert errs[-1] < 4 * 2.0 / 256 * 2 * math.pi


def test_disk_mask_is_strict_centre_test():
    g = build_grid(64, 64, "disk")
    X, Y = g.centers
    assert np.array_equal(g.mask, X**2 + Y**2 < 1.0)


@pytest.mark.parametrize("nx,ny", [(0, 4), (4, -1), (2.5, 4)])
def test_rejects_bad_dimensions(nx, ny):
    with pytest.raises(ValueError):
        build_grid(nx, ny, "square")


def test_rejects_disk_outside_box():
    with pytest.raises(ValueError):
        build_grid(8, 8, Disk(1.5, (0.0, 0.0), Rectangle()))


def test_parse_domain():
    assert parse_domain("rect:0,1,0,2").bounds == (0.0, 1.0, 0.0, 2.0)
    d = parse_domain("disk:2")
    assert d.radius == 2 and d.bounds == (-2, 2, -2, 2)
    with pytest.raises(ValueError):
        parse_domain("hexagon")


def test_face_connectivity():
    g = build_grid(16, 16, "disk")
    faces = g.faces
    flat_mask = g.mask.ravel()
    assert np.all(flat_mask[faces[:, 0]]) and np.all(flat_mask[faces[:, 1]])
    bfaces = g.boundary_faces
    assert np.all(flat_mask[bfaces[:, 0]])
    # each active cell has 4 faces: interior faces count twice
    assert 2 * len(faces) + len(bfaces) == 4 * g.n_active


def test_cell_integral_constants():
    for n in (3, 17, 64):
        g = build_grid(n, n, "square")
        assert cell_integral(np.ones((n, n)), g) == 4.0
        assert cell_integral(np.zeros((n, n)), g) == 0.0


def test_cell_integral_x_squared():
    g = build_grid(128, 128, "square")
    X, _ = g.centers
    assert abs(cell_integral(X**2, g) - 4.0 / 3.0) < 1e-3


def test_cell_integral_constant_on_disk_is_const_times_area():
    g = build_grid(50, 50, "disk")
    assert cell_integral(np.full(g.mask.shape, 2.5), g) == pytest.approx(2.5 * g.active_area, rel=1e-15)


def test_cell_integral_rejects_nonfinite():
    g = build_grid(4, 4)
    f = np.ones((4, 4))
    f[1, 1] = np.nan
    with pytest.raises(FloatingPointError):
        cell_integral(f, g)


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_cell_integral_linear(seed, a, b):
    g = build_grid(12, 9, "disk:1")
    r = np.random.default_rng(seed)
    f1, f2 = r.standard_normal((2, 12, 9))
    lhs = cell_integral(a * f1 + b * f2, g)
    rhs = a * cell_integral(f1, g) + b * cell_integral(f2, g)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_face_gradient_linear_x():
    g = build_grid(10, 10)
    X, _ = g.centers
    np.testing.assert_allclose(face_gradient(X, (0, 4, 5), g), [1.0, 0.0], atol=1e-14)


def test_face_gradient_constant():
    g = build_grid(10, 10)
    np.testing.assert_array_equal(face_gradient(np.full((10, 10), 3.0), (1, 2, 2), g), [0.0, 0.0])


def test_face_gradient_rejects_boundary_face():
    g = build_grid(8, 8, "disk")
    with pytest.raises(ValueError):
        face_gradient(np.zeros((8, 8)), (0, 0, 0), g)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_face_gradients_exact_on_affine(a, b, c):
    g = build_grid(16, 16, "disk")
    X, Y = g.centers
    f = a * X + b * Y + c
    (gxn, gxt), (gyt, gyn) = face_gradients(f, g)
    ax, ay = g.xface_active, g.yface_active
    tol = 1e-12 * (1 + abs(a) + abs(b) + abs(c))
    np.testing.assert_allclose(gxn[ax], a, atol=tol)
    np.testing.assert_allclose(gxt[ax], b, atol=tol)
    np.testing.assert_allclose(gyt[ay], a, atol=tol)
    np.testing.assert_allclose(gyn[ay], b, atol=tol)


def test_face_gradient_xy_second_order():
    errs = []
    for n in (16, 32, 64):
        g = build_grid(n, n)
        X, Y = g.centers
        (gxn, gxt), _ = face_gradients(X * Y, g)
        xf, yf = g.xface_centers
        # interior faces away from the outer boundary
        sl = (slice(2, -2), slice(2, -2))
        errs.append(max(np.abs(gxn - yf)[sl].max(), np.abs(gxt - xf)[sl].max()))
    assert errs[-1] < 1e-12 or errs[1] / errs[2] > 3.5


def test_cell_gradient_linear_including_edges():
    g = build_grid(20, 20, "disk")
    X, Y = g.centers
    gx, gy = cell_gradient(2 * X - Y, g)
    m = g.mask
    np.testing.assert_allclose(gx[m], 2.0, atol=1e-12)
    np.testing.assert_allclose(gy[m], -1.0, atol=1e-12)


def test_grid_is_immutable():
    g = build_grid(4, 4)
    with pytest.raises(ValueError):
        g.mask[0, 0] = False
