import io

import numpy as np
import pytest

from helpers import central_diff, rel_error
from splat4d.hexplane import PLANE_AXES, SPATIAL_PLANES, HexPlaneGrid


def make_grid(rng, levels=((4, 3), (6, 5)), features=3, dtype=np.float64):
    g = HexPlaneGrid.create([-1, -1, -1], [1, 1, 1], levels, features, rng=rng, dtype=dtype)
    for ps in g.planes:
        for p in ps:
            p[:] = rng.uniform(0.5, 1.5, p.shape)
    return g


def reference_query(grid, xyz, t):
    """Scalar bilinear lookup, one point at a time."""
    out = []
    lo, hi = grid.bounds_min, grid.bounds_max
    u = [min(max((xyz[k] - lo[k]) / (hi[k] - lo[k]), 0.0), 1.0) for k in range(3)] + [t]
    for (spatial, temporal), planes in zip(grid.levels, grid.planes):
        res = [spatial, spatial, spatial, temporal]
        acc = np.ones(grid.features_per_level)
        for (a, b), plane in zip(PLANE_AXES, planes):
            ga, gb = u[a] * (res[a] - 1), u[b] * (res[b] - 1)
            i, j = min(int(ga), res[a] - 2), min(int(gb), res[b] - 2)
            fa, fb = ga - i, gb - j
            val = (plane[:, i, j] * (1 - fa) * (1 - fb) + plane[:, i, j + 1] * (1 - fa) * fb
                   + plane[:, i + 1, j] * fa * (1 - fb) + plane[:, i + 1, j + 1] * fa * fb)
            acc = acc * val
        out.append(acc)
    return np.concatenate(out)


def test_ones_give_ones(rng):
    g = make_grid(rng)
    for ps in g.planes:
        for p in ps:
            p[:] = 1.0
    f = g.query(rng.uniform(-2, 2, (20, 3)), 0.37)
    np.testing.assert_array_equal(f, 1.0)
    assert f.shape == (20, g.out_dim) and g.out_dim == 6


def test_vertex_query_is_product_of_stored(rng):
    g = make_grid(rng, levels=((5, 3),))
    # vertex (i=1, j=3, k=2) in xyz at grid res 5 on [-1,1], time vertex 1 of 3
    idx = (1, 3, 2, 1)
    xyz = np.array([-1 + 2 * idx[0] / 4, -1 + 2 * idx[1] / 4, -1 + 2 * idx[2] / 4])
    f = g.query(xyz[None], 0.5)[0]
    expect = np.ones(3)
    for (a, b), p in zip(PLANE_AXES, g.planes[0]):
        expect = expect * p[:, idx[a], idx[b]]
    np.testing.assert_allclose(f, expect, rtol=1e-14)


def test_matches_reference_interpolator(rng):
    g = make_grid(rng)
    pts = rng.uniform(-1.3, 1.3, (50, 3))
    ts = rng.uniform(0, 1, 50)
    for p, t in zip(pts, ts):
        np.testing.assert_allclose(g.query(p[None], t)[0], reference_query(g, p, t), rtol=1e-12)


def test_plane_grad_fd(rng):
    g = make_grid(rng)
    pts = rng.uniform(-0.9, 0.9, (6, 3))
    t = 0.41
    w = rng.normal(size=(6, g.out_dim))
    grads, d_xyz = g.query_backward(pts, t, w)
    assert d_xyz is None
    f = lambda: float(np.sum(g.query(pts, t) * w))
    for lv in range(2):
        for i in range(6):
            fd = central_diff(f, g.planes[lv][i])
            assert rel_error(grads[lv][i], fd).max() < 1e-3


def test_coordinate_grad_fd(rng):
    g = make_grid(rng)
    g.coord_grad = True
    pts = rng.uniform(-0.9, 0.9, (5, 3))
    w = rng.normal(size=(5, g.out_dim))
    _, d_xyz = g.query_backward(pts, 0.63, w)
    fd = central_diff(lambda: float(np.sum(g.query(pts, 0.63) * w)), pts, h=1e-6)
    assert rel_error(d_xyz, fd).max() < 1e-3


def test_zero_upstream(rng):
    g = make_grid(rng)
    grads, _ = g.query_backward(rng.uniform(-1, 1, (4, 3)), 0.2, np.zeros((4, g.out_dim)))
    assert all(np.all(x == 0) for lv in grads for x in lv)


def test_unit_factor_product_rule(rng):
    g = make_grid(rng, levels=((5, 3),))
    for i in range(5):
        g.planes[0][i][:] = 1.0
    xyz = np.array([[-0.5, 0.0, 0.5]])  # grid vertices (1, 2, 3)
    d_f = rng.normal(size=(1, 3))
    grads, _ = g.query_backward(xyz, 1.0, d_f)
    sixth = grads[0][5]  # (z, t) plane
    np.testing.assert_allclose(sixth[:, 3, 2], d_f[0], rtol=1e-14)
    assert np.count_nonzero(sixth) == 3


def test_spatial_planes_ignore_time(rng):
    g = make_grid(rng)
    pts = rng.uniform(-1, 1, (10, 3))
    a = g.query_planes(pts, 0.1)
    b = g.query_planes(pts, 0.9)
    for lv in range(2):
        for i in SPATIAL_PLANES:
            np.testing.assert_array_equal(a[lv][i], b[lv][i])


def test_lipschitz_small_step(rng):
    g = make_grid(rng)
    pts = rng.uniform(-1, 1, (30, 3))
    d = g.query(pts + 1e-5, 0.5) - g.query(pts, 0.5)
    assert np.abs(d).max() < 1e-5 * 100


def test_default_init_and_validation(rng):
    g = HexPlaneGrid.create([-1] * 3, [1] * 3, rng=rng)
    assert g.levels == [(32, 12), (64, 25)] and g.out_dim == 32
    assert g.planes[1][3].shape == (16, 64, 25)
    assert all(p.min() >= 0.9 and p.max() <= 1.1 for ps in g.planes for p in ps)
    with pytest.raises(ValueError):
        HexPlaneGrid.create([-1] * 3, [1] * 3, levels=((1, 4),))


def test_serialization_roundtrip(rng):
    g = make_grid(rng, dtype=np.float32)
    buf = io.BytesIO()
    g.write(buf)
    buf.seek(0)
    back = HexPlaneGrid.read(buf)
    assert back.levels == g.levels
    for a, b in zip(back.params().values(), g.params().values()):
        np.testing.assert_array_equal(a, b)
