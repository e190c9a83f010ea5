import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from face4d.model import synth_model
from face4d.render import (CameraIntrinsics, color_to_png, depth_to_png, rasterize, render_backward, sh_basis,
                           sh_shade, sh_shade_backward, vertex_normals, vertex_normals_backward)

K64 = CameraIntrinsics(100.0, 100.0, 31.5, 31.5, 64, 64)


def _tri_at(z, size=1.0):
    return np.array([[-size, -size, z], [size, -size, z], [0.0, size, z]]), np.array([[0, 1, 2]])


def _ray_oracle(vertices, triangles, k):
    """Nearest ray/triangle hit per pixel center (Moller-Trumbore), inf where missed."""
    h, w = k.height, k.width
    depth = np.full((h, w), np.inf)
    for row in range(h):
        for col in range(w):
            d = np.array([(col - k.cx) / k.fx, (row - k.cy) / k.fy, 1.0])
            for a, b, c in vertices[triangles]:
                e1, e2 = b - a, c - a
                p = np.cross(d, e2)
                det = e1 @ p
                if abs(det) < 1e-14:
                    continue
                u = (-a @ p) / det
                qv = np.cross(-a, e1)
                v = (d @ qv) / det
                t = (e2 @ qv) / det
                if u < 0 or v < 0 or u + v > 1 or t <= 0:
                    continue
                # the ray is parametrized with unit z, so t is camera-space depth
                depth[row, col] = min(depth[row, col], t)
    return depth


def _random_mesh(rng, count=6):
    tris = []
    verts = []
    for i in range(count):
        c = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(1.5, 3.0)])
        verts.append(c + rng.uniform(-0.35, 0.35, (3, 3)))
        tris.append([3 * i, 3 * i + 1, 3 * i + 2])
    return np.concatenate(verts), np.array(tris)


def test_flat_triangle_depth():
    v, t = _tri_at(1.0)
    out = rasterize(v, t, K64)
    assert out.coverage[31, 31] and out.coverage[32, 32]
    assert out.depth[32, 32] == pytest.approx(1.0, abs=1e-15)
    assert np.all(np.abs(out.depth[out.coverage] - 1.0) < 1e-12)


def test_principal_point_pixel():
    k = CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
    v, t = _tri_at(1.0)
    assert rasterize(v, t, k).depth[32, 32] == 1.0


def test_near_triangle_wins():
    v1, _ = _tri_at(1.0, size=0.1)
    v2, _ = _tri_at(2.0, size=0.4)
    tri = np.array([[0, 1, 2], [3, 4, 5]])
    for order in (tri, tri[::-1]):
        out = rasterize(np.concatenate([v1, v2]), order, K64)
        near_only = rasterize(v1, np.array([[0, 1, 2]]), K64).coverage
        assert np.all(out.depth[near_only] == pytest.approx(1.0))
        far = out.coverage & ~near_only
        assert far.any() and np.allclose(out.depth[far], 2.0)


@pytest.mark.parametrize("seed", range(3))
def test_depth_matches_ray_cast(seed):
    rng = np.random.default_rng(seed)
    v, t = _random_mesh(rng)
    k = CameraIntrinsics(60.0, 60.0, 15.5, 15.5, 32, 32)
    out = rasterize(v, t, k)
    ref = _ray_oracle(v, t, k)
    both = out.coverage & np.isfinite(ref)
    assert both.sum() > 50
    assert np.max(np.abs(out.depth[both] - ref[both])) <= 1e-6
    # a coverage disagreement may only happen on a triangle boundary
    assert (out.coverage != np.isfinite(ref)).sum() <= 0.02 * out.coverage.size


@given(seed=st.integers(0, 2**31))
def test_output_invariants(seed):
    rng = np.random.default_rng(seed)
    v, t = _random_mesh(rng, 4)
    out = rasterize(v, t, CameraIntrinsics(30.0, 30.0, 11.5, 11.5, 24, 24), rng.uniform(0, 1, (len(v), 3)))
    assert np.array_equal(out.coverage, np.isfinite(out.depth))
    b = out.bary[out.coverage]
    assert np.all(b >= -1e-9)
    assert np.all(np.abs(b.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(out.color[~out.coverage] == 0)


def test_shared_edge_pixels_drawn_once():
    # a square split along its diagonal; the diagonal runs through pixel centers
    k = CameraIntrinsics(10.0, 10.0, 10.0, 10.0, 24, 24)
    quad = np.array([[-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, 1.0], [-1.0, 1.0, 1.0]])
    a = rasterize(quad, np.array([[0, 1, 2]]), k).coverage
    b = rasterize(quad, np.array([[0, 2, 3]]), k).coverage
    both = rasterize(quad, np.array([[0, 1, 2], [0, 2, 3]]), k).coverage
    assert not np.any(a & b)
    assert np.array_equal(a | b, both)


def test_near_plane_cull():
    v, t = _tri_at(1.0)
    v[0, 2] = 0.0005
    assert not rasterize(v, t, K64).coverage.any()


def test_empty_mesh():
    with pytest.raises(ValueError, match="empty"):
        rasterize(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), K64)


def test_deterministic():
    rng = np.random.default_rng(4)
    v, t = _random_mesh(rng)
    c = rng.uniform(0, 1, (len(v), 3))
    a, b = rasterize(v, t, K64, c), rasterize(v, t, K64, c)
    assert a.color.tobytes() == b.color.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
    assert a.tri_id.tobytes() == b.tri_id.tobytes()


def _sh_oracle(n):
    # direct polynomial evaluation with hard-coded constants
    x, y, z = n
    return np.array([
        0.282094791774, 0.488602511903 * y, 0.488602511903 * z, 0.488602511903 * x,
        1.092548430592 * x * y, 1.092548430592 * y * z, 0.315391565253 * (3 * z * z - 1),
        1.092548430592 * x * z, 0.546274215296 * (x * x - y * y),
    ])


def test_sh_band0_constant():
    rng = np.random.default_rng(0)
    normals = rng.normal(size=(20, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    gamma = np.zeros(27)
    gamma[[0, 9, 18]] = 1.0
    shaded = sh_shade(np.ones((20, 3)), normals, gamma)
    assert np.allclose(shaded, 0.2820948, atol=1e-7)
    assert np.all(sh_shade(np.ones((20, 3)), normals, np.zeros(27)) == 0)


def test_sh_matches_polynomial_oracle(rng):
    normals = rng.normal(size=(50, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    albedo = rng.uniform(0, 1, (50, 3))
    gamma = rng.normal(size=27)
    got = sh_shade(albedo, normals, gamma)
    ref = np.array([[albedo[i, c] * _sh_oracle(normals[i]) @ gamma[9 * c:9 * c + 9] for c in range(3)]
                    for i in range(50)])
    assert np.max(np.abs(got - ref)) <= 1e-10
    assert np.max(np.abs(sh_basis(normals) - np.array([_sh_oracle(n) for n in normals]))) <= 1e-11


def test_sh_rejects_non_unit_normals():
    with pytest.raises(ValueError, match="unit normals"):
        sh_shade(np.ones((1, 3)), np.array([[0.0, 0.0, 1.01]]), np.zeros(27))


def test_vertex_normals_are_area_weighted():
    # two triangles meeting at vertex 0: a unit one in the xy plane and a larger one in the xz plane
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 2], [2, 0, 0]])
    t = np.array([[0, 1, 2], [0, 3, 4]])
    n0 = vertex_normals(v, t)[0]
    expect = np.array([0.0, 0, 1]) * 0.5 + np.array([0.0, 1, 0]) * 2.0
    assert np.allclose(n0, expect / np.linalg.norm(expect), atol=1e-15)


def test_vertex_normals_point_outward_on_head():
    m = synth_model(0, 642, 1, 1, 1)
    n = vertex_normals(m.mean_shape, m.triangles)
    radial = m.mean_shape / np.linalg.norm(m.mean_shape, axis=1, keepdims=True)
    assert np.all(np.abs(np.linalg.norm(n, axis=1) - 1) < 1e-12)
    assert np.all(np.sum(n * radial, axis=1) > 0.5)


def _fd(f, x, h):
    g = np.zeros(x.size)
    for i in range(x.size):
        xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g.reshape(x.shape)


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_zero_upstream_gives_zero_gradient():
    v, t = _tri_at(1.5)
    out = rasterize(v, t, K64, np.ones((3, 3)))
    gv, gc = render_backward(out, np.zeros((64, 64, 3)), np.zeros((64, 64)))
    assert not gv.any() and not gc.any()


def test_depth_gradient_single_triangle(rng):
    v = np.array([[-0.4, -0.3, 1.4], [0.5, -0.2, 1.6], [0.0, 0.45, 1.5]])
    t = np.array([[0, 1, 2]])
    base = rasterize(v, t, K64)
    w = rng.normal(size=(64, 64))

    def f(x):
        out = rasterize(x, t, K64, tri_id=base.tri_id)
        return np.sum(np.where(out.coverage, out.depth, 0.0) * w)

    gv, _ = render_backward(base, grad_depth=np.where(base.coverage, w, 0.0))
    num = _fd(f, v, 1e-5)
    assert _rel(gv[:, 2], num[:, 2]) <= 1e-4
    assert _rel(gv, num) <= 1e-4


def test_color_gradient_wrt_lighting(rng):
    v = np.array([[-0.5, -0.4, 1.5], [0.5, -0.4, 1.6], [0.5, 0.5, 1.4], [-0.5, 0.5, 1.5], [0.0, 0.0, 1.3]])
    t = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4]])
    albedo = rng.uniform(0.2, 0.9, (5, 3))
    normals = vertex_normals(v, t)
    gamma = rng.normal(size=27)
    base = rasterize(v, t, K64, sh_shade(albedo, normals, gamma))
    w = rng.normal(size=(64, 64, 3))

    def f(g):
        return np.sum(rasterize(v, t, K64, sh_shade(albedo, normals, g), tri_id=base.tri_id).color * w)

    _, gc = render_backward(base, grad_color=w)
    _, _, gg = sh_shade_backward(gc, albedo, normals, gamma)
    assert _rel(gg, _fd(f, gamma, 1e-4)) <= 1e-4


def test_full_chain_vertex_gradient(rng):
    # vertices -> normals -> shading -> raster, visibility frozen
    m = synth_model(2, 42, 1, 1, 1)
    v = m.mean_shape * 0.8 + np.array([0.0, 0.0, 2.0])
    albedo = rng.uniform(0.2, 0.9, (42, 3))
    gamma = rng.normal(size=27)
    base = rasterize(v, m.triangles, K64, sh_shade(albedo, vertex_normals(v, m.triangles), gamma))
    wc, wd = rng.normal(size=(64, 64, 3)), rng.normal(size=(64, 64))

    def f(x):
        out = rasterize(x, m.triangles, K64, sh_shade(albedo, vertex_normals(x, m.triangles), gamma),
                        tri_id=base.tri_id)
        return np.sum(out.color * wc) + np.sum(np.where(out.coverage, out.depth, 0.0) * wd)

    gv, gc = render_backward(base, wc, np.where(base.coverage, wd, 0.0))
    ga, gn, _ = sh_shade_backward(gc, albedo, vertex_normals(v, m.triangles), gamma)
    gv = gv + vertex_normals_backward(gn, v, m.triangles)
    assert _rel(gv, _fd(f, v, 1e-6)) <= 1e-4

    def fa(a):
        out = rasterize(v, m.triangles, K64, sh_shade(a, vertex_normals(v, m.triangles), gamma), tri_id=base.tri_id)
        return np.sum(out.color * wc)

    assert _rel(ga, _fd(fa, albedo, 1e-4)) <= 1e-4


def test_backward_shape_mismatch():
    v, t = _tri_at(1.5)
    out = rasterize(v, t, K64, np.ones((3, 3)))
    with pytest.raises(ValueError, match="does not match"):
        render_backward(out, grad_depth=np.zeros((10, 10)))


def test_png_dumps(tmp_path):
    v, t = _tri_at(1.234)
    out = rasterize(v, t, K64, np.full((3, 3), 0.6))
    color_to_png(out.color, tmp_path / "c.png")
    depth_to_png(out.depth, tmp_path / "d.png")
    c = np.asarray(Image.open(tmp_path / "c.png"))
    d = np.asarray(Image.open(tmp_path / "d.png"))
    assert c.dtype == np.uint8 and c[32, 32, 0] == 153
    assert d.dtype == np.uint16 and d[32, 32] == 1234
    assert np.all(d[~out.coverage] == 0)
