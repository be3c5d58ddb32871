import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cerberus import autograd as ag
from cerberus.autograd import Tape, Tensor
from cerberus.geometry import Camera, ProjectionError, TriangleMesh, icosphere
from cerberus.renderer import (
    DEFAULT_ALBEDO, LightRig, rasterize, rasterize_arrays, rasterize_backward, render_parts, render_tensor,
)

# camera on +x looking at the origin, image up = world +z
CAM = Camera(0.0, 0.0, 4.0, 2.8, 32, 32)


def facing_triangle(x=0.0, size=0.5, flip=False):
    v = np.array([[x, -size, -size], [x, size, -size], [x, 0.0, size]])
    f = np.array([[0, 2, 1]]) if flip else np.array([[0, 1, 2]])
    return TriangleMesh(v, f)


def test_empty_scene():
    out = rasterize([], CAM)
    assert out.rgb.shape == (32, 32, 3)
    assert not out.rgb.any() and not out.silhouette.any()
    assert np.isinf(out.depth).all()


def test_facing_triangle_shading_and_depth():
    out = rasterize([facing_triangle()], CAM)
    assert out.silhouette[16, 16] == 1.0
    np.testing.assert_allclose(out.rgb[16, 16], DEFAULT_ALBEDO * (0.4 + 0.6), atol=1e-12)
    assert out.depth[16, 16] == pytest.approx(4.0)
    assert out.silhouette[0, 0] == 0.0


def test_back_facing_triangle_gets_ambient_only():
    out = rasterize([facing_triangle(flip=True)], CAM)
    assert out.silhouette[16, 16] == 1.0
    np.testing.assert_allclose(out.rgb[16, 16], DEFAULT_ALBEDO * 0.4, atol=1e-12)


def test_soft_band_lies_outside_coverage():
    out = rasterize([facing_triangle()], CAM)
    band = (out.silhouette > 0) & (out.silhouette < 1)
    assert band.any()
    # band pixels sit next to covered pixels, never inside
    covered = out.silhouette == 1.0
    near = np.zeros_like(covered)
    for dy in (-2, -1, 0, 1, 2):
        for dx in (-2, -1, 0, 1, 2):
            near |= np.roll(np.roll(covered, dy, 0), dx, 1)
    assert np.all(near[band])


def test_sigma_zero_gives_hard_edges():
    out = rasterize([facing_triangle()], CAM, sigma=0.0)
    assert set(np.unique(out.silhouette)) <= {0.0, 1.0}


def test_zbuffer_order_independent():
    near = facing_triangle(x=0.5)
    far = TriangleMesh(facing_triangle(x=-0.5).vertices, facing_triangle().faces)
    colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    a = rasterize([near, far], CAM, face_colors=colors)
    b = rasterize([far, near], CAM, face_colors=colors[::-1])
    np.testing.assert_array_equal(a.rgb, b.rgb)
    assert a.rgb[16, 16, 0] > 0 and a.rgb[16, 16, 1] == 0


def test_degenerate_and_clipped_counted():
    deg = TriangleMesh(np.array([[0, 0, 0], [0, 0.1, 0], [0, 0.2, 0]], dtype=float), [[0, 1, 2]])
    straddle = TriangleMesh(np.array([[3.99, -0.1, 0], [3.0, 0.1, 0], [4.5, 0, 0.1]]), [[0, 1, 2]])
    out = rasterize([deg, straddle, facing_triangle()], CAM)
    assert out.n_degenerate == 1
    assert out.n_clipped == 1
    assert out.silhouette[16, 16] == 1.0


def test_sphere_silhouette_area():
    r = 0.5
    cam = Camera(0.3, 0.2, 4.0, 2.8, 64, 64)
    out = rasterize([TriangleMesh(icosphere(3).vertices * r, icosphere(3).faces)], cam, sigma=0.0)
    # perspective disc radius for a sphere: f * r / sqrt(d^2 - r^2)
    radius_px = cam.focal_px * r / math.sqrt(4.0**2 - r**2)
    assert out.silhouette.sum() == pytest.approx(math.pi * radius_px**2, rel=0.05)


def test_lights_validation():
    with pytest.raises(ValueError):
        LightRig(0.8, 0.5)
    with pytest.raises(ValueError):
        LightRig(-0.1, 0.5)


def test_zero_area_image():
    with pytest.raises(ValueError, match="zero-area"):
        rasterize_arrays(np.zeros((3, 3)), np.array([[0, 1, 2]]), Camera(0, 0, 4, 2, 0, 0))


def test_backward_requires_forward_state():
    with pytest.raises(Exception):
        rasterize_backward(None, np.zeros((32, 32, 3)), np.zeros((32, 32)))


def test_backward_state_single_use():
    m = facing_triangle()
    out, saved = rasterize_arrays(m.vertices, m.faces, CAM)
    g = np.ones((32, 32, 3)), np.ones((32, 32))
    rasterize_backward(saved, *g)
    with pytest.raises(Exception, match="consumed"):
        rasterize_backward(saved, *g)


def test_render_tensor_matches_numpy_path():
    m = facing_triangle()
    rgb, sil, out = render_tensor(Tensor(m.vertices), m.faces, CAM)
    ref = rasterize([m], CAM)
    np.testing.assert_array_equal(rgb.data, ref.rgb)
    np.testing.assert_array_equal(sil.data, ref.silhouette)


def test_render_parts_checks():
    ico = icosphere(1)
    v = Tensor(np.stack([ico.vertices * 0.3] * 2))
    with pytest.raises(ValueError, match="translations"):
        render_parts(v, None, Tensor(np.zeros((3, 3))), ico.faces, CAM)
    with pytest.raises(ProjectionError):
        render_parts(v, None, Tensor(np.array([[0.0, 0, 0], [5.0, 0, 0]])), ico.faces, CAM)


def test_translation_gradient_points_toward_target():
    # moving a sphere toward where a target silhouette sits lowers the loss
    ico = icosphere(2)
    target = rasterize([TriangleMesh(ico.vertices * 0.4 + [0, 0.3, 0], ico.faces)], CAM).silhouette
    t = Tensor(np.array([[0.0, 0.0, 0.0]]), requires_grad=True)
    with Tape() as tape:
        _, sil, _ = render_parts(Tensor(ico.vertices[None] * 0.4), None, t, ico.faces, CAM)
        d = sil - target
        g = tape.backward(ag.tsum(d * d))[t]
    assert g[0, 1] < 0


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-1.0, 1.0), st.floats(0.0, 1.0))
def test_outputs_in_unit_range(azimuth, elevation, k_dir):
    cam = Camera(azimuth, elevation, 4.0, 2.8, 24, 24)
    ico = icosphere(1)
    out = rasterize([TriangleMesh(ico.vertices * 0.7, ico.faces)], cam, LightRig(k_dir, 1.0 - k_dir))
    assert out.rgb.min() >= 0.0 and out.rgb.max() <= 1.0
    assert out.silhouette.min() >= 0.0 and out.silhouette.max() <= 1.0
