import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cerberus.autograd import Tape, Tensor
from cerberus.geometry import Camera, MeshError, TriangleMesh, icosphere
from cerberus.losses import (
    KEYS, LossWeights, QuadrupletLatents, background_loss, build_quadruplet, mix_shape_latents,
    mse_reconstruction, other_view, reconstruction_total, smoothness_loss, total_loss,
    translation_consistency, translation_consistency_total, view_consistent_recon,
)
from cerberus.model import Cerberus, EncoderConfig, PartSet
from cerberus.renderer import rasterize

from gradcases import end_to_end_error
from shapes import box, coplanar_pair

TINY = EncoderConfig(channels=(4, 8), latent=8, n_parts=2, image_size=16, ico_level=1, init_radius=0.4)


def cams(az0=0.2, az1=1.4):
    return {k: Camera(a, 0.3, 4.0, 2.8, 16, 16) for k, a in zip(KEYS, (az0, az1, az0, az1))}


# ---------------------------------------------------------------- reconstruction


def test_mse_identical_and_offset():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert mse_reconstruction(img, img).item() == 0.0
    assert mse_reconstruction(img, img + 0.5).item() == pytest.approx(0.25, abs=1e-15)


def test_mse_matches_double_loop():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(5, 4, 3)), rng.uniform(size=(5, 4, 3))
    total = 0.0
    for y in range(5):
        for x in range(4):
            for c in range(3):
                total += (a[y, x, c] - b[y, x, c]) ** 2
    assert abs(mse_reconstruction(a, b).item() - total / 60) < 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_reconstruction(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# ---------------------------------------------------------------- latent mixing


def test_mix_identical_latents_is_identity():
    s = np.random.default_rng(2).normal(size=16)
    mixed, z = mix_shape_latents(s, s, s, s, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(mixed.data, s)


def test_mix_forced_selector():
    rng = np.random.default_rng(4)
    lat = [rng.normal(size=6) for _ in range(4)]
    mixed, _ = mix_shape_latents(*lat, z=np.zeros(6, dtype=int))
    np.testing.assert_array_equal(mixed.data, lat[0])
    z = np.array([0, 1, 2, 3, 2, 1])
    mixed, _ = mix_shape_latents(*lat, z=z)
    np.testing.assert_array_equal(mixed.data, [lat[z[i]][i] for i in range(6)])


def test_mix_frequencies_uniform():
    lat = [np.full(1000, float(k)) for k in range(4)]
    rng = np.random.default_rng(5)
    counts = np.zeros(4)
    for _ in range(100):
        _, z = mix_shape_latents(*lat, rng=rng)
        counts += np.bincount(z, minlength=4)
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.25) < 0.01)


def test_mix_reproducible_and_checked():
    lat = [np.arange(5.0) + k for k in range(4)]
    a, za = mix_shape_latents(*lat, rng=np.random.default_rng(7))
    b, zb = mix_shape_latents(*lat, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(za, zb)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ValueError, match="widths"):
        mix_shape_latents(np.zeros(5), np.zeros(5), np.zeros(4), np.zeros(5), rng=np.random.default_rng())


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-5, 5)), st.integers(0, 2**31))
def test_mix_elements_come_from_sources(lat, seed):
    mixed, z = mix_shape_latents(*lat, rng=np.random.default_rng(seed))
    for i in range(7):
        assert mixed.data[i] == lat[z[i], i]


def test_mix_gradient_routes_to_selected_source():
    lat = [Tensor(np.zeros(4), requires_grad=True) for _ in range(4)]
    z = np.array([0, 3, 3, 1])
    with Tape() as tape:
        mixed, _ = mix_shape_latents(*lat, z=z)
        g = tape.backward(mixed.sum())
    np.testing.assert_array_equal(g[lat[3]], [0, 1, 1, 0])
    assert lat[2] not in g or not g[lat[2]].any()


# ---------------------------------------------------------------- translations


def test_translation_consistency_examples():
    t = np.random.default_rng(6).normal(size=(3, 3))
    assert translation_consistency(t, t).item() == 0.0
    assert translation_consistency(np.zeros((1, 3)), np.ones((1, 3))).item() == 3.0
    t0 = np.zeros((2, 3))
    t1 = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    assert translation_consistency(t0, t1).item() == 2.5
    with pytest.raises(ValueError):
        translation_consistency(np.zeros((2, 3)), np.zeros((3, 3)))


class _FakeQuad(QuadrupletLatents):
    def __init__(self, trans):
        self._t = {k: Tensor(np.asarray(v, dtype=float)) for k, v in trans.items()}

    def translations(self, key):
        return self._t[key]


def test_translation_total_examples():
    same = {k: np.zeros((4, 3)) for k in KEYS}
    assert translation_consistency_total(_FakeQuad(same)).item() == 0.0
    a_off = dict(same, a1=np.ones((4, 3)))
    assert translation_consistency_total(_FakeQuad(a_off)).item() == 1.5
    b_off = dict(same, b1=np.ones((4, 3)))
    assert translation_consistency_total(_FakeQuad(b_off)).item() == 1.5


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (4, 2, 3), elements=st.floats(-3, 3)))
def test_translation_total_view_swap_invariant(t):
    quad = dict(zip(KEYS, t))
    swapped = {"a0": t[1], "a1": t[0], "b0": t[3], "b1": t[2]}
    a = translation_consistency_total(_FakeQuad(quad)).item()
    b = translation_consistency_total(_FakeQuad(swapped)).item()
    assert a == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------- background and smoothness


def test_background_loss_examples():
    b = np.zeros((4, 4))
    b[:, :2] = 1
    fg = np.zeros((3, 4, 4))
    fg[:, :, 2:] = 1 / 8
    assert background_loss(fg, b).item() == 0.0
    bg = np.zeros((3, 4, 4))
    bg[:, :, :2] = 1 / 8
    assert background_loss(bg, b).item() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        background_loss(fg, np.zeros((3, 3)))


def test_background_loss_double_loop():
    rng = np.random.default_rng(8)
    p = rng.uniform(size=(3, 5, 6))
    p /= p.sum(axis=(1, 2), keepdims=True)
    b = (rng.uniform(size=(5, 6)) > 0.5).astype(float)
    want = 0.0
    for k in range(3):
        for y in range(5):
            for x in range(6):
                want += p[k, y, x] * b[y, x]
    assert abs(background_loss(p, b).item() - want / 3) < 1e-12


def test_smoothness_examples():
    assert smoothness_loss([coplanar_pair()], closed=False).item() == pytest.approx(0.0, abs=1e-24)
    with pytest.raises(MeshError):
        smoothness_loss([coplanar_pair()])
    assert smoothness_loss([box(-1, 1)]).item() == pytest.approx(12.0, abs=1e-12)
    assert smoothness_loss([box(-1, 1), box(0, 2)]).item() == pytest.approx(24.0, abs=1e-12)


def test_smoothness_tensor_path_matches_mesh_path():
    ico = icosphere(1)
    v = ico.vertices + 0.05 * np.random.default_rng(9).normal(size=ico.vertices.shape)
    a = smoothness_loss([TriangleMesh(v, ico.faces)]).item()
    b = smoothness_loss(Tensor(v[None]), ico.faces).item()
    assert a == pytest.approx(b, rel=1e-12)


# ---------------------------------------------------------------- quadruplet wiring


@pytest.fixture(scope="module")
def tiny():
    return Cerberus(TINY, seed=0)


def _images(seed=0):
    rng = np.random.default_rng(seed)
    return {k: rng.uniform(size=(16, 16, 3)) for k in KEYS}


def test_other_view():
    assert [other_view(k) for k in KEYS] == ["a1", "a0", "b1", "b0"]
    with pytest.raises(KeyError):
        other_view("c0")


def test_pose_consistency_shares_one_latent(tiny):
    quad = build_quadruplet(tiny, _images(), cams(), rng=np.random.default_rng(0))
    verts = [quad.parts[k].local_vertices.data for k in KEYS]
    for v in verts[1:]:
        np.testing.assert_array_equal(v, verts[0])
    assert quad.z.shape == (TINY.latent,)


def test_without_pose_consistency_latents_are_own(tiny):
    quad = build_quadruplet(tiny, _images(), cams(), pose_consistency=False)
    assert quad.z is None and quad.mixed is None
    assert not np.array_equal(quad.parts["a0"].local_vertices.data, quad.parts["b1"].local_vertices.data)


def test_cross_term_uses_other_view_translations(tiny, monkeypatch):
    import cerberus.losses as L

    quad = build_quadruplet(tiny, _images(), cams(), rng=np.random.default_rng(1))
    seen = []
    real = L.render_parts

    def spy(*args, translations_override=None, **kw):
        seen.append(translations_override)
        return real(*args, translations_override=translations_override, **kw)

    monkeypatch.setattr(L, "render_parts", spy)
    view_consistent_recon("a0", quad, _images(), cams())
    assert seen[0] is None
    assert seen[1] is quad.parts["a1"].translations


def test_identical_views_make_terms_equal(tiny):
    img = _images()["a0"]
    images = {k: img for k in KEYS}
    c = cams(0.7, 0.7)
    quad = build_quadruplet(tiny, images, c, rng=np.random.default_rng(2))
    for k in KEYS:
        parts = quad.parts[k]
        own = L_term(parts, c[k], None, img)
        cross = L_term(parts, c[other_view(k)], quad.parts[other_view(k)].translations, img)
        assert own == pytest.approx(cross, abs=1e-12)


def L_term(parts, cam, trans, img):
    from cerberus.losses import render_partset

    rgb, _, _ = render_partset(parts, cam, trans)
    return mse_reconstruction(img, rgb).item()


def test_reconstruction_total_is_mean_of_components(tiny):
    images, c = _images(3), cams()
    quad = build_quadruplet(tiny, images, c, rng=np.random.default_rng(3))
    comps = [view_consistent_recon(k, quad, images, c).item() for k in KEYS]
    total = reconstruction_total(quad, images, c).item()
    assert abs(total - sum(comps) / 4) < 1e-12


def test_reconstruction_total_view_swap_invariant(tiny):
    images, c = _images(4), cams()
    z = np.random.default_rng(0).integers(0, 4, size=TINY.latent)
    swap = {"a0": "a1", "a1": "a0", "b0": "b1", "b1": "b0"}
    quad = build_quadruplet(tiny, images, c, z=z)
    images_s = {k: images[swap[k]] for k in KEYS}
    c_s = {k: c[swap[k]] for k in KEYS}
    z_s = np.array([1, 0, 3, 2])[z]
    quad_s = build_quadruplet(tiny, images_s, c_s, z=z_s)
    a = reconstruction_total(quad, images, c).item()
    b = reconstruction_total(quad_s, images_s, c_s).item()
    assert a == pytest.approx(b, rel=1e-10)
    assert translation_consistency_total(quad).item() == pytest.approx(
        translation_consistency_total(quad_s).item(), rel=1e-10)


def test_perfect_parts_reach_noise_floor():
    # a hand-built part set rendering exactly the target image
    ico = icosphere(1)
    cam = cams()
    local = Tensor(np.stack([ico.vertices * 0.4, ico.vertices * 0.3]))
    trans = Tensor(np.array([[0.0, 0.3, 0.0], [0.0, -0.3, 0.2]]))
    parts = PartSet(local, Tensor(np.stack([np.eye(3)] * 2)), trans, ico.faces)
    images = {k: rasterize(parts.meshes(), cam[k]).rgb for k in KEYS}
    quad = QuadrupletLatents(None, {k: parts for k in KEYS}, None, None)
    assert reconstruction_total(quad, images, cam).item() == 0.0
    assert translation_consistency_total(quad).item() == 0.0


def test_total_loss_weights(tiny):
    images, c = _images(5), cams()
    masks = {k: np.zeros((16, 16), dtype=bool) for k in KEYS}
    z = np.zeros(TINY.latent, dtype=int)
    quad = build_quadruplet(tiny, images, c, z=z)
    zero, _ = total_loss(quad, images, masks, c, LossWeights(0, 0, 0, 0))
    assert zero.item() == 0.0
    only_r, comps = total_loss(quad, images, masks, c, LossWeights(1, 0, 0, 0))
    assert only_r.item() == reconstruction_total(quad, images, c).item()
    assert LossWeights().as_tuple() == (1.0, 1.0, 1.0, 1e-4)
    full, comps = total_loss(quad, images, masks, c)
    want = comps["recon"] + comps["trans"] + comps["background"] + 1e-4 * comps["smooth"]
    assert full.item() == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0, 0)


def test_all_losses_non_negative(tiny):
    images, c = _images(6), cams()
    masks = {k: np.random.default_rng(0).uniform(size=(16, 16)) > 0.5 for k in KEYS}
    quad = build_quadruplet(tiny, images, c, rng=np.random.default_rng(6))
    _, comps = total_loss(quad, images, masks, c)
    assert all(v >= 0 for v in comps.values())


def test_end_to_end_gradient_matches_finite_differences():
    assert end_to_end_error(seed=0) < 1e-3
