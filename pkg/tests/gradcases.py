"""Gradient cases shared by the unit tests and the acceptance suite.

Each case builds a scalar from a list of input tensors. The tape gradient of
every input is compared against central finite differences in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from cerberus import autograd as ag
from cerberus.autograd import Tape, Tensor
from cerberus.geometry import Camera, icosphere, quat_to_matrix_tensor, smoothness_cosines
from cerberus.model import LatentBundle, retrieve_translations
from cerberus.renderer import LightRig, render_parts, render_tensor

PURE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: Callable[[np.random.Generator], list[np.ndarray]]
    tol: float = PURE_TOL
    eps: float = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def max_relative_error(case: GradCase, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in case.inputs(rng)]
    # a fixed random projection makes non-scalar outputs scalar
    probe = {}

    def scalar(out: Tensor) -> Tensor:
        if out.data.size == 1:
            return out.reshape(())
        if "w" not in probe:
            probe["w"] = np.random.default_rng(seed + 1).normal(size=out.shape)
        return ag.tsum(out * probe["w"])

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = scalar(case.fn(*ts))
        grads = tape.backward(loss)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
            return float(scalar(case.fn(*args)).data)

        num = ag.numeric_grad(f, a, eps=case.eps)
        got = grads.get(ts[i], np.zeros_like(a))
        worst = max(worst, relative_error(got, num))
    return worst


def _n(*shape):
    return lambda rng: [rng.normal(size=s) for s in shape]


def _pos(*shape):
    return lambda rng: [rng.uniform(0.5, 2.0, size=s) for s in shape]


def _tri_scene(rng):
    # three random triangles in front of the camera, seen at 24x24
    v = rng.uniform(-0.8, 0.8, size=(9, 3))
    return [v]


_CAM = Camera(0.4, 0.3, 4.0, 2.8, 24, 24)
_FACES = np.arange(9).reshape(3, 3)
_ICO = icosphere(1)


def _render_sum(v):
    rgb, sil, _ = render_tensor(v, _FACES, _CAM, LightRig(), 1.5)
    return ag.tsum(rgb * rgb) + ag.tsum(sil)


def _render_parts(v, q, t):
    rot = quat_to_matrix_tensor(ag.quat_normalize(q))
    rgb, sil, _ = render_parts(v, rot, t, _ICO.faces, _CAM)
    return ag.mean(rgb) + ag.mean(sil * sil)


def _parts_inputs(rng):
    v = _ICO.vertices[None] * rng.uniform(0.3, 0.5, size=(2, 1, 1)) + 0.02 * rng.normal(size=(2, len(_ICO.vertices), 3))
    q = rng.normal(size=(2, 4)) + np.array([2.0, 0, 0, 0])
    t = rng.uniform(-0.5, 0.5, size=(2, 3))
    return [v, q, t]


def _conv(x, w, b):
    return ag.conv2d(x, w, b, stride=1)


def _conv_s2(x, w, b):
    return ag.conv2d(x, w, b, stride=2)


def _deconv(x, w, b):
    return ag.conv_transpose2d(x, w, b, stride=2)


def _unproject(u, v, d):
    return _CAM.unproject_tensor(u, v, d)


def _translations(logits, depth):
    z = Tensor(np.zeros((1, 1)))
    bundle = LatentBundle(z, z, Tensor(np.zeros((1, 2, 4))), ag.spatial_softmax(logits), depth)
    return retrieve_translations(bundle, _CAM)


def _smooth(v):
    c = smoothness_cosines(v, _ICO.faces)
    return ag.tsum((c + 1.0) * (c + 1.0))


PURE_CASES = [
    GradCase("add_broadcast", lambda a, b: a + b, _n((3, 4), (4,))),
    GradCase("sub", lambda a, b: a - b, _n((3, 4), (3, 1))),
    GradCase("mul_broadcast", lambda a, b: a * b, _n((2, 3, 4), (3, 1))),
    GradCase("div", lambda a, b: a / b, lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2, size=(4,))]),
    GradCase("power", lambda a: a ** 3.0, _pos((5,))),
    GradCase("exp", ag.exp, _n((4, 3))),
    GradCase("log", ag.log, _pos((4, 3))),
    GradCase("sqrt", ag.sqrt, _pos((4, 3))),
    GradCase("relu", ag.relu, lambda r: [r.choice([-1, 1], size=(4, 5)) * r.uniform(0.1, 1, size=(4, 5))]),
    GradCase("sigmoid", ag.sigmoid, _n((4, 3))),
    GradCase("cross", ag.cross, _n((5, 3), (5, 3))),
    GradCase("sum_axis", lambda a: ag.tsum(a, axis=1), _n((3, 4, 2))),
    GradCase("mean_keepdims", lambda a: ag.mean(a, axis=0, keepdims=True), _n((3, 4))),
    GradCase("reshape_transpose", lambda a: ag.transpose(a.reshape(4, 6), (1, 0)), _n((2, 3, 4))),
    GradCase("getitem_slice", lambda a: a[1:, ::2], _n((4, 5))),
    GradCase("getitem_fancy", lambda a: a[np.array([0, 2, 2, 1])], _n((3, 4))),
    GradCase("take_repeated", lambda a: ag.take(a, np.array([[0, 1], [1, 2], [2, 0]])), _n((3, 3))),
    GradCase("concat", lambda a, b: ag.concat([a, b], axis=1), _n((2, 3, 2), (2, 1, 2))),
    GradCase("stack", lambda a, b: ag.stack([a, b], axis=-1), _n((3, 2), (3, 2))),
    GradCase("matmul_batched", lambda a, b: a @ b, _n((2, 3, 4), (2, 4, 5))),
    GradCase("conv2d_3x3", _conv, _n((2, 3, 6, 6), (4, 3, 3, 3), (4,))),
    GradCase("conv2d_stride2", _conv_s2, _n((1, 2, 8, 8), (3, 2, 3, 3), (3,))),
    GradCase("conv2d_1x1_stride2", _conv_s2, _n((1, 2, 6, 6), (3, 2, 1, 1), (3,))),
    GradCase("conv_transpose2d", _deconv, _n((1, 3, 4, 4), (3, 2, 4, 4), (2,))),
    GradCase("global_avg_pool", ag.global_avg_pool, _n((2, 3, 4, 4))),
    GradCase("spatial_softmax", ag.spatial_softmax, _n((2, 3, 5, 4))),
    GradCase("grid_expectation", ag.grid_expectation, _n((2, 5, 4), (2, 5, 4))),
    GradCase("quat_normalize", ag.quat_normalize, lambda r: [r.normal(size=(3, 4)) + 1.0]),
    GradCase("quat_to_matrix", lambda q: quat_to_matrix_tensor(ag.quat_normalize(q)),
             lambda r: [r.normal(size=(3, 4)) + 1.0]),
    GradCase("unproject", _unproject, lambda r: [r.uniform(0, 24, 4), r.uniform(0, 24, 4), r.uniform(3, 5, 4)]),
    GradCase("smoothness", _smooth, lambda r: [_ICO.vertices + 0.05 * r.normal(size=_ICO.vertices.shape)]),
]

COMPOSITE_CASES = [
    GradCase("rasterize", _render_sum, _tri_scene, COMPOSITE_TOL),
    GradCase("render_parts", _render_parts, _parts_inputs, COMPOSITE_TOL),
    GradCase("translation_retrieval", _translations,
             lambda r: [r.normal(size=(1, 2, 24, 24)), r.uniform(3, 5, size=(1, 2, 24, 24))], COMPOSITE_TOL),
]


def end_to_end_error(seed: int = 0, n_coords: int = 40, eps: float = 1e-6) -> float:
    """Tape vs finite differences for the full quadruplet loss of a tiny model.

    Compares a random sample of parameter coordinates; returns the relative
    error of that gradient vector.
    """
    from cerberus.losses import KEYS, LossWeights, build_quadruplet, total_loss
    from cerberus.model import Cerberus, EncoderConfig

    rng = np.random.default_rng(seed)
    model = Cerberus(EncoderConfig(channels=(4, 8), latent=8, n_parts=2, image_size=16, ico_level=1,
                                   init_radius=0.4), seed=seed)
    cams = {k: Camera(a, 0.3, 4.0, 2.8, 16, 16) for k, a in zip(KEYS, (0.2, 1.4, 0.2, 1.4))}
    images = {k: rng.uniform(0, 1, size=(16, 16, 3)) for k in KEYS}
    masks = {k: rng.uniform(size=(16, 16)) > 0.5 for k in KEYS}
    z = rng.integers(0, 4, size=8)
    weights = LossWeights(1.0, 1.0, 1.0, 1e-2)

    def loss_value():
        quad = build_quadruplet(model, images, cams, z=z)
        return total_loss(quad, images, masks, cams, weights)[0]

    with Tape() as tape:
        tape.backward(loss_value())
    names = list(model.params)
    picks = [(names[rng.integers(len(names))], None) for _ in range(n_coords)]
    got, num = [], []
    for name, _ in picks:
        p = model.params[name]
        idx = tuple(rng.integers(s) for s in p.shape)
        got.append(p.grad[idx])
        old = p.data[idx]
        p.data[idx] = old + eps
        fp = float(loss_value().data)
        p.data[idx] = old - eps
        fm = float(loss_value().data)
        p.data[idx] = old
        num.append((fp - fm) / (2 * eps))
    return relative_error(np.array(got), np.array(num))
