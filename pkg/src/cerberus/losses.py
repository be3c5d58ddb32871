"""Training losses over a quadruplet: two poses (a, b) seen from two viewpoints (0, 1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import Camera, TriangleMesh, edge_face_adjacency, smoothness_cosines
from .model import Cerberus, LatentBundle, PartSet
from .renderer import DEFAULT_SIGMA, LightRig, render_parts

KEYS = ("a0", "a1", "b0", "b1")
_PARTNER = {"a0": "a1", "a1": "a0", "b0": "b1", "b1": "b0"}


def other_view(key: str) -> str:
    if key not in _PARTNER:
        raise KeyError(f"unknown quadruplet key {key!r}; expected one of {KEYS}")
    return _PARTNER[key]


@dataclass
class LossWeights:
    recon: float = 1.0
    trans: float = 1.0
    background: float = 1.0
    smooth: float = 1e-4

    def __post_init__(self):
        for k in ("recon", "trans", "background", "smooth"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.recon, self.trans, self.background, self.smooth)


def mse_reconstruction(image, rendered) -> Tensor:
    """Mean over pixels and channels of the squared difference."""
    image, rendered = ag.as_tensor(image), ag.as_tensor(rendered)
    if image.shape != rendered.shape:
        raise ValueError(f"mse_reconstruction: shape {image.shape} != {rendered.shape}")
    diff = image - rendered
    return ag.mean(diff * diff)


def mix_shape_latents(s_a0, s_a1, s_b0, s_b1, rng: np.random.Generator | None = None,
                      z: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Elementwise categorical mix of four shape latents.

    ``z[i]`` in {0, 1, 2, 3} picks the source (a0, a1, b0, b1) of element i.
    Pass ``z`` to force a selection; otherwise it is drawn uniformly from ``rng``.
    """
    srcs = [ag.as_tensor(s).reshape(-1) for s in (s_a0, s_a1, s_b0, s_b1)]
    width = srcs[0].shape[0]
    if any(s.shape[0] != width for s in srcs):
        raise ValueError(f"mix_shape_latents: widths differ {[s.shape[0] for s in srcs]}")
    if z is None:
        if rng is None:
            raise ValueError("mix_shape_latents needs an rng or an explicit z")
        z = rng.integers(0, 4, size=width)
    z = np.asarray(z)
    if z.shape != (width,) or z.min() < 0 or z.max() > 3:
        raise ValueError(f"mix_shape_latents: z must hold {width} values in 0..3")
    onehot = (z[None, :] == np.arange(4)[:, None]).astype(srcs[0].dtype)
    mixed = ag.tsum(ag.stack(srcs) * onehot, axis=0)
    return mixed, z


@dataclass
class QuadrupletLatents:
    bundle: LatentBundle  # batch of four in KEYS order
    parts: dict[str, PartSet]
    mixed: Tensor | None  # shared shape latent, None without pose consistency
    z: np.ndarray | None

    def translations(self, key: str) -> Tensor:
        return self.parts[key].translations


def build_quadruplet(model: Cerberus, images, cameras: dict[str, Camera], rng=None,
                     pose_consistency: bool = True, z: np.ndarray | None = None,
                     bundle: LatentBundle | None = None) -> QuadrupletLatents:
    """Encode the four images and assemble one part set per image.

    With pose consistency every part set is deformed by a single mixed latent;
    without it each image keeps its own shape latent.
    """
    if bundle is None:
        bundle = model.encode(np.stack([np.asarray(images[k]) for k in KEYS]))
    if len(bundle) != 4:
        raise ValueError(f"quadruplet bundle must hold 4 images, got {len(bundle)}")
    mixed = None
    if pose_consistency:
        s = bundle.shape_latent
        mixed, z = mix_shape_latents(s[0], s[1], s[2], s[3], rng=rng, z=z)
        mixed = mixed.reshape(1, -1)
    else:
        z = None
    parts = {k: model.assemble(bundle, cameras[k], shape_latent=mixed, index=i) for i, k in enumerate(KEYS)}
    return QuadrupletLatents(bundle, parts, mixed, z)


def render_partset(parts: PartSet, camera: Camera, translations: Tensor | None = None,
                   lights: LightRig = LightRig(), sigma: float = DEFAULT_SIGMA):
    return render_parts(parts.local_vertices, parts.rotations, parts.translations, parts.faces, camera,
                        translations_override=translations, lights=lights, sigma=sigma)


def view_consistent_recon(key: str, quad: QuadrupletLatents, images, cameras: dict[str, Camera],
                          lights: LightRig = LightRig(), sigma: float = DEFAULT_SIGMA) -> Tensor:
    """Average of the own-view error and the error when rendered in the other view.

    The cross term places the parts with the translations predicted from the
    other view's image, and compares against that image.
    """
    other = other_view(key)
    parts = quad.parts[key]
    own, _, _ = render_partset(parts, cameras[key], lights=lights, sigma=sigma)
    cross, _, _ = render_partset(parts, cameras[other], quad.translations(other), lights=lights, sigma=sigma)
    return 0.5 * (mse_reconstruction(images[key], own) + mse_reconstruction(images[other], cross))


def reconstruction_total(quad: QuadrupletLatents, images, cameras, lights: LightRig = LightRig(),
                         sigma: float = DEFAULT_SIGMA) -> Tensor:
    terms = [view_consistent_recon(k, quad, images, cameras, lights, sigma) for k in KEYS]
    return 0.25 * (terms[0] + terms[1] + terms[2] + terms[3])


def translation_consistency(t0, t1) -> Tensor:
    """Mean over parts of the squared Euclidean distance between matched translations."""
    t0, t1 = ag.as_tensor(t0), ag.as_tensor(t1)
    if t0.shape != t1.shape or t0.ndim != 2 or t0.shape[1] != 3:
        raise ValueError(f"translation_consistency: shapes {t0.shape} and {t1.shape} must both be (N, 3)")
    d = t0 - t1
    return ag.tsum(d * d) / t0.shape[0]


def translation_consistency_total(quad: QuadrupletLatents) -> Tensor:
    la = translation_consistency(quad.translations("a0"), quad.translations("a1"))
    lb = translation_consistency(quad.translations("b0"), quad.translations("b1"))
    return 0.5 * (la + lb)


def background_loss(prob_maps, background) -> Tensor:
    """Mean over parts of the probability mass on background pixels (b = 1)."""
    p = ag.as_tensor(prob_maps)
    b = np.asarray(background, dtype=p.dtype)
    if p.ndim != 3 or p.shape[1:] != b.shape:
        raise ValueError(f"background_loss: maps {p.shape} do not match mask {b.shape}")
    return ag.tsum(p * b) / p.shape[0]


_ADJ_CACHE: dict[bytes, tuple] = {}


def _adjacency(faces: np.ndarray, closed: bool):
    key = (faces.tobytes(), closed)
    if key not in _ADJ_CACHE:
        _ADJ_CACHE[key] = edge_face_adjacency(faces, allow_boundary=not closed)
    return _ADJ_CACHE[key]


def smoothness_loss(meshes, faces: np.ndarray | None = None, closed: bool = True) -> Tensor:
    """Sum of (cos theta + 1)^2 over every dihedral angle of every part.

    ``meshes`` is either a list of TriangleMesh or a (N, V, 3) vertex tensor
    sharing ``faces``. Open meshes are rejected unless ``closed=False``, which
    sums over interior edges only.
    """
    if isinstance(meshes, Tensor):
        if faces is None:
            raise ValueError("smoothness_loss: faces required with a vertex tensor")
        parts = [(meshes[k], faces) for k in range(meshes.shape[0])]
    else:
        parts = [(Tensor(m.vertices), m.faces) for m in meshes]
    total = None
    for verts, f in parts:
        c = smoothness_cosines(verts, f, _adjacency(np.asarray(f), closed))
        term = ag.tsum((c + 1.0) * (c + 1.0))
        total = term if total is None else total + term
    return total


def quadruplet_smoothness(quad: QuadrupletLatents) -> Tensor:
    """On the shared mixed-latent parts, or averaged over the four own-latent part sets."""
    if quad.mixed is not None:
        p = quad.parts["a0"]
        return smoothness_loss(p.local_vertices, p.faces)
    terms = [smoothness_loss(quad.parts[k].local_vertices, quad.parts[k].faces) for k in KEYS]
    return 0.25 * (terms[0] + terms[1] + terms[2] + terms[3])


def total_loss(quad: QuadrupletLatents, images, masks, cameras, weights: LossWeights = LossWeights(),
               lights: LightRig = LightRig(), sigma: float = DEFAULT_SIGMA) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of all terms; returns the scalar and its unweighted components.

    ``masks`` are foreground masks, so the background indicator is their complement.
    """
    zero = Tensor(np.zeros((), dtype=quad.bundle.shape_latent.dtype))
    w = weights
    lr = reconstruction_total(quad, images, cameras, lights, sigma) if w.recon else zero
    lt = translation_consistency_total(quad) if w.trans else zero
    if w.background:
        bg = [background_loss(quad.bundle.prob_maps[i], 1.0 - np.asarray(masks[k], dtype=np.float64))
              for i, k in enumerate(KEYS)]
        lb = 0.25 * (bg[0] + bg[1] + bg[2] + bg[3])
    else:
        lb = zero
    ls = quadruplet_smoothness(quad) if w.smooth else zero
    total = w.recon * lr + w.trans * lt + w.background * lb + w.smooth * ls
    comps = {"recon": lr.item(), "trans": lt.item(), "background": lb.item(), "smooth": ls.item(),
             "total": total.item()}
    return total, comps
