"""Differentiable z-buffer rasterizer with a soft silhouette band.

Each pixel centre inside some triangle takes the flat-shaded colour of the
nearest one (silhouette 1). A pixel covered by no triangle but lying within
``sigma`` pixels of a camera-facing triangle gets coverage
``1 - dist / sigma`` and that triangle's colour scaled by the coverage.

Gradients reach vertex positions through the face normals (shading) and
through the band distances (silhouette). Which triangle wins a pixel is
piecewise constant and contributes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import Camera, ProjectionError, TriangleMesh

DEFAULT_ALBEDO = 0.75
DEFAULT_SIGMA = 1.5
BACKGROUND = 0.0


@dataclass(frozen=True)
class LightRig:
    k_dir: float = 0.6
    k_amb: float = 0.4

    def __post_init__(self):
        if not (0.0 <= self.k_dir <= 1.0 and 0.0 <= self.k_amb <= 1.0):
            raise ValueError("light intensities must lie in [0, 1]")
        if self.k_dir + self.k_amb > 1.0 + 1e-12:
            raise ValueError(f"k_dir + k_amb = {self.k_dir + self.k_amb} exceeds 1")


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    silhouette: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W), +inf where nothing is drawn
    n_degenerate: int = 0
    n_clipped: int = 0


@dataclass
class _Saved:
    camera: Camera
    lights: LightRig
    sigma: float
    faces: np.ndarray
    vertices: np.ndarray
    pc: np.ndarray
    screen: np.ndarray
    normals: np.ndarray
    lambert: np.ndarray
    colors: np.ndarray
    tri_id: np.ndarray
    band_cov: np.ndarray
    band_tri: np.ndarray
    band_edge: np.ndarray
    band_t: np.ndarray
    consumed: bool = field(default=False)


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _segment(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    t = ((px - ax) * dx + (py - ay) * dy) / ll
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    qx, qy = ax + t * dx, ay + t * dy
    return np.sqrt((px - qx) ** 2 + (py - qy) ** 2), t


@numba.njit(cache=True)
def _raster_kernel(screen, zc, faces, valid, front, width, height, sigma,
                   zbuf, tri_id, band_cov, band_tri, band_edge, band_t):
    nf = faces.shape[0]
    for f in range(nf):
        if not valid[f]:
            continue
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = screen[i0, 0], screen[i0, 1]
        x1, y1 = screen[i1, 0], screen[i1, 1]
        x2, y2 = screen[i2, 0], screen[i2, 1]
        iz0, iz1, iz2 = 1.0 / zc[i0], 1.0 / zc[i1], 1.0 / zc[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        pad = sigma if front[f] else 0.0
        xmin = min(x0, min(x1, x2)) - pad
        xmax = max(x0, max(x1, x2)) + pad
        ymin = min(y0, min(y1, y2)) - pad
        ymax = max(y0, max(y1, y2)) + pad
        c0 = max(int(np.floor(xmin - 0.5)), 0)
        c1 = min(int(np.ceil(xmax - 0.5)), width - 1)
        r0 = max(int(np.floor(ymin - 0.5)), 0)
        r1 = min(int(np.ceil(ymax - 0.5)), height - 1)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                b0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                b1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                b2 = 1.0 - b0 - b1
                if b0 >= 0.0 and b1 >= 0.0 and b2 >= 0.0:
                    z = 1.0 / (b0 * iz0 + b1 * iz1 + b2 * iz2)
                    if z < zbuf[r, c]:
                        zbuf[r, c] = z
                        tri_id[r, c] = f
                elif front[f]:
                    d, t = _segment(px, py, x0, y0, x1, y1)
                    e = 0
                    d1, t1 = _segment(px, py, x1, y1, x2, y2)
                    if d1 < d:
                        d, t, e = d1, t1, 1
                    d2, t2 = _segment(px, py, x2, y2, x0, y0)
                    if d2 < d:
                        d, t, e = d2, t2, 2
                    if d < sigma:
                        cov = 1.0 - d / sigma
                        if cov > band_cov[r, c]:
                            band_cov[r, c] = cov
                            band_tri[r, c] = f
                            band_edge[r, c] = e
                            band_t[r, c] = t


@numba.njit(cache=True)
def _band_backward_kernel(screen, faces, tri_id, band_cov, band_tri, band_edge, band_t,
                          g_shade_px, g_cov_px, sigma, g_screen, g_face):
    """Accumulate d loss / d screen positions (band) and d loss / d face lambert term."""
    h, w = tri_id.shape
    for r in range(h):
        py = r + 0.5
        for c in range(w):
            f = tri_id[r, c]
            if f >= 0:
                g_face[f] += g_shade_px[r, c]
                continue
            f = band_tri[r, c]
            if f < 0:
                continue
            cov = band_cov[r, c]
            g_face[f] += cov * g_shade_px[r, c]
            g_dist = -g_cov_px[r, c] / sigma
            if g_dist == 0.0:
                continue
            e = band_edge[r, c]
            ia = faces[f, e]
            ib = faces[f, (e + 1) % 3]
            t = band_t[r, c]
            ax, ay = screen[ia, 0], screen[ia, 1]
            bx, by = screen[ib, 0], screen[ib, 1]
            qx, qy = ax + t * (bx - ax), ay + t * (by - ay)
            px = c + 0.5
            nx, ny = px - qx, py - qy
            d = np.sqrt(nx * nx + ny * ny)
            if d == 0.0:
                continue
            nx /= d
            ny /= d
            # distance to the closest point on segment ab; envelope theorem kills dt terms
            g_screen[ia, 0] -= g_dist * (1.0 - t) * nx
            g_screen[ia, 1] -= g_dist * (1.0 - t) * ny
            g_screen[ib, 0] -= g_dist * t * nx
            g_screen[ib, 1] -= g_dist * t * ny


# ---------------------------------------------------------------- forward / backward


def _prepare(vertices: np.ndarray, faces: np.ndarray, camera: Camera):
    pc = (vertices - camera.position) @ camera.rotation.T
    zc = pc[:, 2]
    in_front = zc > camera.z_near
    safe_z = np.where(in_front, zc, 1.0)
    fp = camera.focal_px
    screen = np.empty((len(vertices), 2))
    screen[:, 0] = camera.width / 2.0 + fp * pc[:, 0] / safe_z
    screen[:, 1] = camera.height / 2.0 + fp * pc[:, 1] / safe_z
    return pc, safe_z, in_front, screen


def rasterize_arrays(vertices: np.ndarray, faces: np.ndarray, camera: Camera,
                     lights: LightRig = LightRig(), sigma: float = DEFAULT_SIGMA,
                     face_colors: np.ndarray | None = None):
    """Forward pass on raw arrays. Returns ``(RenderOutput, saved_state)``."""
    if camera.width <= 0 or camera.height <= 0:
        raise ValueError(f"zero-area image {camera.width}x{camera.height}")
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    h, w = camera.height, camera.width
    nf = len(faces)
    if face_colors is None:
        colors = np.full((nf, 3), DEFAULT_ALBEDO)
    else:
        colors = np.broadcast_to(np.asarray(face_colors, dtype=np.float64), (nf, 3))

    pc, zc, in_front, screen = _prepare(vertices, faces, camera)
    if nf:
        v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
        normals = np.cross(v1 - v0, v2 - v0)
        s0, s1, s2 = (screen[faces[:, i]] for i in range(3))
        area = (s1[:, 0] - s0[:, 0]) * (s2[:, 1] - s0[:, 1]) - (s2[:, 0] - s0[:, 0]) * (s1[:, 1] - s0[:, 1])
        clipped = ~in_front[faces].all(axis=1)
        degenerate = ~clipped & ((np.abs(area) < 1e-12) | (np.linalg.norm(normals, axis=1) < 1e-300))
        valid = ~clipped & ~degenerate
        front = valid & (np.einsum("ij,ij->i", normals, camera.position - v0) > 0)
        nn = np.linalg.norm(normals, axis=1, keepdims=True)
        unit = normals / np.where(nn > 0, nn, 1.0)
        lambert = lights.k_amb + lights.k_dir * np.maximum(0.0, unit @ (-camera.view_dir))
    else:
        normals = np.zeros((0, 3))
        lambert = np.zeros(0)
        valid = front = clipped = degenerate = np.zeros(0, dtype=bool)

    zbuf = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int64)
    band_cov = np.zeros((h, w))
    band_tri = np.full((h, w), -1, dtype=np.int64)
    band_edge = np.zeros((h, w), dtype=np.int64)
    band_t = np.zeros((h, w))
    if nf:
        _raster_kernel(screen, zc, faces, valid, front, w, h, float(sigma),
                       zbuf, tri_id, band_cov, band_tri, band_edge, band_t)

    covered = tri_id >= 0
    band = ~covered & (band_tri >= 0)
    sil = np.where(covered, 1.0, np.where(band, band_cov, 0.0))
    shade = colors * lambert[:, None] if nf else np.zeros((0, 3))
    rgb = np.full((h, w, 3), BACKGROUND)
    rgb[covered] = shade[tri_id[covered]]
    rgb[band] = band_cov[band][:, None] * shade[band_tri[band]] + (1.0 - band_cov[band][:, None]) * BACKGROUND

    depth = zbuf.copy()
    if band.any():
        f = band_tri[band]
        e = band_edge[band]
        t = band_t[band]
        ia = faces[f, e]
        ib = faces[f, (e + 1) % 3]
        depth[band] = 1.0 / ((1.0 - t) / zc[ia] + t / zc[ib])

    out = RenderOutput(rgb, sil, depth, int(degenerate.sum()), int(clipped.sum()))
    saved = _Saved(camera, lights, float(sigma), faces, vertices, pc, screen, normals, lambert,
                   np.ascontiguousarray(colors), tri_id, band_cov, band_tri, band_edge, band_t)
    return out, saved


def rasterize_backward(saved: _Saved | None, g_rgb: np.ndarray, g_sil: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss with respect to world vertex positions (V, 3)."""
    if saved is None:
        raise ag.GradError("rasterize_backward: missing forward state")
    if saved.consumed:
        raise ag.GradError("rasterize_backward: forward state already consumed")
    saved.consumed = True
    cam, lights = saved.camera, saved.lights
    faces = saved.faces
    nv = len(saved.pc)
    g_rgb = np.asarray(g_rgb, dtype=np.float64)
    g_sil = np.asarray(g_sil, dtype=np.float64)

    h, w = saved.tri_id.shape
    covered = saved.tri_id >= 0
    band = ~covered & (saved.band_tri >= 0)
    # per-pixel d loss / d lambert (colour = albedo * lambert) and d loss / d coverage
    face_px = np.where(covered, saved.tri_id, np.where(band, saved.band_tri, 0))
    albedo_px = saved.colors[face_px] if len(faces) else np.zeros((h, w, 3))
    g_shade_px = np.einsum("hwc,hwc->hw", g_rgb, albedo_px)
    shade_px = saved.lambert[face_px][..., None] * albedo_px if len(faces) else np.zeros((h, w, 3))
    g_cov_px = np.where(band, g_sil + np.einsum("hwc,hwc->hw", g_rgb, shade_px - BACKGROUND), 0.0)

    g_screen = np.zeros((nv, 2))
    g_lambert = np.zeros(len(faces))
    if len(faces):
        _band_backward_kernel(saved.screen, faces, saved.tri_id, saved.band_cov, saved.band_tri,
                              saved.band_edge, saved.band_t, np.ascontiguousarray(g_shade_px),
                              np.ascontiguousarray(g_cov_px), saved.sigma, g_screen, g_lambert)

    g_world = np.zeros((nv, 3))
    # screen -> camera frame -> world
    pc = saved.pc
    z = pc[:, 2]
    fp = cam.focal_px
    g_pc = np.zeros((nv, 3))
    g_pc[:, 0] = g_screen[:, 0] * fp / z
    g_pc[:, 1] = g_screen[:, 1] * fp / z
    g_pc[:, 2] = -(g_screen[:, 0] * pc[:, 0] + g_screen[:, 1] * pc[:, 1]) * fp / (z * z)
    g_world += g_pc @ cam.rotation

    # lambert = k_amb + k_dir * max(0, n_hat . l)
    if len(faces):
        n = saved.normals
        nn = np.linalg.norm(n, axis=1, keepdims=True)
        nn = np.where(nn > 0, nn, 1.0)
        unit = n / nn
        light = -cam.view_dir
        lit = (unit @ light) > 0
        g_unit = (lights.k_dir * g_lambert * lit)[:, None] * light
        g_n = (g_unit - unit * np.einsum("ij,ij->i", g_unit, unit)[:, None]) / nn
        v0, v1, v2 = (saved.vertices[faces[:, i]] for i in range(3))
        e1, e2 = v1 - v0, v2 - v0
        g_e1 = np.cross(e2, g_n)
        g_e2 = np.cross(g_n, e1)
        np.add.at(g_world, faces[:, 1], g_e1)
        np.add.at(g_world, faces[:, 2], g_e2)
        np.add.at(g_world, faces[:, 0], -(g_e1 + g_e2))
    return g_world


def _rasterize_forward(vertices, faces=None, camera=None, lights=None, sigma=DEFAULT_SIGMA):
    out, saved = rasterize_arrays(vertices, faces, camera, lights, sigma)
    packed = np.concatenate([out.rgb, out.silhouette[..., None]], axis=-1)
    return packed, (saved, out)


def _rasterize_grad(state, g):
    saved, _ = state
    return (rasterize_backward(saved, g[..., :3], g[..., 3]),)


rasterize_op = ag.register_custom(_rasterize_forward, _rasterize_grad, name="rasterize", n_inputs=1)


def rasterize(meshes: Sequence[TriangleMesh], camera: Camera, lights: LightRig = LightRig(),
              sigma: float = DEFAULT_SIGMA, face_colors: Sequence | None = None) -> RenderOutput:
    """Render plain meshes (no gradient tracking)."""
    verts, faces = merge_meshes([m.vertices for m in meshes], [m.faces for m in meshes])
    colors = None
    if face_colors is not None:
        colors = np.concatenate([
            np.broadcast_to(np.asarray(c, dtype=np.float64), (m.num_faces, 3))
            for c, m in zip(face_colors, meshes)
        ]) if meshes else None
    out, _ = rasterize_arrays(verts, faces, camera, lights, sigma, colors)
    return out


def merge_meshes(vertex_list, face_list):
    if not vertex_list:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    offsets = np.cumsum([0] + [len(v) for v in vertex_list[:-1]])
    verts = np.concatenate([np.asarray(v, dtype=np.float64) for v in vertex_list])
    faces = np.concatenate([np.asarray(f) + o for f, o in zip(face_list, offsets)])
    return verts, faces


def render_tensor(vertices: Tensor, faces: np.ndarray, camera: Camera,
                  lights: LightRig = LightRig(), sigma: float = DEFAULT_SIGMA):
    """Differentiable render of world-space vertices.

    Returns ``(rgb, silhouette, RenderOutput)``; the first two are tensors on
    the active tape, the last holds the raw arrays including depth.
    """
    packed, (_, out) = rasterize_op.apply(vertices, faces=faces, camera=camera,
                                           lights=lights, sigma=sigma)
    return packed[..., :3], packed[..., 3], out


def render_parts(part_vertices: Sequence[Tensor], rotations: Tensor | None, translations: Tensor,
                 faces: np.ndarray, camera: Camera, translations_override: Tensor | None = None,
                 lights: LightRig = LightRig(), sigma: float = DEFAULT_SIGMA):
    """Render N parts: local vertices (N, V, 3), rotations (N, 3, 3), translations (N, 3).

    ``translations_override`` substitutes every part's translation, which is
    how a mesh predicted in one view is rendered with another view's placement.
    """
    n = part_vertices.shape[0]
    t = translations if translations_override is None else translations_override
    if t.shape != (n, 3):
        raise ValueError(f"render_parts: expected {n} translations, got shape {t.shape}")
    tc = camera.to_camera(t.data)
    if np.any(tc[:, 2] <= camera.z_near):
        raise ProjectionError("render_parts: a part translation lies behind the near plane")
    world = part_world_vertices(part_vertices, rotations, t)
    nv = part_vertices.shape[1]
    all_faces = (faces[None] + (np.arange(n) * nv)[:, None, None]).reshape(-1, 3)
    return render_tensor(world.reshape(-1, 3), all_faces, camera, lights, sigma)


def part_world_vertices(part_vertices: Tensor, rotations: Tensor | None, translations: Tensor) -> Tensor:
    """v_world = R_k v + T_k for every part, (N, V, 3)."""
    if rotations is None:
        rotated = part_vertices
    else:
        rotated = ag.matmul(part_vertices, ag.transpose(rotations, (0, 2, 1)))
    return rotated + ag.reshape(translations, (-1, 1, 3))


def to_png(path, rgb: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)
