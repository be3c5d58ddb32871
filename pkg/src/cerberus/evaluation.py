"""Voxel IoU benchmarks: standard single-image reconstruction and part transfer ("hard")."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .autograd import Tensor
from .dataset import Manifest
from .geometry import TriangleMesh, check_closed_manifold
from .model import Cerberus

RESOLUTION = 32
SURFACE_MARGIN = 0.5


@dataclass
class VoxelGrid:
    occupancy: np.ndarray  # (R, R, R) bool, indexed [x, y, z]
    extent: float  # side length of the cube centred at the origin

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def same_spec(self, other: "VoxelGrid") -> bool:
        return self.occupancy.shape == other.occupancy.shape and math.isclose(self.extent, other.extent)


@numba.njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True)
def _top_left(ax, ay, bx, by):
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and bx - ax < 0.0)


@numba.njit(cache=True)
def _crossings_kernel(tris, res):
    """Count +z ray crossings below each cell centre (difference array along z)."""
    marks = np.zeros((res, res, res + 1), dtype=np.int32)
    for t in range(tris.shape[0]):
        ax, ay, az = tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2]
        bx, by, bz = tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2]
        cx, cy, cz = tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2]
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, by, bz, cx, cy, cz = cx, cy, cz, bx, by, bz
            area = -area
        i0 = max(0, int(math.ceil(min(ax, bx, cx) - 0.5)))
        i1 = min(res - 1, int(math.floor(max(ax, bx, cx) - 0.5)))
        j0 = max(0, int(math.ceil(min(ay, by, cy) - 0.5)))
        j1 = min(res - 1, int(math.floor(max(ay, by, cy) - 0.5)))
        for i in range(i0, i1 + 1):
            px = i + 0.5
            for j in range(j0, j1 + 1):
                py = j + 0.5
                w0 = _edge(bx, by, cx, cy, px, py)
                w1 = _edge(cx, cy, ax, ay, px, py)
                w2 = _edge(ax, ay, bx, by, px, py)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # shared edges and vertices belong to exactly one triangle
                if w0 == 0.0 and not _top_left(bx, by, cx, cy):
                    continue
                if w1 == 0.0 and not _top_left(cx, cy, ax, ay):
                    continue
                if w2 == 0.0 and not _top_left(ax, ay, bx, by):
                    continue
                z = (w0 * az + w1 * bz + w2 * cz) / area
                k0 = int(math.floor(z - 0.5)) + 1
                if k0 < 0:
                    k0 = 0
                if k0 < res:
                    marks[i, j, k0] += 1
    return marks


@numba.njit(cache=True)
def _tri_box_overlap(v0, v1, v2, h):
    """Separating-axis test of a triangle (box-relative coords) against a cube of half-size h."""
    for a in range(3):
        if min(v0[a], v1[a], v2[a]) > h or max(v0[a], v1[a], v2[a]) < -h:
            return False
    e0 = v1 - v0
    e1 = v2 - v1
    e2 = v0 - v2
    for e in (e0, e1, e2):
        # cross products of the edge with the three box axes
        for axis in range(3):
            if axis == 0:
                ax, ay, az = 0.0, -e[2], e[1]
            elif axis == 1:
                ax, ay, az = e[2], 0.0, -e[0]
            else:
                ax, ay, az = -e[1], e[0], 0.0
            p0 = ax * v0[0] + ay * v0[1] + az * v0[2]
            p1 = ax * v1[0] + ay * v1[1] + az * v1[2]
            p2 = ax * v2[0] + ay * v2[1] + az * v2[2]
            r = h * (abs(ax) + abs(ay) + abs(az))
            if min(p0, p1, p2) > r or max(p0, p1, p2) < -r:
                return False
    n = np.cross(e0, e1)
    d = n[0] * v0[0] + n[1] * v0[1] + n[2] * v0[2]
    r = h * (abs(n[0]) + abs(n[1]) + abs(n[2]))
    return abs(d) <= r


@numba.njit(cache=True)
def _surface_kernel(tris, res, h):
    occ = np.zeros((res, res, res), dtype=np.bool_)
    centre = np.empty(3)
    for t in range(tris.shape[0]):
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        for a in range(3):
            mn = min(tris[t, 0, a], tris[t, 1, a], tris[t, 2, a])
            mx = max(tris[t, 0, a], tris[t, 1, a], tris[t, 2, a])
            lo[a] = max(0, int(math.floor(mn - 0.5 - h)))
            hi[a] = min(res - 1, int(math.ceil(mx - 0.5 + h)))
        for i in range(lo[0], hi[0] + 1):
            centre[0] = i + 0.5
            for j in range(lo[1], hi[1] + 1):
                centre[1] = j + 0.5
                for k in range(lo[2], hi[2] + 1):
                    if occ[i, j, k]:
                        continue
                    centre[2] = k + 0.5
                    if _tri_box_overlap(tris[t, 0] - centre, tris[t, 1] - centre, tris[t, 2] - centre, h):
                        occ[i, j, k] = True
    return occ


def voxelize(mesh: TriangleMesh, extent: float, resolution: int = RESOLUTION,
             surface_margin: float = SURFACE_MARGIN, check: bool = True) -> VoxelGrid:
    """Occupancy of a closed mesh on a cube of side ``extent`` centred at the origin.

    A cell is occupied when its centre lies inside the mesh (ray parity) or
    when the surface overlaps a box of ``surface_margin`` cells around its
    centre, so parts thinner than a cell still register where they pass
    close to cell centres.
    """
    if extent <= 0:
        raise ValueError("extent must be positive")
    if check:
        check_closed_manifold(mesh)
    g = (np.asarray(mesh.vertices, dtype=np.float64) + extent / 2.0) * (resolution / extent)
    tris = np.ascontiguousarray(g[mesh.faces])
    marks = _crossings_kernel(tris, resolution)
    inside = (np.cumsum(marks[:, :, :resolution], axis=2) % 2).astype(bool)
    occ = inside
    if surface_margin > 0:
        occ = occ | _surface_kernel(tris, resolution, 0.5 * surface_margin)
    return VoxelGrid(occ, float(extent))


def voxelize_parts(meshes: Sequence[TriangleMesh], extent: float, resolution: int = RESOLUTION,
                   check: bool = True) -> VoxelGrid:
    """Union of the per-part occupancies."""
    occ = np.zeros((resolution,) * 3, dtype=bool)
    for m in meshes:
        occ |= voxelize(m, extent, resolution, check=check).occupancy
    return VoxelGrid(occ, float(extent))


def _occupancy(x) -> np.ndarray:
    return x.occupancy if isinstance(x, VoxelGrid) else np.asarray(x, dtype=bool)


def union_iou(pred_parts, gt) -> float:
    """IoU between the union of the predicted part occupancies and ``gt``; two empty shapes score 1."""
    if isinstance(pred_parts, (VoxelGrid, np.ndarray)):
        pred_parts = [pred_parts]
    g = _occupancy(gt)
    pred = np.zeros_like(g)
    for p in pred_parts:
        if isinstance(p, VoxelGrid) and isinstance(gt, VoxelGrid) and not p.same_spec(gt):
            raise ValueError("union_iou: grid specs differ")
        o = _occupancy(p)
        if o.shape != g.shape:
            raise ValueError(f"union_iou: grid shapes {o.shape} and {g.shape} differ")
        pred |= o
    union = np.count_nonzero(pred | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & g) / union


# ---------------------------------------------------------------- benchmark


@dataclass
class EvalReport:
    protocol: str
    model: str
    ids: list[int]
    ious: list[float]
    subjects: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.ious)) if self.ious else float("nan")

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "model": self.model, "mean_iou": self.mean, "count": len(self.ious),
                "samples": [{"id": i, "subject": s, "iou": v}
                            for i, s, v in zip(self.ids, self.subjects or [None] * len(self.ids), self.ious)]}

    def table(self) -> str:
        lines = [f"{'protocol':<10}{'model':<12}{'samples':>8}{'mean IoU':>10}",
                 f"{self.protocol:<10}{self.model:<12}{len(self.ious):>8}{self.mean:>10.4f}"]
        if self.subjects:
            for s in sorted(set(self.subjects)):
                vals = [v for v, t in zip(self.ious, self.subjects) if t == s]
                lines.append(f"  subject {s}: {np.mean(vals):.4f} over {len(vals)}")
        return "\n".join(lines)

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"eval_{self.protocol}"
        jpath, cpath = out / f"{stem}.json", out / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "subject", "iou"])
            for i, s, v in zip(self.ids, self.subjects or [""] * len(self.ids), self.ious):
                w.writerow([i, s, repr(float(v))])
        return jpath, cpath


class GroundTruthOracle:
    """Predicts the ground-truth part meshes of every test sample."""

    name = "oracle"

    def predict_parts(self, man: Manifest, samples: list[dict], protocol: str) -> list[list[TriangleMesh]]:
        return [man.gt_meshes(s["mesh"]) for s in samples]


def _encode_in_chunks(model: Cerberus, man: Manifest, samples: list[dict], chunk: int = 16):
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        yield start, model.encode(np.stack([man.image(s["image"]) for s in part]))


def canonical_ids(man: Manifest, samples: list[dict]) -> dict[int, int]:
    canon = {int(k): int(v) for k, v in man.data.get("canonical", {}).items()}
    for s in samples:
        if s["subject"] not in canon:
            raise ValueError(f"hard protocol: subject {s['subject']} has no canonical image")
    return canon


def predict_cerberus(model: Cerberus, man: Manifest, samples: list[dict], protocol: str) -> list[list[TriangleMesh]]:
    """Part meshes per sample; the hard protocol swaps in the canonical image's shape latent."""
    shape_for = {}
    if protocol == "hard":
        canon = canonical_ids(man, samples)
        by_id = {t["id"]: t for t in man.test}
        for subject, sid in canon.items():
            b = model.encode(man.image(by_id[sid]["image"]))
            shape_for[subject] = Tensor(b.shape_latent.data[0:1])
    elif protocol != "standard":
        raise ValueError(f"unknown protocol {protocol!r}")
    out = []
    for start, bundle in _encode_in_chunks(model, man, samples):
        for i in range(len(bundle)):
            s = samples[start + i]
            latent = shape_for.get(s["subject"]) if protocol == "hard" else None
            parts = model.assemble(bundle, man.camera(s["azimuth"]), shape_latent=latent, index=i)
            out.append(parts.meshes())
    return out


def evaluate(model, man: Manifest, protocol: str = "standard", tag: str | None = None,
             extent: float | None = None, samples: list[dict] | None = None) -> EvalReport:
    samples = list(man.test) if samples is None else samples
    extent = float(man.data["voxel_extent"]) if extent is None else extent
    if hasattr(model, "predict_parts"):
        if protocol == "hard":
            canonical_ids(man, samples)
        preds = model.predict_parts(man, samples, protocol)
    else:
        preds = predict_cerberus(model, man, samples, protocol)
    gt_cache: dict[str, VoxelGrid] = {}
    ious = []
    for s, meshes in zip(samples, preds):
        if s["mesh"] not in gt_cache:
            gt_cache[s["mesh"]] = voxelize_parts(man.gt_meshes(s["mesh"]), extent)
        pred = voxelize_parts(meshes, extent, check=False)
        ious.append(union_iou(pred, gt_cache[s["mesh"]]))
    name = tag or getattr(model, "name", "cerberus")
    return EvalReport(protocol, name, [s["id"] for s in samples], ious, [s["subject"] for s in samples])


def eval_standard(model, man: Manifest, **kw) -> EvalReport:
    return evaluate(model, man, "standard", **kw)


def eval_hard(model, man: Manifest, **kw) -> EvalReport:
    return evaluate(model, man, "hard", **kw)
