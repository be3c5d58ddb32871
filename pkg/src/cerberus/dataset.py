"""Procedural articulated figures and the quadruplet dataset built from them.

A subject is an 11-segment skeleton (pelvis root, chest, head, two-segment
arms and legs). Each segment is a capsule whose local geometry depends only
on its length and radius, so posing moves segments rigidly and never changes
their shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import Camera, TriangleMesh, default_focal, read_obj, write_obj
from .renderer import DEFAULT_SIGMA, LightRig, rasterize, to_png

MANIFEST_VERSION = 1
CAPSULE_MERIDIANS = 8
CAPSULE_PARALLELS = 6


def _rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


@dataclass
class Segment:
    name: str
    parent: int  # -1 for the root
    length: float
    radius: float
    attach: tuple[float, float, float]  # joint position in the parent frame
    rest: tuple[float, float]  # rest rotation (about x, about y)
    limits: tuple[tuple[float, float], tuple[float, float]]  # joint angle limits per axis


@dataclass
class Skeleton:
    segments: list[Segment]
    root_offset: tuple[float, float, float] = (0.0, 0.0, -0.2)

    def __post_init__(self):
        roots = [i for i, s in enumerate(self.segments) if s.parent < 0]
        if len(roots) != 1:
            raise ValueError(f"skeleton needs exactly one root, found {len(roots)}")
        for i, s in enumerate(self.segments):
            if s.parent >= i:
                raise ValueError(f"segment {s.name}: parent must precede it")
            if s.length <= 0 or s.radius <= 0:
                raise ValueError(f"segment {s.name}: length and radius must be positive")

    def __len__(self) -> int:
        return len(self.segments)

    def zero_pose(self) -> np.ndarray:
        return np.zeros((len(self.segments), 2))

    def random_pose(self, rng: np.random.Generator) -> np.ndarray:
        lim = np.array([s.limits for s in self.segments])  # (S, 2, 2)
        return rng.uniform(lim[:, :, 0], lim[:, :, 1])

    def descendants(self, index: int) -> list[int]:
        out = [index]
        for i, s in enumerate(self.segments):
            if s.parent in out:
                out.append(i)
        return out


@dataclass
class SubjectRanges:
    torso_length: tuple[float, float] = (0.36, 0.44)
    torso_radius: tuple[float, float] = (0.20, 0.25)
    head_length: tuple[float, float] = (0.12, 0.18)
    head_radius: tuple[float, float] = (0.14, 0.17)
    arm_length: tuple[float, float] = (0.28, 0.34)
    arm_radius: tuple[float, float] = (0.075, 0.095)
    leg_length: tuple[float, float] = (0.36, 0.44)
    leg_radius: tuple[float, float] = (0.095, 0.12)


def make_subject(seed: int, ranges: SubjectRanges = SubjectRanges()) -> Skeleton:
    """Default topology: pelvis root, chest, head, two 2-segment arms and legs."""
    rng = np.random.default_rng([seed, 1])
    u = lambda lo_hi: float(rng.uniform(*lo_hi))  # noqa: E731
    pelvis_len, chest_len = u(ranges.torso_length), u(ranges.torso_length)
    torso_r = u(ranges.torso_radius)
    head_len, head_r = u(ranges.head_length), u(ranges.head_radius)
    upper_arm, fore_arm = u(ranges.arm_length), u(ranges.arm_length)
    arm_r = u(ranges.arm_radius)
    thigh, shin = u(ranges.leg_length), u(ranges.leg_length)
    leg_r = u(ranges.leg_radius)
    hip = 0.55 * torso_r
    shoulder = torso_r + 0.6 * arm_r
    half = math.pi / 2
    segs = [
        Segment("pelvis", -1, pelvis_len, torso_r, (0, 0, 0), (0, 0), ((0, 0), (0, 0))),
        Segment("chest", 0, chest_len, torso_r, (0, 0, pelvis_len), (0, 0), ((-0.35, 0.35), (-0.35, 0.35))),
        Segment("head", 1, head_len, head_r, (0, 0, chest_len + 0.6 * head_r), (0, 0), ((-0.4, 0.4), (-0.4, 0.4))),
        Segment("l_upper_arm", 1, upper_arm, arm_r, (0, shoulder, chest_len - arm_r), (-half, 0), ((-1.2, 1.2), (-1.2, 1.2))),
        Segment("l_forearm", 3, fore_arm, arm_r, (0, 0, upper_arm), (0, 0), ((-1.6, 0.0), (0, 0))),
        Segment("r_upper_arm", 1, upper_arm, arm_r, (0, -shoulder, chest_len - arm_r), (half, 0), ((-1.2, 1.2), (-1.2, 1.2))),
        Segment("r_forearm", 5, fore_arm, arm_r, (0, 0, upper_arm), (0, 0), ((0.0, 1.6), (0, 0))),
        Segment("l_thigh", 0, thigh, leg_r, (0, hip, 0), (math.pi, 0), ((-0.7, 0.7), (-0.4, 0.4))),
        Segment("l_shin", 7, shin, leg_r, (0, 0, thigh), (0, 0), ((0, 0), (-1.4, 0.0))),
        Segment("r_thigh", 0, thigh, leg_r, (0, -hip, 0), (math.pi, 0), ((-0.7, 0.7), (-0.4, 0.4))),
        Segment("r_shin", 9, shin, leg_r, (0, 0, thigh), (0, 0), ((0, 0), (-1.4, 0.0))),
    ]
    return Skeleton(segs)


def capsule(length: float, radius: float, meridians: int = CAPSULE_MERIDIANS,
            parallels: int = CAPSULE_PARALLELS) -> TriangleMesh:
    """Capsule along local +z from 0 to ``length``; hemispherical caps of ``radius``."""
    half = parallels // 2
    lat_lo = [-(half - i) * (math.pi / 2) / half for i in range(half)]  # ..., below equator
    lat_lo = [a + (math.pi / 2) / half for a in lat_lo]  # end at the equator
    rings = [(a, 0.0) for a in lat_lo] + [(-a, length) for a in reversed(lat_lo)]
    verts = [(0.0, 0.0, -radius)]
    for lat, zc in rings:
        for m in range(meridians):
            phi = 2 * math.pi * m / meridians
            verts.append((radius * math.cos(lat) * math.cos(phi),
                          radius * math.cos(lat) * math.sin(phi),
                          zc + radius * math.sin(lat)))
    verts.append((0.0, 0.0, length + radius))
    top = len(verts) - 1
    faces = []
    ring = lambda k, m: 1 + k * meridians + (m % meridians)  # noqa: E731
    for m in range(meridians):
        faces.append((0, ring(0, m + 1), ring(0, m)))
    for k in range(len(rings) - 1):
        for m in range(meridians):
            a, b = ring(k, m), ring(k, m + 1)
            c, d = ring(k + 1, m), ring(k + 1, m + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    last = len(rings) - 1
    for m in range(meridians):
        faces.append((top, ring(last, m), ring(last, m + 1)))
    return TriangleMesh(np.array(verts), np.array(faces))


def local_meshes(skel: Skeleton) -> list[TriangleMesh]:
    return [capsule(s.length, s.radius) for s in skel.segments]


def check_angles(skel: Skeleton, angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64).reshape(len(skel), 2)
    lim = np.array([s.limits for s in skel.segments])
    bad = (angles < lim[:, :, 0] - 1e-12) | (angles > lim[:, :, 1] + 1e-12)
    if bad.any():
        i, a = np.argwhere(bad)[0]
        raise ValueError(
            f"joint angle {angles[i, a]:.4f} of segment {skel.segments[i].name} (axis {a}) "
            f"outside limits {skel.segments[i].limits[a]}"
        )
    return angles


def forward_kinematics(skel: Skeleton, angles) -> list[tuple[np.ndarray, np.ndarray]]:
    """World (rotation, translation) of every segment frame."""
    angles = check_angles(skel, angles)
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for i, s in enumerate(skel.segments):
        local_r = _rx(s.rest[0]) @ _ry(s.rest[1]) @ _rx(angles[i, 0]) @ _ry(angles[i, 1])
        attach = np.asarray(s.attach, dtype=np.float64)
        if s.parent < 0:
            out.append((local_r, attach + np.asarray(skel.root_offset)))
        else:
            pr, pt = out[s.parent]
            out.append((pr @ local_r, pr @ attach + pt))
    return out


def posed_segments(skel: Skeleton, angles) -> list[tuple[TriangleMesh, np.ndarray, np.ndarray]]:
    """(local mesh, world rotation, world translation) per segment."""
    frames = forward_kinematics(skel, angles)
    return [(m, r, t) for m, (r, t) in zip(local_meshes(skel), frames)]


def pose_subject(skel: Skeleton, angles) -> list[TriangleMesh]:
    """World-space capsule per segment for the given joint angles."""
    return [TriangleMesh(m.vertices @ r.T + t, m.faces) for m, r, t in posed_segments(skel, angles)]


# ---------------------------------------------------------------- dataset generation


@dataclass
class DatasetConfig:
    subjects: int = 3
    quadruplets: int = 300
    test_poses: int = 6  # random poses per subject, plus the canonical rest pose
    test_views: int = 4
    image_size: int = 64
    elevation: float = math.radians(20.0)
    distance: float = 4.0
    focal: float | None = None
    min_separation: float = math.radians(20.0)
    k_dir: float = 0.6
    k_amb: float = 0.4
    sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def camera(self, azimuth: float) -> Camera:
        f = self.focal if self.focal is not None else default_focal(self.distance)
        return Camera(azimuth, self.elevation, self.distance, f, self.image_size, self.image_size)


def _circ_sep(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def sample_azimuth_pair(rng: np.random.Generator, min_sep: float) -> tuple[float, float]:
    a = float(rng.uniform(0.0, 2 * math.pi))
    while True:
        b = float(rng.uniform(0.0, 2 * math.pi))
        if _circ_sep(a, b) >= min_sep:
            return a, b


def _save_mask(path: Path, sil: np.ndarray) -> None:
    Image.fromarray(sil > 0.5).convert("1").save(path, optimize=False)


def _render_sample(meshes, cam: Camera, lights: LightRig, sigma: float, image: Path, mask: Path) -> None:
    out = rasterize(meshes, cam, lights, sigma)
    to_png(image, out.rgb)
    _save_mask(mask, out.silhouette)


def generate_dataset(out_dir, cfg: DatasetConfig) -> Path:
    """Write images, masks, ground-truth OBJs and ``manifest.json``; return the manifest path."""
    if cfg.quadruplets < 1:
        raise ValueError("empty dataset: quadruplets must be >= 1")
    if cfg.subjects < 1:
        raise ValueError("empty dataset: subjects must be >= 1")
    out = Path(out_dir)
    try:
        for sub in ("train", "test", "meshes"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    rng = np.random.default_rng(cfg.seed)
    lights = LightRig(cfg.k_dir, cfg.k_amb)
    skeletons = [make_subject(cfg.seed * 1000 + s) for s in range(cfg.subjects)]
    poses: list[dict] = []
    max_coord = 0.0

    def add_pose(subject: int, angles: np.ndarray) -> int:
        nonlocal max_coord
        poses.append({"subject": subject, "angles": angles.tolist()})
        verts = np.concatenate([m.vertices for m in pose_subject(skeletons[subject], angles)])
        max_coord = max(max_coord, float(np.abs(verts).max()))
        return len(poses) - 1

    records = []
    for q in range(cfg.quadruplets):
        subject = q % cfg.subjects
        skel = skeletons[subject]
        pa = add_pose(subject, skel.random_pose(rng))
        pb = add_pose(subject, skel.random_pose(rng))
        az0, az1 = sample_azimuth_pair(rng, cfg.min_separation)
        views = {}
        for pose_key, pid in (("a", pa), ("b", pb)):
            meshes = pose_subject(skel, poses[pid]["angles"])
            for view_key, az in (("0", az0), ("1", az1)):
                key = pose_key + view_key
                img = f"train/q{q:05d}_{key}.png"
                msk = f"train/q{q:05d}_{key}_mask.png"
                _render_sample(meshes, cfg.camera(az), lights, cfg.sigma, out / img, out / msk)
                views[key] = {"image": img, "mask": msk, "azimuth": az}
        records.append({"id": q, "subject": subject, "pose_a": pa, "pose_b": pb, "views": views})

    test = []
    canonical = {}
    for subject, skel in enumerate(skeletons):
        pose_list = [skel.zero_pose()] + [skel.random_pose(rng) for _ in range(cfg.test_poses)]
        for j, angles in enumerate(pose_list):
            pid = add_pose(subject, angles)
            meshes = pose_subject(skel, angles)
            mesh_path = f"meshes/test_s{subject}_p{j:02d}.obj"
            write_obj(out / mesh_path, meshes, [f"part_{i}" for i in range(len(meshes))])
            offset = float(rng.uniform(0.0, 2 * math.pi))
            for v in range(cfg.test_views):
                az = (offset + 2 * math.pi * v / cfg.test_views) % (2 * math.pi)
                sid = len(test)
                img = f"test/s{subject}_p{j:02d}_v{v}.png"
                msk = f"test/s{subject}_p{j:02d}_v{v}_mask.png"
                _render_sample(meshes, cfg.camera(az), lights, cfg.sigma, out / img, out / msk)
                test.append({"id": sid, "subject": subject, "pose": pid, "image": img, "mask": msk,
                             "azimuth": az, "mesh": mesh_path})
                if j == 0 and v == 0:
                    canonical[str(subject)] = sid

    cam = cfg.camera(0.0)
    manifest = {
        "version": MANIFEST_VERSION,
        "image_size": cfg.image_size,
        "camera": {"elevation": cfg.elevation, "distance": cfg.distance, "focal": cam.focal},
        "lights": {"k_dir": cfg.k_dir, "k_amb": cfg.k_amb},
        "sigma": cfg.sigma,
        "voxel_extent": 1.2 * 2.0 * max_coord,
        "config": asdict(cfg),
        "subjects": [[asdict(s) for s in skel.segments] for skel in skeletons],
        "poses": poses,
        "records": records,
        "test": test,
        "canonical": canonical,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- loading


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) > 0


@dataclass
class Manifest:
    root: Path
    data: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        if data.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: manifest version {data.get('version')}, expected {MANIFEST_VERSION}")
        return cls(path.parent, data)

    @property
    def records(self) -> list[dict]:
        return self.data["records"]

    @property
    def test(self) -> list[dict]:
        return self.data["test"]

    @property
    def image_size(self) -> int:
        return int(self.data["image_size"])

    @property
    def lights(self) -> LightRig:
        return LightRig(**self.data["lights"])

    def camera(self, azimuth: float) -> Camera:
        c = self.data["camera"]
        s = self.image_size
        return Camera(float(azimuth), c["elevation"], c["distance"], c["focal"], s, s)

    def image(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            self._cache[rel] = load_image(self.root / rel)
        return self._cache[rel]

    def mask(self, rel: str) -> np.ndarray:
        key = ("mask", rel)
        if key not in self._cache:
            self._cache[key] = load_mask(self.root / rel)
        return self._cache[key]

    def gt_meshes(self, rel: str) -> list[TriangleMesh]:
        key = ("mesh", rel)
        if key not in self._cache:
            self._cache[key] = list(read_obj(self.root / rel).values())
        return self._cache[key]

    def skeleton(self, subject: int) -> Skeleton:
        return Skeleton([Segment(**{**s, "attach": tuple(s["attach"]), "rest": tuple(s["rest"]),
                                    "limits": tuple(tuple(x) for x in s["limits"])})
                         for s in self.data["subjects"][subject]])

    def referenced_files(self) -> list[str]:
        files = []
        for r in self.records:
            for v in r["views"].values():
                files += [v["image"], v["mask"]]
        for t in self.test:
            files += [t["image"], t["mask"]]
        files += sorted({t["mesh"] for t in self.test})
        return files


def quadruplet_arrays(man: Manifest, record: dict) -> tuple[np.ndarray, np.ndarray, list[Camera]]:
    """Images (4, H, W, 3), masks (4, H, W) and cameras in a0, a1, b0, b1 order."""
    keys = ("a0", "a1", "b0", "b1")
    views = record["views"]
    imgs = np.stack([man.image(views[k]["image"]) for k in keys])
    masks = np.stack([man.mask(views[k]["mask"]) for k in keys])
    cams = [man.camera(views[k]["azimuth"]) for k in keys]
    return imgs, masks, cams
