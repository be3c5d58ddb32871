"""Multi-part derendering network.

An hourglass encoder maps an image to an object latent (global average pool
of the coarsest maps), a shape latent, one quaternion per part and, through
an up-sampling path with skip connections, per-part probability and depth
maps. Part translations are the expectation of pixel position and depth under
the probability map, lifted to 3D through the camera.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import Camera, TriangleMesh, icosphere, quat_to_matrix_tensor


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    latent: int = 64
    n_parts: int = 5
    image_size: int = 64
    depth_range: tuple[float, float] = (2.5, 5.5)
    ico_level: int = 2
    # base spheres start at this radius through the deformation bias; 1.0 keeps unit spheres
    init_radius: float = 1.0
    # remove each part's mean displacement so its position comes only from the translation
    centered_parts: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depth_range = tuple(float(d) for d in self.depth_range)
        if self.n_parts < 1:
            raise ValueError("n_parts must be >= 1")
        if len(self.channels) < 2:
            raise ValueError("need at least two channel stages")
        if self.depth_range[0] <= 0 or self.depth_range[1] <= self.depth_range[0]:
            raise ValueError(f"invalid depth range {self.depth_range}")
        if self.image_size % 2 ** (len(self.channels) - 1):
            raise ValueError("image size must be divisible by 2**(stages-1)")

    @classmethod
    def full(cls, **kw) -> "EncoderConfig":
        return cls(channels=(64, 128, 256, 512), latent=256, n_parts=9, **kw)


@dataclass
class LatentBundle:
    """Encoder outputs for a batch of B images (all tensors on the tape)."""

    object_latent: Tensor  # (B, C)
    shape_latent: Tensor  # (B, L)
    quaternions: Tensor  # (B, N, 4), normalized
    prob_maps: Tensor  # (B, N, H, W)
    depth_maps: Tensor  # (B, N, H, W)

    def __len__(self) -> int:
        return self.shape_latent.shape[0]

    def select(self, i: int) -> "LatentBundle":
        return LatentBundle(*(t[i : i + 1] for t in (
            self.object_latent, self.shape_latent, self.quaternions, self.prob_maps, self.depth_maps
        )))


@dataclass
class PartSet:
    """N parts of one object: local (deformed) vertices, rotations, translations."""

    local_vertices: Tensor  # (N, V, 3)
    rotations: Tensor  # (N, 3, 3)
    translations: Tensor  # (N, 3)
    faces: np.ndarray  # (F, 3), shared by all parts

    @property
    def n_parts(self) -> int:
        return self.local_vertices.shape[0]

    def world_vertices(self, translations: Tensor | None = None) -> Tensor:
        t = self.translations if translations is None else translations
        rotated = ag.matmul(self.local_vertices, ag.transpose(self.rotations, (0, 2, 1)))
        return rotated + ag.reshape(t, (-1, 1, 3))

    def meshes(self) -> list[TriangleMesh]:
        world = self.world_vertices().data
        return [TriangleMesh(world[k], self.faces) for k in range(self.n_parts)]


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Cerberus:
    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0, zero: bool = False):
        self.config = config
        self.base = icosphere(config.ico_level)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init(np.random.default_rng(seed), zero)

    # ------------------------------------------------------------ parameters

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=ag.get_default_dtype()),
                                   requires_grad=True, name=name)

    def _init(self, rng: np.random.Generator, zero: bool) -> None:
        cfg = self.config
        ch = cfg.channels
        n, nv = cfg.n_parts, self.base.num_vertices

        def conv(name, cin, cout, k):
            w = np.zeros((cout, cin, k, k)) if zero else _glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
            self._add(name + ".w", w)
            self._add(name + ".b", np.zeros(cout))

        def deconv(name, cin, cout, k=4):
            w = np.zeros((cin, cout, k, k)) if zero else _glorot(rng, (cin, cout, k, k), cin * k * k, cout * k * k)
            self._add(name + ".w", w)
            self._add(name + ".b", np.zeros(cout))

        def linear(name, fin, fout, bias=None):
            w = np.zeros((fin, fout)) if zero else _glorot(rng, (fin, fout), fin, fout)
            self._add(name + ".w", w)
            self._add(name + ".b", np.zeros(fout) if bias is None else bias)

        conv("stem", 3, ch[0], 3)
        for i in range(1, len(ch)):
            conv(f"down{i}.conv1", ch[i - 1], ch[i], 3)
            conv(f"down{i}.conv2", ch[i], ch[i], 3)
            conv(f"down{i}.skip", ch[i - 1], ch[i], 1)
        for i in range(len(ch) - 1, 0, -1):
            cin = ch[i] if i == len(ch) - 1 else 2 * ch[i]
            deconv(f"up{i}", cin, ch[i - 1])
        conv("head.logits", 2 * ch[0], n, 1)
        conv("head.depth", 2 * ch[0], n, 1)
        linear("shape", ch[-1], cfg.latent)
        linear("quat", ch[-1], 4 * n, bias=np.tile([1.0, 0.0, 0.0, 0.0], n))
        shrink = (cfg.init_radius - 1.0) * self.base.vertices
        linear("deform", cfg.latent, n * nv * 3, bias=np.tile(shrink.reshape(-1), n))

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    # ------------------------------------------------------------ forward

    def _conv(self, name, x, stride=1):
        return ag.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride)

    def encode(self, images) -> LatentBundle:
        """images: (B, H, W, 3) or (H, W, 3) array in [0, 1]."""
        cfg = self.config
        x = np.asarray(images.data if isinstance(images, Tensor) else images)
        if x.ndim == 3:
            x = x[None]
        s = cfg.image_size
        if x.shape[1:] != (s, s, 3):
            raise ValueError(f"encode: expected images of shape ({s}, {s}, 3), got {x.shape[1:]}")
        x = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=ag.get_default_dtype()))
        p = self.params

        h = ag.relu(self._conv("stem", x))
        skips = [h]
        for i in range(1, len(cfg.channels)):
            y = ag.relu(self._conv(f"down{i}.conv1", h, stride=2))
            y = self._conv(f"down{i}.conv2", y)
            h = ag.relu(y + self._conv(f"down{i}.skip", h, stride=2))
            skips.append(h)

        obj = ag.global_avg_pool(h)
        shape = obj @ p["shape.w"] + p["shape.b"]
        b = obj.shape[0]
        n = cfg.n_parts
        quat = ag.quat_normalize((obj @ p["quat.w"] + p["quat.b"]).reshape(b, n, 4))

        u = h
        for i in range(len(cfg.channels) - 1, 0, -1):
            u = ag.relu(ag.conv_transpose2d(u, p[f"up{i}.w"], p[f"up{i}.b"]))
            u = ag.concat([u, skips[i - 1]], axis=1)
        prob = ag.spatial_softmax(self._conv("head.logits", u))
        d0, d1 = cfg.depth_range
        depth = d0 + (d1 - d0) * ag.sigmoid(self._conv("head.depth", u))
        return LatentBundle(obj, shape, quat, prob, depth)

    def shape_to_deformations(self, shape_latent: Tensor) -> Tensor:
        """(B, L) -> (B, N, V, 3) displacements through a single linear map."""
        s = ag.as_tensor(shape_latent)
        if s.ndim == 1:
            s = s.reshape(1, -1)
        if s.shape[-1] != self.config.latent:
            raise ValueError(f"shape latent width {s.shape[-1]} != {self.config.latent}")
        out = s @ self.params["deform.w"] + self.params["deform.b"]
        out = out.reshape(s.shape[0], self.config.n_parts, self.base.num_vertices, 3)
        if self.config.centered_parts:
            out = out - ag.mean(out, axis=2, keepdims=True)
        return out

    def assemble(self, bundle: LatentBundle, camera: Camera, shape_latent: Tensor | None = None,
                 index: int = 0) -> PartSet:
        """Part set for image ``index`` of the bundle, deformed by ``shape_latent`` (default: its own)."""
        s = bundle.shape_latent[index : index + 1] if shape_latent is None else shape_latent
        disp = self.shape_to_deformations(s)[0]
        local = disp + self.base.vertices
        rot = quat_to_matrix_tensor(bundle.quaternions[index])
        trans = retrieve_translations(bundle, camera, index)
        return PartSet(local, rot, trans, self.base.faces)


def pixel_grids(h: int, w: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates (x + 0.5, y + 0.5) as (H, W) arrays."""
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype) + 0.5, np.arange(w, dtype=dtype) + 0.5, indexing="ij")
    return xs, ys


def retrieve_translations(bundle: LatentBundle, camera: Camera, index: int = 0) -> Tensor:
    """T_k = unproject(sum x p, sum y p, sum d p) for every part of image ``index``, (N, 3)."""
    p = bundle.prob_maps[index]
    d = bundle.depth_maps[index]
    h, w = p.shape[-2:]
    xs, ys = pixel_grids(h, w, p.dtype)
    u = ag.grid_expectation(p, xs)
    v = ag.grid_expectation(p, ys)
    z = ag.grid_expectation(p, d)
    return camera.unproject_tensor(u, v, z)


def retrieve_translation(bundle: LatentBundle, camera: Camera, k: int, index: int = 0) -> Tensor:
    n = bundle.prob_maps.shape[1]
    if not 0 <= k < n:
        raise IndexError(f"part index {k} out of range for {n} parts")
    return retrieve_translations(bundle, camera, index)[k]


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CERBCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: "OrderedDict[str, np.ndarray]", meta: dict) -> None:
    """Write named arrays to a single binary file.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header ``{"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}``
    and the raw little-endian C-order array bytes back to back.
    """
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(raw[20 : 20 + hlen])
    base = 20 + hlen
    arrays = OrderedDict()
    for e in header["tensors"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def config_to_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["channels"] = list(cfg.channels)
    d["depth_range"] = list(cfg.depth_range)
    return d
