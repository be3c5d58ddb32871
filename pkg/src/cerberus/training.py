"""Quadruplet training loop with Adam."""

from __future__ import annotations

import csv
import json
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .autograd import Tape, Tensor
from .dataset import Manifest, quadruplet_arrays
from .losses import KEYS, LossWeights, build_quadruplet, total_loss
from .model import Cerberus, EncoderConfig, config_to_dict, load_checkpoint, save_checkpoint

LOG_COLUMNS = ("step", "L_r", "L_t", "L_b", "L_s", "total")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 4
    steps: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 500
    pose_consistency: bool = True
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"
    model: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = EncoderConfig(**self.model)
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        kw.setdefault("model", EncoderConfig(init_radius=0.35))
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        kw.setdefault("model", EncoderConfig.full(init_radius=0.35))
        return cls(batch_size=16, steps=100_000, checkpoint_every=5000, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = config_to_dict(self.model)
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update; a NaN gradient aborts before any change."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"parameter {name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most ``max_norm``; returns the original norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


@dataclass
class StepResult:
    components: dict[str, float]
    grad_norm: float
    z: list  # mix selectors per quadruplet (None without pose consistency)
    grads: dict[str, np.ndarray]


def compute_loss_and_grads(records: list[dict], man: Manifest, model: Cerberus, cfg: TrainConfig,
                           rng: np.random.Generator) -> StepResult:
    """Forward all quadruplets of a batch on one tape; gradients of the batch-mean loss."""
    if not records:
        raise ValueError("train_step: empty batch")
    lights = man.lights
    sigma = float(man.data.get("sigma", 1.5))
    comps = {k: 0.0 for k in ("recon", "trans", "background", "smooth", "total")}
    zs = []
    with Tape() as tape:
        loss = None
        for rec in records:
            try:
                imgs, masks, cams = quadruplet_arrays(man, rec)
                images = dict(zip(KEYS, imgs))
                quad = build_quadruplet(model, images, dict(zip(KEYS, cams)), rng=rng,
                                        pose_consistency=cfg.pose_consistency)
                q_loss, q_comps = total_loss(quad, images, dict(zip(KEYS, masks)), dict(zip(KEYS, cams)),
                                             cfg.weights, lights, sigma)
            except Exception as exc:
                raise RuntimeError(f"training step failed on record {rec.get('id')}: {exc}") from exc
            zs.append(None if quad.z is None else quad.z.copy())
            for k in comps:
                comps[k] += q_comps[k] / len(records)
            loss = q_loss if loss is None else loss + q_loss
        loss = loss / len(records)
        tape.backward(loss)
    grads = OrderedDict()
    for name, p in model.params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    norm = clip_gradients(grads, cfg.clip_norm)
    return StepResult(comps, norm, zs, grads)


def train_step(records: list[dict], man: Manifest, model: Cerberus, cfg: TrainConfig,
               rng: np.random.Generator, state: AdamState) -> StepResult:
    res = compute_loss_and_grads(records, man, model, cfg, rng)
    adam_step(model.params, res.grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return res


# ---------------------------------------------------------------- checkpoints


def save_training_checkpoint(path, model: Cerberus, state: AdamState, rng: np.random.Generator,
                             cfg: TrainConfig, dataset_camera: dict | None = None) -> None:
    arrays = OrderedDict()
    for k, v in model.state_dict().items():
        arrays["param/" + k] = v
    for k in model.params:
        arrays["adam_m/" + k] = state.m[k]
        arrays["adam_v/" + k] = state.v[k]
    meta = {"step": state.step, "rng": rng.bit_generator.state, "train_config": cfg.to_dict(),
            "model_config": config_to_dict(model.config), "dataset_camera": dataset_camera}
    save_checkpoint(path, arrays, meta)


def load_model(path, dtype: str | None = None) -> tuple[Cerberus, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = EncoderConfig(**meta["model_config"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    dt = dtype or str(next(iter(params.values())).dtype)
    prev = ag.get_default_dtype()
    ag.set_default_dtype(np.dtype(dt))
    try:
        model = Cerberus(cfg, zero=True)
    finally:
        ag.set_default_dtype(prev)
    model.load_state_dict(params)
    return model, meta


def restore(path) -> tuple[Cerberus, AdamState, np.random.Generator, dict]:
    model, meta = load_model(path)
    arrays, _ = load_checkpoint(path)
    state = AdamState({k: arrays["adam_m/" + k] for k in model.params},
                      {k: arrays["adam_v/" + k] for k in model.params}, int(meta["step"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return model, state, rng, meta


# ---------------------------------------------------------------- loop


class Trainer:
    """Runs training from a manifest, writing ``losses.csv`` and checkpoints to ``out_dir``."""

    def __init__(self, manifest: Manifest, cfg: TrainConfig, out_dir, resume: str | None = None):
        self.man = manifest
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        if manifest.image_size != cfg.model.image_size:
            raise ValueError(f"dataset image size {manifest.image_size} != model image size {cfg.model.image_size}")
        if resume:
            self.model, self.state, self.rng, _ = restore(resume)
        else:
            prev = ag.get_default_dtype()
            ag.set_default_dtype(np.dtype(cfg.dtype))
            try:
                self.model = Cerberus(cfg.model, seed=cfg.seed)
            finally:
                ag.set_default_dtype(prev)
            self.state = AdamState.zeros_like(self.model.params)
            self.rng = np.random.default_rng(cfg.seed)
        self.history: list[dict] = []

    def sample_batch(self) -> list[dict]:
        recs = self.man.records
        n = min(self.cfg.batch_size, len(recs))
        idx = self.rng.choice(len(recs), size=n, replace=False)
        return [recs[i] for i in sorted(idx)]

    def run(self, steps: int | None = None, log_every: int = 50, verbose: bool = False) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        log_path = self.out / "losses.csv"
        fresh = self.state.step == 0 or not log_path.exists()
        prev = ag.get_default_dtype()
        ag.set_default_dtype(np.dtype(self.model.params["stem.w"].dtype))
        t0 = time.perf_counter()
        try:
            with threadpool_limits(limits=1), open(log_path, "w" if fresh else "a", newline="") as fh:
                writer = csv.writer(fh)
                if fresh:
                    writer.writerow(LOG_COLUMNS)
                while self.state.step < steps:
                    res = train_step(self.sample_batch(), self.man, self.model, self.cfg, self.rng, self.state)
                    c = res.components
                    row = {"step": self.state.step, **c, "grad_norm": res.grad_norm}
                    self.history.append(row)
                    writer.writerow([self.state.step] + [repr(float(c[k])) for k in
                                                         ("recon", "trans", "background", "smooth", "total")])
                    if verbose and (self.state.step % log_every == 0 or self.state.step == 1):
                        print(f"step {self.state.step:5d}  total {c['total']:.5f}  recon {c['recon']:.5f}  "
                              f"trans {c['trans']:.5f}  bg {c['background']:.4f}  smooth {c['smooth']:.2f}  "
                              f"|g| {res.grad_norm:.3f}  {time.perf_counter() - t0:.0f}s", flush=True)
                    if self.cfg.checkpoint_every and self.state.step % self.cfg.checkpoint_every == 0:
                        save_training_checkpoint(self.out / f"step_{self.state.step:06d}.ckpt", self.model,
                                                 self.state, self.rng, self.cfg, self.man.data["camera"])
        finally:
            ag.set_default_dtype(prev)
        save_training_checkpoint(self.out / "final.ckpt", self.model, self.state, self.rng, self.cfg,
                                 self.man.data["camera"])
        return self.history


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
