"""Joint denoising objective, condition dropout, Adam, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .bitcodec import encode_map
from .model import EMPTY_TOKEN, ModelConfig, forward, frozen_names
from .numerics import NamedTensors, Rng
from .schedule import NoiseSchedule, add_noise_image, add_noise_map, make_schedule, sample_timesteps

log = logging.getLogger(__name__)

MAGIC = b"PDMCKPT1"
VERSION = 1
MOMENT_PREFIX = "moment/"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch: int = 32
    train_steps: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    cond_drop_prob: float = 0.1
    map_noise_std: float = 2.0
    loss_m_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.cond_drop_prob < 1:
            raise TrainingError(f"cond_drop_prob must be in [0, 1), got {self.cond_drop_prob}")
        if self.batch < 1:
            raise TrainingError("batch must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Batch:
    images: torch.Tensor  # (B, H, W, 3) in [-1, 1]
    maps: np.ndarray  # (B, fH, fW) ids
    captions: list  # B padded token lists


@dataclass
class TrainState:
    model: ModelConfig
    schedule: dict  # steps / beta_start / beta_end
    train: TrainConfig
    params: NamedTensors
    moments: NamedTensors = field(default_factory=NamedTensors)
    step: int = 0

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule["steps"], self.schedule["beta_start"], self.schedule["beta_end"])


# condition dropout --------------------------------------------------------------

def cfg_dropout(cond, p: float, rng: Rng) -> list[int]:
    """With probability p replace every token by the empty-text token."""
    if not 0 <= p <= 1:
        raise TrainingError(f"drop probability must be in [0, 1], got {p}")
    cond = list(cond)
    if p > 0 and rng.random() < p:
        return [EMPTY_TOKEN] * len(cond)
    return cond


# loss -----------------------------------------------------------------------------

def training_step(batch: Batch, params: NamedTensors, cfg: ModelConfig, tcfg: TrainConfig,
                  schedule: NoiseSchedule, rng: Rng):
    """One training pass: noise both modalities, predict, backprop loss_x + loss_m.

    Returns (loss_x, loss_m) as floats; loss_m is None in given-map mode.
    Gradients are left on ``params`` for the caller's optimizer.
    """
    x0 = batch.images.to(nx.default_dtype())
    b = x0.shape[0]
    if b == 0:
        raise TrainingError("empty batch")
    t = sample_timesteps(rng.child("t"), schedule.T, b)
    eps = rng.child("eps").normal(x0.shape)
    m0 = encode_map(batch.maps, x0.dtype)
    drop = rng.child("drop")
    cond = torch.tensor([cfg_dropout(c, tcfg.cond_drop_prob, drop) for c in batch.captions])
    x_t = add_noise_image(schedule, x0, eps, t)
    tt = torch.as_tensor(t, dtype=x0.dtype)
    try:
        if cfg.mode == "given-map":
            eps_pred, _ = forward(x_t, m0, cond, tt, params, cfg)
            loss_x = nx.mse(eps_pred, eps)
            loss_m = None
            loss = loss_x
        else:
            eps_m = rng.child("eps_m").normal(m0.shape, std=tcfg.map_noise_std)
            m_t = add_noise_map(schedule, m0, eps_m, t)
            eps_pred, m_pred = forward(x_t, m_t, cond, tt, params, cfg)
            loss_x = nx.mse(eps_pred, eps)
            loss_m = nx.mse(m_pred, m0)
            loss = loss_x + tcfg.loss_m_weight * loss_m
    except nx.NonFiniteError as e:
        bad = [k for k, v in params.items() if not torch.isfinite(v).all()]
        raise TrainingError(f"non-finite loss ({e}); timesteps={t.tolist()}; "
                            f"non-finite parameters: {bad or 'none'}") from None
    nx.backward(loss)
    return loss_x.item(), (None if loss_m is None else loss_m.item())


# optimizer ------------------------------------------------------------------------

def adam_step(params: NamedTensors, moments: NamedTensors, step: int, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
              frozen=()) -> None:
    """Bias-corrected Adam on ``.grad``; decoupled weight decay; skips frozen names.

    ``step`` is 1-based. Moments are stored as ``m/<name>`` and ``v/<name>``.
    """
    if step < 1:
        raise TrainingError(f"adam step counter is 1-based, got {step}")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    frozen = set(frozen)
    with torch.no_grad():
        for name, p in params.items():
            if name in frozen or not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = moments.setdefault("m/" + name, torch.zeros_like(p))
            v = moments.setdefault("v/" + name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


def train_steps(state: TrainState, data, n_steps: int, on_step=None) -> list[tuple]:
    """Advance ``state`` by ``n_steps``; returns per-step (loss_x, loss_m).

    ``data`` is a :class:`Dataset`-like object with ``sample_batch(rng, size)``.
    The RNG for step k is derived from (seed, k) only, so resuming a
    checkpoint replays the uninterrupted run exactly.
    """
    cfg, tcfg = state.model, state.train
    schedule = state.make_schedule()
    frozen = frozen_names(cfg, state.params)
    root = Rng(tcfg.seed).child("train")
    history = []
    with nx.finite_checks(False):
        for _ in range(n_steps):
            k = state.step
            rng = root.child(k)
            batch = data.sample_batch(rng.child("batch"), tcfg.batch)
            state.params.zero_grad()
            lx, lm = training_step(batch, state.params, cfg, tcfg, schedule, rng.child("noise"))
            state.step += 1
            adam_step(state.params, state.moments, state.step, tcfg.lr, (tcfg.beta1, tcfg.beta2),
                      tcfg.adam_eps, tcfg.weight_decay, frozen)
            history.append((lx, lm))
            if on_step is not None:
                on_step(state, lx, lm)
    state.params.zero_grad()
    return history


# checkpoints ----------------------------------------------------------------------

def _write_tensor(buf: bytearray, name: str, t: torch.Tensor) -> None:
    nb = name.encode("utf-8")
    buf += struct.pack("<H", len(nb)) + nb
    buf += struct.pack("<B", t.dim())
    buf += struct.pack(f"<{t.dim()}I", *t.shape)
    buf += t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def encode_checkpoint(state: TrainState) -> bytes:
    meta = {
        "model": state.model.to_dict(),
        "schedule": state.schedule,
        "train": asdict(state.train),
        "step": state.step,
        "frozen": frozen_names(state.model, state.params),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<I", len(blob)) + blob
    buf += struct.pack("<I", len(state.params) + len(state.moments))
    for name, t in state.params.items():
        _write_tensor(buf, name, t)
    for name, t in state.moments.items():
        _write_tensor(buf, MOMENT_PREFIX + name, t)
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                                  f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> TrainState:
    r = _Reader(data)
    magic = r.take(8, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 8")
    (n,) = r.unpack("<I", "config length")
    try:
        meta = json.loads(r.take(n, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config blob at offset 16: {e}") from None
    (count,) = r.unpack("<I", "tensor count")
    params, moments = NamedTensors(), NamedTensors()
    frozen = set(meta.get("frozen", []))
    for _ in range(count):
        (ln,) = r.unpack("<H", "name length")
        name = r.take(ln, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        numel = math.prod(dims)
        raw = r.take(4 * numel, f"data of {name}")
        t = torch.from_numpy(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims))
        if name.startswith(MOMENT_PREFIX):
            moments[name[len(MOMENT_PREFIX):]] = t
        else:
            params[name] = t.requires_grad_(name not in frozen)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes at offset {r.pos}")
    return TrainState(
        model=ModelConfig.from_dict(meta["model"]),
        schedule=meta["schedule"],
        train=TrainConfig.from_dict(meta["train"]),
        params=params,
        moments=moments,
        step=int(meta["step"]),
    )


def save_checkpoint(path, state: TrainState) -> None:
    path = Path(path)
    data = encode_checkpoint(state)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    return decode_checkpoint(Path(path).read_bytes())
