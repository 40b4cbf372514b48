"""Denoiser training: uniform step sampling, global-norm clipping, linear warmup, Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from ._rng import make_rng
from .checkpoint import DenoiserCheckpoint, load_checkpoint, save_checkpoint
from .diffusion import ChannelSchedules, LossConfig, Normalizer, NonFiniteError, diffusion_loss
from .fit import AdamState, adam_step
from .nn import UNetConfig, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    iterations: int = 2000
    clip_norm: float = 500.0
    warmup: int = 100
    weighting: str = "simple"
    visibility: bool = False
    tau: float = -8.0
    snr_cap: float = 1e4
    seed: int = 0
    ckpt_every: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.iterations > 0):
            raise ValueError("lr, batch_size and iterations must be positive")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.weighting, self.visibility, self.tau, self.snr_cap)


@dataclass
class TraceRow:
    step: int
    loss: float
    grad_norm: float
    clipped_norm: float
    lr: float


def _rng_state_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "counter": [int(x) for x in st["state"]["counter"]],
        "key": [int(x) for x in st["state"]["key"]],
        "buffer": [int(x) for x in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_from_json(obj: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {"counter": np.array(obj["counter"], dtype=np.uint64), "key": np.array(obj["key"], dtype=np.uint64)},
        "buffer": np.array(obj["buffer"], dtype=np.uint64),
        "buffer_pos": obj["buffer_pos"],
        "has_uint32": obj["has_uint32"],
        "uinteger": obj["uinteger"],
    }
    return np.random.Generator(bg)


class Trainer:
    """Owns the model, optimizer state, and data stream for one training run.

    ``data`` is the normalized training set, shape (N, 4, R, R, R).
    """

    def __init__(self, data: np.ndarray, unet: UNetConfig, cfg: TrainConfig, schedules: ChannelSchedules,
                 normalizer: Optional[Normalizer] = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 5 or data.shape[0] < 1 or data.shape[1] != 4:
            raise ValueError("training data must have shape (N, 4, R, R, R) with N >= 1")
        if data.shape[2] != unet.resolution:
            raise ValueError(f"data resolution {data.shape[2]} does not match unet resolution {unet.resolution}")
        self.data = data
        self.unet = unet
        self.cfg = cfg
        self.schedules = schedules
        self.normalizer = normalizer or Normalizer()
        self.model = build_model(unet, seed=cfg.seed)
        self.params = list(self.model.parameters())
        self.names = [n for n, _ in self.model.named_parameters()]
        self.adam = [AdamState.zeros_like(p.detach()) for p in self.params]
        self.rng = make_rng(cfg.seed, 5)
        self.step = 0
        self.trace: List[TraceRow] = []

    @property
    def dtype(self):
        return self.unet.torch_dtype

    def lr_at(self, step: int) -> float:
        if self.cfg.warmup <= 0:
            return self.cfg.lr
        return self.cfg.lr * min(1.0, (step + 1) / self.cfg.warmup)

    def train_step(self) -> TraceRow:
        cfg = self.cfg
        N, R = self.data.shape[0], self.unet.resolution
        idx = self.rng.integers(0, N, size=cfg.batch_size)
        steps = self.rng.integers(1, self.schedules.T + 1, size=cfg.batch_size)
        eps = self.rng.standard_normal((cfg.batch_size, 4, R, R, R))
        V = torch.as_tensor(self.data[idx], dtype=self.dtype)
        loss = diffusion_loss(self.model, V, steps, torch.as_tensor(eps, dtype=self.dtype), cfg.loss_config(),
                              self.schedules, self.normalizer)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"step {self.step}: loss is {loss.item()}")
        grads = torch.autograd.grad(loss, self.params)
        gnorm = math.sqrt(sum(float(torch.sum(g * g)) for g in grads))
        if not math.isfinite(gnorm):
            raise NonFiniteError(f"step {self.step}: gradient norm is {gnorm}")
        if gnorm > cfg.clip_norm:
            scale = cfg.clip_norm / gnorm
            grads = [g * scale for g in grads]
        clipped = math.sqrt(sum(float(torch.sum(g * g)) for g in grads))
        lr = self.lr_at(self.step)
        with torch.no_grad():
            for k, (p, g) in enumerate(zip(self.params, grads)):
                new, self.adam[k] = adam_step(p.detach(), g, self.adam[k], lr)
                p.copy_(new)
        row = TraceRow(self.step, float(loss.detach()), gnorm, clipped, lr)
        self.trace.append(row)
        self.step += 1
        return row

    def run(self, until: Optional[int] = None, ckpt_path=None, callback: Optional[Callable[[TraceRow], None]] = None):
        until = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        while self.step < until:
            row = self.train_step()
            if callback is not None:
                callback(row)
            if ckpt_path is not None and self.cfg.ckpt_every and self.step % self.cfg.ckpt_every == 0:
                save_checkpoint(self.checkpoint(), ckpt_path)
        if ckpt_path is not None:
            save_checkpoint(self.checkpoint(), ckpt_path)
        return self

    def checkpoint(self) -> DenoiserCheckpoint:
        optim = {}
        for name, st in zip(self.names, self.adam):
            optim["m/" + name] = st.m.cpu().numpy().copy()
            optim["v/" + name] = st.v.cpu().numpy().copy()
        extra = {
            "train": asdict(self.cfg),
            "adam_step": self.adam[0].step if self.adam else 0,
            "rng": _rng_state_json(self.rng),
            "trace": [asdict(r) for r in self.trace],
        }
        return DenoiserCheckpoint.from_model(self.model, self.schedules, normalizer=self.normalizer, step=self.step,
                                             optimizer=optim, extra=extra)

    @classmethod
    def resume(cls, ckpt: DenoiserCheckpoint, data: np.ndarray, cfg: Optional[TrainConfig] = None) -> "Trainer":
        cfg = cfg or TrainConfig(**ckpt.extra["train"])
        tr = cls(data, ckpt.unet, cfg, ckpt.schedules, ckpt.normalizer)
        tr.model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items()})
        t = ckpt.extra.get("adam_step", 0)
        tr.adam = [
            AdamState(torch.from_numpy(np.array(ckpt.optimizer["m/" + n])), torch.from_numpy(np.array(ckpt.optimizer["v/" + n])), t)
            for n in tr.names
        ]
        tr.rng = _rng_from_json(ckpt.extra["rng"])
        tr.step = ckpt.step
        tr.trace = [TraceRow(**r) for r in ckpt.extra.get("trace", [])]
        return tr


def train(data: np.ndarray, unet: UNetConfig, cfg: TrainConfig, schedules: ChannelSchedules,
          normalizer: Optional[Normalizer] = None, ckpt_path=None) -> DenoiserCheckpoint:
    tr = Trainer(data, unet, cfg, schedules, normalizer).run(ckpt_path=ckpt_path)
    return tr.checkpoint()


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "grad_norm", "lr"])
        for r in trace:
            w.writerow([r.step, repr(r.loss), repr(r.grad_norm), repr(r.lr)])
