"""Stage 1: fit a regularized ReLU-field to posed images.

The objective is the photometric loss plus a sparsity penalty pulling raw density
toward ``d_min`` and a Huber penalty pulling raw color toward the raw-space white
target. All three terms are means (over rays, voxels, and color entries).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._rng import make_rng
from .camera import CameraPose, Intrinsics
from .render import QuadratureConfig, psnr, ray_loss_and_grad, render_image, views_to_rays
from .voxgrid import ActivationParams, VoxelGrid, logit

log = logging.getLogger(__name__)

WHITE_RAW = float(logit(0.99))
# raw density of a fresh grid: sigma ~= 0.1. Starting at d_min instead leaves the density
# gradient scaled by exp(d_min) ~ 4.5e-5, far below Adam's epsilon, and nothing moves.
INIT_DENSITY_RAW = float(np.log(0.1))


@dataclass
class FitConfig:
    iterations: int = 2000
    rays_per_step: int = 4096
    lr: float = 0.05
    lambda_d: float = 1e-4
    lambda_c: float = 1e-4
    huber_delta: float = 1.0
    c_raw: float = WHITE_RAW
    init_density: float = INIT_DENSITY_RAW
    n_samples: Optional[int] = None
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_c < 0:
            raise ValueError("regularizer weights must be >= 0")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.iterations < 1 or self.rays_per_step < 1:
            raise ValueError("iterations and rays_per_step must be >= 1")


@dataclass
class AdamState:
    m: object
    v: object
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(params * 0, params * 0)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Works on numpy arrays and torch tensors alike."""
    if tuple(params.shape) != tuple(grads.shape) or tuple(state.m.shape) != tuple(params.shape):
        raise ValueError(f"shape mismatch: params {tuple(params.shape)}, grads {tuple(grads.shape)}, state {tuple(state.m.shape)}")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params - lr * m_hat / (v_hat**0.5 + state.eps)
    return new, AdamState(m, v, t, b1, b2, state.eps)


def density_sparsity_loss(data: np.ndarray, d_min: float):
    """Mean |raw density - d_min| and its subgradient (zero on color channels)."""
    r = data[..., 0] - d_min
    n = r.size
    grad = np.zeros_like(data, dtype=np.float64)
    grad[..., 0] = np.sign(r) / n
    return float(np.sum(np.abs(r)) / n), grad


def color_constancy_loss(data: np.ndarray, c_raw: float, delta: float):
    """Mean elementwise Huber of (raw color - c_raw) and its gradient (zero on density)."""
    r = data[..., 1:] - c_raw
    a = np.abs(r)
    quad = a < delta
    vals = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = r.size
    grad = np.zeros_like(data, dtype=np.float64)
    grad[..., 1:] = np.where(quad, r, delta * np.sign(r)) / n
    return float(np.sum(vals) / n), grad


def initial_grid(resolution: int, init_density: float = INIT_DENSITY_RAW, c_raw: float = WHITE_RAW, bounds=None) -> VoxelGrid:
    """Uniform thin fog colored with the raw-space white target."""
    kw = {} if bounds is None else {"bounds": bounds}
    return VoxelGrid.filled(resolution, init_density, c_raw, **kw)


@dataclass
class FitResult:
    grid: VoxelGrid
    trace: List[Tuple[int, float, float, float, float]] = field(default_factory=list)
    heldout_psnr: Optional[float] = None


class NonFiniteLossError(FloatingPointError):
    pass


def fit_relufield(views: Sequence[Tuple[CameraPose, np.ndarray]], intr: Intrinsics, init: VoxelGrid, cfg: FitConfig,
                  act: ActivationParams = ActivationParams(),
                  heldout: Sequence[Tuple[CameraPose, np.ndarray]] = (),
                  regularize: bool = True) -> FitResult:
    """Adam on the raw grid. ``regularize=False`` skips the two penalty terms entirely."""
    if len(views) < 1:
        raise ValueError("need at least one training view")
    rays = views_to_rays(views, intr, init.bounds)
    quad = QuadratureConfig(n_samples=cfg.n_samples or 2 * init.resolution, stratified=cfg.stratified)
    rng = make_rng(cfg.seed, 3)
    params = np.array(init.data, dtype=np.float64)
    state = AdamState.zeros_like(params)
    trace = []
    batch = min(cfg.rays_per_step, len(rays))
    for it in range(cfg.iterations):
        sel = rng.integers(0, len(rays), size=batch)
        offsets = rng.random((batch, quad.n_samples)) if quad.stratified else None
        grid = init.with_data(params) if np.all(np.isfinite(params)) else None
        if grid is None:
            raise NonFiniteLossError(f"iteration {it}: grid parameters became non-finite")
        photo, grad = ray_loss_and_grad(grid, rays.subset(sel), quad, act, offsets)
        ld = lc = 0.0
        total = photo
        if regularize:
            ld, gd = density_sparsity_loss(params, act.d_min)
            lc, gc = color_constancy_loss(params, cfg.c_raw, cfg.huber_delta)
            total = photo + cfg.lambda_d * ld + cfg.lambda_c * lc
            grad = grad + cfg.lambda_d * gd + cfg.lambda_c * gc
        for name, value in (("photometric", photo), ("density_sparsity", ld), ("color_constancy", lc)):
            if not math.isfinite(value):
                raise NonFiniteLossError(f"iteration {it}: {name} loss is {value}")
        trace.append((it, photo, ld, lc, total))
        params, state = adam_step(params, grad, state, cfg.lr)
    grid = init.with_data(params)
    held = None
    if heldout:
        quad_eval = QuadratureConfig(n_samples=quad.n_samples)
        held = float(np.mean([psnr(render_image(grid, p, intr, quad_eval, act), img) for p, img in heldout]))
    return FitResult(grid, trace, held)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "photometric", "L_d", "L_c", "total"])
        for row in trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    values = np.asarray(values, dtype=np.float64)
    return np.convolve(values, np.ones(window) / window, mode="valid")
