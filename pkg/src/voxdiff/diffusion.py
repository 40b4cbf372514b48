"""Discrete-time diffusion over voxel grids.

Grids travel through this module channel-first as arrays of shape (N, 4, R, R, R)
in normalized space. Channel 0 (density) and channels 1..3 (color) are perturbed
with their own noise schedules. Denoisers predict the clean field.

Samplers work in float64 numpy; a denoiser is any callable ``model(v, i) -> x_hat``
on such arrays (see :class:`TorchDenoiser` for wrapping a trained network).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .camera import CameraPose, Intrinsics
from .render import QuadratureConfig, photometric_loss_and_grad
from .voxgrid import ActivationParams, VoxelGrid

log = logging.getLogger(__name__)

Denoiser = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class NoiseSchedule:
    """Tabulated variance-preserving schedule: ``alpha_bar[i]`` for ``i = 0..T``."""

    T: int = 1000
    kind: str = "cosine"
    s: float = 0.008
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        u = np.arange(self.T + 1) / self.T
        if self.kind == "cosine":
            f = np.cos((u + self.s) / (1.0 + self.s) * np.pi / 2.0) ** 2
            ab = f / f[0]
        elif self.kind == "linear":
            scale = 1000.0 / self.T
            betas = np.linspace(scale * self.beta_start, min(scale * self.beta_end, 0.999), self.T)
            ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        ab[0] = 1.0
        self.alpha_bar = np.clip(ab, 0.0, 1.0)

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    def snr(self, i) -> np.ndarray:
        ab = self.alpha_bar[i]
        with np.errstate(divide="ignore"):
            return ab / (1.0 - ab)

    def to_json(self) -> dict:
        return {"T": self.T, "kind": self.kind, "s": self.s, "beta_start": self.beta_start, "beta_end": self.beta_end}


@dataclass
class ChannelSchedules:
    density: NoiseSchedule
    color: NoiseSchedule

    def __post_init__(self):
        if self.density.T != self.color.T:
            raise ValueError("density and color schedules must share T")

    @property
    def T(self) -> int:
        return self.density.T

    @classmethod
    def shared(cls, T: int = 1000, kind: str = "cosine") -> "ChannelSchedules":
        return cls(NoiseSchedule(T, kind), NoiseSchedule(T, kind))

    def coefficients(self, table: str, i) -> np.ndarray:
        """Per-channel ``alpha`` or ``sigma`` for step(s) ``i``, shape (N, 4, 1, 1, 1)."""
        i = np.atleast_1d(np.asarray(i))
        d = getattr(self.density, table)[i]
        c = getattr(self.color, table)[i]
        out = np.empty((len(i), 4, 1, 1, 1))
        out[:, 0] = d[:, None, None, None]
        out[:, 1:] = c[:, None, None, None, None]
        return out

    def to_json(self) -> dict:
        return {"density": self.density.to_json(), "color": self.color.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelSchedules":
        return cls(NoiseSchedule(**obj["density"]), NoiseSchedule(**obj["color"]))


def _check_step(sched, i, lo: int = 0):
    i = np.atleast_1d(np.asarray(i))
    if np.any(i < lo) or np.any(i > sched.T):
        raise IndexError(f"step index out of range [{lo}, {sched.T}]: {i}")


def schedule_eval(sched: NoiseSchedule, i: int) -> Tuple[float, float]:
    _check_step(sched, i)
    return float(sched.alpha[i]), float(sched.sigma[i])


def snr_weight(sched: NoiseSchedule, i, cap: float = 1e4):
    """``SNR(i-1) - SNR(i)``, clipped to ``[0, cap]`` (step 1 hits the cap since SNR(0) is infinite)."""
    _check_step(sched, i, lo=1)
    i = np.asarray(i)
    w = sched.snr(i - 1) - sched.snr(i)
    return np.clip(w, 0.0, cap)


def _like(coef: np.ndarray, ref):
    if isinstance(ref, torch.Tensor):
        return torch.as_tensor(coef, dtype=ref.dtype, device=ref.device)
    return coef


def perturb(V, i, eps, schedules: ChannelSchedules):
    """``alpha_i * V + sigma_i * eps`` with per-channel-group coefficients. Accepts numpy or torch."""
    if tuple(V.shape) != tuple(eps.shape):
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match {tuple(V.shape)}")
    if V.ndim != 5 or V.shape[1] != 4:
        raise ValueError("V must have shape (N, 4, R, R, R)")
    _check_step(schedules.density, i)
    a = _like(schedules.coefficients("alpha", i), V)
    s = _like(schedules.coefficients("sigma", i), V)
    return a * V + s * eps


def perturb_shared(V, i, eps, sched: NoiseSchedule):
    """Single-schedule perturbation applied to every channel."""
    i = np.atleast_1d(np.asarray(i))
    a = _like(sched.alpha[i].reshape(-1, 1, 1, 1, 1), V)
    s = _like(sched.sigma[i].reshape(-1, 1, 1, 1, 1), V)
    return a * V + s * eps


# ---------------------------------------------------------------------------
# normalization

@dataclass
class Normalizer:
    density_mean: float = 0.0
    density_scale: float = 1.0
    color_mean: float = 0.0
    color_scale: float = 1.0

    def _coef(self):
        mean = np.array([self.density_mean] + [self.color_mean] * 3).reshape(1, 4, 1, 1, 1)
        scale = np.array([self.density_scale] + [self.color_scale] * 3).reshape(1, 4, 1, 1, 1)
        return mean, scale

    def normalize(self, V):
        mean, scale = self._coef()
        return (V - mean) / scale

    def denormalize(self, V):
        mean, scale = self._coef()
        return V * scale + mean

    def scale_vector(self) -> np.ndarray:
        return self._coef()[1]

    def to_json(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def normalize_dataset(grids) -> Tuple[np.ndarray, Normalizer]:
    """Standardize density and color groups with dataset-wide mean and std."""
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim != 5 or grids.shape[0] < 1 or grids.shape[1] != 4:
        raise ValueError("expected at least one grid of shape (4, R, R, R)")
    stats = []
    for name, sl in (("density", slice(0, 1)), ("color", slice(1, 4))):
        vals = grids[:, sl]
        mean = float(vals.mean())
        std = float(vals.std())
        if not std > 1e-12:
            warnings.warn(f"{name} channels have zero variance; using scale 1")
            std = 1.0
        stats += [mean, std]
    norm = Normalizer(*stats)
    return norm.normalize(grids), norm


def grids_to_batch(grids: Sequence[VoxelGrid]) -> np.ndarray:
    """(N, 4, R, R, R) channel-first float64 batch from voxel grids."""
    return np.stack([np.moveaxis(np.asarray(g.data, dtype=np.float64), -1, 0) for g in grids])


def batch_to_grids(batch: np.ndarray, bounds=None) -> List[VoxelGrid]:
    kw = {} if bounds is None else {"bounds": bounds}
    return [VoxelGrid(np.moveaxis(b, 0, -1), **kw) for b in np.asarray(batch)]


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossConfig:
    weighting: str = "simple"
    visibility: bool = False
    tau: float = -8.0
    snr_cap: float = 1e4

    def __post_init__(self):
        if self.weighting not in ("simple", "snr"):
            raise ValueError("weighting must be 'simple' or 'snr'")


class NonFiniteError(FloatingPointError):
    pass


def diffusion_loss(model, V: torch.Tensor, i, eps: torch.Tensor, cfg: LossConfig, schedules: ChannelSchedules,
                   normalizer: Optional[Normalizer] = None) -> torch.Tensor:
    """Weighted per-group mean squared error between the clean field and the model's prediction.

    ``i`` holds one step per batch element. With ``cfg.visibility`` the color weight at each
    voxel is raised by one where the clean raw density exceeds ``cfg.tau``.
    """
    i = np.atleast_1d(np.asarray(i))
    if len(i) == 1 and V.shape[0] > 1:
        i = np.repeat(i, V.shape[0])
    V_t = perturb(V, i, eps, schedules)
    x_hat = model(V_t, torch.as_tensor(i))
    if not torch.all(torch.isfinite(x_hat)):
        raise NonFiniteError(f"denoiser produced non-finite output at steps {i.tolist()}")
    if cfg.weighting == "snr":
        w_d = snr_weight(schedules.density, i, cfg.snr_cap)
        w_c = snr_weight(schedules.color, i, cfg.snr_cap)
    else:
        w_d = np.ones(len(i))
        w_c = np.ones(len(i))
    shape = (-1, 1, 1, 1, 1)
    w_d = torch.as_tensor(w_d, dtype=V.dtype).reshape(shape)
    w_c = torch.as_tensor(w_c, dtype=V.dtype).reshape(shape)
    D, C = V[:, :1], V[:, 1:]
    err_d = (D - x_hat[:, :1]) ** 2
    err_c = (C - x_hat[:, 1:]) ** 2
    if cfg.visibility:
        tau = cfg.tau
        if normalizer is not None:
            tau = (tau - normalizer.density_mean) / normalizer.density_scale
        w_c = w_c + (D > tau).to(V.dtype)
    per_d = (w_d * err_d).mean(dim=(1, 2, 3, 4))
    per_c = (w_c * err_c).mean(dim=(1, 2, 3, 4))
    return (per_d + per_c).mean()


# ---------------------------------------------------------------------------
# sampling

def posterior_coefficients(sched: NoiseSchedule, i: int) -> Tuple[float, float, float]:
    """Coefficients (on x_hat, on V_i) and variance of q(V_{i-1} | V_i, x = x_hat)."""
    _check_step(sched, i, lo=1)
    ab_t = sched.alpha_bar[i]
    ab_s = sched.alpha_bar[i - 1]
    a2 = ab_t / ab_s
    c_x = math.sqrt(ab_s) * (1.0 - a2) / (1.0 - ab_t)
    c_v = math.sqrt(a2) * (1.0 - ab_s) / (1.0 - ab_t)
    var = (1.0 - ab_s) * (1.0 - a2) / (1.0 - ab_t)
    return c_x, c_v, max(var, 0.0)


def _group_coef(schedules: ChannelSchedules, i: int):
    cd = posterior_coefficients(schedules.density, i)
    cc = posterior_coefficients(schedules.color, i)
    return [np.array([d] + [c] * 3).reshape(1, 4, 1, 1, 1) for d, c in zip(cd, cc)]


def posterior_step(model: Denoiser, V_i: np.ndarray, i: int, rng: np.random.Generator, schedules: ChannelSchedules,
                   deterministic: bool = False) -> np.ndarray:
    """Draw V_{i-1} from the model posterior. Step 1 returns the prediction itself."""
    _check_step(schedules.density, i, lo=1)
    x_hat = np.asarray(model(V_i, i), dtype=np.float64)
    if i == 1:
        return x_hat.copy()
    c_x, c_v, var = _group_coef(schedules, i)
    mean = c_x * x_hat + c_v * V_i
    if deterministic:
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(V_i.shape)


def ancestral_sample(model: Denoiser, schedules: ChannelSchedules, rng: np.random.Generator, shape,
                     normalizer: Optional[Normalizer] = None, deterministic: bool = False,
                     callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Run the reverse chain from pure noise; returns raw (denormalized) grids, shape (N, 4, R, R, R)."""
    V = rng.standard_normal(tuple(shape))
    for i in range(schedules.T, 0, -1):
        V = posterior_step(model, V, i, rng, schedules, deterministic)
        if not np.all(np.isfinite(V)):
            raise NonFiniteError(f"sampler state became non-finite at step {i}")
        if callback is not None:
            callback(i, V)
    return V if normalizer is None else normalizer.denormalize(V)


class TorchDenoiser:
    """Adapter exposing a torch model as a numpy ``model(v, i)`` callable."""

    def __init__(self, model: torch.nn.Module):
        self.model = model
        self.dtype = next(model.parameters()).dtype

    def __call__(self, v: np.ndarray, i) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(v), dtype=self.dtype)
            return self.model(x, torch.as_tensor(np.atleast_1d(i))).double().numpy()

    def vjp(self, v: np.ndarray, i, cotangent: np.ndarray) -> np.ndarray:
        """``cotangent^T d x_hat / d v`` through the network."""
        x = torch.as_tensor(np.asarray(v), dtype=self.dtype).requires_grad_(True)
        out = self.model(x, torch.as_tensor(np.atleast_1d(i)))
        (g,) = torch.autograd.grad(out, x, torch.as_tensor(cotangent, dtype=self.dtype))
        return g.double().numpy()


# ---------------------------------------------------------------------------
# guidance

@dataclass
class Observation:
    pose: CameraPose
    image: np.ndarray
    intrinsics: Intrinsics


@dataclass
class GuidanceConfig:
    K: int = 5
    step_size: float = 0.01
    lam_noisy: float = 1.0
    lam_denoised: float = 1.0
    mode: str = "both"
    full_backprop: bool = False

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.K > 0 and not self.step_size > 0:
            raise ValueError("step_size must be positive when K > 0")
        if self.lam_noisy < 0 or self.lam_denoised < 0:
            raise ValueError("guidance weights must be >= 0")
        if self.mode not in ("noisy", "denoised", "both"):
            raise ValueError("mode must be noisy, denoised, or both")


@dataclass
class RenderContext:
    """Everything needed to render a normalized-space state."""

    normalizer: Normalizer = field(default_factory=Normalizer)
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    act: ActivationParams = field(default_factory=ActivationParams)
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def _nerf_grad(v: np.ndarray, obs: Observation, ctx: RenderContext) -> np.ndarray:
    """Gradient of the photometric loss w.r.t. one normalized state (4, R, R, R)."""
    world = ctx.normalizer.denormalize(v[None])[0]
    grid = VoxelGrid(np.moveaxis(world, 0, -1), ctx.bounds)
    _, g = photometric_loss_and_grad(grid, [(obs.pose, obs.image)], obs.intrinsics, ctx.quad, ctx.act)
    return np.moveaxis(g, -1, 0) * ctx.normalizer.scale_vector()[0]


def guidance_grad(V: np.ndarray, obs: Observation, mode: str = "noisy", cfg: GuidanceConfig = GuidanceConfig(),
                  ctx: RenderContext = RenderContext(), model: Optional[Denoiser] = None, i: Optional[int] = None) -> np.ndarray:
    """Gradient of the guidance log-likelihood ``-lam * L_photometric`` w.r.t. normalized grids (N, 4, R, R, R).

    ``noisy`` evaluates the loss on ``V`` itself, ``denoised`` on the model's prediction
    ``x_hat(V, i)`` (gradient passed straight through unless ``cfg.full_backprop``), and
    ``both`` adds the two weighted terms.
    """
    V = np.asarray(V, dtype=np.float64)
    out = np.zeros_like(V)
    if mode in ("noisy", "both"):
        for n in range(V.shape[0]):
            out[n] += -cfg.lam_noisy * _nerf_grad(V[n], obs, ctx)
    if mode in ("denoised", "both"):
        if model is None or i is None:
            raise ValueError("denoised guidance requires a model and a step index")
        x_hat = V if i == 0 else np.asarray(model(V, i), dtype=np.float64)
        g = np.stack([_nerf_grad(x_hat[n], obs, ctx) for n in range(V.shape[0])])
        if cfg.full_backprop and i > 0:
            if not hasattr(model, "vjp"):
                raise ValueError("full_backprop needs a model with a vjp method")
            g = model.vjp(V, i, g)
        out += -cfg.lam_denoised * g
    if mode not in ("noisy", "denoised", "both"):
        raise ValueError(f"unknown guidance mode {mode!r}")
    return out


def guided_sample(model: Denoiser, schedules: ChannelSchedules, guidance: GuidanceConfig, obs: Optional[Observation],
                  rng: np.random.Generator, shape, ctx: RenderContext = RenderContext(), deterministic: bool = False,
                  callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Ancestral sampling with K guidance ascent steps after every posterior step.

    Returns raw (denormalized) grids of ``shape``.
    """
    if guidance.K > 0 and obs is None:
        raise ValueError("guided sampling with K > 0 needs an observation")
    V = rng.standard_normal(tuple(shape))
    for i in range(schedules.T, 0, -1):
        V = posterior_step(model, V, i, rng, schedules, deterministic)
        for _ in range(guidance.K):
            V = V + guidance.step_size * guidance_grad(V, obs, guidance.mode, guidance, ctx, model, i - 1)
        if not np.all(np.isfinite(V)):
            raise NonFiniteError(f"guided sampler state became non-finite at step {i}")
        if callback is not None:
            callback(i, V)
    return ctx.normalizer.denormalize(V)
