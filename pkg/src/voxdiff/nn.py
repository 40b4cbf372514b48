"""3D U-Net denoisers (single and double variant) on top of torch autograd.

The denoiser predicts the clean field from a noisy one (x-prediction) and is
conditioned on the integer diffusion step through a sinusoidal embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class UNetConfig:
    in_channels: int = 4
    out_channels: int = 4
    width: int = 16
    levels: int = 2
    res_blocks: int = 2
    channel_mult: Tuple[int, ...] = (1, 2, 2, 2)
    attention_resolutions: Tuple[int, ...] = ()
    temb_dim: Optional[int] = None
    variant: str = "single"
    resolution: int = 16
    zero_init_head: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.resolution % (2**self.levels):
            raise ValueError(f"resolution {self.resolution} is not divisible by 2**levels = {2**self.levels}")
        if self.width < 4:
            raise ValueError("width must be >= 4")
        if len(self.channel_mult) < self.levels + 1:
            raise ValueError(f"channel_mult needs {self.levels + 1} entries")
        if self.variant not in ("single", "double"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.temb_dim is None:
            self.temb_dim = 4 * self.width

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_json(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


def conv3d(x: torch.Tensor, w: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1."""
    if x.dim() != 5 or w.dim() != 5 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d shape mismatch: x {tuple(x.shape)}, w {tuple(w.shape)}")
    if tuple(w.shape[2:]) != (3, 3, 3):
        raise ValueError("conv3d expects 3x3x3 kernels")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError("bias must have one entry per output channel")
    return F.conv3d(x, w, b, padding=1)


def groupnorm(x: torch.Tensor, groups: int = 8, weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    if x.shape[1] % groups:
        raise ValueError(f"{x.shape[1]} channels not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def sinusoidal_embedding(steps, dim: int) -> torch.Tensor:
    """Interleaved (sin, cos) pairs of ``step * 10000**(-k / (dim/2))``, shape (N, dim)."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    steps = torch.as_tensor(steps, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = steps[:, None] * freqs[None, :]
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(len(steps), dim)


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class Conv3(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        bound = 1.0 / math.sqrt(cin * 27)
        self.weight = nn.Parameter(torch.empty(cout, cin, 3, 3, 3).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return conv3d(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.groups = _groups(channels)
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return groupnorm(x, self.groups, self.weight, self.bias)


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.fc1 = nn.Linear(base_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, steps):
        e = sinusoidal_embedding(steps, self.base_dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(e)))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv3(cin, cout)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv3(cout, cout)
        self.skip = nn.Linear(cin, cout) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        if self.skip is not None:
            x = self.skip(x.movedim(1, -1)).movedim(-1, 1)
        return x + h


class Attention(nn.Module):
    """Single-head dot-product self-attention over all voxels."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = GroupNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x):
        n, c = x.shape[:2]
        h = self.norm(x).reshape(n, c, -1).transpose(1, 2)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        a = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.proj(a @ v).transpose(1, 2).reshape(x.shape)
        return x + out


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = Conv3(channels, channels)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet3D(nn.Module):
    """Encoder/decoder with skip concatenations; average-pool down, nearest+conv up."""

    def __init__(self, cfg: UNetConfig, in_channels: Optional[int] = None, out_channels: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        cin = cfg.in_channels if in_channels is None else in_channels
        cout = cfg.out_channels if out_channels is None else out_channels
        W = cfg.width
        self.time = TimeEmbedding(W, cfg.temb_dim)
        self.conv_in = Conv3(cin, W)
        self.down = nn.ModuleList()
        ch = W
        skip_ch = []
        res = cfg.resolution
        for lvl in range(cfg.levels):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(ResBlock(ch, W * cfg.channel_mult[lvl], cfg.temb_dim))
                ch = W * cfg.channel_mult[lvl]
                if res in cfg.attention_resolutions:
                    blocks.append(Attention(ch))
            self.down.append(blocks)
            skip_ch.append(ch)
            res //= 2
        mid = W * cfg.channel_mult[cfg.levels]
        self.mid1 = ResBlock(ch, mid, cfg.temb_dim)
        self.mid_attn = Attention(mid) if res in cfg.attention_resolutions else None
        self.mid2 = ResBlock(mid, mid, cfg.temb_dim)
        ch = mid
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            res *= 2
            self.upsample.append(Upsample(ch))
            blocks = nn.ModuleList()
            ch = ch + skip_ch[lvl]
            for _ in range(cfg.res_blocks):
                blocks.append(ResBlock(ch, W * cfg.channel_mult[lvl], cfg.temb_dim))
                ch = W * cfg.channel_mult[lvl]
                if res in cfg.attention_resolutions:
                    blocks.append(Attention(ch))
            self.up.append(blocks)
        self.norm_out = GroupNorm(ch)
        self.conv_out = Conv3(ch, cout)
        if cfg.zero_init_head:
            nn.init.zeros_(self.conv_out.weight)

    @staticmethod
    def _run(blocks, h, temb):
        for b in blocks:
            h = b(h, temb) if isinstance(b, ResBlock) else b(h)
        return h

    def forward(self, x: torch.Tensor, steps) -> torch.Tensor:
        R = self.cfg.resolution
        if x.dim() != 5 or tuple(x.shape[2:]) != (R, R, R):
            raise ValueError(f"expected input (N, C, {R}, {R}, {R}), got {tuple(x.shape)}")
        steps = torch.as_tensor(steps).reshape(-1)
        if steps.numel() == 1:
            steps = steps.expand(x.shape[0])
        temb = self.time(steps)
        h = self.conv_in(x)
        skips = []
        for blocks in self.down:
            h = self._run(blocks, h, temb)
            skips.append(h)
            h = F.avg_pool3d(h, 2)
        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, temb)
        for up, blocks, skip in zip(self.upsample, self.up, reversed(skips)):
            h = torch.cat([up(h), skip], dim=1)
            h = self._run(blocks, h, temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class DoubleUNet(nn.Module):
    """Density U-Net on channel 0; color U-Net on channels 1..3 plus the predicted clean density."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        self.density = UNet3D(cfg, in_channels=1, out_channels=1)
        self.color = UNet3D(cfg, in_channels=4, out_channels=3)

    def forward_split(self, d_t: torch.Tensor, c_t: torch.Tensor, steps):
        d_hat = self.density(d_t, steps)
        c_hat = self.color(torch.cat([c_t, d_hat], dim=1), steps)
        return d_hat, c_hat

    def forward(self, x: torch.Tensor, steps) -> torch.Tensor:
        d_hat, c_hat = self.forward_split(x[:, :1], x[:, 1:], steps)
        return torch.cat([d_hat, c_hat], dim=1)


def build_model(cfg: UNetConfig, seed: int = 0) -> nn.Module:
    """Instantiate the configured variant with parameters drawn from a seeded generator."""
    prev = torch.get_default_dtype()
    state = torch.random.get_rng_state()
    try:
        torch.set_default_dtype(cfg.torch_dtype)
        torch.manual_seed(seed)
        model = UNet3D(cfg) if cfg.variant == "single" else DoubleUNet(cfg)
    finally:
        torch.set_default_dtype(prev)
        torch.random.set_rng_state(state)
    return model


def parameter_grads(loss: torch.Tensor, model: nn.Module) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every named parameter (zeros if unused)."""
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}
