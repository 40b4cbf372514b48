"""Quick numerical self-checks run by ``voxdiff verify``."""

from __future__ import annotations

import math
import tempfile
from pathlib import Path
from typing import Callable, List, Tuple

import numpy as np
import torch

from .camera import Intrinsics, RayBatch, default_intrinsics, image_rays, ray_box_interval, sample_spherical_poses
from .checkpoint import DenoiserCheckpoint, load_checkpoint, save_checkpoint
from .diffusion import ChannelSchedules, NoiseSchedule, perturb, posterior_step
from .nn import UNetConfig, build_model, conv3d, groupnorm
from .render import QuadratureConfig, photometric_loss, photometric_loss_and_grad, render_rays
from .voxgrid import VoxelGrid, grid_read, grid_write

Check = Tuple[str, Callable[[], Tuple[bool, str]]]


def _random_grid(rng, R):
    data = np.concatenate([rng.normal(0, 1.5, (R, R, R, 1)), rng.normal(0, 1, (R, R, R, 3))], axis=-1)
    return VoxelGrid(data)


def check_render_gradient():
    rng = np.random.default_rng(0)
    g = _random_grid(rng, 4)
    intr = default_intrinsics(8)
    views = [(sample_spherical_poses(1, 4.0, seed=0)[0], rng.random((8, 8, 3)))]
    quad = QuadratureConfig(8)
    _, grad = photometric_loss_and_grad(g, views, intr, quad)
    base, h, worst = np.array(g.data), 1e-4, 0.0
    for k in np.ndindex(base.shape):
        if abs(grad[k]) <= 1e-8:
            continue
        p, m = base.copy(), base.copy()
        p[k] += h
        m[k] -= h
        fd = (photometric_loss(g.with_data(p), views, intr, quad) - photometric_loss(g.with_data(m), views, intr, quad)) / (2 * h)
        worst = max(worst, abs(fd - grad[k]) / max(abs(fd), abs(grad[k])))
    return worst <= 1e-5, f"max rel err {worst:.2e}"


def check_weight_partition():
    rng = np.random.default_rng(1)
    g = _random_grid(rng, 6)
    o = rng.normal(size=(2000, 3))
    o = 4 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o / 4 + 0.3 * rng.normal(size=o.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far, hit = ray_box_interval(o, d)
    s = render_rays(g, RayBatch(o, d, near, far, hit), QuadratureConfig(48))
    err = float(np.max(np.abs(s.weights.sum(1) + s.t_end - 1)))
    return err <= 1e-6, f"max |sum w + T_end - 1| {err:.2e}"


def check_constant_medium():
    sigma, c = 0.8, np.array([0.2, 0.5, 0.9])
    g = VoxelGrid.filled(4, math.log(sigma), np.log(c / (1 - c)))
    rays = image_rays(sample_spherical_poses(1, 4.0, seed=2)[0], Intrinsics(6, 6, 5.0))
    out = render_rays(g, rays, QuadratureConfig(1024)).rgb
    T = np.exp(-sigma * (rays.far - rays.near))[:, None]
    err = float(np.max(np.abs(out - (c * (1 - T) + T))))
    return err <= 1e-3, f"max abs err {err:.2e}"


def check_schedule():
    sch = NoiseSchedule(1000)
    ok = sch.alpha_bar[0] == 1.0
    ok &= float(np.max(np.abs(sch.alpha**2 + sch.sigma**2 - 1))) < 1e-12
    ok &= bool(np.all(np.diff(sch.snr(np.arange(1001))) < 0))
    return bool(ok), "alpha^2 + sigma^2 = 1, SNR strictly decreasing"


def check_perturb_and_posterior():
    sch = ChannelSchedules.shared(16)
    rng = np.random.default_rng(3)
    V = rng.normal(size=(1, 4, 2, 2, 2))
    ident = np.array_equal(perturb(V, 0, rng.normal(size=V.shape), sch), V)
    collapse = np.array_equal(posterior_step(lambda v, i: V, V * 7, 1, rng, sch), V)
    return ident and collapse, "perturb(i=0) is identity, posterior(i=1) returns x_hat"


def check_nn_ops():
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for fn, shapes in ((lambda x, w: conv3d(x, w), [(1, 2, 3, 3, 3), (2, 2, 3, 3, 3)]),
                       (lambda x, w: groupnorm(x, 2, w), [(1, 4, 2, 2, 2), (4,)])):
        xs = [torch.randn(*s, generator=gen, dtype=torch.float64, requires_grad=True) for s in shapes]
        r = torch.randn(fn(*xs).shape, generator=gen, dtype=torch.float64)
        grads = torch.autograd.grad((fn(*xs) * r).sum(), xs)
        with torch.no_grad():
            for x, g in zip(xs, grads):
                flat = x.view(-1)
                for k in range(flat.numel()):
                    vals = []
                    for dh in (1e-3, -1e-3, 5e-4, -5e-4):
                        old = flat[k].item()
                        flat[k] = old + dh
                        vals.append((fn(*xs) * r).sum().item())
                        flat[k] = old
                    fd = (4 * (vals[2] - vals[3]) / 1e-3 - (vals[0] - vals[1]) / 2e-3) / 3
                    an = g.reshape(-1)[k].item()
                    if max(abs(fd), abs(an)) > 1e-8:
                        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst <= 1e-5, f"conv3d/groupnorm max rel err {worst:.2e}"


def check_roundtrips():
    rng = np.random.default_rng(4)
    with tempfile.TemporaryDirectory() as tmp:
        g = VoxelGrid(rng.normal(size=(4, 4, 4, 4)).astype(np.float32))
        grid_write(g, Path(tmp) / "g.vxgr")
        grid_ok = grid_read(Path(tmp) / "g.vxgr").data.tobytes() == g.data.tobytes()
        cfg = UNetConfig(width=4, levels=1, resolution=4, res_blocks=1, zero_init_head=False)
        model = build_model(cfg, seed=1)
        save_checkpoint(DenoiserCheckpoint.from_model(model, ChannelSchedules.shared(4)), Path(tmp) / "m.vxck")
        back = load_checkpoint(Path(tmp) / "m.vxck").build()
        x = torch.as_tensor(rng.normal(size=(1, 4, 4, 4, 4)))
        ck_ok = torch.equal(model(x, 2), back(x, 2))
    return grid_ok and ck_ok, "grid file and checkpoint round-trips bit-exact"


CHECKS: List[Check] = [
    ("render-gradient", check_render_gradient),
    ("render-weights", check_weight_partition),
    ("render-constant-medium", check_constant_medium),
    ("schedule", check_schedule),
    ("perturb-posterior", check_perturb_and_posterior),
    ("nn-ops", check_nn_ops),
    ("roundtrips", check_roundtrips),
]


def run_checks(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
