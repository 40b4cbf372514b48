"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line with its runtime."""

import math
import time
from pathlib import Path

import numpy as np
import torch

from voxdiff._rng import make_rng
from voxdiff.camera import Intrinsics, RayBatch, default_intrinsics, image_rays, ray_box_interval, sample_spherical_poses
from voxdiff.checkpoint import load_checkpoint, save_checkpoint
from voxdiff.cli import main as cli_main
from voxdiff.diffusion import (
    ChannelSchedules, GuidanceConfig, LossConfig, NoiseSchedule, Normalizer, RenderContext, TorchDenoiser,
    ancestral_sample, diffusion_loss, grids_to_batch, guided_sample, normalize_dataset, perturb, perturb_shared,
    posterior_step,
)
from voxdiff.fit import WHITE_RAW, FitConfig, fit_relufield, initial_grid, smoothed
from voxdiff.images import read_pfm, read_ppm, write_pfm, write_ppm
from voxdiff.nn import UNetConfig, build_model
from voxdiff.render import QuadratureConfig, render_image, render_rays, visibility_weights
from voxdiff.scenegen import SceneDataset, random_scene, voxelize_scene
from voxdiff.train import TrainConfig, Trainer
from voxdiff.voxgrid import ActivationParams, VoxelGrid, grid_read, grid_write

import test_diffusion
import test_nn
import test_render


def test_criterion_1_renderer_gradient(acceptance):
    t = time.time()
    worst = max(test_render.fd_check(seed) for seed in range(3))
    acceptance(1, "renderer gradient vs finite differences", worst <= 1e-5,
               f"max rel err {worst:.2e} over 3 random 4^3 grids (tol 1e-5)", time.time() - t, 30)


def test_criterion_2_rendering_oracle(acceptance):
    t = time.time()
    sigma, c = 0.8, np.array([0.2, 0.5, 0.9])
    g = VoxelGrid.filled(6, math.log(sigma), np.log(c / (1 - c)))
    rays = image_rays(sample_spherical_poses(1, 4.0, seed=0)[0], Intrinsics(8, 8, 6.0))
    T = np.exp(-sigma * (rays.far - rays.near))[:, None]
    err_const = float(np.max(np.abs(render_rays(g, rays, QuadratureConfig(1024)).rgb - (c * (1 - T) + T))))

    rng = np.random.default_rng(0)
    data = np.concatenate([rng.normal(1.0, 2.0, (6, 6, 6, 1)), rng.normal(0, 1, (6, 6, 6, 3))], axis=-1)
    o = rng.normal(size=(10_000, 3))
    o = 4 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o / 4 + 0.3 * rng.normal(size=o.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far, hit = ray_box_interval(o, d)
    s = render_rays(VoxelGrid(data), RayBatch(o, d, near, far, hit), QuadratureConfig(48))
    err_w = float(np.max(np.abs(s.weights.sum(1) + s.t_end - 1)))
    ok = err_const <= 1e-3 and err_w <= 1e-6
    acceptance(2, "rendering oracle", ok,
               f"constant medium err {err_const:.2e} (tol 1e-3), weight partition err {err_w:.2e} on 1e4 rays (tol 1e-6)",
               time.time() - t, 30)


def _fit_pair(scene_seed, view_seed):
    R, size, n_train, n_held = 16, 32, 24, 4
    act = ActivationParams()
    gt = voxelize_scene(random_scene(1000 + scene_seed), R, act)
    intr = default_intrinsics(size)
    quad = QuadratureConfig(2 * R)
    poses = sample_spherical_poses(n_train + n_held, 4.0, seed=view_seed)
    views = [(p, np.round(render_image(gt, p, intr, quad, act) * 255) / 255) for p in poses]
    train, held = views[:n_train], views[n_train:]
    invisible = visibility_weights(gt, poses[:n_train], intr, quad, act) < 1e-3
    out = {}
    for reg in (True, False):
        cfg = FitConfig(iterations=300, rays_per_step=1024, lr=0.05, seed=scene_seed)
        res = fit_relufield(train, intr, initial_grid(R), cfg, act, held, regularize=reg)
        d = np.asarray(res.grid.data)
        out[reg] = (
            float(np.mean(np.abs(d[..., 0] - act.d_min)[invisible])),
            float(np.mean(np.abs(d[..., 1:] - WHITE_RAW)[invisible])),
            res.heldout_psnr,
        )
    return out


def test_criterion_3_regularization_claim(acceptance):
    t = time.time()
    rows, ok = [], True
    for s in range(8):
        r = _fit_pair(s, s)
        (dr, cr, pr), (du, cu, pu) = r[True], r[False]
        good = dr <= du and cr <= cu and pr >= pu - 1.0
        ok &= good
        rows.append(f"s{s}: dens {dr:.2f}<={du:.2f} col {cr:.2f}<={cu:.2f} psnr {pr:.1f}/{pu:.1f}")
        print(rows[-1])
    acceptance(3, "regularized fits more structured without losing quality", ok,
               f"{len(rows)} scenes; " + "; ".join(rows), time.time() - t, 600)


def test_criterion_4_autodiff(acceptance):
    t = time.time()
    errs = {}
    rand = test_nn.rand
    torch.manual_seed(0)
    from voxdiff.nn import Attention, ResBlock, TimeEmbedding, Upsample, conv3d, groupnorm

    errs["conv3d"] = test_nn.max_rel_err(conv3d, [rand(1, 2, 4, 4, 4), rand(2, 2, 3, 3, 3, seed=1), rand(2, seed=2)])
    errs["groupnorm"] = test_nn.max_rel_err(lambda x, w, b: groupnorm(x, 2, w, b), [rand(2, 4, 4, 4, 4), rand(4, seed=1), rand(4, seed=2)])
    te = TimeEmbedding(8, 12).double()
    errs["time_embedding"] = test_nn.max_rel_err(
        lambda w1, w2: torch.func.functional_call(te, {"fc1.weight": w1, "fc2.weight": w2}, (torch.tensor([3, 40]),)),
        [te.fc1.weight, te.fc2.weight])
    rb = ResBlock(4, 8, 6).double()
    temb = rand(2, 6, seed=3)
    errs["resblock"] = test_nn.max_rel_err(lambda x: rb(x, temb), [rand(2, 4, 4, 4, 4)])
    errs["attention"] = test_nn.max_rel_err(Attention(4).double(), [rand(1, 4, 2, 2, 2, seed=4)])
    errs["upsample"] = test_nn.max_rel_err(Upsample(2).double(), [rand(1, 2, 2, 2, 2, seed=5)])
    errs["avg_pool"] = test_nn.max_rel_err(lambda x: torch.nn.functional.avg_pool3d(x, 2), [rand(1, 2, 4, 4, 4, seed=6)])
    errs["silu"] = test_nn.max_rel_err(torch.nn.functional.silu, [rand(3, 5, seed=7)])
    ops_ok = max(errs.values()) <= 1e-5

    m = build_model(UNetConfig(width=8, levels=2, resolution=8, res_blocks=2, zero_init_head=False), seed=0)
    x, target = rand(1, 4, 8, 8, 8, seed=5), rand(1, 4, 8, 8, 8, seed=6)
    loss_fn = lambda: ((m(x, 17) - target) ** 2).mean()
    from voxdiff.nn import parameter_grads

    grads = parameter_grads(loss_fn(), m)
    named = dict(m.named_parameters())
    names = list(named)
    rng = np.random.default_rng(0)
    worst, checked = 0.0, 0
    while checked < 20:
        n = names[rng.integers(len(names))]
        k = int(rng.integers(named[n].numel()))
        an = grads[n].reshape(-1)[k].item()
        if abs(an) < 1e-8:
            continue
        flat = named[n].data.view(-1)
        old = flat[k].item()

        def f(dh):
            flat[k] = old + dh
            with torch.no_grad():
                v = loss_fn().item()
            flat[k] = old
            return v

        fd = test_nn.richardson(f, 1e-4)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
        checked += 1
    ok = ops_ok and worst <= 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    acceptance(4, "autodiff suite", ok, f"ops (tol 1e-5): {detail}; U-Net 20 params max rel err {worst:.2e} (tol 1e-4)",
               time.time() - t, 120)


def test_criterion_5_schedule_invariants(acceptance):
    t = time.time()
    checks = {}
    for kind in ("cosine", "linear"):
        for T in (4, 64, 1000):
            s = NoiseSchedule(T, kind)
            checks[f"{kind}{T}-unit"] = float(np.max(np.abs(s.alpha**2 + s.sigma**2 - 1))) <= 1e-12
            checks[f"{kind}{T}-snr"] = bool(np.all(np.diff(s.snr(np.arange(T + 1))) < 0))
    sch = ChannelSchedules(NoiseSchedule(64), NoiseSchedule(64, "linear"))
    rng = np.random.default_rng(0)
    V = rng.normal(size=(2, 4, 3, 3, 3))
    checks["perturb-identity"] = np.array_equal(perturb(V, [0, 0], rng.normal(size=V.shape), sch), V)
    checks["posterior-collapse"] = np.array_equal(posterior_step(lambda v, i: V, 5 * V, 1, rng, sch), V)
    X = rng.standard_normal((10_000, 4, 1, 1, 1))
    out = perturb(X, np.full(10_000, 32), rng.standard_normal(X.shape), sch)
    ratios = []
    for sl, s in ((slice(0, 1), sch.density), (slice(1, 4), sch.color)):
        ratios.append(out[:, sl].var() / (s.alpha[32] ** 2 * X[:, sl].var() + s.sigma[32] ** 2))
    checks["variance-mc"] = all(abs(r - 1) < 0.05 for r in ratios)
    failed = [k for k, v in checks.items() if not v]
    acceptance(5, "schedule and diffusion invariants", not failed,
               f"{len(checks)} checks, failed {failed or 'none'}, MC variance ratios {[round(float(r), 4) for r in ratios]}",
               time.time() - t, 60)


def test_criterion_6_sampler_oracles(acceptance):
    t = time.time()
    sch = ChannelSchedules.shared(16)
    G = np.random.default_rng(3).normal(size=(1, 4, 4, 4, 4))
    det = ancestral_sample(lambda v, i: np.broadcast_to(G, v.shape), sch, make_rng(1), (2, 4, 4, 4, 4), deterministic=True)
    const_err = float(np.max(np.abs(det - G)))
    wins = test_diffusion.two_grid_wins("both", runs=20, step=100.0)
    cfg = UNetConfig(width=4, levels=1, resolution=4, res_blocks=1, zero_init_head=False)
    model = TorchDenoiser(build_model(cfg, seed=1))
    ctx = RenderContext(Normalizer(-5, 2, 1, 3))
    a = ancestral_sample(model, ChannelSchedules.shared(8), make_rng(4), (2, 4, 4, 4, 4), ctx.normalizer)
    b = guided_sample(model, ChannelSchedules.shared(8), GuidanceConfig(K=0), None, make_rng(4), (2, 4, 4, 4, 4), ctx)
    k0 = a.tobytes() == b.tobytes()
    ok = const_err <= 1e-6 and wins >= 19 and k0
    acceptance(6, "sampler oracles", ok,
               f"constant oracle err {const_err:.1e} (tol 1e-6); two-grid guided picks conditioned grid {wins}/20 "
               f"(need >= 19); K=0 bit-exact {k0}", time.time() - t, 120)


def test_criterion_7_overfit(acceptance):
    t = time.time()
    torch.set_num_threads(1)
    grids = [voxelize_scene(random_scene(s), 8) for s in range(4)]
    data, norm = normalize_dataset(grids_to_batch(grids))
    sch = ChannelSchedules.shared(64)
    unet = UNetConfig(width=8, levels=2, resolution=8, dtype="float32")
    tr = Trainer(data, unet, TrainConfig(lr=1e-3, batch_size=8, iterations=2000, warmup=100, seed=0), sch, norm).run()
    sm = smoothed([r.loss for r in tr.trace], 100)
    ratio = sm[-1] / sm[0]
    samples = ancestral_sample(TorchDenoiser(tr.model), sch, make_rng(0, 9), (8, 4, 8, 8, 8))
    fresh = norm.normalize(grids_to_batch([voxelize_scene(random_scene(100 + k), 8) for k in range(8)]))
    wins = 0
    for k in range(8):
        d_train = min(np.linalg.norm(samples[k] - d) for d in data)
        wins += d_train < np.linalg.norm(samples[k] - fresh[k])
    ok = ratio < 0.2 and wins >= 6
    acceptance(7, "overfit generation", ok,
               f"smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f} (ratio {ratio:.3f}, need < 0.2); "
               f"samples nearer a training grid {wins}/8 (need >= 6)", time.time() - t, 900)


def test_criterion_8_variant_equivalences(acceptance):
    t = time.time()
    rng = np.random.default_rng(0)
    V = rng.normal(size=(3, 4, 4, 4, 4))
    eps = rng.normal(size=V.shape)
    i = np.array([1, 32, 64])
    sep = perturb(V, i, eps, ChannelSchedules(NoiseSchedule(64), NoiseSchedule(64)))
    shared_ok = sep.tobytes() == perturb_shared(V, i, eps, NoiseSchedule(64)).tobytes()
    sch = ChannelSchedules.shared(16)
    Vt, et = torch.as_tensor(V), torch.as_tensor(eps)
    model = build_model(UNetConfig(width=4, levels=1, resolution=4, res_blocks=1, zero_init_head=False), seed=0)
    same = True
    for w in ("simple", "snr"):
        base = diffusion_loss(model, Vt, [1, 7, 16], et, LossConfig(w), sch)
        vis = diffusion_loss(model, Vt, [1, 7, 16], et, LossConfig(w, visibility=True, tau=math.inf), sch)
        same &= base.item() == vis.item()
    acceptance(8, "variant equivalences", shared_ok and same,
               f"separate==shared perturbation bit-exact {shared_ok}; visibility(tau=inf)==base bit-exact {same}",
               time.time() - t, 10)


SMOKE = [
    "--set", "dataset.n_scenes=2", "--set", "dataset.n_views=4", "--set", "dataset.resolution=8",
    "--set", "dataset.image_size=16", "--set", "fit.iterations=30", "--set", "fit.rays_per_step=256",
    "--set", "fit.heldout_views=1", "--set", "unet.width=4", "--set", "unet.levels=1", "--set", "unet.res_blocks=1",
    "--set", "schedule.T=8", "--set", "train.iterations=20", "--set", "train.batch_size=2", "--set", "train.warmup=5",
    "--set", "guidance.K=1", "--seed", "11",
]


def _pipeline(out: Path) -> bool:
    args = SMOKE + ["--out", str(out)]
    ck = str(out / "model.vxck")
    steps = [
        ["dataset", "build"], ["fit"], ["train"], ["sample", "--count", "2", "--checkpoint", ck],
        ["reconstruct", "--scene", "scene_0001", "--view", "3", "--checkpoint", ck],
    ]
    return all(cli_main(s + args) == 0 for s in steps)


def test_criterion_9_determinism(acceptance, tmp_path):
    t = time.time()
    ran = _pipeline(tmp_path / "a") and _pipeline(tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    differ = [str(f) for f in files_a if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    identical = ran and files_a == files_b and not differ
    kinds = sorted({f.suffix for f in files_a})

    rt = {}
    ds = SceneDataset(tmp_path / "a" / "dataset")
    g = ds.fitted_grid(0)
    grid_write(g, tmp_path / "g.vxgr")
    rt["grid"] = grid_read(tmp_path / "g.vxgr").data.tobytes() == g.data.tobytes()
    ck = load_checkpoint(tmp_path / "a" / "model.vxck")
    save_checkpoint(ck, tmp_path / "c.vxck")
    rt["checkpoint"] = (tmp_path / "c.vxck").read_bytes() == (tmp_path / "a" / "model.vxck").read_bytes()
    img = ds.views(0, [0])[0][1]
    write_ppm(tmp_path / "i.ppm", img)
    rt["ppm"] = read_ppm(tmp_path / "i.ppm").tobytes() == img.tobytes()
    f32 = img.astype(np.float32)
    write_pfm(tmp_path / "i.pfm", f32)
    rt["pfm"] = read_pfm(tmp_path / "i.pfm").tobytes() == f32.tobytes()
    m = ds.manifest
    from voxdiff.scenegen import write_manifest

    (tmp_path / "m").mkdir()
    write_manifest(tmp_path / "m", m)
    rt["manifest"] = (tmp_path / "m" / "manifest.json").read_bytes() == (tmp_path / "a" / "dataset" / "manifest.json").read_bytes()
    ok = identical and all(rt.values())
    acceptance(9, "determinism and persistence", ok,
               f"{len(files_a)} files ({', '.join(kinds)}) byte-identical across runs: {identical}"
               f"{' differ: ' + ', '.join(differ) if differ else ''}; round-trips {rt}", time.time() - t, 300)
