"""Command-line entry point: ``voxdiff <command> [options]``.

Exit codes: 0 success, 1 bad input (flags, config, missing or corrupt files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from ._rng import derive_seed, make_rng
from .camera import Intrinsics, default_intrinsics, orbit_pose, spiral_poses
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_schema, load_config
from .diffusion import (
    GuidanceConfig, NonFiniteError, Observation, RenderContext, TorchDenoiser, batch_to_grids, grids_to_batch, guided_sample,
    normalize_dataset,
)
from .fit import NonFiniteLossError, fit_relufield, initial_grid, write_trace_csv as write_fit_trace
from .images import read_pfm, read_ppm, write_pfm, write_ppm
from .render import QuadratureConfig, psnr, render_image
from .scenegen import DatasetError, SceneDataset, build_dataset
from .selfcheck import run_checks
from .train import Trainer, write_trace_csv as write_train_trace
from .voxgrid import GridIOError, grid_read, grid_write

log = logging.getLogger("voxdiff")


class InputError(Exception):
    """Bad user input: reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _worker_cap(requested: int) -> int:
    cap = os.environ.get("VOXDIFF_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError as exc:
            raise InputError(f"VOXDIFF_THREADS must be an integer, got {cap!r}") from exc
    return max(1, requested)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field (value parsed as JSON); repeatable")
    p.add_argument("--seed", type=int, default=0, help="root seed for every random draw")
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory for all outputs")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (capped by VOXDIFF_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _dataset_dir(args, cfg: RunConfig, flag: Optional[Path] = None) -> Path:
    if flag is not None:
        return flag
    if cfg.section("io")["dataset"]:
        return Path(cfg.section("io")["dataset"])
    return args.out / "dataset"


def _write_run_json(args, cfg: RunConfig) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    record = {
        "version": __version__,
        "command": args.command_name,
        "seed": args.seed,
        "config": cfg.to_json(),
    }
    (args.out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_dataset(args, cfg: RunConfig) -> int:
    out = _dataset_dir(args, cfg, args.dataset_dir)
    ds = build_dataset(cfg.dataset_config(args.seed), out, jobs=_worker_cap(args.jobs))
    print(f"built {len(ds.scene_ids)} scenes x {ds.config['n_views']} views in {out}")
    return 0


def _fit_one(task):
    root, scene_id, index, fit_cfg, heldout, regularize = task
    ds = SceneDataset(root)
    views = ds.views(scene_id)
    if heldout >= len(views):
        raise InputError(f"fit.heldout_views={heldout} leaves no training views ({len(views)} available)")
    train, held = views[: len(views) - heldout], views[len(views) - heldout:]
    res = fit_relufield(train, ds.intrinsics, initial_grid(ds.config["resolution"], fit_cfg.init_density, fit_cfg.c_raw),
                        fit_cfg, ds.activation, held, regularize=regularize)
    return scene_id, np.asarray(res.grid.data, dtype=np.float32), res.trace, res.heldout_psnr


def cmd_fit(args, cfg: RunConfig) -> int:
    root = _dataset_dir(args, cfg, args.dataset)
    ds = SceneDataset(root)
    ids = ds.scene_ids if args.scene is None else [ds.scene(args.scene)["id"]]
    f = cfg.section("fit")
    tasks = []
    for sid in ids:
        index = ds.scene_ids.index(sid)
        fc = replace(cfg.fit_config(derive_seed(args.seed, 4, index)), n_samples=ds.quadrature.n_samples)
        tasks.append((root, sid, index, fc, f["heldout_views"], f["regularize"]))
    jobs = _worker_cap(args.jobs)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_one, tasks))
    else:
        results = [_fit_one(t) for t in tasks]
    trace_dir = args.out / "fit"
    trace_dir.mkdir(parents=True, exist_ok=True)
    for sid, data, trace, held in results:
        path = ds.set_fitted_grid(sid, ds.grid(sid).with_data(data))
        write_fit_trace(trace_dir / f"{sid}.csv", trace)
        msg = f"{sid}: final loss {trace[-1][4]:.6f}"
        if held is not None:
            msg += f", held-out PSNR {held:.2f} dB"
        print(f"{msg} -> {path}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    ds = SceneDataset(_dataset_dir(args, cfg, args.dataset))
    source = cfg.section("train")["source"]
    grids = []
    for sid in ds.scene_ids:
        g = ds.fitted_grid(sid) if source == "fitted" else ds.grid(sid)
        if g is None:
            raise InputError(f"scene {sid} has no fitted grid; run `fit` first or set train.source=\"ground_truth\"")
        grids.append(g)
    data, norm = normalize_dataset(grids_to_batch(grids))
    tcfg = cfg.train_config(args.seed)
    ckpt_path = args.out / "model.vxck"
    args.out.mkdir(parents=True, exist_ok=True)
    if args.resume is not None:
        trainer = Trainer.resume(load_checkpoint(args.resume), data, tcfg)
    else:
        trainer = Trainer(data, cfg.unet_config(ds.config["resolution"]), tcfg, cfg.schedules(), norm)

    def report(row):
        if args.verbose and (row.step % 50 == 0 or row.step + 1 == tcfg.iterations):
            log.info("step %d loss %.6f grad norm %.3f lr %.2e", row.step, row.loss, row.grad_norm, row.lr)

    trainer.run(ckpt_path=ckpt_path, callback=report)
    write_train_trace(args.out / "train_trace.csv", trainer.trace)
    print(f"trained {trainer.step} steps, final loss {trainer.trace[-1].loss:.6f} -> {ckpt_path}")
    return 0


def _load_model(path: Path):
    ckpt = load_checkpoint(path)
    model = ckpt.build()
    model.eval()
    return ckpt, TorchDenoiser(model)


def _render_context(ckpt, act, n_samples: int) -> RenderContext:
    return RenderContext(ckpt.normalizer, QuadratureConfig(n_samples), act)


def cmd_sample(args, cfg: RunConfig) -> int:
    if args.count < 1:
        raise InputError("--count must be >= 1")
    ckpt, model = _load_model(args.checkpoint)
    R = ckpt.unet.resolution
    rng = make_rng(args.seed, 6)
    ctx = _render_context(ckpt, cfg.activation(), 2 * R)
    g = cfg.section("guidance")
    out = guided_sample(model, ckpt.schedules, GuidanceConfig(K=0), None, rng, (args.count, 4, R, R, R), ctx,
                        deterministic=g["deterministic"])
    sample_dir = args.out / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    for k, grid in enumerate(batch_to_grids(out)):
        path = sample_dir / f"sample_{k:03d}.vxgr"
        grid_write(grid, path)
        print(path)
    return 0


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    ds = SceneDataset(_dataset_dir(args, cfg, args.dataset))
    entry = ds.scene(args.scene)
    n_views = len(entry["views"])
    if not 0 <= args.view < n_views:
        raise InputError(f"--view must be in [0, {n_views - 1}]")
    ckpt, model = _load_model(args.checkpoint)
    R = ckpt.unet.resolution
    if R != ds.config["resolution"]:
        raise InputError(f"checkpoint resolution {R} does not match dataset resolution {ds.config['resolution']}")
    pose, image = ds.views(entry["id"], [args.view])[0]
    obs = Observation(pose, image, ds.intrinsics)
    ctx = RenderContext(ckpt.normalizer, ds.quadrature, ds.activation)
    out = guided_sample(model, ckpt.schedules, cfg.guidance_config(), obs, make_rng(args.seed, 8), (1, 4, R, R, R), ctx,
                        deterministic=cfg.section("guidance")["deterministic"])
    grid = batch_to_grids(out)[0]
    rec_dir = args.out / "reconstruct"
    rec_dir.mkdir(parents=True, exist_ok=True)
    path = rec_dir / f"{entry['id']}_view{args.view:03d}.vxgr"
    grid_write(grid, path)
    others = [j for j in range(n_views) if j != args.view]
    scores = [psnr(render_image(grid, p, ds.intrinsics, ds.quadrature, ds.activation), img)
              for p, img in ds.views(entry["id"], others)]
    input_psnr = psnr(render_image(grid, pose, ds.intrinsics, ds.quadrature, ds.activation), image)
    print(f"{entry['id']} view {args.view}: input-view PSNR {input_psnr:.2f} dB, novel-view PSNR {np.mean(scores):.2f} dB "
          f"over {len(scores)} views -> {path}")
    n_spiral = cfg.section("io")["spiral_views"]
    if n_spiral:
        sp_dir = rec_dir / f"{entry['id']}_view{args.view:03d}_spiral"
        sp_dir.mkdir(exist_ok=True)
        for k, p in enumerate(spiral_poses(n_spiral, ds.config["radius"])):
            write_ppm(sp_dir / f"frame_{k:03d}.ppm", render_image(grid, p, ds.intrinsics, ds.quadrature, ds.activation))
    return 0


def _parse_pose(text: str):
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise InputError(f"--pose expects az,el[,radius] in degrees, got {text!r}") from exc
    if len(parts) not in (2, 3):
        raise InputError(f"--pose expects az,el[,radius] in degrees, got {text!r}")
    return orbit_pose(*parts)


def cmd_render(args, cfg: RunConfig) -> int:
    grid = grid_read(args.grid)
    size = args.size or cfg.section("dataset")["image_size"]
    radius = float(args.pose.split(",")[2]) if args.pose.count(",") == 2 else cfg.section("dataset")["radius"]
    pose = _parse_pose(args.pose)
    intr = default_intrinsics(size, radius)
    n = args.samples or cfg.section("dataset")["n_samples"] or 2 * grid.resolution
    img = render_image(grid, pose, intr, QuadratureConfig(n), cfg.activation())
    out = args.image or (args.out / "render.ppm")
    out.parent.mkdir(parents=True, exist_ok=True)
    (write_pfm if out.suffix.lower() == ".pfm" else write_ppm)(out, img)
    print(out)
    return 0


def _read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    return read_pfm(path) if path.suffix.lower() == ".pfm" else read_ppm(path)


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.images:
        if len(args.images) != 2:
            raise InputError("eval psnr takes exactly two images, or --grid with --scene")
        a, b = (_read_image(p) for p in args.images)
        print(f"{psnr(a, b):.4f}")
        return 0
    if args.grid is None or args.scene is None:
        raise InputError("eval psnr needs two images, or --grid and --scene")
    ds = SceneDataset(_dataset_dir(args, cfg, args.dataset))
    grid = grid_read(args.grid)
    scores = [psnr(render_image(grid, p, ds.intrinsics, ds.quadrature, ds.activation), img) for p, img in ds.views(args.scene)]
    print(f"{np.mean(scores):.4f}")
    return 0


def cmd_verify(args, cfg: RunConfig) -> int:
    ok = run_checks()
    if args.dataset is not None:
        problems = SceneDataset(args.dataset).verify()
        for p in problems:
            print(f"FAIL dataset: {p}")
        if not problems:
            print(f"PASS dataset: {args.dataset} files present and checksums match")
        ok &= not problems
    return 0 if ok else 2


def cmd_config(args, cfg: RunConfig) -> int:
    doc = config_schema() if args.schema else cfg.to_json()
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="voxdiff", description="Voxel radiance fields with a 3D diffusion prior.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"voxdiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="procedural dataset commands", formatter_class=fmt)
    ds_sub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = ds_sub.add_parser("build", help="render a procedural posed-image dataset", formatter_class=fmt)
    _common(b)
    b.add_argument("--dataset-dir", type=Path, default=None, help="dataset directory (default: OUT/dataset)")
    b.set_defaults(func=cmd_dataset)

    f = sub.add_parser("fit", help="fit regularized grids to each scene's views", formatter_class=fmt)
    _common(f)
    f.add_argument("--dataset", type=Path, default=None, help="dataset directory (default: io.dataset or OUT/dataset)")
    f.add_argument("--scene", default=None, help="fit only this scene id (default: all)")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("train", help="train the denoiser on fitted grids", formatter_class=fmt)
    _common(t)
    t.add_argument("--dataset", type=Path, default=None, help="dataset directory (default: io.dataset or OUT/dataset)")
    t.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw unconditional grids from a trained denoiser", formatter_class=fmt)
    _common(s)
    s.add_argument("--count", type=int, default=1, help="number of grids")
    s.add_argument("--checkpoint", type=Path, required=True, help="denoiser checkpoint")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("reconstruct", help="guided sampling from one posed view of a scene", formatter_class=fmt)
    _common(r)
    r.add_argument("--dataset", type=Path, default=None, help="dataset directory (default: io.dataset or OUT/dataset)")
    r.add_argument("--scene", required=True, help="scene id")
    r.add_argument("--view", type=int, required=True, help="index of the conditioning view")
    r.add_argument("--checkpoint", type=Path, required=True, help="denoiser checkpoint")
    r.set_defaults(func=cmd_reconstruct)

    rd = sub.add_parser("render", help="render a grid file from an orbit pose", formatter_class=fmt)
    _common(rd)
    rd.add_argument("--grid", type=Path, required=True, help="grid file")
    rd.add_argument("--pose", required=True, help="azimuth,elevation[,radius] in degrees and world units")
    rd.add_argument("--size", type=int, default=None, help="image side in pixels (default: dataset.image_size)")
    rd.add_argument("--samples", type=int, default=None, help="samples per ray (default: 2R)")
    rd.add_argument("--image", type=Path, default=None, help="output .ppm or .pfm (default: OUT/render.ppm)")
    rd.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="evaluation commands", formatter_class=fmt)
    ev_sub = ev.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ps = ev_sub.add_parser("psnr", help="PSNR of two images, or of a grid against a scene's views", formatter_class=fmt)
    _common(ps)
    ps.add_argument("images", nargs="*", type=Path, help="two image files")
    ps.add_argument("--grid", type=Path, default=None, help="grid file to render")
    ps.add_argument("--scene", default=None, help="scene id whose views are the references")
    ps.add_argument("--dataset", type=Path, default=None, help="dataset directory (default: io.dataset or OUT/dataset)")
    ps.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run numerical self-checks", formatter_class=fmt)
    _common(v)
    v.add_argument("--dataset", type=Path, default=None, help="also verify this dataset's files and checksums")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("config", help="print the resolved configuration or its JSON schema", formatter_class=fmt)
    _common(c)
    c.add_argument("--schema", action="store_true", help="print the JSON schema instead")
    c.set_defaults(func=cmd_config)
    return p


_INPUT_ERRORS = (InputError, ConfigError, GridIOError, CheckpointError, DatasetError, FileExistsError, FileNotFoundError, KeyError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1 (see _Parser.error), --help and --version exit 0
        return exc.code if isinstance(exc.code, int) else 0
    args.command_name = " ".join(x for x in (args.command, getattr(args, "action", None)) if x)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("VOXDIFF_THREADS")
    if threads and threads.isdigit() and int(threads) > 0:
        torch.set_num_threads(int(threads))
    try:
        if args.jobs < 1:
            raise InputError("--jobs must be >= 1")
        cfg = load_config(args.config, args.overrides)
        if args.command not in ("verify", "config"):
            _write_run_json(args, cfg)
        return args.func(args, cfg)
    except _INPUT_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"voxdiff {args.command_name}: error: {msg}", file=sys.stderr)
        return 1
    except (NonFiniteError, NonFiniteLossError) as exc:
        print(f"voxdiff {args.command_name}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"voxdiff {args.command_name}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
