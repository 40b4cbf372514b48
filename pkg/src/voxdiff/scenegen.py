"""Procedural scenes of spheres and boxes, their ground-truth grids, and posed-image datasets."""

from __future__ import annotations

import json
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._rng import derive_seed, make_rng
from .camera import DEFAULT_RADIUS, CameraPose, Intrinsics, default_intrinsics, sample_spherical_poses
from .images import read_ppm, write_ppm
from .render import QuadratureConfig, render_image
from .voxgrid import (
    DEFAULT_BOUNDS, ActivationParams, VoxelGrid, file_crc32, grid_read, grid_write, logit, raw_from_density,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
MAX_PRIMITIVES = 16
EMPTY_ALBEDO = 0.99

PALETTE = (
    (0.85, 0.12, 0.10),
    (0.10, 0.65, 0.15),
    (0.12, 0.20, 0.85),
    (0.90, 0.80, 0.10),
    (0.75, 0.15, 0.75),
    (0.10, 0.75, 0.80),
    (0.95, 0.50, 0.05),
    (0.15, 0.15, 0.15),
)


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: Tuple[float, float, float]
    size: Tuple[float, ...]
    albedo: Tuple[float, float, float]
    density: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        size = (self.size,) if np.isscalar(self.size) else self.size
        object.__setattr__(self, "size", tuple(float(s) for s in size))
        object.__setattr__(self, "albedo", tuple(float(c) for c in self.albedo))
        object.__setattr__(self, "density", float(self.density))
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if len(self.center) != 3:
            raise ValueError("center must be a 3-vector")
        if len(self.size) != (1 if self.kind == "sphere" else 3) or min(self.size) <= 0:
            raise ValueError("sphere size is one positive radius, box size three positive half-extents")
        if len(self.albedo) != 3 or not all(0.0 < c < 1.0 for c in self.albedo):
            raise ValueError("albedo components must lie in (0, 1)")
        if not (self.density > 0 and math.isfinite(self.density)):
            raise ValueError("density must be positive")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        if self.kind == "sphere":
            return np.sum(d * d, axis=-1) <= self.size[0] ** 2
        return np.all(np.abs(d) <= np.asarray(self.size), axis=-1)

    def intersects_bounds(self, bounds=DEFAULT_BOUNDS) -> bool:
        lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
        c = np.asarray(self.center)
        if self.kind == "sphere":
            nearest = np.clip(c, lo, hi)
            return float(np.sum((nearest - c) ** 2)) <= self.size[0] ** 2
        half = np.asarray(self.size)
        return bool(np.all(c - half <= hi) and np.all(c + half >= lo))


@dataclass(frozen=True)
class SceneSpec:
    primitives: Tuple[Primitive, ...]
    seed: int = 0

    def __post_init__(self):
        prims = tuple(self.primitives)
        object.__setattr__(self, "primitives", prims)
        if not 1 <= len(prims) <= MAX_PRIMITIVES:
            raise ValueError(f"scene needs 1..{MAX_PRIMITIVES} primitives, got {len(prims)}")
        for p in prims:
            if not p.intersects_bounds():
                raise ValueError(f"primitive at {p.center} lies entirely outside the scene bounds")

    def to_json(self) -> dict:
        return {"seed": self.seed, "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        return cls(tuple(Primitive(**p) for p in obj["primitives"]), obj.get("seed", 0))


def random_scene(seed: int) -> SceneSpec:
    rng = make_rng(seed, 11)
    count = int(rng.integers(1, 5))
    prims = []
    for _ in range(count):
        kind = "sphere" if rng.random() < 0.5 else "box"
        center = rng.uniform(-0.45, 0.45, 3)
        size = (rng.uniform(0.2, 0.5),) if kind == "sphere" else tuple(rng.uniform(0.15, 0.45, 3))
        albedo = PALETTE[int(rng.integers(len(PALETTE)))]
        density = rng.uniform(20.0, 200.0)
        prims.append(Primitive(kind, tuple(center), size, albedo, density))
    return SceneSpec(tuple(prims), seed)


def voxelize_scene(spec: SceneSpec, resolution: int, act: ActivationParams = ActivationParams(),
                   bounds=DEFAULT_BOUNDS) -> VoxelGrid:
    """Raw grid whose voxel centers take the first containing primitive's density and albedo."""
    empty = VoxelGrid.filled(resolution, act.d_min, float(logit(EMPTY_ALBEDO)), bounds)
    centers = empty.voxel_centers()
    data = np.array(empty.data)
    claimed = np.zeros(centers.shape[:3], dtype=bool)
    for prim in spec.primitives:
        inside = prim.contains(centers) & ~claimed
        data[inside, 0] = raw_from_density(prim.density, act)
        data[inside, 1:] = logit(np.clip(prim.albedo, 0.01, 0.99))
        claimed |= inside
    return VoxelGrid(data, bounds)


@dataclass
class DatasetConfig:
    n_scenes: int = 64
    n_views: int = 64
    resolution: int = 16
    image_size: int = 64
    radius: float = DEFAULT_RADIUS
    seed: int = 0
    activation: ActivationParams = field(default_factory=ActivationParams)
    n_samples: Optional[int] = None

    def quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(n_samples=self.n_samples or 2 * self.resolution)

    def intrinsics(self) -> Intrinsics:
        return default_intrinsics(self.image_size, self.radius)


def _build_scene(args):
    index, cfg, tmp_root = args
    scene_id = f"scene_{index:04d}"
    scene_seed = derive_seed(cfg.seed, 1, index)
    spec = random_scene(scene_seed)
    # quantize to the on-disk precision first so stored images are reproducible from the stored grid
    grid = voxelize_scene(spec, cfg.resolution, cfg.activation).astype(np.float32)
    rel = Path("scenes") / scene_id
    (tmp_root / rel / "views").mkdir(parents=True, exist_ok=True)
    grid_path = rel / "grid.vxgr"
    grid_write(grid, tmp_root / grid_path)
    poses = sample_spherical_poses(cfg.n_views, cfg.radius, derive_seed(cfg.seed, 2, index))
    intr, quad = cfg.intrinsics(), cfg.quadrature()
    views = []
    for j, pose in enumerate(poses):
        img_path = rel / "views" / f"view_{j:03d}.ppm"
        write_ppm(tmp_root / img_path, render_image(grid, pose, intr, quad, cfg.activation))
        views.append({**pose.to_json(), "image": {"path": img_path.as_posix(), "crc32": file_crc32(tmp_root / img_path)}})
    return {
        "id": scene_id,
        "spec": spec.to_json(),
        "grid": {"path": grid_path.as_posix(), "crc32": file_crc32(tmp_root / grid_path)},
        "views": views,
        "fitted_grid": None,
    }


def _config_json(cfg: DatasetConfig) -> dict:
    return {
        "n_scenes": cfg.n_scenes,
        "n_views": cfg.n_views,
        "resolution": cfg.resolution,
        "image_size": cfg.image_size,
        "radius": cfg.radius,
        "seed": cfg.seed,
        "bounds": [list(DEFAULT_BOUNDS[0]), list(DEFAULT_BOUNDS[1])],
        "activation": asdict(cfg.activation),
        "quadrature": {"n_samples": cfg.quadrature().n_samples, "background": list(cfg.quadrature().background)},
        "intrinsics": cfg.intrinsics().to_json(),
    }


def write_manifest(root, manifest: dict) -> None:
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    tmp = Path(root) / (MANIFEST_NAME + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, Path(root) / MANIFEST_NAME)


def build_dataset(cfg: DatasetConfig, out_dir, jobs: int = 1) -> "SceneDataset":
    """Build scenes, ground-truth grids and rendered views under ``out_dir``.

    Work happens in a sibling staging directory that is renamed into place at the end,
    so a failure never leaves a partial dataset behind.
    """
    if cfg.n_scenes < 1 or cfg.n_views < 1:
        raise ValueError("n_scenes and n_views must be >= 1")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"{out_dir} exists and is not empty")
    staging = out_dir.with_name(out_dir.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        tasks = [(i, cfg, staging) for i in range(cfg.n_scenes)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                entries = list(pool.map(_build_scene, tasks))
        else:
            entries = [_build_scene(t) for t in tasks]
        write_manifest(staging, {"schema_version": MANIFEST_VERSION, "config": _config_json(cfg), "scenes": entries})
        if out_dir.exists():
            out_dir.rmdir()
        os.replace(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return SceneDataset(out_dir)


class DatasetError(ValueError):
    pass


class SceneDataset:
    """Read access to a dataset directory and its manifest."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / MANIFEST_NAME
        if not path.is_file():
            raise DatasetError(f"no {MANIFEST_NAME} in {self.root}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("schema_version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest schema {self.manifest.get('schema_version')}")

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    @property
    def scene_ids(self) -> List[str]:
        return [s["id"] for s in self.manifest["scenes"]]

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(**self.config["intrinsics"])

    @property
    def activation(self) -> ActivationParams:
        return ActivationParams(**self.config["activation"])

    @property
    def quadrature(self) -> QuadratureConfig:
        q = self.config["quadrature"]
        return QuadratureConfig(n_samples=q["n_samples"], background=tuple(q["background"]))

    def scene(self, scene_id) -> dict:
        if isinstance(scene_id, int):
            return self.manifest["scenes"][scene_id]
        for s in self.manifest["scenes"]:
            if s["id"] == scene_id:
                return s
        raise KeyError(f"unknown scene {scene_id!r}")

    def spec(self, scene_id) -> SceneSpec:
        return SceneSpec.from_json(self.scene(scene_id)["spec"])

    def grid(self, scene_id) -> VoxelGrid:
        return grid_read(self.root / self.scene(scene_id)["grid"]["path"])

    def fitted_grid(self, scene_id) -> Optional[VoxelGrid]:
        entry = self.scene(scene_id)["fitted_grid"]
        return None if entry is None else grid_read(self.root / entry["path"])

    def poses(self, scene_id) -> List[CameraPose]:
        return [CameraPose.from_json(v) for v in self.scene(scene_id)["views"]]

    def views(self, scene_id, indices: Optional[Sequence[int]] = None) -> List[Tuple[CameraPose, np.ndarray]]:
        entries = self.scene(scene_id)["views"]
        if indices is None:
            indices = range(len(entries))
        return [(CameraPose.from_json(entries[j]), read_ppm(self.root / entries[j]["image"]["path"])) for j in indices]

    def set_fitted_grid(self, scene_id, grid: VoxelGrid) -> Path:
        entry = self.scene(scene_id)
        rel = Path("scenes") / entry["id"] / "fitted.vxgr"
        grid_write(grid, self.root / rel)
        entry["fitted_grid"] = {"path": rel.as_posix(), "crc32": file_crc32(self.root / rel)}
        write_manifest(self.root, self.manifest)
        return self.root / rel

    def verify(self) -> List[str]:
        """Return a list of problems (missing files, checksum mismatches, count mismatches)."""
        problems = []
        n_views = self.config["n_views"]

        def check(entry, what):
            p = self.root / entry["path"]
            if not p.is_file():
                problems.append(f"{what}: missing {entry['path']}")
            elif file_crc32(p) != entry["crc32"]:
                problems.append(f"{what}: checksum mismatch for {entry['path']}")

        if len(self.manifest["scenes"]) != self.config["n_scenes"]:
            problems.append("scene count does not match config")
        for s in self.manifest["scenes"]:
            check(s["grid"], s["id"])
            if s["fitted_grid"] is not None:
                check(s["fitted_grid"], s["id"])
            if len(s["views"]) != n_views:
                problems.append(f"{s['id']}: {len(s['views'])} views, expected {n_views}")
            for v in s["views"]:
                check(v["image"], s["id"])
        return problems
