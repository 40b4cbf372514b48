import json
import math

import numpy as np
import pytest

from voxdiff.render import psnr, render_image
from voxdiff.scenegen import (
    DatasetConfig, Primitive, SceneDataset, SceneSpec, build_dataset, random_scene, voxelize_scene,
)
from voxdiff.voxgrid import ActivationParams, density_from_raw, grid_read


def test_random_scene_deterministic_and_valid():
    counts = set()
    for seed in range(1000):
        a = random_scene(seed)
        assert a == random_scene(seed)
        assert 1 <= len(a.primitives) <= 4
        for p in a.primitives:
            assert 20 <= p.density <= 200 and p.intersects_bounds()
        counts.add(len(a.primitives))
    assert len(counts) >= 2


def test_outside_primitive_rejected():
    with pytest.raises(ValueError):
        SceneSpec((Primitive("sphere", (3.0, 0, 0), 0.5, (0.5, 0.5, 0.5), 50.0),))
    with pytest.raises(ValueError):
        SceneSpec(())


def test_sphere_volume_fraction():
    spec = SceneSpec((Primitive("sphere", (0, 0, 0), 0.5, (0.2, 0.3, 0.4), 50.0),))
    g = voxelize_scene(spec, 32)
    frac = np.mean(g.data[..., 0] > -10.0)
    assert abs(frac - math.pi / 48) / (math.pi / 48) < 0.15


def test_voxelize_values():
    act = ActivationParams()
    spec = SceneSpec((
        Primitive("box", (0, 0, 0), (0.5, 0.5, 0.5), (0.2, 0.3, 0.995), 77.0),
        Primitive("sphere", (0, 0, 0), 0.9, (0.5, 0.5, 0.5), 150.0),
    ))
    g = voxelize_scene(spec, 8, act)
    inner = g.data[3:5, 3:5, 3:5]
    np.testing.assert_allclose(density_from_raw(inner[..., 0], act), 77.0, rtol=1e-9)  # first primitive wins
    np.testing.assert_allclose(1 / (1 + np.exp(-inner[0, 0, 0, 1:])), [0.2, 0.3, 0.99], rtol=1e-12)
    assert g.data[0, 0, 0, 0] == act.d_min
    assert g.data[0, 0, 0, 1] == pytest.approx(math.log(0.99 / 0.01))


def small_cfg(**kw):
    base = dict(n_scenes=2, n_views=3, resolution=8, image_size=12, seed=7)
    base.update(kw)
    return DatasetConfig(**base)


def test_build_dataset(tmp_path):
    ds = build_dataset(small_cfg(), tmp_path / "ds")
    assert len(ds.scene_ids) == 2
    assert all(len(ds.poses(s)) == 3 for s in ds.scene_ids)
    assert ds.verify() == []
    assert not (tmp_path / "ds.partial").exists()
    for s in ds.scene_ids:
        grid = ds.grid(s)
        for pose, img in ds.views(s):
            again = render_image(grid, pose, ds.intrinsics, ds.quadrature, ds.activation)
            assert psnr(np.round(again * 255) / 255, img) == 99.0


def test_build_dataset_deterministic(tmp_path):
    build_dataset(small_cfg(), tmp_path / "a")
    build_dataset(small_cfg(), tmp_path / "b", jobs=2)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_build_dataset_refuses_nonempty(tmp_path):
    (tmp_path / "ds").mkdir()
    (tmp_path / "ds" / "x").write_text("x")
    with pytest.raises(FileExistsError):
        build_dataset(small_cfg(), tmp_path / "ds")


def test_verify_detects_corruption(tmp_path):
    ds = build_dataset(small_cfg(n_scenes=1), tmp_path / "ds")
    img = tmp_path / "ds" / ds.scene(0)["views"][1]["image"]["path"]
    blob = bytearray(img.read_bytes())
    blob[-1] ^= 1
    img.write_bytes(bytes(blob))
    (tmp_path / "ds" / ds.scene(0)["grid"]["path"]).unlink()
    problems = SceneDataset(tmp_path / "ds").verify()
    assert any("checksum" in p for p in problems) and any("missing" in p for p in problems)


def test_fitted_grid_recorded(tmp_path):
    ds = build_dataset(small_cfg(n_scenes=1), tmp_path / "ds")
    assert ds.fitted_grid(0) is None
    g = ds.grid(0)
    ds.set_fitted_grid(ds.scene_ids[0], g)
    again = SceneDataset(tmp_path / "ds")
    assert again.fitted_grid(0).data.tobytes() == g.data.tobytes()
    assert again.verify() == []
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["scenes"][0]["fitted_grid"]["path"].endswith("fitted.vxgr")
