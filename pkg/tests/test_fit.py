import math

import numpy as np
import pytest

from voxdiff.camera import default_intrinsics, sample_spherical_poses
from voxdiff.fit import (
    WHITE_RAW, AdamState, FitConfig, adam_step, color_constancy_loss, density_sparsity_loss, fit_relufield,
    initial_grid, smoothed,
)
from voxdiff.render import QuadratureConfig, photometric_loss_and_grad, render_image
from voxdiff.scenegen import Primitive, SceneSpec, voxelize_scene
from voxdiff.voxgrid import ActivationParams, VoxelGrid

from conftest import random_grid

ACT = ActivationParams()


def test_white_raw():
    assert WHITE_RAW == pytest.approx(4.59512, abs=1e-5)


def test_density_sparsity_examples():
    data = np.zeros((4, 4, 4, 4))
    data[..., 0] = -10.0
    loss, grad = density_sparsity_loss(data, -10.0)
    assert loss == 0.0 and not grad.any()
    data[1, 2, 3, 0] = -8.0
    loss, grad = density_sparsity_loss(data, -10.0)
    assert loss == 0.03125
    assert set(np.unique(grad[..., 0])) <= {0.0, 1 / 64}
    assert not grad[..., 1:].any()


def test_color_constancy_examples():
    data = np.full((1, 1, 1, 4), 3.0)
    assert color_constancy_loss(data, 3.0, 1.0)[0] == 0.0
    data[0, 0, 0, 1] = 3.5
    assert color_constancy_loss(data, 3.0, 1.0)[0] * 3 == pytest.approx(0.125)
    data[0, 0, 0, 1] = 5.0
    loss, grad = color_constancy_loss(data, 3.0, 1.0)
    assert loss * 3 == pytest.approx(1.5)
    assert grad[0, 0, 0, 1] == pytest.approx(1 / 3) and grad[0, 0, 0, 0] == 0.0


def test_losses_nonnegative(rng):
    data = rng.normal(size=(3, 3, 3, 4)) * 5
    assert density_sparsity_loss(data, -10)[0] >= 0 and color_constancy_loss(data, WHITE_RAW, 1.0)[0] >= 0


def test_adam_first_step_is_sign():
    p = np.zeros(5)
    g = np.array([1e-3, -2.0, 5.0, -1e-2, 0.3])
    new, st = adam_step(p, g, AdamState.zeros_like(p), 0.1)
    np.testing.assert_allclose(new, -0.1 * np.sign(g), rtol=1e-2)
    assert st.step == 1


def test_adam_zero_gradient():
    p = np.arange(4.0)
    new, _ = adam_step(p, np.zeros(4), AdamState.zeros_like(p), 0.1)
    assert new.tobytes() == p.tobytes()


def test_adam_repeated_gradient():
    p = np.zeros(3)
    g = np.array([0.5, -1.0, 2.0])
    st = AdamState.zeros_like(p)
    p1, st = adam_step(p, g, st, 0.01)
    p2, st = adam_step(p1, g, st, 0.01)
    assert np.all(np.abs(p2 - p1) <= np.abs(p1 - p) * 1.01)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(4), AdamState.zeros_like(np.zeros(3)), 0.1)


def test_combined_gradient_finite_difference(rng):
    g = random_grid(rng, 4)
    intr = default_intrinsics(8)
    pose = sample_spherical_poses(1, 4.0, seed=1)[0]
    views = [(pose, rng.random((8, 8, 3)))]
    quad = QuadratureConfig(8)
    lam_d, lam_c, delta = 0.3, 0.7, 1.0
    # keep residuals away from the L1 kink and the Huber switch so central differences are smooth
    data = np.array(g.data)
    data[..., 0] = np.where(np.abs(data[..., 0] + 10) < 0.01, -9.5, data[..., 0])
    r = data[..., 1:] - WHITE_RAW
    data[..., 1:] = np.where(np.abs(np.abs(r) - delta) < 0.01, data[..., 1:] + 0.05, data[..., 1:])
    g = g.with_data(data)

    def total(d):
        grid = g.with_data(d)
        lp, gp = photometric_loss_and_grad(grid, views, intr, quad)
        ld, gd = density_sparsity_loss(d, -10.0)
        lc, gc = color_constancy_loss(d, WHITE_RAW, delta)
        return lp + lam_d * ld + lam_c * lc, gp + lam_d * gd + lam_c * gc

    _, grad = total(data)
    h, worst = 1e-5, 0.0
    for k in np.ndindex(data.shape):
        if abs(grad[k]) <= 1e-8:
            continue
        p, m = data.copy(), data.copy()
        p[k] += h
        m[k] -= h
        fd = (total(p)[0] - total(m)[0]) / (2 * h)
        worst = max(worst, abs(fd - grad[k]) / max(abs(fd), abs(grad[k])))
    assert worst <= 1e-5


def toy_views(n_views, size=32, R=16):
    spec = SceneSpec((Primitive("sphere", (0.1, -0.1, 0.0), 0.5, (0.85, 0.12, 0.10), 80.0),))
    gt = voxelize_scene(spec, R)
    intr = default_intrinsics(size)
    quad = QuadratureConfig(2 * R)
    poses = sample_spherical_poses(n_views, 4.0, seed=3)
    return [(p, render_image(gt, p, intr, quad)) for p in poses], intr


def test_zero_lambda_matches_unregularized():
    views, intr = toy_views(4, size=8, R=4)
    cfg = FitConfig(iterations=5, rays_per_step=64, lambda_d=0.0, lambda_c=0.0, seed=2)
    a = fit_relufield(views, intr, initial_grid(4), cfg)
    b = fit_relufield(views, intr, initial_grid(4), cfg, regularize=False)
    assert [t[1] for t in a.trace] == [t[1] for t in b.trace]
    assert a.grid.data.tobytes() == b.grid.data.tobytes()


def test_fit_deterministic():
    views, intr = toy_views(3, size=8, R=4)
    cfg = FitConfig(iterations=5, rays_per_step=64, seed=4)
    a = fit_relufield(views, intr, initial_grid(4), cfg)
    b = fit_relufield(views, intr, initial_grid(4), cfg)
    assert a.grid.data.tobytes() == b.grid.data.tobytes()
    assert len(a.trace) == 5 and all(t[4] >= t[1] for t in a.trace)


def test_fit_descends():
    views, intr = toy_views(30, size=64)
    cfg = FitConfig(iterations=500, rays_per_step=1024, seed=0)
    res = fit_relufield(views, intr, initial_grid(16), cfg)
    sm = smoothed([t[4] for t in res.trace], 50)
    # sm[k] averages iterations k..k+49; centre the windows on 50 and 500
    assert sm[500 - 50] < sm[50 - 25]


def test_fit_needs_views():
    with pytest.raises(ValueError):
        fit_relufield([], default_intrinsics(8), initial_grid(4), FitConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(lambda_d=-1)
    with pytest.raises(ValueError):
        FitConfig(huber_delta=0)
    with pytest.raises(ValueError):
        FitConfig(iterations=0)
