import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, trilinear_corners
from panolabel import field as F
from panolabel.experiments import gradient_trials, random_problem
from panolabel.scene_io import FormatError


def unit_field(res=(4, 5, 6), **kw):
    return F.VoxelField.create(res, (0, 0, 0), (1, 1, 1), **kw)


def test_voxel_centre_returns_stored_values(rng):
    fld = unit_field(n_sem=2)
    fld.data[:] = rng.normal(size=fld.data.shape)
    c = fld.centers()
    vals, inside = F.sample(fld, c.reshape(-1, 3))
    np.testing.assert_allclose(vals, fld.flat(), atol=1e-12)
    assert inside.all()


def test_midway_is_mean(rng):
    fld = unit_field()
    fld.data[:] = rng.normal(size=fld.data.shape)
    c = fld.centers()
    mid = (c[1, 2, 3] + c[2, 2, 3]) / 2
    vals, _ = F.sample(fld, mid[None])
    np.testing.assert_allclose(vals[0], (fld.data[1, 2, 3] + fld.data[2, 2, 3]) / 2, atol=1e-12)


@given(st.integers(0, 100_000))
def test_sample_matches_corner_oracle(seed):
    rng = np.random.default_rng(seed)
    fld = unit_field(n_sem=1, n_feat=1)
    fld.data[:] = rng.normal(size=fld.data.shape)
    p = rng.uniform(-0.2, 1.2, (10, 3))  # includes clamped points outside the box
    vals, inside = F.sample(fld, p)
    for k in range(len(p)):
        ref = trilinear_corners(fld.data, fld.bmin, fld.cell, p[k])
        np.testing.assert_allclose(vals[k], ref, rtol=1e-12, atol=1e-12)
        assert inside[k] == bool(np.all((p[k] >= 0) & (p[k] <= 1)))


def test_linear_field_normal():
    fld = unit_field((6, 6, 6))
    fld.data[..., 0] = fld.centers()[..., 2]
    p = np.random.default_rng(0).uniform(0.2, 0.8, (50, 3))
    np.testing.assert_allclose(F.sdf_normal(fld, p), np.tile([0, 0, 1.0], (50, 1)), atol=1e-12)
    fld.data[..., 0] = 3.0
    np.testing.assert_allclose(F.sdf_normal(fld, p), 0.0, atol=1e-12)


@given(st.integers(0, 100_000))
def test_normal_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    fld = unit_field((6, 6, 6))
    fld.data[..., 0] = rng.normal(size=(6, 6, 6))
    cell = fld.cell[0]
    eps = cell / 100
    # points one cell inside the box, away from the cell faces
    g = rng.integers(1, 4, (8, 3)) + rng.uniform(0.1, 0.9, (8, 3)) + 0.5
    p = g * cell
    n = F.sdf_normal(fld, p)
    for k in range(len(p)):
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = 1.0
            fd = central_difference(lambda t: F.sample(fld, (p[k] + t * e)[None], "sdf")[0][0, 0], 0.0, eps)
            assert abs(fd - n[k, axis]) <= 1e-5 * max(abs(fd), 1.0)


def test_alpha_examples():
    assert F.alpha(0.2, 0.2, 10.0) == 0.0
    assert float(F.alpha(0.1, -0.1, 10.0)) == pytest.approx(0.63212, abs=1e-5)
    # direct scalar evaluation of the sigmoid ratio
    phi = lambda s: 1.0 / (1.0 + math.exp(-10.0 * s))
    assert float(F.alpha(0.1, -0.1, 10.0)) == pytest.approx((phi(0.1) - phi(-0.1)) / phi(0.1), rel=1e-12)
    assert F.alpha(-0.1, 0.3, 10.0) == 0.0
    with pytest.raises(ValueError):
        F.alpha(0.0, 0.0, 0.0)


def test_render_weight_identities():
    zeros = np.zeros((2, 5))
    _, w = F.render_weights(zeros)
    assert not w.any()
    a = np.array([[1.0, 0.4, 0.7, 0.2]])
    _, w = F.render_weights(a)
    f = np.array([3.0, 5.0, 7.0, 9.0])
    assert (w * f).sum() == 3.0
    a = np.random.default_rng(0).uniform(0, 1, (100, 8))
    _, w = F.render_weights(a)
    c = 2.5
    np.testing.assert_allclose((w * c).sum(axis=1), c * w.sum(axis=1))
    assert (w.sum(axis=1) <= 1.0).all() and (w.sum(axis=1) >= 0.0).all()


@given(st.integers(0, 100_000), st.floats(0.5, 200.0))
def test_transmittance_properties(seed, xi):
    s = np.random.default_rng(seed).normal(size=(20, 32))
    a = F.ray_alphas(s, xi)
    t, w = F.render_weights(a)
    assert ((a >= 0) & (a <= 1)).all()
    assert ((t >= 0) & (t <= 1)).all() and (np.diff(t, axis=1) <= 0).all()
    assert (w.sum(axis=1) <= 1.0).all()


def sphere_setup(res=32, radius=0.5, n_rays=64, seed=0):
    fld = F.VoxelField.create((res,) * 3, (-1, -1, -1), (1, 1, 1), n_sem=3, n_inst=0, n_feat=0)
    fld.data[..., 0] = np.linalg.norm(fld.centers(), axis=-1) - radius
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(n_rays, 3))
    o = 0.95 * o / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.normal(scale=0.15, size=(n_rays, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # analytic ray-sphere hit distance
    b = (o * d).sum(axis=1)
    c = (o * o).sum(axis=1) - radius**2
    depth = -b - np.sqrt(b * b - c)
    # samples stop a few cells past the surface, away from the kink at the centre
    tn = np.zeros(n_rays)
    tf = depth + 4 * fld.cell[0]
    rho = F.stratified(tn, tf, 256, None)
    return fld, F.RayBatch(o, d, rho, tn, tf, depth, np.zeros((n_rays, 3)), np.zeros(n_rays, int)), fld.cell[0]


def test_exact_sphere_sdf_losses():
    # trilinear gradients of |p| err by O(cell / r), so the grid must be fine
    fld, batch, cell = sphere_setup(res=64)
    res = F.losses(fld, batch, F.LossConfig(xi=100.0, tau=4 * cell, w_sem=0.0, w_inst=0.0, w_feat=0.0))
    assert res.terms["eik"] < 1e-4
    assert res.terms["depth"] < cell


def test_cross_entropy_examples():
    fld, batch, cell = sphere_setup(n_rays=8)
    cfg = F.LossConfig(xi=100.0, tau=4 * cell, w_sdf=0, w_eik=0, w_depth=0, w_color=0, w_inst=0, w_feat=0)
    # uniform logits: ln K per supervised pixel, whatever the weights
    assert F.losses(fld, batch, cfg).terms["sem"] == pytest.approx(math.log(3), rel=1e-12)
    # a margin of 20 on the target class, on a fully opaque ray
    fld.data[..., fld.sl("sem")] = [20.0, 0.0, 0.0]
    r = F.losses(fld, batch, cfg)
    opacity = F.render_weights(F.ray_alphas(F.sample(fld, batch.points().reshape(-1, 3), "sdf")[0].reshape(8, -1), 100.0))[1].sum(axis=1)
    assert opacity.min() > 0.999
    assert r.terms["sem"] < 1e-7


def test_sdf_loss_branches():
    s = np.array([0.3, 0.3, -0.2, 2.0])
    b = np.array([0.1, 1.0, 1.0, 1.0])
    val, grad = F.sdf_loss(s, b, tau=0.5, beta=5.0)
    assert val[0] == pytest.approx(0.2) and grad[0] == 1.0  # truncation band: |s - b|
    assert val[1] == 0.0 and grad[1] == 0.0  # free space, s small and positive
    assert val[2] == pytest.approx(math.expm1(1.0)) and grad[2] == pytest.approx(-5.0 * math.e)
    assert val[3] == pytest.approx(1.0) and grad[3] == 1.0  # linear branch beyond the target


@given(st.integers(0, 100_000))
def test_all_loss_terms_non_negative(seed):
    fld, batch, cfg = random_problem(np.random.default_rng(seed))
    res = F.losses(fld, batch, cfg)
    assert all(v >= 0 for v in res.terms.values())
    assert res.total >= 0


def test_missing_target_is_a_configuration_error():
    fld, batch, cfg = random_problem(np.random.default_rng(0))
    batch.feat = None
    with pytest.raises(F.ConfigurationError):
        F.losses(fld, batch, cfg)
    with pytest.raises(F.ConfigurationError):
        F.LossConfig(xi=0.0)


def test_zero_weight_term_has_no_gradient():
    fld, batch, cfg = random_problem(np.random.default_rng(1))
    cfg.w_feat = 0.0
    g = F.loss_gradient(fld, batch, cfg)
    assert not g[..., fld.sl("feat")].any()
    cfg.w_sem = 0.0
    assert not F.loss_gradient(fld, batch, cfg)[..., fld.sl("sem")].any()


def test_colour_only_gradient_reaches_sdf_through_weights():
    rng = np.random.default_rng(2)
    fld, batch, cfg = random_problem(rng)
    only_color = F.LossConfig(xi=cfg.xi, tau=cfg.tau, beta=cfg.beta, w_sdf=0, w_eik=0, w_depth=0, w_sem=0, w_inst=0, w_feat=0)
    g = F.loss_gradient(fld, batch, only_color)
    assert np.abs(g[..., 0]).max() > 0
    assert not g[..., fld.sl("sem")].any() and not g[..., fld.sl("inst")].any()
    eps = 1e-5
    for ch in range(4):
        direction = np.zeros_like(fld.data)
        direction[..., ch] = rng.normal(size=fld.resolution)
        plus, minus = fld.copy(), fld.copy()
        plus.data += eps * direction
        minus.data -= eps * direction
        fd = (F.losses(plus, batch, only_color).total - F.losses(minus, batch, only_color).total) / (2 * eps)
        an = float((g * direction).sum())
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6)


def test_gradient_matches_finite_differences_small_run():
    check = gradient_trials(n_trials=6, seed=42)
    assert check.checked > 50
    assert not check.failures, check.failures


def test_zero_iterations_leaves_field_unchanged():
    fld, batch, cfg = random_problem(np.random.default_rng(3))
    pool = F.RayPool(batch.origins, batch.dirs, batch.depth, batch.color, batch.sem, batch.inst, batch.feat, np.zeros(len(batch), int))
    out, log = F.fit(fld, pool, 2, cfg, F.FitConfig(iters=0))
    assert out.data.tobytes() == fld.data.tobytes() and log.total == []


def test_fit_stage1_touches_only_geometry_and_colour_and_is_deterministic():
    fld, batch, cfg = random_problem(np.random.default_rng(4))
    pool = F.RayPool(batch.origins, batch.dirs, batch.depth, batch.color, batch.sem, batch.inst, batch.feat, np.zeros(len(batch), int))
    fc = F.FitConfig(iters=5, batch_rays=8, n_samples=8, seed=1)
    a, log = F.fit(fld, pool, 1, cfg, fc)
    b, _ = F.fit(fld, pool, 1, cfg, fc)
    assert a.data.tobytes() == b.data.tobytes()
    assert len(log.total) == 5
    frozen = slice(4, fld.n_channels)
    assert np.array_equal(a.data[..., frozen], fld.data[..., frozen])
    assert not np.array_equal(a.data[..., :4], fld.data[..., :4])
    c, _ = F.fit(fld, pool, 2, cfg, fc)
    assert not np.array_equal(c.data[..., fld.sl("sem")], fld.data[..., fld.sl("sem")])


def test_divergence_is_reported():
    fld, batch, cfg = random_problem(np.random.default_rng(5))
    fld.data[0, 0, 0, 1] = np.nan
    batch.origins[:] = [0.02, 0.02, 0.95]
    batch.dirs[:] = [0.0, 0.0, -1.0]
    pool = F.RayPool(batch.origins, batch.dirs, batch.depth, batch.color, batch.sem, batch.inst, batch.feat, np.zeros(len(batch), int))
    with pytest.raises(F.DivergenceError):
        F.fit(fld, pool, 1, cfg, F.FitConfig(iters=3, batch_rays=4, n_samples=8))


def test_field_file_round_trip(tmp_path):
    fld, _, _ = random_problem(np.random.default_rng(6))
    F.save_field(tmp_path / "f.pfld", fld)
    back = F.load_field(tmp_path / "f.pfld")
    assert back.channels == fld.channels and back.resolution == fld.resolution
    np.testing.assert_array_equal(back.data, fld.data.astype(np.float32))
    np.testing.assert_array_equal(back.bmin, fld.bmin)
    (tmp_path / "f.pfld").write_bytes((tmp_path / "f.pfld").read_bytes()[:-4])
    with pytest.raises(FormatError):
        F.load_field(tmp_path / "f.pfld")


def test_render_image_of_sphere():
    from panolabel import synth

    fld, _, _ = sphere_setup(res=24)
    cam = synth.orbit_trajectory(1, 2.5, 0.0, width=16, height_px=12, focal=12.0)[0]
    r = F.render(fld, cam, n_samples=128, xi=100.0)
    centre = r.depth[6, 8]
    assert centre == pytest.approx(2.0, abs=fld.cell[0])
    assert r.opacity[6, 8] > 0.99 and r.opacity[0, 0] < 0.01
    assert r.sem.shape == (12, 16, 3) and r.inst is None
