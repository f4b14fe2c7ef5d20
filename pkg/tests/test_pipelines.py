import numpy as np
import pytest

from edmsr.edm import Preconditioner
from edmsr.samplers import euler_sample, karras_schedule, linear_oracle
from edmsr.sr3d import (PatchDataset, axis_positions, blend_patches, condition_volume, hann_window,
                        plan_patches, super_resolve_3d, trilinear_baseline)
from edmsr.sr25d import (SliceDataset, bicubic_baseline, build_slice_condition, neighbor_index,
                         super_resolve_25d)
from edmsr.unet import build_denoiser, desk_config
from edmsr.volume import (Domain, Volume, VolumeError, bicubic_upsample_slice, degrade, trilinear_upsample)

PC = Preconditioner()


def unit(a):
    return Volume(np.clip(a, -1, 1), Domain.UNIT)


def live_net(arch, seed=0):
    params, net = build_denoiser(desk_config(arch), seed)
    rng = np.random.default_rng(seed + 100)
    w = params["conv_out.weight"]
    w.data = rng.normal(scale=0.2, size=w.shape)
    return net


# -- patch planning and blending ----------------------------------------------


def test_plan_example_64_cube():
    plan = plan_patches((64, 64, 64), (32, 64, 64), 0.5)
    assert sorted({p[0] for p in plan.positions}) == [0, 16, 32]
    assert {p[1:] for p in plan.positions} == {(0, 0)}


def test_patch_equal_volume_and_oversized_patch():
    assert plan_patches((8, 16, 16), (8, 16, 16)).positions == ((0, 0, 0),)
    plan = plan_patches((4, 6, 6), (8, 16, 16))
    assert plan.positions == ((0, 0, 0),) and plan.patch_dims == (4, 6, 6)
    with pytest.raises(VolumeError):
        plan_patches((0, 4, 4), (2, 2, 2))


def test_random_plans_cover_and_stay_in_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dims = tuple(int(n) for n in rng.integers(1, 30, 3))
        patch = tuple(int(n) for n in rng.integers(1, 20, 3))
        plan = plan_patches(dims, patch, float(rng.uniform(0, 0.9)))
        hits = np.zeros(dims, dtype=int)
        for pos in plan.positions:
            assert all(0 <= p and p + n <= d for p, n, d in zip(pos, plan.patch_dims, dims))
            hits[plan.slices(pos)] += 1
        assert hits.min() >= 1


def test_identity_operator_reconstructs_exactly():
    rng = np.random.default_rng(1)
    for _ in range(20):
        dims = tuple(int(n) for n in rng.integers(3, 20, 3))
        plan = plan_patches(dims, tuple(int(n) for n in rng.integers(2, 12, 3)), float(rng.uniform(0, 0.8)))
        vol = rng.normal(size=dims)
        out = blend_patches(plan, [vol[plan.slices(p)] for p in plan.positions])
        assert np.max(np.abs(out - vol)) <= 1e-9


def test_constant_patches_and_missing_output():
    plan = plan_patches((6, 10, 10), (4, 4, 4))
    out = blend_patches(plan, [np.full(plan.patch_dims, 0.3)] * len(plan.positions))
    assert np.allclose(out, 0.3, atol=1e-15)
    with pytest.raises(ValueError):
        blend_patches(plan, [np.zeros(plan.patch_dims)])


def test_half_overlapping_patches_meet_at_one_half():
    plan = plan_patches((1, 1, 5), (1, 1, 3), 0.5)
    assert plan.positions == ((0, 0, 0), (0, 0, 2))
    out = blend_patches(plan, [np.zeros((1, 1, 3)), np.ones((1, 1, 3))])
    assert out[0, 0, 2] == 0.5
    assert out[0, 0, 0] == 0.0 and out[0, 0, 4] == 1.0


def test_window_is_symmetric_and_positive():
    w = hann_window(9, 0.05)
    assert np.allclose(w, w[::-1], atol=1e-15)
    assert w.min() > 0.05 - 1e-15 and abs(w[4] - 1.0) < 1e-15
    assert axis_positions(10, 4, 0.5) == [0, 2, 4, 6]


# -- 3D pipeline -------------------------------------------------------------


def test_untrained_3d_output_is_blended_scaled_noise():
    lr = unit(np.random.default_rng(2).uniform(-1, 1, (8, 8, 8)))
    _, net = build_denoiser(desk_config("3d"), 0)
    sched = karras_schedule(n=4)
    out = super_resolve_3d(net, PC, sched, lr, 2, patch_dims=(4, 8, 8), seed=5)
    assert out.dims == (8, 16, 16) and out.domain is Domain.UNIT
    plan = plan_patches((8, 16, 16), (4, 8, 8), 0.5)
    # a zero network is the linear oracle c_skip x, so each patch is its scaled noise draw
    expect = [euler_sample(linear_oracle(PC), sched, x_init=80 * np.random.default_rng([5, i]).standard_normal(
        (1, 1, 4, 8, 8)))[0, 0] for i in range(len(plan.positions))]
    assert np.allclose(out.data, np.clip(blend_patches(plan, expect), -1, 1), atol=1e-12)


def test_3d_deterministic_and_seed_sensitive():
    lr = unit(np.random.default_rng(3).uniform(-1, 1, (4, 8, 8)))
    net = live_net("3d")
    a = super_resolve_3d(net, PC, karras_schedule(n=2), lr, 2, patch_dims=(4, 8, 8), seed=1)
    b = super_resolve_3d(net, PC, karras_schedule(n=2), lr, 2, patch_dims=(4, 8, 8), seed=1)
    c = super_resolve_3d(net, PC, karras_schedule(n=2), lr, 2, patch_dims=(4, 8, 8), seed=2)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert np.all(np.abs(a.data) <= 1)


def test_3d_patch_divisibility_checked():
    lr = unit(np.zeros((4, 8, 8)))
    with pytest.raises(VolumeError):
        super_resolve_3d(live_net("3d"), PC, karras_schedule(n=1), lr, 2, patch_dims=(3, 8, 8))


def test_condition_is_in_plane_trilinear():
    lr = unit(np.random.default_rng(4).uniform(-1, 1, (3, 4, 4)))
    assert np.array_equal(condition_volume(lr, 2), trilinear_upsample(lr, 2, in_plane=True).data)


def test_trilinear_baseline_cases():
    c = unit(np.full((2, 3, 3), 0.2))
    assert np.allclose(trilinear_baseline(c, 2).data, 0.2, atol=1e-15)
    x = unit(np.random.default_rng(5).uniform(-1, 1, (2, 3, 3)))
    assert np.array_equal(trilinear_baseline(x, 1).data, x.data)
    ramp = unit(np.broadcast_to(np.linspace(-1, 1, 6), (2, 6, 6)).copy())
    assert np.array_equal(trilinear_baseline(ramp, 2).data,
                          np.clip(trilinear_upsample(ramp, 2).data, -1, 1))


def test_patch_dataset_shapes():
    rng = np.random.default_rng(6)
    pairs = [degrade(unit(rng.uniform(-1, 1, (8, 16, 16))), 2) for _ in range(2)]
    ds = PatchDataset(pairs, (4, 8, 8), patches_per_volume=3)
    cond, hr = ds.sample(rng, 2)
    assert cond.shape == hr.shape == (6, 1, 4, 8, 8)


# -- 2.5D pipeline -----------------------------------------------------------


def test_slice_condition_rules():
    lr = unit(np.random.default_rng(7).uniform(-1, 1, (4, 6, 6)))
    c0 = build_slice_condition(lr, 0, 2)
    assert np.array_equal(c0.neighbor_lr_up, c0.target_lr_up)
    assert np.array_equal(c0.target_lr_up, bicubic_upsample_slice(lr.data[0], 2))
    c1 = build_slice_condition(lr, 1, 2)
    assert np.array_equal(c1.neighbor_lr_up, bicubic_upsample_slice(lr.data[0], 2))
    assert c1.stacked().shape == (2, 12, 12)
    assert [neighbor_index(i) for i in range(3)] == [0, 0, 1]
    const = build_slice_condition(unit(np.full((2, 4, 4), -0.5)), 1, 2)
    assert np.allclose(const.stacked(), -0.5, atol=1e-15)
    with pytest.raises(IndexError):
        build_slice_condition(lr, 4, 2)


def test_25d_shape_and_slice_independence():
    lr = unit(np.random.default_rng(8).uniform(-1, 1, (5, 4, 4)))
    net = live_net("2.5d")
    full = super_resolve_25d(net, PC, karras_schedule(n=1), lr, 2, seed=3)
    assert full.dims == (5, 8, 8)
    for i in range(5):
        alone = super_resolve_25d(net, PC, karras_schedule(n=1), lr, 2, seed=3, slices=[i])
        assert np.array_equal(alone[0], full.data[i])


def test_25d_reads_only_target_and_previous_lr_slice():
    rng = np.random.default_rng(9)
    lr = rng.uniform(-1, 1, (6, 4, 4))
    net = live_net("2.5d")
    i = 3
    base = super_resolve_25d(net, PC, karras_schedule(n=1), unit(lr), 2, slices=[i])
    poisoned = lr.copy()
    poisoned[[0, 1, 4, 5]] = rng.uniform(-1, 1, (4, 4, 4))
    same = super_resolve_25d(net, PC, karras_schedule(n=1), unit(poisoned), 2, slices=[i])
    assert np.array_equal(base, same)
    touched = lr.copy()
    touched[i - 1] = rng.uniform(-1, 1, (4, 4))
    assert not np.array_equal(base, super_resolve_25d(net, PC, karras_schedule(n=1), unit(touched), 2, slices=[i]))


def test_25d_deterministic_two_step_heun():
    lr = unit(np.random.default_rng(10).uniform(-1, 1, (2, 4, 4)))
    net = live_net("2.5d")
    a = super_resolve_25d(net, PC, karras_schedule(n=2), lr, 2)
    b = super_resolve_25d(net, PC, karras_schedule(n=2), lr, 2)
    assert np.array_equal(a.data, b.data) and np.all(np.isfinite(a.data))


def test_25d_small_slices_rejected():
    with pytest.raises(VolumeError):
        super_resolve_25d(live_net("2.5d"), PC, karras_schedule(n=1), unit(np.zeros((2, 2, 2))), 2)


def test_bicubic_baseline_cases():
    c = unit(np.full((2, 4, 4), 0.7))
    assert np.allclose(bicubic_baseline(c, 3).data, 0.7, atol=1e-14)
    x = unit(np.random.default_rng(11).uniform(-1, 1, (3, 5, 5)))
    assert np.allclose(bicubic_baseline(x, 1).data, x.data, atol=1e-15)
    out = bicubic_baseline(x, 2).data
    for k in range(3):
        assert np.array_equal(out[k], np.clip(bicubic_upsample_slice(x.data[k], 2), -1, 1))


def test_slice_dataset_pairs_neighbor_with_target():
    rng = np.random.default_rng(12)
    pairs = [degrade(unit(rng.uniform(-1, 1, (4, 8, 8))), 2)]
    ds = SliceDataset(pairs)
    cond, hr = ds.sample(np.random.default_rng(0), 8)
    assert cond.shape == (8, 2, 8, 8) and hr.shape == (8, 1, 8, 8)
    up = [bicubic_upsample_slice(s, 2) for s in pairs[0].lr.data]
    for c, h in zip(cond, hr):
        i = next(k for k in range(4) if np.array_equal(pairs[0].hr.data[k], h[0]))
        assert np.array_equal(c[1], up[i]) and np.array_equal(c[0], up[max(i - 1, 0)])
