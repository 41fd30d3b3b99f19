import numpy as np
import pytest

from oracles import band_energy_fraction

from interpstab.errors import RangeError, ValidationError
from interpstab.metrics import stability_score
from interpstab.synth import (JitterSpec, gen_smooth_trajectory, inject_jitter, make_refiner_samples,
                              make_source_image, make_stab_pair, render_crop_sequence,
                              warp_between_poses)
from interpstab.frames import psnr
from interpstab.trajectory import Trajectory


def test_smooth_trajectory_static():
    tr = gen_smooth_trajectory(32, speed_px=0, turn_rate=0, seed=1)
    assert np.all(tr.tx == tr.tx[0]) and np.all(tr.theta == tr.theta[0])


def test_smooth_trajectory_band():
    tr = gen_smooth_trajectory(64, speed_px=2, seed=7)
    for sig in (tr.tx, tr.ty, tr.theta):
        assert band_energy_fraction(sig, 2, 6) >= 0.99
    speed = np.hypot(np.diff(tr.tx, append=tr.tx[:1]), np.diff(tr.ty, append=tr.ty[:1])).mean()
    assert speed == pytest.approx(2.0)


def test_smooth_trajectory_deterministic():
    a, b = gen_smooth_trajectory(40, 1.5, seed=5), gen_smooth_trajectory(40, 1.5, seed=5)
    assert np.array_equal(a.as_array(), b.as_array())


def test_smooth_trajectory_too_short():
    with pytest.raises(RangeError):
        gen_smooth_trajectory(4)


def test_zero_jitter_is_identity():
    tr = gen_smooth_trajectory(64, seed=1)
    out = inject_jitter(tr, JitterSpec(0.0, 0.0, 7, seed=1))
    assert np.array_equal(out.as_array(), tr.as_array())


def test_jitter_lowers_stability():
    tr = gen_smooth_trajectory(64, 1.0, seed=2)
    out = inject_jitter(tr, JitterSpec(amplitude_px=3, amplitude_rad=0.01, seed=1))
    assert stability_score(out)[2] < stability_score(tr)[2]


def test_jitter_band_separation():
    tr = gen_smooth_trajectory(64, 1.0, seed=2)
    before = tr.as_array().copy()
    spec = JitterSpec(amplitude_px=3, amplitude_rad=0.01, seed=1)
    out = inject_jitter(tr, spec)
    assert np.array_equal(tr.as_array(), before)
    pert = out - tr
    for sig, amp in ((pert.tx, 3), (pert.ty, 3), (pert.theta, 0.01)):
        assert band_energy_fraction(sig, 2, 6) < 1e-9
        assert band_energy_fraction(sig, 1, 1) < 1e-9
        assert abs(sig.mean()) < 1e-12
        assert np.abs(sig).max() == pytest.approx(amp)


def test_jitter_spec_rejects_low_band():
    with pytest.raises(ValidationError):
        JitterSpec(min_freq_bin=6)


def test_render_constant_trajectory(source_image):
    seq = render_crop_sequence(source_image, Trajectory.constant(6, 3.0, -2.0, 0.05), (40, 30))
    assert seq.frames.shape == (6, 30, 40, 3)
    assert all(np.array_equal(seq.frames[0], f) for f in seq.frames)


def test_render_period_invariance():
    # 10-px periodic stripes: a 10-px extra translation must not change anything
    x = np.arange(200)
    row = 0.5 + 0.4 * np.sin(2 * np.pi * x / 10)
    img = np.repeat(np.repeat(row[None, :, None], 200, axis=0), 3, axis=2)
    img[..., 1] = 0.5 + 0.4 * np.sin(2 * np.pi * np.arange(200) / 10)[:, None]
    tr = gen_smooth_trajectory(12, 1.0, 0.01, seed=4)
    a = render_crop_sequence(img, tr, (40, 40))
    b = render_crop_sequence(img, tr + Trajectory.constant(12, 10.0, 0.0, 0.0), (40, 40))
    c = render_crop_sequence(img, tr + Trajectory.constant(12, 0.0, -10.0, 0.0), (40, 40))
    assert np.abs(a.frames - b.frames).max() < 1e-9
    assert np.abs(a.frames - c.frames).max() < 1e-9


def test_render_shape_contract():
    img = make_source_image(1024, seed=0)
    tr = gen_smooth_trajectory(64, 1.0, seed=0)
    seq = render_crop_sequence(img, tr, (128, 128))
    assert seq.frames.shape == (64, 128, 128, 3)


def test_render_out_of_bounds_names_frame(source_image):
    tx = np.zeros(8)
    tx[5] = 1000.0
    with pytest.raises(RangeError, match="frame 5"):
        render_crop_sequence(source_image, Trajectory(tx, np.zeros(8), np.zeros(8)), (64, 64))


def test_pair_without_jitter_identical(source_image):
    p = make_stab_pair(source_image, 32, (64, 64), JitterSpec(0, 0, 7, 0), seed=1)
    assert np.array_equal(p.stable.frames, p.unstable.frames)


def test_pair_default_jitter(source_image):
    p = make_stab_pair(source_image, 64, (96, 96), seed=3)
    assert stability_score(p.unstable_traj)[2] < stability_score(p.stable_traj)[2]
    mad = np.abs(p.stable.frames - p.unstable.frames).mean(axis=(1, 2, 3))
    assert np.all(mad > 0)


def test_pair_is_equi_perspective(stab_pair):
    p = stab_pair
    errs = []
    for t in range(len(p.stable)):
        warped, valid = warp_between_poses(
            p.unstable.frames[t], tuple(p.unstable_traj.as_array()[t]),
            tuple(p.stable_traj.as_array()[t]))
        errs.append(np.abs(warped - p.stable.frames[t])[valid].mean())
    assert max(errs) < 0.02


def test_pair_deterministic(source_image):
    a = make_stab_pair(source_image, 24, (48, 48), seed=9)
    b = make_stab_pair(source_image, 24, (48, 48), seed=9)
    assert np.array_equal(a.unstable.frames, b.unstable.frames)


def test_refiner_samples_no_degradation(source_image):
    ss = make_refiner_samples(source_image, 16, (48, 48), degrade=0, seed=1)
    assert all(np.array_equal(s.degraded_center, s.clean_center) for s in ss)


def test_refiner_samples_count_and_degradation(source_image):
    ss = make_refiner_samples(source_image, 64, (48, 48), degrade=4, seed=1)
    assert len(ss) == 60
    values = [psnr(s.degraded_center, s.clean_center) for s in ss]
    assert all(np.isfinite(v) for v in values)
    assert psnr(ss[0].clean_center, ss[0].clean_center) == float("inf")
    s = ss[10]
    assert s.clean_neighbors.shape == (4, 48, 48, 3)
