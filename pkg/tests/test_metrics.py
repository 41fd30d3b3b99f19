import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interpstab.errors import DegeneracyError, InsufficientDataError, RangeError, TrackingError
from interpstab.frames import FrameSequence, sample_bilinear, shift_frame
from interpstab.interp import StabilizeConfig, iterative_stabilize, trajectory_smooth_oracle
from interpstab.metrics import (REPORT_KEYS, MetricsReport, chain_trajectory, compose_similarity,
                                cropping_score, decompose_homography, detect_corners,
                                distortion_details, distortion_score, estimate_homography_ransac,
                                evaluate, match_corners, project, stability_score)
from interpstab.trajectory import Trajectory

SIZE = 128


def view(image, A=np.eye(2), size=SIZE):
    """Frame whose centred pixel u shows image point centre + A @ u."""
    c = (np.array(image.shape[:2][::-1]) - 1) / 2.0
    v, u = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2.0
    xs = c[0] + A[0, 0] * u + A[0, 1] * v
    ys = c[1] + A[1, 0] * u + A[1, 1] * v
    return sample_bilinear(image, xs, ys)


def rot(a):
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def seq_of(frame, n=3):
    return FrameSequence(np.stack([frame] * n))


# ---------------------------------------------------------------- corners and matching


def test_corners_flat_frame():
    assert detect_corners(np.full((32, 32, 3), 0.5)).shape == (0, 2)


def test_corners_single_pixel():
    f = np.zeros((32, 32, 3))
    f[14, 19] = 1.0
    kps = detect_corners(f)
    assert len(kps) >= 1
    assert np.abs(kps - [19, 14]).max(axis=1).min() <= 1


def test_corners_deterministic_and_capped(source_image):
    f = view(source_image, size=192)
    a, b = detect_corners(f), detect_corners(f.copy())
    assert np.array_equal(a, b)
    assert 0 < len(a) <= 500


def test_corners_too_small():
    with pytest.raises(RangeError):
        detect_corners(np.zeros((15, 40, 3)))


def test_match_identity(source_image):
    f = view(source_image)
    pa, pb = match_corners(f, f, detect_corners(f))
    assert len(pa) > 20
    assert np.abs(pa - pb).max() < 1e-4


def test_match_shift(source_image):
    f = view(source_image)
    g = shift_frame(f, 3, 2)
    pa, pb = match_corners(f, g, detect_corners(f))
    assert np.median(pb - pa, axis=0) == pytest.approx([3, 2], abs=1e-3)


def test_match_textureless(source_image):
    f = view(source_image)
    pa, _ = match_corners(f, np.full_like(f, 0.4), detect_corners(f))
    assert len(pa) <= 2


# ---------------------------------------------------------------- homography


def test_ransac_identity(rng):
    pts = rng.uniform(-60, 60, (50, 2))
    H, mask = estimate_homography_ransac(pts, pts)
    assert np.abs(H - np.eye(3)).max() < 1e-6
    assert mask.all()


def test_ransac_too_few():
    with pytest.raises(InsufficientDataError):
        estimate_homography_ransac(np.zeros((3, 2)), np.zeros((3, 2)))


def test_ransac_collinear():
    pts = np.c_[np.arange(10.0), 2 * np.arange(10.0)]
    with pytest.raises(DegeneracyError):
        estimate_homography_ransac(pts, pts)


def test_ransac_similarity_with_outliers():
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        H_true = compose_similarity(*rng.uniform(-10, 10, 2), rng.uniform(-0.3, 0.3),
                                    rng.uniform(0.8, 1.2))
        src = rng.uniform(-64, 64, (100, 2))
        dst = project(H_true, src)
        out = rng.random(100) < 0.2
        dst[out] = rng.uniform(-64, 64, (out.sum(), 2))
        H, mask = estimate_homography_ransac(src, dst, seed=seed)
        inl = ~out
        err = np.linalg.norm(project(H, src[inl]) - dst[inl], axis=1)
        good += err.max() < 0.5
    assert good >= 99


def test_ransac_deterministic(rng):
    src = rng.uniform(-50, 50, (40, 2))
    dst = src + rng.normal(0, 0.5, src.shape)
    a = estimate_homography_ransac(src, dst, seed=3)
    b = estimate_homography_ransac(src, dst, seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_decompose_identity():
    p = decompose_homography(np.eye(3))
    assert (p.tx, p.ty, p.theta, p.scale, p.anisotropy) == pytest.approx((0, 0, 0, 1, 1))


def test_decompose_rotation():
    p = decompose_homography(compose_similarity(0, 0, 0.3))
    assert p.theta == pytest.approx(0.3) and p.scale == pytest.approx(1)
    assert p.anisotropy == pytest.approx(1)


def test_decompose_anisotropic():
    p = decompose_homography(np.diag([1.0, 0.8, 1.0]))
    assert p.anisotropy == pytest.approx(0.8) and p.scale == pytest.approx(np.sqrt(0.8))


def test_decompose_singular():
    with pytest.raises(DegeneracyError):
        decompose_homography(np.diag([1.0, 0.0, 1.0]))


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-3.1, 3.1), st.floats(0.2, 5))
def test_decompose_inverts_compose(tx, ty, theta, scale):
    p = decompose_homography(compose_similarity(tx, ty, theta, scale))
    assert p.tx == pytest.approx(tx, abs=1e-9) and p.ty == pytest.approx(ty, abs=1e-9)
    assert p.theta == pytest.approx(theta, abs=1e-9)
    assert p.scale == pytest.approx(scale, rel=1e-9)


# ---------------------------------------------------------------- trajectories


def test_chain_static(source_image):
    tr = chain_trajectory(seq_of(view(source_image), 4))
    assert np.abs(tr.as_array()).max() < 1e-5


def test_chain_single_frame(source_image):
    with pytest.raises(RangeError):
        chain_trajectory(seq_of(view(source_image), 1))


def test_chain_matches_ground_truth(stab_pair):
    tr = chain_trajectory(stab_pair.unstable)
    gt = stab_pair.unstable_traj.as_array()
    gt = gt - gt[0]
    # chain gives window poses relative to frame 0, expressed in frame 0's axes
    c, s = np.cos(-stab_pair.unstable_traj.theta[0]), np.sin(-stab_pair.unstable_traj.theta[0])
    rel = np.c_[c * gt[:, 0] - s * gt[:, 1], s * gt[:, 0] + c * gt[:, 1], gt[:, 2]]
    est = tr.as_array()
    assert np.abs(est[:, :2] - rel[:, :2]).max() < 0.5
    assert np.abs(est[:, 2] - rel[:, 2]).max() < 0.01


def test_chain_failure_names_pair(source_image):
    f = view(source_image)
    seq = FrameSequence(np.stack([f, f, np.full_like(f, 0.5)]))
    with pytest.raises(TrackingError, match="frames 1->2"):
        chain_trajectory(seq)
    failures = []
    tr = chain_trajectory(seq, on_failure="bridge", failures=failures)
    assert failures == [1] and tr.length == 3


# ---------------------------------------------------------------- stability


def test_stability_constant():
    assert stability_score(Trajectory.constant(32, 1, 2, 3)) == (1.0, 1.0, 1.0)


def test_stability_low_and_high_bins():
    t = np.arange(64)
    low = Trajectory(np.sin(2 * np.pi * 3 * t / 64), np.zeros(64), np.zeros(64))
    s_t, _, s = stability_score(low)
    assert s_t == pytest.approx(1.0, abs=1e-9) and s == pytest.approx(1.0, abs=1e-9)
    high = Trajectory(np.sin(2 * np.pi * 20 * t / 64), np.zeros(64), np.zeros(64))
    assert stability_score(high)[0] < 0.05


def test_stability_too_short():
    with pytest.raises(RangeError):
        stability_score(Trajectory.constant(7))


def test_stability_energy_option():
    t = np.arange(64)
    x = np.sin(2 * np.pi * 3 * t / 64) + 0.5 * np.sin(2 * np.pi * 20 * t / 64)
    tr = Trajectory(x, x, x)
    assert stability_score(tr, "magnitude")[0] == pytest.approx(1 / 1.5)
    assert stability_score(tr, "energy")[0] == pytest.approx(1 / 1.25)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_stability_dc_invariant(seed, dx, dth):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 48))
    tr = Trajectory(*a)
    shifted = Trajectory(a[0] + dx, a[1] - dx, a[2] + dth)
    s0, s1 = stability_score(tr), stability_score(shifted)
    assert s0 == pytest.approx(s1, abs=1e-9)
    assert 0 <= s0[2] <= 1 and s0[2] == min(s0[0], s0[1])


def test_stability_increases_with_oracle_damping():
    t = np.arange(64)
    base = np.sin(2 * np.pi * 2 * t / 64)
    jit = 0.3 * np.sin(2 * np.pi * 11 * t / 64)
    tr = Trajectory(base + jit, base, base)
    scores = [stability_score(trajectory_smooth_oracle(tr, m))[2] for m in range(6)]
    assert all(b > a for a, b in zip(scores, scores[1:]))


# ---------------------------------------------------------------- distortion and cropping


def test_identity_distortion_and_cropping(source_image):
    seq = seq_of(view(source_image), 2)
    assert distortion_score(seq, seq) == pytest.approx(1.0, abs=1e-3)
    assert cropping_score(seq, seq) == pytest.approx(1.0, abs=1e-3)


def test_distortion_anisotropic(source_image):
    a = seq_of(view(source_image), 1)
    b = seq_of(view(source_image, np.diag([1.0, 1 / 0.8])), 1)
    assert distortion_score(a, b) == pytest.approx(0.8, abs=0.02)


def test_distortion_rotation(source_image):
    a = seq_of(view(source_image), 1)
    b = seq_of(view(source_image, rot(-0.2)), 1)
    assert distortion_score(a, b) == pytest.approx(1.0, abs=0.02)


def test_cropping_zoom(source_image):
    a = seq_of(view(source_image), 1)
    b = seq_of(view(source_image, 0.9 * np.eye(2)), 1)
    assert cropping_score(a, b) == pytest.approx(0.9, abs=0.02)


def test_distortion_failures_reported(source_image):
    f = view(source_image)
    a = FrameSequence(np.stack([f, f]))
    b = FrameSequence(np.stack([f, np.full_like(f, 0.5)]))
    d = distortion_details(a, b)
    assert d.failed == [1] and len(d.values) == 1
    with pytest.raises(TrackingError):
        distortion_score(FrameSequence(np.stack([f])), FrameSequence(np.stack([f * 0 + 0.5])))


def test_iterative_output_keeps_field_of_view(stab_pair):
    seq = FrameSequence(stab_pair.unstable.frames[:12])
    out = iterative_stabilize(seq, cfg=StabilizeConfig(m=5))
    assert cropping_score(seq, out) >= 0.98


# ---------------------------------------------------------------- report


def test_evaluate_identity(stab_pair):
    seq = FrameSequence(stab_pair.stable.frames[:10])
    rep = evaluate(seq, seq, 0.0)
    assert rep.distortion == pytest.approx(1, abs=1e-3)
    assert rep.cropping == pytest.approx(1, abs=1e-3)
    assert rep.runtime_ms_per_frame == 0 and rep.frames_failed == 0
    assert rep.stability == min(rep.stability_t, rep.stability_theta)


def test_evaluate_stable_beats_unstable(stab_pair):
    p = stab_pair
    assert evaluate(p.unstable, p.stable).stability > evaluate(p.unstable, p.unstable).stability


def test_report_round_trip():
    rep = MetricsReport(0.5, 0.6, 0.5, 0.99, 1.01, 12.5, 64, 1, "iterative")
    text = rep.to_json()
    assert set(json.loads(text)) == set(REPORT_KEYS)
    assert MetricsReport.from_json(text) == rep
