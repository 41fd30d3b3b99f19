"""Synthetic equi-perspective training data.

A single large source image is viewed through a moving, rotating window.  The
stable clip follows a smooth band-limited path; the unstable clip follows the
same path plus high-frequency jitter, so both clips share their content exactly
and differ only in trajectory smoothness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import RangeError, ValidationError
from .frames import FrameSequence, sample_bilinear
from .interp import StabilizeConfig, builtin_interp, iterative_stabilize
from .trajectory import Trajectory

SMOOTH_BINS = (2, 6)


@dataclass(frozen=True)
class JitterSpec:
    amplitude_px: float = 3.0
    amplitude_rad: float = 0.01
    min_freq_bin: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.amplitude_px < 0 or self.amplitude_rad < 0:
            raise ValidationError("jitter amplitudes must be non-negative")
        if self.min_freq_bin < 7:
            raise ValidationError("min_freq_bin must be >= 7 to stay above the low band")


@dataclass(frozen=True)
class StabPair:
    unstable: FrameSequence
    stable: FrameSequence
    unstable_traj: Trajectory
    stable_traj: Trajectory


@dataclass(frozen=True)
class RefinerSample:
    clean_neighbors: np.ndarray  # (4, H, W, 3): t-2, t-1, t+1, t+2
    degraded_center: np.ndarray
    clean_center: np.ndarray


def make_source_image(size: int = 512, seed: int = 0) -> np.ndarray:
    """Procedural multi-scale colour texture in [0, 1], rich in trackable corners."""
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size, 3))
    for sigma, weight in ((1.2, 0.35), (3.0, 0.45), (8.0, 0.6), (24.0, 0.8)):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)),
                                        sigma=(sigma, sigma, 0), mode="wrap")
        layer /= layer.std() + 1e-12
        img += weight * layer
    img -= img.min()
    img /= img.max()
    return img


def _band_signal(length: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.zeros(length // 2 + 1, dtype=np.complex128)
    k = np.arange(lo, hi + 1)
    if len(k):
        spec[k] = (rng.standard_normal(len(k)) + 1j * rng.standard_normal(len(k))) / k
    return np.fft.irfft(spec, n=length)


def gen_smooth_trajectory(length: int, speed_px: float = 1.0, turn_rate: float = 0.002,
                          seed: int = 0) -> Trajectory:
    """Periodic path whose DC-free spectrum lives only in bins 2..6.

    ``speed_px`` is the mean window speed in pixels per frame and ``turn_rate``
    the mean absolute angular speed in radians per frame.
    """
    if length < 5:
        raise RangeError(f"trajectory length must be >= 5, got {length}")
    rng = np.random.default_rng(seed)
    hi = min(SMOOTH_BINS[1], (length - 1) // 2)
    tx, ty, theta = (_band_signal(length, SMOOTH_BINS[0], hi, rng) for _ in range(3))
    speed = np.hypot(np.diff(tx, append=tx[:1]), np.diff(ty, append=ty[:1])).mean()
    turn = np.abs(np.diff(theta, append=theta[:1])).mean()
    s_xy = speed_px / speed if speed > 0 else 0.0
    s_th = turn_rate / turn if turn > 0 else 0.0
    return Trajectory(tx * s_xy, ty * s_xy, theta * s_th)


def gen_linear_trajectory(length: int, speed_px: float = 1.5, seed: int = 0) -> Trajectory:
    """Constant-velocity path centred on the image, random heading."""
    heading = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi)
    t = np.arange(length) - (length - 1) / 2.0
    return Trajectory(speed_px * np.cos(heading) * t, speed_px * np.sin(heading) * t,
                      np.zeros(length))


def jitter_signal(length: int, amplitude: float, min_bin: int, rng) -> np.ndarray:
    """Zero-mean signal on bins >= min_bin with 1/k magnitudes; peak |value| = amplitude."""
    nyq = length // 2
    if nyq < min_bin:
        raise ValidationError(f"{length} frames cannot carry jitter at bin >= {min_bin}")
    spec = np.zeros(nyq + 1, dtype=np.complex128)
    k = np.arange(min_bin, nyq + 1)
    spec[k] = np.exp(2j * np.pi * rng.random(len(k))) / k
    if length % 2 == 0:
        spec[nyq] = (np.sign(spec[nyq].real) or 1.0) / nyq
    sig = np.fft.irfft(spec, n=length)
    peak = np.abs(sig).max()
    return sig * (amplitude / peak) if peak > 0 else sig


def inject_jitter(traj: Trajectory, spec: JitterSpec) -> Trajectory:
    if spec.amplitude_px == 0 and spec.amplitude_rad == 0:
        return traj
    rng = np.random.default_rng(spec.seed)
    n = traj.length
    dx = jitter_signal(n, spec.amplitude_px, spec.min_freq_bin, rng)
    dy = jitter_signal(n, spec.amplitude_px, spec.min_freq_bin, rng)
    dth = jitter_signal(n, spec.amplitude_rad, spec.min_freq_bin, rng)
    return Trajectory(traj.tx + dx, traj.ty + dy, traj.theta + dth)


def _window_grid(window):
    w, h = window
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    return u - (w - 1) / 2.0, v - (h - 1) / 2.0


def _check_bounds(image_shape, traj: Trajectory, window):
    H, W = image_shape[:2]
    w, h = window
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    cu = np.array([-(w - 1) / 2.0, (w - 1) / 2.0])
    cv = np.array([-(h - 1) / 2.0, (h - 1) / 2.0])
    uu, vv = np.meshgrid(cu, cv)
    uu, vv = uu.ravel(), vv.ravel()
    eps = 1e-9
    for t in range(traj.length):
        c, s = np.cos(traj.theta[t]), np.sin(traj.theta[t])
        xs = cx + traj.tx[t] + c * uu - s * vv
        ys = cy + traj.ty[t] + s * uu + c * vv
        if xs.min() < -eps or ys.min() < -eps or xs.max() > W - 1 + eps or ys.max() > H - 1 + eps:
            raise RangeError(f"window leaves the {W}x{H} source image at frame {t}")


def render_crop_sequence(image: np.ndarray, traj: Trajectory, window=(128, 128),
                         fps: float = 30.0, name: str = "render") -> FrameSequence:
    """Bilinear crops of ``image`` through a window posed by ``traj`` (rotation about its centre)."""
    image = np.asarray(image, np.float64)
    _check_bounds(image.shape, traj, window)
    H, W = image.shape[:2]
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    u, v = _window_grid(window)
    frames = np.empty((traj.length, window[1], window[0], 3))
    for t in range(traj.length):
        c, s = np.cos(traj.theta[t]), np.sin(traj.theta[t])
        xs = cx + traj.tx[t] + c * u - s * v
        ys = cy + traj.ty[t] + s * u + c * v
        frames[t] = sample_bilinear(image, xs, ys)
    return FrameSequence(np.clip(frames, 0.0, 1.0), fps=fps, name=name)


def warp_between_poses(frame: np.ndarray, pose_from, pose_to):
    """Re-render ``frame`` (seen at ``pose_from``) as it would look from ``pose_to``.

    Poses are (tx, ty, theta).  Returns (warped, valid_mask); pixels whose source
    falls outside ``frame`` are marked invalid.
    """
    h, w = frame.shape[:2]
    u, v = _window_grid((w, h))
    tx1, ty1, th1 = pose_from
    tx2, ty2, th2 = pose_to
    c2, s2 = np.cos(th2), np.sin(th2)
    px = tx2 + c2 * u - s2 * v - tx1
    py = ty2 + s2 * u + c2 * v - ty1
    c1, s1 = np.cos(th1), np.sin(th1)
    su = c1 * px + s1 * py
    sv = -s1 * px + c1 * py
    xs, ys = su + (w - 1) / 2.0, sv + (h - 1) / 2.0
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    return sample_bilinear(frame, xs, ys), valid


def make_stab_pair(image: np.ndarray, length: int = 64, window=(128, 128),
                   jitter: JitterSpec | None = None, seed: int = 0, speed_px: float = 1.0,
                   turn_rate: float = 0.002) -> StabPair:
    if jitter is None:
        jitter = JitterSpec(seed=seed)
    smooth = gen_smooth_trajectory(length, speed_px, turn_rate, seed=seed)
    shaky = inject_jitter(smooth, jitter)
    stable = render_crop_sequence(image, smooth, window, name=f"stable_{seed}")
    unstable = render_crop_sequence(image, shaky, window, name=f"unstable_{seed}")
    return StabPair(unstable=unstable, stable=stable, unstable_traj=shaky, stable_traj=smooth)


def make_refiner_samples(image: np.ndarray, length: int = 64, window=(128, 128),
                         degrade: StabilizeConfig | int = 4, seed: int = 0,
                         speed_px: float = 1.5, radius: int = 2) -> list[RefinerSample]:
    """Clean linear-motion crops paired with their iteratively interpolated versions."""
    if isinstance(degrade, int):
        degrade = StabilizeConfig(m=degrade, k=max(degrade, 1))
    clean = render_crop_sequence(image, gen_linear_trajectory(length, speed_px, seed), window,
                                 name=f"clean_{seed}")
    degraded = iterative_stabilize(clean, builtin_interp, None, degrade)
    samples = []
    for t in range(radius, length - radius):
        nb = np.stack([clean.frames[t - 2], clean.frames[t - 1],
                       clean.frames[t + 1], clean.frames[t + 2]])
        samples.append(RefinerSample(nb, degraded.frames[t].copy(), clean.frames[t].copy()))
    return samples


def make_stab_dataset(count: int, seed: int = 0, length: int = 64, window=(128, 128),
                      image_size: int = 384, jitter: JitterSpec | None = None) -> list[StabPair]:
    """``count`` pairs, each from its own procedural source image."""
    pairs = []
    for i in range(count):
        s = seed * 100_003 + i
        img = make_source_image(image_size, seed=s)
        jit = jitter if jitter is None else JitterSpec(jitter.amplitude_px, jitter.amplitude_rad,
                                                        jitter.min_freq_bin, seed=s)
        pairs.append(make_stab_pair(img, length, window, jitter=jit, seed=s))
    return pairs
