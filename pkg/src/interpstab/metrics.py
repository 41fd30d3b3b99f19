"""Stability, distortion and cropping metrics plus the tracking machinery behind them.

Frame coordinates used throughout are centred on the frame: a pixel at column x,
row y sits at (x - (W - 1) / 2, y - (H - 1) / 2).  With that convention a
homography fitted between two frames of the synthetic generator decomposes
directly into the window pose difference.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from .errors import (DegeneracyError, InsufficientDataError, RangeError, TrackingError,
                     ValidationError)
from .frames import FrameSequence, luma, sample_bilinear
from .trajectory import Trajectory

LOW_BAND = (2, 6)

REPORT_KEYS = (
    "stability", "stability_t", "stability_theta", "distortion", "cropping",
    "runtime_ms_per_frame", "frames_evaluated", "frames_failed", "method",
)


# ---------------------------------------------------------------- features


def detect_corners(frame: np.ndarray, max_corners: int = 500, nms_radius: int = 8,
                   sigma: float = 1.5, k: float = 0.04, rel_thresh: float = 1e-3) -> np.ndarray:
    """Harris corners as an (N, 2) array of (x, y), strongest first."""
    gray = luma(frame) if frame.ndim == 3 else np.asarray(frame, np.float64)
    if gray.shape[0] < 16 or gray.shape[1] < 16:
        raise RangeError(f"frame {gray.shape} smaller than 16x16")
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    resp = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    peak = resp.max()
    if not peak > 1e-12:
        return np.zeros((0, 2))
    local_max = ndimage.maximum_filter(resp, size=2 * nms_radius + 1, mode="nearest")
    ys, xs = np.nonzero((resp == local_max) & (resp > rel_thresh * peak))
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:max_corners]
    return np.stack([xs[order], ys[order]], axis=1).astype(np.float64)


def _subpixel(vals: np.ndarray) -> float:
    """Vertex offset of a parabola through three samples, in [-0.5, 0.5]."""
    a, b, c = vals
    denom = a - 2.0 * b + c
    if denom >= 0.0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def match_corners(a: np.ndarray, b: np.ndarray, kps: np.ndarray, patch: int = 11,
                  search: int = 16, min_ncc: float = 0.8,
                  refine: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Track keypoints of ``a`` into ``b`` by zero-mean NCC; returns (pts_a, pts_b)."""
    if a.shape != b.shape:
        raise ValidationError(f"frame shapes differ: {a.shape} vs {b.shape}")
    ga = (luma(a) if a.ndim == 3 else a).astype(np.float32)
    gb = (luma(b) if b.ndim == 3 else b).astype(np.float32)
    h, w = ga.shape
    r = patch // 2
    pa, pb = [], []
    for x, y in np.asarray(kps, dtype=np.int64).reshape(-1, 2):
        if x < r or y < r or x >= w - r or y >= h - r:
            continue
        tmpl = ga[y - r:y + r + 1, x - r:x + r + 1]
        if float(tmpl.std()) < 1e-6:
            continue
        x0, x1 = max(x - search - r, 0), min(x + search + r + 1, w)
        y0, y1 = max(y - search - r, 0), min(y + search + r + 1, h)
        region = gb[y0:y1, x0:x1]
        if region.shape[0] < patch or region.shape[1] < patch:
            continue
        ncc = cv2.matchTemplate(region, tmpl, cv2.TM_CCOEFF_NORMED)
        ncc = np.nan_to_num(ncc, nan=-1.0)
        iy, ix = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
        best = float(ncc[iy, ix])
        if best < min_ncc:
            continue
        dx = _subpixel(ncc[iy, ix - 1:ix + 2]) if 0 < ix < ncc.shape[1] - 1 else 0.0
        dy = _subpixel(ncc[iy - 1:iy + 2, ix]) if 0 < iy < ncc.shape[0] - 1 else 0.0
        pa.append((float(x), float(y)))
        pb.append((x0 + ix + r + dx, y0 + iy + r + dy))
    pa = np.array(pa).reshape(-1, 2)
    pb = np.array(pb).reshape(-1, 2)
    if refine and len(pa):
        pb = _refine_matches(ga.astype(np.float64), gb.astype(np.float64), pa, pb, r)
    return pa, pb


def _refine_matches(ga, gb, pa, pb, r, iters=20, max_move=1.0):
    """Gauss-Newton sub-pixel polish of NCC matches on the (2r+1)^2 window.

    Matches whose polish wanders more than ``max_move`` px keep their NCC position.
    """
    offs_y, offs_x = np.mgrid[-r:r + 1, -r:r + 1].reshape(2, -1).astype(np.float64)
    tmpl = sample_bilinear(ga, pa[:, :1] + offs_x, pa[:, 1:] + offs_y)
    tmpl = tmpl - tmpl.mean(axis=1, keepdims=True)
    gy_img, gx_img = np.gradient(gb)
    p = pb.copy()
    for _ in range(iters):
        xs, ys = p[:, :1] + offs_x, p[:, 1:] + offs_y
        win = sample_bilinear(gb, xs, ys)
        win = win - win.mean(axis=1, keepdims=True)
        gx = sample_bilinear(gx_img, xs, ys)
        gy = sample_bilinear(gy_img, xs, ys)
        e = tmpl - win
        a11, a12, a22 = (gx * gx).sum(1), (gx * gy).sum(1), (gy * gy).sum(1)
        b1, b2 = (gx * e).sum(1), (gy * e).sum(1)
        det = a11 * a22 - a12 * a12
        ok = det > 1e-12
        det = np.where(ok, det, 1.0)
        step = np.stack([(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det], axis=1)
        p = p + np.where(ok[:, None], step, 0.0)
        if np.abs(step).max() < 1e-7:
            break
    moved = np.linalg.norm(p - pb, axis=1) > max_move
    p[moved] = pb[moved]
    return p


# ---------------------------------------------------------------- homography


def _normalize_points(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 1e-12 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _collinear(pts, tol=1e-6) -> bool:
    if len(pts) < 3:
        return True
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    return sv[1] <= tol * max(sv[0], 1e-12)


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalised DLT; least squares in the algebraic sense when more than 4 points."""
    ns, Ts = _normalize_points(src)
    nd, Td = _normalize_points(dst)
    n = len(src)
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u], axis=1)
    A[1::2] = np.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v], axis=1)
    _, sv, vt = np.linalg.svd(A)
    if n == 4 and sv[-2] < 1e-10:
        return None
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = np.c_[pts, np.ones(len(pts))] @ H.T
    return q[:, :2] / q[:, 2:3]


def _transfer_error(H, src, dst):
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.sqrt(((project(H, src) - dst) ** 2).sum(axis=1))
    return np.where(np.isfinite(e), e, np.inf)


def _batched_dlt4(src4: np.ndarray, dst4: np.ndarray) -> np.ndarray:
    """Normalised DLT for a stack of 4-point samples, shapes (B, 4, 2) -> (B, 3, 3)."""

    def norm(p):
        c = p.mean(axis=1, keepdims=True)
        d = np.sqrt(((p - c) ** 2).sum(axis=2)).mean(axis=1)
        s = np.sqrt(2.0) / np.maximum(d, 1e-12)
        T = np.zeros((len(p), 3, 3))
        T[:, 0, 0] = T[:, 1, 1] = s
        T[:, 0, 2] = -s * c[:, 0, 0]
        T[:, 1, 2] = -s * c[:, 0, 1]
        T[:, 2, 2] = 1.0
        return (p - c) * s[:, None, None], T

    ns, Ts = norm(src4)
    nd, Td = norm(dst4)
    b = len(src4)
    x, y = ns[..., 0], ns[..., 1]
    u, v = nd[..., 0], nd[..., 1]
    z, o = np.zeros((b, 4)), np.ones((b, 4))
    A = np.empty((b, 8, 9))
    A[:, 0::2] = np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=2)
    A[:, 1::2] = np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=2)
    _, _, vt = np.linalg.svd(A)
    Hn = vt[:, -1].reshape(b, 3, 3)
    return np.linalg.inv(Td) @ Hn @ Ts


def _min_triangle_area(p: np.ndarray) -> np.ndarray:
    areas = []
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        e1, e2 = p[:, j] - p[:, i], p[:, k] - p[:, i]
        areas.append(0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]))
    return np.min(areas, axis=0)


def estimate_homography_ransac(src: np.ndarray, dst: np.ndarray, iters: int = 2000,
                               thresh_px: float = 2.0, seed: int = 0):
    """RANSAC over 4-point normalised-DLT samples; returns (H, inlier_mask).

    The winning model has the most inliers (ties go to the lower mean inlier
    error) and is refit on its full inlier set before returning.
    """
    src = np.asarray(src, np.float64).reshape(-1, 2)
    dst = np.asarray(dst, np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise InsufficientDataError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    idx = np.argsort(rng.random((iters, n)), axis=1)[:, :4]
    s4, d4 = src[idx], dst[idx]
    spread = max(float(np.ptp(src, axis=0).max()), float(np.ptp(dst, axis=0).max()), 1e-9)
    area_tol = 1e-4 * spread ** 2
    ok = (_min_triangle_area(s4) > area_tol) & (_min_triangle_area(d4) > area_tol)
    best_mask = None
    if ok.any():
        Hs = _batched_dlt4(s4[ok], d4[ok])
        hom = np.c_[src, np.ones(n)]
        q = np.einsum("bij,nj->bni", Hs, hom)
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.sqrt(((q[..., :2] / q[..., 2:3] - dst) ** 2).sum(axis=2))
        err = np.where(np.isfinite(err), err, np.inf)
        masks = err < thresh_px
        counts = masks.sum(axis=1)
        mean_err = np.where(counts > 0, np.where(masks, err, 0.0).sum(axis=1)
                            / np.maximum(counts, 1), np.inf)
        # most inliers, then lowest mean inlier error, then earliest sample
        order = np.lexsort((np.arange(len(counts)), mean_err, -counts))
        best = order[0]
        best_count = int(counts[best])
        best_mask = masks[best]
    if best_mask is None or best_count < 4:
        raise DegeneracyError("no non-degenerate 4-point model found")
    mask = best_mask
    H = None
    for _ in range(3):
        if _collinear(src[mask]) or _collinear(dst[mask]):
            raise DegeneracyError("inlier support is collinear")
        H_new = fit_homography_dlt(src[mask], dst[mask])
        if H_new is None:
            raise DegeneracyError("refit on inliers failed")
        H = H_new
        new_mask = _transfer_error(H, src, dst) < thresh_px
        if new_mask.sum() < 4 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return H, mask


@dataclass(frozen=True)
class PoseDecomposition:
    tx: float
    ty: float
    theta: float
    scale: float
    anisotropy: float


def decompose_homography(H: np.ndarray) -> PoseDecomposition:
    H = np.asarray(H, np.float64)
    if abs(H[2, 2]) < 1e-12:
        raise DegeneracyError("homography has zero bottom-right entry")
    H = H / H[2, 2]
    A = H[:2, :2]
    U, sv, Vt = np.linalg.svd(A)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegeneracyError("affine part of homography is singular")
    R = U @ Vt
    if np.linalg.det(R) < 0:
        # reflection: fold the sign into the smallest singular direction
        U[:, 1] *= -1.0
        R = U @ Vt
    return PoseDecomposition(
        tx=float(H[0, 2]),
        ty=float(H[1, 2]),
        theta=float(math.atan2(R[1, 0], R[0, 0])),
        scale=float(math.sqrt(sv[0] * sv[1])),
        anisotropy=float(sv[1] / sv[0]),
    )


def compose_similarity(tx, ty, theta, scale=1.0) -> np.ndarray:
    c, s = scale * math.cos(theta), scale * math.sin(theta)
    return np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])


def _centred(pts, shape):
    h, w = shape[:2]
    return pts - np.array([(w - 1) / 2.0, (h - 1) / 2.0])


def frame_homography(src_frame: np.ndarray, dst_frame: np.ndarray, seed: int = 0,
                     min_inliers: int = 4) -> np.ndarray:
    """Homography mapping centred coordinates of ``src_frame`` onto ``dst_frame``."""
    kps = detect_corners(src_frame)
    pa, pb = match_corners(src_frame, dst_frame, kps)
    if len(pa) < 4:
        raise TrackingError(f"only {len(pa)} matches")
    H, mask = estimate_homography_ransac(_centred(pa, src_frame.shape),
                                         _centred(pb, dst_frame.shape), seed=seed)
    if mask.sum() < min_inliers:
        raise TrackingError(f"only {int(mask.sum())} inliers")
    return H


# ---------------------------------------------------------------- trajectories


def _pose_from_matrix(G: np.ndarray):
    p = decompose_homography(G)
    return p.tx, p.ty, p.theta


def chain_trajectory(seq: FrameSequence, on_failure: str = "raise", seed: int = 0,
                     failures: list | None = None) -> Trajectory:
    """Absolute window trajectory from chained inter-frame homographies (pose 0 = origin).

    ``on_failure="bridge"`` substitutes an identity step for untrackable pairs and
    appends the pair index to ``failures`` instead of raising.
    """
    if len(seq) < 2:
        raise RangeError("trajectory estimation needs at least 2 frames")
    G = np.eye(3)
    poses = [(0.0, 0.0, 0.0)]
    for t in range(len(seq) - 1):
        try:
            # maps centred coords of frame t+1 into frame t
            H = frame_homography(seq.frames[t + 1], seq.frames[t], seed=seed)
        except (TrackingError, DegeneracyError, InsufficientDataError) as exc:
            if on_failure != "bridge":
                raise TrackingError(f"frames {t}->{t + 1}: {exc}") from exc
            if failures is not None:
                failures.append(t)
            H = np.eye(3)
        G = G @ H
        G = G / G[2, 2]
        poses.append(_pose_from_matrix(G))
    arr = np.array(poses)
    return Trajectory(arr[:, 0], arr[:, 1], arr[:, 2])


def register_trajectory(seq: FrameSequence, reference: FrameSequence,
                        reference_traj: Trajectory, seed: int = 0,
                        failures: list | None = None) -> Trajectory:
    """Absolute pose of each frame of ``seq`` via registration to frames of known pose."""
    if len(seq) != len(reference) or len(seq) != reference_traj.length:
        raise ValidationError("sequence, reference and reference trajectory lengths differ")
    poses = []
    for t in range(len(seq)):
        G_ref = reference_traj.pose_matrix(t)
        try:
            H = frame_homography(seq.frames[t], reference.frames[t], seed=seed)
        except (TrackingError, DegeneracyError, InsufficientDataError):
            if failures is None:
                raise
            failures.append(t)
            H = np.eye(3)
        poses.append(_pose_from_matrix(G_ref @ H))
    arr = np.array(poses)
    return Trajectory(arr[:, 0], arr[:, 1], arr[:, 2])


# ---------------------------------------------------------------- stability


def spectrum(signal: np.ndarray, kind: str = "magnitude") -> np.ndarray:
    """Real-DFT spectrum of the DC-removed signal; index k is k cycles per clip."""
    x = np.asarray(signal, np.float64)
    f = np.abs(np.fft.rfft(x - x.mean()))
    if kind == "energy":
        return f ** 2
    if kind != "magnitude":
        raise ValueError(f"unknown spectrum kind {kind!r}")
    return f


def signal_stability(signal: np.ndarray, kind: str = "magnitude") -> float:
    n_samples = len(signal)
    if n_samples < 8:
        raise RangeError(f"stability needs at least 8 samples, got {n_samples}")
    f = spectrum(signal, kind)
    lo, hi = LOW_BAND
    denom = f[2:].sum()
    if denom < 1e-12:
        return 1.0
    return float(f[lo:hi + 1].sum() / denom)


def stability_score(traj: Trajectory, kind: str = "magnitude") -> tuple[float, float, float]:
    """(S_t, S_theta, S_final); S_t is the worse of the two translation axes."""
    s_t = min(signal_stability(traj.tx, kind), signal_stability(traj.ty, kind))
    s_theta = signal_stability(traj.theta, kind)
    return s_t, s_theta, min(s_t, s_theta)


def band_magnitude(signal: np.ndarray, lo: int, hi: int | None = None) -> float:
    f = spectrum(signal)
    return float(f[lo:None if hi is None else hi + 1].sum())


# ---------------------------------------------------------------- distortion / cropping


@dataclass
class FrameScores:
    values: list[float] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)


def _pairwise(a_seq: FrameSequence, b_seq: FrameSequence, attr: str, seed: int) -> FrameScores:
    if len(a_seq) != len(b_seq):
        raise ValidationError(f"sequence lengths differ: {len(a_seq)} vs {len(b_seq)}")
    out = FrameScores()
    for t in range(len(a_seq)):
        try:
            H = frame_homography(a_seq.frames[t], b_seq.frames[t], seed=seed)
            out.values.append(getattr(decompose_homography(H), attr))
        except (TrackingError, DegeneracyError, InsufficientDataError):
            out.failed.append(t)
    return out


def distortion_details(input_seq, output_seq, seed: int = 0) -> FrameScores:
    return _pairwise(input_seq, output_seq, "anisotropy", seed)


def cropping_details(input_seq, output_seq, seed: int = 0) -> FrameScores:
    # fitted from output coordinates into input coordinates
    return _pairwise(output_seq, input_seq, "scale", seed)


def distortion_score(input_seq: FrameSequence, output_seq: FrameSequence, seed: int = 0) -> float:
    d = distortion_details(input_seq, output_seq, seed)
    if not d.values:
        raise TrackingError(f"homography failed on every frame ({len(d.failed)})")
    return float(min(d.values))


def cropping_score(input_seq: FrameSequence, output_seq: FrameSequence, seed: int = 0) -> float:
    d = cropping_details(input_seq, output_seq, seed)
    if not d.values:
        raise TrackingError(f"homography failed on every frame ({len(d.failed)})")
    return float(np.mean(d.values))


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    stability: float
    stability_t: float
    stability_theta: float
    distortion: float
    cropping: float
    runtime_ms_per_frame: float
    frames_evaluated: int
    frames_failed: int
    method: str = "unknown"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        missing = set(REPORT_KEYS) - set(d)
        if missing:
            raise ValidationError(f"report missing keys {sorted(missing)}")
        return cls(**{k: d[k] for k in REPORT_KEYS})

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def evaluate(input_seq: FrameSequence, output_seq: FrameSequence, timing_ms: float = 0.0,
             method: str = "unknown", trajectory: Trajectory | None = None,
             kind: str = "magnitude", seed: int = 0) -> MetricsReport:
    """Bundle stability, distortion, cropping and runtime for one input/output pair.

    ``trajectory`` supplies a known output trajectory; otherwise it is chained
    from the output frames, bridging untrackable pairs.
    """
    if len(input_seq) != len(output_seq):
        raise ValidationError(f"sequence lengths differ: {len(input_seq)} vs {len(output_seq)}")
    failed: set[int] = set()
    if trajectory is None:
        chain_failures: list[int] = []
        trajectory = chain_trajectory(output_seq, on_failure="bridge", seed=seed,
                                      failures=chain_failures)
        failed.update(t + 1 for t in chain_failures)
    s_t, s_theta, s_final = stability_score(trajectory, kind)
    dist = distortion_details(input_seq, output_seq, seed)
    crop = cropping_details(input_seq, output_seq, seed)
    failed.update(dist.failed)
    failed.update(crop.failed)
    return MetricsReport(
        stability=s_final,
        stability_t=s_t,
        stability_theta=s_theta,
        distortion=float(min(dist.values)) if dist.values else float("nan"),
        cropping=float(np.mean(crop.values)) if crop.values else float("nan"),
        runtime_ms_per_frame=float(timing_ms),
        frames_evaluated=len(input_seq),
        frames_failed=len(failed),
        method=method,
    )
