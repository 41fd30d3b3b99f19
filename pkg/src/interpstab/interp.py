"""Stabilization by repeated frame interpolation, with an optional in-loop refiner."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import RangeError, ShapeError, ValidationError
from .frames import FrameSequence, luma, shift_frame
from .trajectory import Trajectory


@dataclass(frozen=True)
class StabilizeConfig:
    m: int = 5
    k: int = 4
    skip: int = 1

    def __post_init__(self):
        if self.m < 0 or self.k < 1 or self.skip < 1:
            raise ValidationError(f"invalid config m={self.m} k={self.k} skip={self.skip}")


class Interpolator(Protocol):
    def __call__(self, prev: np.ndarray, next: np.ndarray) -> np.ndarray: ...


# refiner(neighbors (4, H, W, 3) = U[t-2], U[t-1], U[t+1], U[t+2]; current frame) -> frame
Refiner = Callable[[np.ndarray, np.ndarray], np.ndarray]


def estimate_global_shift(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """Integer (dx, dy) such that b is approximately a circularly shifted by (dx, dy).

    Phase correlation peak; equal peaks resolve to the smallest |shift|, then
    the smallest dy, then the smallest dx.
    """
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    ga = luma(a) if a.ndim == 3 else np.asarray(a, np.float64)
    gb = luma(b) if b.ndim == 3 else np.asarray(b, np.float64)
    h, w = ga.shape
    if h < 8 or w < 8:
        raise RangeError(f"frames must be at least 8x8, got {h}x{w}")
    # apodize so the frame border does not read as a zero-shift edge
    win = np.outer(np.hanning(h), np.hanning(w))
    fa = np.fft.fft2((ga - ga.mean()) * win)
    fb = np.fft.fft2((gb - gb.mean()) * win)
    cross = fb * np.conj(fa)
    mag = np.abs(cross)
    cross = np.where(mag > 1e-12 * max(mag.max(), 1e-300), cross / np.maximum(mag, 1e-300), 0.0)
    corr = np.fft.ifft2(cross).real
    best = corr.max()
    ys, xs = np.nonzero(corr >= best - 1e-9 * max(abs(best), 1.0))
    dys = np.where(ys > h // 2, ys - h, ys)
    dxs = np.where(xs > w // 2, xs - w, xs)
    dys = np.where(ys == h // 2, -(h // 2), dys)
    dxs = np.where(xs == w // 2, -(w // 2), dxs)
    i = np.lexsort((dxs, dys, dxs * dxs + dys * dys))[0]
    return int(dxs[i]), int(dys[i])


def builtin_interp(prev: np.ndarray, next: np.ndarray) -> np.ndarray:
    """Global-translation motion-compensated midpoint of two frames."""
    if prev.shape != next.shape:
        raise ShapeError(f"frame shapes differ: {prev.shape} vs {next.shape}")
    dx, dy = estimate_global_shift(prev, next)
    a = shift_frame(prev, dx / 2.0, dy / 2.0)
    b = shift_frame(next, -dx / 2.0, -dy / 2.0)
    return 0.5 * (a + b)


def iterative_stabilize(seq: FrameSequence, interp: Interpolator = builtin_interp,
                        refiner: Optional[Refiner] = None,
                        cfg: StabilizeConfig = StabilizeConfig(),
                        workers: int = 1, on_refine: Callable[[int], None] | None = None
                        ) -> FrameSequence:
    """Replace every interior frame by interp(frame[t-skip], frame[t+skip]), m times.

    Updates are simultaneous within an iteration.  After every k-th iteration the
    refiner, if given, cleans each interior frame using the original input
    neighbours t-2, t-1, t+1, t+2 (clamped at the clip ends).
    """
    n = len(seq)
    if n < 3:
        raise RangeError(f"need at least 3 frames, got {n}")
    original = seq.frames
    cur = np.array(original, copy=True)
    interior = list(range(cfg.skip, n - cfg.skip))
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        def run(fn, items):
            return list(pool.map(fn, items)) if pool else [fn(i) for i in items]

        for it in range(1, cfg.m + 1):
            prev = cur
            new = run(lambda t: interp(prev[t - cfg.skip], prev[t + cfg.skip]), interior)
            cur = np.array(prev, copy=True)
            for t, f in zip(interior, new):
                cur[t] = f
            if refiner is not None and it % cfg.k == 0:
                def refine_one(t, frames=cur):
                    idx = [min(max(t + d, 0), n - 1) for d in (-2, -1, 1, 2)]
                    return refiner(original[idx], frames[t])
                refined = run(refine_one, interior)
                for t, f in zip(interior, refined):
                    cur[t] = f
                if on_refine is not None:
                    on_refine(it)
    finally:
        if pool:
            pool.shutdown()
    return seq.replace(np.clip(cur, 0.0, 1.0))


def trajectory_smooth_oracle(traj: Trajectory, m: int) -> Trajectory:
    """Trajectory-space shadow of iterative_stabilize: x[t] <- (x[t-1] + x[t+1]) / 2."""
    if traj.length < 3:
        raise RangeError("need at least 3 samples")
    out = []
    for sig in (traj.tx, traj.ty, traj.theta):
        x = np.array(sig, copy=True)
        for _ in range(m):
            x[1:-1] = 0.5 * (x[:-2] + x[2:])
        out.append(x)
    return Trajectory(*out)
