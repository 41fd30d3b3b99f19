"""Frame sequences on disk and in memory, patch windows and bilinear sampling."""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, IntegrityError, RangeError, StabError, ValidationError

MANIFEST_NAME = "manifest.json"
DEFAULT_PATTERN = "frame_%06d.png"


@dataclass(frozen=True)
class FrameSequence:
    """Ordered RGB frames of shape (T, H, W, 3), float64 in [0, 1]."""

    frames: np.ndarray
    fps: float = 30.0
    name: str = "sequence"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValidationError(f"frames must have shape (T, H, W, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValidationError("a sequence needs at least one frame")
        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise ValidationError("frame values must lie in [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, t):
        return self.frames[t]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def clamp_index(self, t: int) -> int:
        return min(max(t, 0), len(self) - 1)

    def replace(self, frames, name=None) -> "FrameSequence":
        return FrameSequence(frames, fps=self.fps, name=self.name if name is None else name)


@dataclass(frozen=True)
class SequenceManifest:
    width: int
    height: int
    frame_count: int
    fps: float
    frame_pattern: str
    checksum: str

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "frame_count": self.frame_count,
            "fps": self.fps,
            "frame_pattern": self.frame_pattern,
            "checksum": self.checksum,
        }


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    origin: tuple[int, int]
    source_index: int


def to_uint8(frame: np.ndarray) -> np.ndarray:
    # round half up; exact inverse of k / 255
    return np.floor(np.asarray(frame) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def from_uint8(frame: np.ndarray) -> np.ndarray:
    return np.asarray(frame, dtype=np.float64) / 255.0


def sequence_checksum(frames_u8) -> str:
    h = hashlib.sha256()
    for f in frames_u8:
        h.update(np.ascontiguousarray(f).tobytes())
    return h.hexdigest()


def _pattern_regex(pattern: str) -> re.Pattern:
    m = re.search(r"%0(\d+)d", pattern)
    if m is None:
        raise FormatError(f"unsupported frame pattern {pattern!r}")
    head, tail = pattern[: m.start()], pattern[m.end():]
    return re.compile(re.escape(head) + r"(\d{%s})" % m.group(1) + re.escape(tail) + "$")


def save_sequence(seq: FrameSequence, path, pattern: str = DEFAULT_PATTERN) -> SequenceManifest:
    path = Path(path)
    if len(seq) < 1:
        raise ValidationError("cannot save an empty sequence")
    try:
        path.mkdir(parents=True, exist_ok=True)
        frames_u8 = [to_uint8(f) for f in seq.frames]
        for i, f in enumerate(frames_u8):
            Image.fromarray(f, mode="RGB").save(path / (pattern % i))
        manifest = SequenceManifest(
            width=seq.width,
            height=seq.height,
            frame_count=len(seq),
            fps=float(seq.fps),
            frame_pattern=pattern,
            checksum=sequence_checksum(frames_u8),
        )
        (path / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    except OSError as exc:
        err = StabError(f"cannot write sequence to {path}: {exc}")
        err.exit_code = 4
        raise err from exc
    return manifest


def read_manifest(path) -> SequenceManifest:
    mpath = Path(path) / MANIFEST_NAME
    if not mpath.is_file():
        raise FormatError(f"no {MANIFEST_NAME} in {path}")
    try:
        raw = json.loads(mpath.read_text())
        return SequenceManifest(
            width=int(raw["width"]),
            height=int(raw["height"]),
            frame_count=int(raw["frame_count"]),
            fps=float(raw["fps"]),
            frame_pattern=str(raw["frame_pattern"]),
            checksum=str(raw["checksum"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest in {path}: {exc}") from exc


def _read_png(p: Path) -> np.ndarray:
    with Image.open(p) as im:
        if im.mode != "RGB":
            raise FormatError(f"{p.name}: expected 8-bit RGB, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def load_sequence(path, workers: int = 4) -> FrameSequence:
    path = Path(path)
    manifest = read_manifest(path)
    rx = _pattern_regex(manifest.frame_pattern)
    indices = sorted(int(m.group(1)) for p in path.iterdir() if (m := rx.match(p.name)))
    if len(indices) != manifest.frame_count:
        raise IntegrityError(
            f"manifest lists {manifest.frame_count} frames but {len(indices)} files are present"
        )
    if indices != list(range(manifest.frame_count)):
        raise IntegrityError("frame indices are not contiguous from zero")
    files = [path / (manifest.frame_pattern % i) for i in indices]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        frames_u8 = list(pool.map(_read_png, files))
    for i, f in enumerate(frames_u8):
        if f.shape != (manifest.height, manifest.width, 3):
            raise IntegrityError(f"frame {i} has shape {f.shape}, manifest says "
                                 f"{manifest.height}x{manifest.width}")
    if sequence_checksum(frames_u8) != manifest.checksum:
        raise IntegrityError(f"checksum mismatch in {path}")
    return FrameSequence(np.stack([from_uint8(f) for f in frames_u8]),
                         fps=manifest.fps, name=path.name)


def extract_patch_windows(seq: FrameSequence, center_index: int, radius: int = 2,
                          patch_size: int = 48, origin=(0, 0)) -> list[Patch]:
    """Co-located patches from frames center-radius .. center+radius, clamped in time."""
    if not 0 <= center_index < len(seq):
        raise RangeError(f"center index {center_index} outside [0, {len(seq)})")
    r0, c0 = origin
    if r0 < 0 or c0 < 0 or r0 + patch_size > seq.height or c0 + patch_size > seq.width:
        raise RangeError(
            f"{patch_size}x{patch_size} patch at {origin} exceeds {seq.height}x{seq.width} frame"
        )
    out = []
    for t in range(center_index - radius, center_index + radius + 1):
        src = seq.clamp_index(t)
        out.append(Patch(seq.frames[src, r0:r0 + patch_size, c0:c0 + patch_size].copy(),
                         (r0, c0), src))
    return out


def window_indices(length: int, center: int, radius: int = 2) -> list[int]:
    return [min(max(t, 0), length - 1) for t in range(center - radius, center + radius + 1)]


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of img (H, W[, C]) at float coordinates, edge-clamped."""
    h, w = img.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2) if w > 1 else np.zeros(xs.shape, np.intp)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2) if h > 1 else np.zeros(ys.shape, np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def shift_frame(frame: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Translate content by (dx, dy): out(y, x) = in(y - dy, x - dx), edges clamped."""
    h, w = frame.shape[:2]
    if dx == 0 and dy == 0:
        return np.array(frame, copy=True)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(frame, xs - dx, ys - dy)


def luma(frame: np.ndarray) -> np.ndarray:
    return frame[..., 0] * 0.299 + frame[..., 1] * 0.587 + frame[..., 2] * 0.114


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
