"""Camera trajectories: per-frame window translation (px) and rotation (rad)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError


@dataclass(frozen=True)
class Trajectory:
    tx: np.ndarray
    ty: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        arrs = []
        for name in ("tx", "ty", "theta"):
            a = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} contains non-finite values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrs.append(a)
        if not (len(arrs[0]) == len(arrs[1]) == len(arrs[2])) or len(arrs[0]) < 1:
            raise ValidationError("tx, ty and theta must share one length >= 1")

    @property
    def length(self) -> int:
        return len(self.tx)

    def __len__(self):
        return self.length

    @classmethod
    def constant(cls, length: int, tx=0.0, ty=0.0, theta=0.0) -> "Trajectory":
        return cls(np.full(length, tx), np.full(length, ty), np.full(length, theta))

    def as_array(self) -> np.ndarray:
        return np.stack([self.tx, self.ty, self.theta], axis=1)

    def signals(self) -> dict[str, np.ndarray]:
        return {"tx": self.tx, "ty": self.ty, "theta": self.theta}

    def __add__(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(self.tx + other.tx, self.ty + other.ty, self.theta + other.theta)

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(self.tx - other.tx, self.ty - other.ty, self.theta - other.theta)

    def pose_matrix(self, t: int) -> np.ndarray:
        return pose_matrix(self.tx[t], self.ty[t], self.theta[t])


def pose_matrix(tx: float, ty: float, theta: float) -> np.ndarray:
    """Maps window-centred frame coordinates to source coordinates (relative to image centre)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "tx", "ty", "theta"])
        for t in range(traj.length):
            w.writerow([t, repr(float(traj.tx[t])), repr(float(traj.ty[t])),
                        repr(float(traj.theta[t]))])


def read_trajectory_csv(path) -> Trajectory:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["t"]))
        return Trajectory([float(r["tx"]) for r in rows], [float(r["ty"]) for r in rows],
                          [float(r["theta"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed trajectory CSV {path}: {exc}") from exc
