"""Stabilization network, refinement network, discriminator and the frozen feature stack."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, ShapeError, StateError, ValidationError


@dataclass(frozen=True)
class StabNetSpec:
    in_frames: int = 5
    channels_per_frame: int = 3
    residual_blocks: int = 8
    base_width: int = 64
    out_channels: int = 3
    res_scale: float = 1.0

    def __post_init__(self):
        if self.in_frames != 5:
            raise ValidationError("the stabilization network takes exactly 5 frames")
        if self.residual_blocks < 1:
            raise ValidationError("residual_blocks must be >= 1")


@dataclass(frozen=True)
class RefinerSpec:
    residual_blocks: int = 6
    base_width: int = 64
    out_channels: int = 3
    res_scale: float = 1.0
    in_channels: int = 15

    def __post_init__(self):
        if self.in_channels != 15:
            raise ValidationError("the refiner takes 4 clean neighbours + 1 degraded frame")


@dataclass(frozen=True)
class DiscriminatorSpec:
    widths: tuple = (64, 128, 256, 512)
    stride: int = 2
    leaky_slope: float = 0.2

    @property
    def min_size(self) -> int:
        return self.stride ** len(self.widths)


@dataclass(frozen=True)
class FeatureExtractorSpec:
    widths: tuple = (32, 64, 128)
    convs_per_stage: int = 2
    seed: int = 19
    frozen: bool = field(default=True, init=False)

    @property
    def depth(self) -> int:
        return len(self.widths) * self.convs_per_stage


class ResidualBlock(nn.Module):
    def __init__(self, width: int, res_scale: float = 1.0):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.conv2(F.relu(self.conv1(x)))


class _ResidualRegressor(nn.Module):
    """head conv -> residual blocks -> body conv (+ long skip) -> zero-init tail conv."""

    def __init__(self, in_channels, width, blocks, out_channels, res_scale):
        super().__init__()
        self.head = nn.Conv2d(in_channels, width, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(width, res_scale) for _ in range(blocks)])
        self.body = nn.Conv2d(width, width, 3, padding=1)
        self.tail = nn.Conv2d(width, out_channels, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def correction(self, x):
        h = self.head(x)
        return self.tail(F.relu(self.body(self.blocks(h)) + h))


class StabNet(_ResidualRegressor):
    """Five stacked frames in, a correction added to the centre frame out."""

    def __init__(self, spec: StabNetSpec = StabNetSpec()):
        super().__init__(spec.in_frames * spec.channels_per_frame, spec.base_width,
                         spec.residual_blocks, spec.out_channels, spec.res_scale)
        self.spec = spec

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 15:
            raise ShapeError(f"expected (B, 15, H, W), got {tuple(x.shape)}")
        return x[:, 6:9] + self.correction(x)


class Refiner(_ResidualRegressor):
    """Clean neighbours t-2, t-1, t+1, t+2 plus a degraded frame in; cleaned frame out.

    Channel order is c[t-2], c[t-1], degraded, c[t+1], c[t+2].
    """

    def __init__(self, spec: RefinerSpec = RefinerSpec()):
        super().__init__(15, spec.base_width, spec.residual_blocks, spec.out_channels,
                         spec.res_scale)
        self.spec = spec

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 15:
            raise ShapeError(f"expected (B, 15, H, W), got {tuple(x.shape)}")
        return x[:, 6:9] + self.correction(x)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        layers, cin = [], 3
        for w in spec.widths:
            layers += [nn.Conv2d(cin, w, 3, stride=spec.stride, padding=1),
                       nn.LeakyReLU(spec.leaky_slope)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, 1)
        self.spec = spec

    def logits(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.spec.min_size:
            raise ShapeError(f"frames must be at least {self.spec.min_size}px, "
                             f"got {tuple(x.shape[-2:])}")
        return self.fc(self.features(x).mean(dim=(2, 3))).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class FeatureExtractor(nn.Module):
    """Frozen conv/ReLU stack with average-pool downsampling between stages.

    Weights come from a fixed numpy seed so features are reproducible on any machine.
    """

    def __init__(self, spec: FeatureExtractorSpec = FeatureExtractorSpec()):
        super().__init__()
        rng = np.random.default_rng(spec.seed)
        layers, cin = [], 3
        for i, w in enumerate(spec.widths):
            if i > 0:
                layers.append(nn.AvgPool2d(2))
            for _ in range(spec.convs_per_stage):
                conv = nn.Conv2d(cin, w, 3, padding=1)
                std = np.sqrt(2.0 / (cin * 9))
                with torch.no_grad():
                    conv.weight.copy_(torch.from_numpy(rng.normal(0.0, std, conv.weight.shape)))
                    conv.bias.zero_()
                layers += [conv, nn.ReLU()]
                cin = w
        self.net = nn.Sequential(*layers)
        self.spec = spec
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------- numpy-facing helpers


def frames_to_tensor(frames, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, 3) frames -> (1, 3N, H, W) tensor."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    n, h, w, c = arr.shape
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2).reshape(n * c, h, w))
                            ).to(dtype).unsqueeze(0)


def tensor_to_frame(x: torch.Tensor) -> np.ndarray:
    return x.detach().to(torch.float64).squeeze(0).permute(1, 2, 0).numpy()


def _check_same_shape(frames):
    shapes = {np.shape(f) for f in frames}
    if len(shapes) != 1:
        raise ShapeError(f"frames differ in shape: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 3 or shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) frames, got {shape}")
    return shape


def _param_dtype(net):
    return next(net.parameters()).dtype


def stabnet_forward(window, net: StabNet) -> np.ndarray:
    if len(window) != 5:
        raise ShapeError(f"need 5 frames, got {len(window)}")
    h, w, _ = _check_same_shape(window)
    if h < 16 or w < 16:
        raise ShapeError(f"frames must be at least 16x16, got {h}x{w}")
    with torch.no_grad():
        out = net(frames_to_tensor(np.stack(window), _param_dtype(net)))
    return tensor_to_frame(out)


def refiner_forward(neighbors, degraded, net: Refiner) -> np.ndarray:
    if len(neighbors) != 4:
        raise ShapeError(f"need 4 neighbours, got {len(neighbors)}")
    _check_same_shape(list(neighbors) + [degraded])
    stack = np.stack([neighbors[0], neighbors[1], degraded, neighbors[2], neighbors[3]])
    with torch.no_grad():
        out = net(frames_to_tensor(stack, _param_dtype(net)))
    return tensor_to_frame(out)


def discriminator_forward(frame, net: Discriminator) -> float:
    _check_same_shape([frame])
    with torch.no_grad():
        return float(net(frames_to_tensor(frame, _param_dtype(net)))[0])


def phi(frame, extractor: FeatureExtractor) -> np.ndarray:
    _check_same_shape([frame])
    with torch.no_grad():
        return extractor(frames_to_tensor(frame, _param_dtype(extractor)))[0].numpy()


def make_refine_fn(net: Refiner, clip: bool = True):
    """Adapter to the refiner callable expected by iterative_stabilize."""

    def refine(neighbors, current):
        out = refiner_forward(neighbors, current, net)
        return np.clip(out, 0.0, 1.0) if clip else out

    return refine


# ---------------------------------------------------------------- checkpoints

_KINDS = {"stabnet": (StabNet, StabNetSpec), "refiner": (Refiner, RefinerSpec),
          "discriminator": (Discriminator, DiscriminatorSpec)}
MODEL_FILE = "model.pt"
SIDECAR_FILE = "checkpoint.json"


def _kind_of(net) -> str:
    for kind, (cls, _) in _KINDS.items():
        if isinstance(net, cls):
            return kind
    raise ValidationError(f"cannot checkpoint {type(net).__name__}")


def save_checkpoint(path, net: nn.Module, stage: int, iteration: int, seed: int,
                    loss_history_path: str | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path / MODEL_FILE)
    spec = asdict(net.spec)
    spec["kind"] = _kind_of(net)
    sidecar = {"spec": spec, "stage": stage, "iteration": iteration, "seed": seed,
               "loss_history_path": loss_history_path}
    if extra:
        sidecar.update(extra)
    (path / SIDECAR_FILE).write_text(json.dumps(sidecar, indent=2, default=list) + "\n")
    return path


def load_checkpoint(path):
    """Returns (net, sidecar dict)."""
    path = Path(path)
    if not (path / SIDECAR_FILE).is_file() or not (path / MODEL_FILE).is_file():
        raise StateError(f"no checkpoint at {path}")
    try:
        sidecar = json.loads((path / SIDECAR_FILE).read_text())
        spec_d = dict(sidecar["spec"])
        cls, spec_cls = _KINDS[spec_d.pop("kind")]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"malformed checkpoint manifest in {path}: {exc}") from exc
    if "widths" in spec_d:
        spec_d["widths"] = tuple(spec_d["widths"])
    spec_d.pop("frozen", None)
    net = cls(spec_cls(**spec_d))
    net.load_state_dict(torch.load(path / MODEL_FILE, map_location="cpu", weights_only=True))
    return net, sidecar
