"""Losses, augmentation, learning-rate schedules and the training loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, RangeError, ShapeError, StateError, ValidationError
from .frames import FrameSequence, psnr, window_indices
from .nets import (Discriminator, FeatureExtractor, Refiner, StabNet, load_checkpoint,
                   save_checkpoint)
from .synth import RefinerSample, StabPair

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iter", "loss_total", "loss_content", "loss_adv", "lr")

PROFILES = {
    "desk": {"patch_size": 48, "residual_blocks": 8, "base_width": 32,
             "max_iters": {1: 2000, 2: 500}},
    "paper": {"patch_size": 220, "residual_blocks": 64, "base_width": 64,
              "max_iters": {1: 70000, 2: 70000}},
}


@dataclass
class TrainConfig:
    stage: int = 1
    lr_init: Optional[float] = None
    lr_schedule: Optional[str] = None
    lambda_adv: float = 0.01
    patch_size: int = 48
    batch_size: Optional[int] = None
    patches_per_batch: int = 5
    max_iters: int = 2000
    seed: int = 0
    loss: str = "l2"
    eval_every: int = 100
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    augment: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr_init is None:
            self.lr_init = 1e-4 if self.stage == 1 else 5e-5
        if self.lr_schedule is None:
            self.lr_schedule = "plateau" if self.stage == 1 else "linear"
        if self.batch_size is None:
            self.batch_size = 5 if self.stage == 1 else 3
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be non-negative")
        if self.loss not in ("l2", "l1"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.lr_schedule not in ("plateau", "linear"):
            raise ConfigError(f"unknown schedule {self.lr_schedule!r}")

    @classmethod
    def for_profile(cls, profile: str, stage: int, **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        p = PROFILES[profile]
        kw = {"stage": stage, "patch_size": p["patch_size"], "max_iters": p["max_iters"][stage]}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass(frozen=True)
class AugmentSpec:
    flip_h: bool = True
    flip_v: bool = True
    flip_prob: float = 0.5
    reverse_order: bool = True
    reverse_prob: float = 0.5
    resize_scale: tuple = (1.0, 1.0)
    brightness: float = 0.0
    hue: float = 0.0
    gamma: tuple = (1.0, 1.0)
    contrast: tuple = (1.0, 1.0)
    seed: int = 0

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(flip_h=False, flip_v=False, reverse_order=False)

    @classmethod
    def desk(cls, seed: int = 0) -> "AugmentSpec":
        return cls(resize_scale=(0.9, 1.1), brightness=0.05, hue=0.05, gamma=(0.9, 1.1),
                   contrast=(0.9, 1.1), seed=seed)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    val_history: list = field(default_factory=list)
    disc_scores: list = field(default_factory=list)


# ---------------------------------------------------------------- losses


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, np.float64))


def loss_l2(pred, target) -> torch.Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes(pred, target)
    return ((pred - target) ** 2).mean()


def loss_l1(pred, target) -> torch.Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes(pred, target)
    return (pred - target).abs().mean()


def loss_perceptual(pred: torch.Tensor, target: torch.Tensor,
                    extractor: FeatureExtractor) -> torch.Tensor:
    _check_shapes(pred, target)
    return ((extractor(pred) - extractor(target)) ** 2).mean()


def adversarial_term(disc_score) -> torch.Tensor:
    """Non-saturating generator loss, -log D(G(x))."""
    return -torch.log(_as_tensor(disc_score))


def loss_stage2(content, disc_score, lambda_adv: float = 0.01) -> torch.Tensor:
    """content + lambda * (-log D); ``content`` is the perceptual loss value."""
    s = _as_tensor(disc_score)
    if torch.any((s <= 0) | (s >= 1)):
        raise RangeError("discriminator score must lie in (0, 1)")
    return _as_tensor(content) + lambda_adv * adversarial_term(s).mean()


# ---------------------------------------------------------------- augmentation

_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def _hue_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return _YIQ_INV @ rot @ _YIQ


def augment(window: np.ndarray, target: np.ndarray, spec: AugmentSpec,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random geometric + photometric draw to a 5-frame window and its target.

    Geometric and photometric changes hit all six frames identically; order
    reversal only permutes the five inputs.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    win = np.asarray(window, np.float64)
    tgt = np.asarray(target, np.float64)
    # draw everything up front so the stream of draws does not depend on flags
    u = rng.random(3)
    scale = rng.uniform(*spec.resize_scale)
    bright = rng.uniform(-spec.brightness, spec.brightness)
    hue = rng.uniform(-spec.hue, spec.hue)
    gamma = rng.uniform(*spec.gamma)
    contrast = rng.uniform(*spec.contrast)

    if spec.flip_h and u[0] < spec.flip_prob:
        win, tgt = win[:, :, ::-1], tgt[:, ::-1]
    if spec.flip_v and u[1] < spec.flip_prob:
        win, tgt = win[:, ::-1], tgt[::-1]
    if spec.reverse_order and u[2] < spec.reverse_prob:
        win = win[::-1]
    if scale != 1.0:
        h, w = tgt.shape[:2]
        size = (max(1, round(w * scale)), max(1, round(h * scale)))
        win = np.stack([cv2.resize(f, size, interpolation=cv2.INTER_LINEAR) for f in win])
        tgt = cv2.resize(np.ascontiguousarray(tgt), size, interpolation=cv2.INTER_LINEAR)

    photometric = (bright != 0.0 or hue != 0.0 or gamma != 1.0 or contrast != 1.0)
    if photometric:
        mat = _hue_matrix(hue) if hue != 0.0 else None

        def adjust(x):
            if mat is not None:
                x = np.clip(x @ mat.T, 0.0, 1.0)
            x = np.clip(x + bright, 0.0, 1.0)
            x = np.clip((x - x.mean()) * contrast + x.mean(), 0.0, 1.0)
            return x ** gamma

        win = np.stack([adjust(f) for f in win])
        tgt = adjust(tgt)
    return np.ascontiguousarray(win), np.ascontiguousarray(tgt)


# ---------------------------------------------------------------- schedules


def lr_plateau(history: Sequence[float], lr: float, patience: int = 5, factor: float = 0.5,
               threshold: float = 1e-4) -> float:
    """Learning rate after the latest evaluation in ``history``.

    Replays the history: an evaluation counts as an improvement when it beats the
    best so far by more than ``threshold`` (relative).  Every ``patience``
    consecutive non-improving evaluations close one plateau window; the rate is
    cut by ``factor`` exactly when the latest evaluation closes a window.
    """
    if not 0.0 < factor < 1.0:
        raise ValidationError(f"factor must be in (0, 1), got {factor}")
    best, bad, cut_now = math.inf, 0, False
    for loss in history:
        cut_now = False
        if loss < best * (1.0 - threshold) or best == math.inf:
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= patience:
                cut_now, bad = True, 0
    return lr * factor if cut_now else lr


def lr_linear(iteration: int, max_iters: int, lr_init: float) -> float:
    if iteration < 0 or iteration > max_iters:
        raise RangeError(f"iteration {iteration} outside [0, {max_iters}]")
    return lr_init * (1.0 - iteration / max_iters)


# ---------------------------------------------------------------- sampling


def _to_batch(arrs) -> torch.Tensor:
    """List of (N, P, P, 3) arrays -> (B, 3N, P, P) float32 tensor."""
    a = np.stack(arrs)
    b, n, h, w, c = a.shape
    return torch.from_numpy(np.ascontiguousarray(
        a.transpose(0, 1, 4, 2, 3).reshape(b, n * c, h, w))).float()


def sample_stab_batch(dataset: Sequence[StabPair], cfg: TrainConfig, rng: np.random.Generator,
                      aug: AugmentSpec | None):
    """batch_size clips x patches_per_batch synchronised 5-frame patch windows."""
    p = cfg.patch_size
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        pair = dataset[int(rng.integers(len(dataset)))]
        n = len(pair.unstable)
        for _ in range(cfg.patches_per_batch):
            t = int(rng.integers(n))
            win = pair.unstable.frames[window_indices(n, t)]
            tgt = pair.stable.frames[t]
            if aug is not None:
                win, tgt = augment(win, tgt, aug, rng)
            h, w = tgt.shape[:2]
            if h < p or w < p:
                raise ConfigError(f"frames {h}x{w} smaller than patch {p}")
            r0, c0 = int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1))
            xs.append(win[:, r0:r0 + p, c0:c0 + p])
            ys.append(tgt[None, r0:r0 + p, c0:c0 + p])
    return _to_batch(xs), _to_batch(ys)


def sample_refiner_batch(samples: Sequence[RefinerSample], cfg: TrainConfig,
                         rng: np.random.Generator, aug: AugmentSpec | None = None):
    p = cfg.patch_size
    xs, ys = [], []
    for _ in range(cfg.batch_size * cfg.patches_per_batch):
        s = samples[int(rng.integers(len(samples)))]
        nb = s.clean_neighbors
        stack = np.stack([nb[0], nb[1], s.degraded_center, nb[2], nb[3]])
        tgt = s.clean_center
        if aug is not None:
            # order reversal keeps the degraded frame in the middle slot
            stack, tgt = augment(stack, tgt, aug, rng)
        h, w = tgt.shape[:2]
        if h < p or w < p:
            raise ConfigError(f"frames {h}x{w} smaller than patch {p}")
        r0, c0 = int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1))
        xs.append(stack[:, r0:r0 + p, c0:c0 + p])
        ys.append(tgt[None, r0:r0 + p, c0:c0 + p])
    return _to_batch(xs), _to_batch(ys)


# ---------------------------------------------------------------- inference helpers


def apply_stabnet(seq: FrameSequence, net: StabNet, batch: int = 8) -> FrameSequence:
    """Run the network over every frame, replicating edge frames for the window."""
    n = len(seq)
    if n < 1:
        raise RangeError("empty sequence")
    dtype = next(net.parameters()).dtype
    out = np.empty_like(seq.frames)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for s in range(0, n, batch):
            ts = range(s, min(s + batch, n))
            x = _to_batch([seq.frames[window_indices(n, t)] for t in ts]).to(dtype)
            y = net(x).to(torch.float64).permute(0, 2, 3, 1).numpy()
            out[s:s + len(ts)] = y
    net.train(was_training)
    return seq.replace(np.clip(out, 0.0, 1.0), name=f"{seq.name}_net")


def heldout_l2(pairs: Sequence[StabPair], net: StabNet) -> float:
    errs = [float(np.mean((apply_stabnet(p.unstable, net).frames - p.stable.frames) ** 2))
            for p in pairs]
    return float(np.mean(errs))


def apply_refiner(samples: Sequence[RefinerSample], net: Refiner) -> list[np.ndarray]:
    dtype = next(net.parameters()).dtype
    outs = []
    with torch.no_grad():
        for s in samples:
            nb = s.clean_neighbors
            x = _to_batch([np.stack([nb[0], nb[1], s.degraded_center, nb[2], nb[3]])]).to(dtype)
            outs.append(np.clip(net(x)[0].to(torch.float64).permute(1, 2, 0).numpy(), 0, 1))
    return outs


def refiner_psnr(samples: Sequence[RefinerSample], net: Refiner | None = None) -> float:
    """Mean PSNR against the clean centre; of the degraded frames when ``net`` is None."""
    preds = [s.degraded_center for s in samples] if net is None else apply_refiner(samples, net)
    return float(np.mean([psnr(p, s.clean_center) for p, s in zip(preds, samples)]))


# ---------------------------------------------------------------- loops


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(row[k])) if k != "iter" else int(row[k]))
                        for k in HISTORY_COLUMNS})


def _finish(result: TrainResult, net, cfg: TrainConfig, out_dir, stage: int, name: str):
    if out_dir is None:
        return result
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}_loss.csv"
    write_history_csv(result.history, csv_path)
    result.checkpoint = save_checkpoint(out_dir / name, net, stage=stage,
                                        iteration=cfg.max_iters, seed=cfg.seed,
                                        loss_history_path=str(csv_path.resolve()),
                                        extra={"train_config": asdict(cfg)})
    return result


def _regression_loop(net, sampler, val_batch, cfg: TrainConfig,
                     progress: Callable[[dict], None] | None):
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_init)
    lossfn = loss_l2 if cfg.loss == "l2" else loss_l1
    lr = cfg.lr_init
    result = TrainResult()
    net.train()
    for it in range(cfg.max_iters):
        if cfg.lr_schedule == "linear":
            lr = lr_linear(it, cfg.max_iters, cfg.lr_init)
        for g in opt.param_groups:
            g["lr"] = lr
        x, y = sampler(rng)
        loss = lossfn(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"iter": it, "loss_total": loss.item(), "loss_content": loss.item(),
               "loss_adv": 0.0, "lr": lr}
        result.history.append(row)
        if progress is not None:
            progress(row)
        if val_batch is not None and (it + 1) % cfg.eval_every == 0:
            with torch.no_grad():
                net.eval()
                result.val_history.append(float(lossfn(net(val_batch[0]), val_batch[1])))
                net.train()
            if cfg.lr_schedule == "plateau":
                lr = lr_plateau(result.val_history, lr, cfg.plateau_patience, cfg.plateau_factor)
    net.eval()
    return result


def train_stage1(dataset: Sequence[StabPair], net: StabNet, cfg: TrainConfig,
                 heldout: Sequence[StabPair] | None = None, out_dir=None,
                 aug: AugmentSpec | None = None,
                 progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimise the reconstruction loss over random synchronised patch windows."""
    if not dataset:
        raise ValidationError("empty training set")
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    for pair in dataset:
        if min(pair.unstable.height, pair.unstable.width) < cfg.patch_size:
            raise ConfigError(f"frames smaller than patch size {cfg.patch_size}")
    if aug is None and cfg.augment:
        aug = AugmentSpec.desk(cfg.seed)
    val_batch = sample_stab_batch(heldout or dataset, replace(cfg, batch_size=5),
                                  np.random.default_rng(cfg.seed + 1_000_003), None)
    result = _regression_loop(net, lambda rng: sample_stab_batch(dataset, cfg, rng, aug),
                              val_batch, cfg, progress)
    return _finish(result, net, cfg, out_dir, 1, "stage1")


def train_refiner(samples: Sequence[RefinerSample], net: Refiner, cfg: TrainConfig,
                  heldout: Sequence[RefinerSample] | None = None, out_dir=None,
                  aug: AugmentSpec | None = None,
                  progress: Callable[[dict], None] | None = None) -> TrainResult:
    """L2 regression of the clean centre from clean neighbours and the degraded frame."""
    if not samples:
        raise ValidationError("no refiner samples")
    if min(samples[0].clean_center.shape[:2]) < cfg.patch_size:
        raise ConfigError(f"frames smaller than patch size {cfg.patch_size}")
    if aug is None and cfg.augment:
        aug = AugmentSpec(reverse_order=True, seed=cfg.seed)
    val_batch = sample_refiner_batch(heldout or samples, cfg,
                                     np.random.default_rng(cfg.seed + 1_000_003))
    result = _regression_loop(net, lambda rng: sample_refiner_batch(samples, cfg, rng, aug),
                              val_batch, cfg, progress)
    return _finish(result, net, cfg, out_dir, 1, "refiner")


def train_stage2(dataset: Sequence[StabPair], init, disc: Discriminator,
                 extractor: FeatureExtractor, cfg: TrainConfig, out_dir=None,
                 aug: AugmentSpec | None = None,
                 progress: Callable[[dict], None] | None = None,
                 net: StabNet | None = None) -> tuple[StabNet, TrainResult]:
    """Perceptual + adversarial fine-tuning starting from a stage-1 checkpoint.

    ``init`` is the stage-1 checkpoint directory; ``net`` optionally receives the
    loaded weights instead of a freshly built network.
    """
    if init is None:
        raise StateError("stage 2 needs a stage-1 checkpoint")
    loaded, sidecar = load_checkpoint(init)
    if not isinstance(loaded, StabNet):
        raise StateError(f"{init} is not a stabilization-network checkpoint")
    if net is None:
        net = loaded
    else:
        net.load_state_dict(loaded.state_dict())
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    if aug is None and cfg.augment:
        aug = AugmentSpec.desk(cfg.seed)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt_g = torch.optim.Adam(net.parameters(), lr=cfg.lr_init)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_init)
    result = TrainResult()
    net.train()
    disc.train()
    for it in range(cfg.max_iters):
        lr = lr_linear(it, cfg.max_iters, cfg.lr_init)
        for g in opt_g.param_groups + opt_d.param_groups:
            g["lr"] = lr
        x, y = sample_stab_batch(dataset, cfg, rng, aug)

        with torch.no_grad():
            fake = net(x)
        real_logit, fake_logit = disc.logits(y), disc.logits(fake)
        loss_d = (F.binary_cross_entropy_with_logits(real_logit, torch.ones_like(real_logit))
                  + F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit)))
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        pred = net(x)
        content = loss_perceptual(pred, y, extractor)
        gen_logit = disc.logits(pred)
        # -log(sigmoid(l)) == softplus(-l), computed stably
        adv = F.softplus(-gen_logit).mean()
        total = content + cfg.lambda_adv * adv
        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        row = {"iter": it, "loss_total": total.item(), "loss_content": content.item(),
               "loss_adv": adv.item(), "lr": lr, "loss_disc": loss_d.item()}
        result.history.append(row)
        result.disc_scores.append((float(torch.sigmoid(real_logit.detach()).mean()),
                                   float(torch.sigmoid(fake_logit.detach()).mean())))
        if progress is not None:
            progress(row)
    net.eval()
    disc.eval()
    return net, _finish(result, net, cfg, out_dir, 2, "stage2")
