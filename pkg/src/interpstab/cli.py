"""Command-line entry point: synth, train, stabilize, evaluate, smooth-demo, replay.

Exit codes: 0 success, 2 usage, 3 state or precondition failure, 4 data integrity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import ConfigError, StabError, StateError, ValidationError
from .frames import FrameSequence, from_uint8, load_sequence, save_sequence, window_indices
from .interp import StabilizeConfig, builtin_interp, iterative_stabilize, trajectory_smooth_oracle
from .metrics import (chain_trajectory, evaluate, register_trajectory, spectrum,
                      stability_score)
from .synth import (JitterSpec, RefinerSample, StabPair, gen_linear_trajectory,
                    gen_smooth_trajectory, inject_jitter, make_refiner_samples, make_source_image,
                    make_stab_dataset, make_stab_pair, render_crop_sequence)
from .trajectory import Trajectory, read_trajectory_csv, write_trajectory_csv

log = logging.getLogger("interpstab")

RUN_FILE = "run.json"
TRAJ_FILE = "trajectory.csv"
# amplitude_rad follows amplitude_px at this ratio unless given explicitly
RAD_PER_PX = 0.01 / 3.0

# per-profile data geometry; network and patch sizes live in training.PROFILES
DATA_PROFILES = {
    "desk": {"window": 128, "image_size": 384, "pairs": 20, "heldout_pairs": 4},
    "paper": {"window": 256, "image_size": 640, "pairs": 20, "heldout_pairs": 4},
}


# ---------------------------------------------------------------- helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _write_run(args, out: Path, resolved: dict | None = None) -> None:
    body = {"command": args.command, "version": __version__,
            "args": {k: v for k, v in vars(args).items() if k not in ("func", "config")}}
    if resolved:
        body["resolved"] = resolved
    _write_json(out / RUN_FILE, body)


def _load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except OSError as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc


def _source_image(args, seed: int) -> np.ndarray:
    if args.image:
        return _load_image(args.image)
    log.info("no --image given; using a %dpx procedural texture (seed %d)", args.image_size, seed)
    return make_source_image(args.image_size, seed=seed)


def _save_with_traj(seq: FrameSequence, traj: Trajectory | None, path: Path) -> str:
    manifest = save_sequence(seq, path)
    if traj is not None:
        write_trajectory_csv(traj, path / TRAJ_FILE)
    return manifest.checksum


def _pair_dirs(root: Path) -> list[Path]:
    if (root / "unstable").is_dir():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "unstable").is_dir())
    if not dirs:
        raise ValidationError(f"no pair directories under {root}")
    return dirs


def _load_pair(d: Path) -> StabPair:
    return StabPair(unstable=load_sequence(d / "unstable"), stable=load_sequence(d / "stable"),
                    unstable_traj=read_trajectory_csv(d / "unstable" / TRAJ_FILE),
                    stable_traj=read_trajectory_csv(d / "stable" / TRAJ_FILE))


def _load_refiner_dir(d: Path) -> list[RefinerSample]:
    clean, degraded = load_sequence(d / "clean"), load_sequence(d / "degraded")
    if len(clean) != len(degraded):
        raise ValidationError(f"{d}: clean and degraded lengths differ")
    c = clean.frames
    return [RefinerSample(np.stack([c[t - 2], c[t - 1], c[t + 1], c[t + 2]]),
                          degraded.frames[t], c[t]) for t in range(2, len(clean) - 2)]


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> dict:
    out = Path(args.out)
    _write_run(args, out)
    img = _source_image(args, args.seed)
    window = (args.window, args.window)
    if args.kind == "pair":
        rad = args.jitter_rad if args.jitter_rad is not None else args.jitter_px * RAD_PER_PX
        jitter = JitterSpec(args.jitter_px, rad, seed=args.seed)
        pair = make_stab_pair(img, args.frames, window, jitter, seed=args.seed,
                              speed_px=args.speed, turn_rate=args.turn_rate)
        sums = {"unstable": _save_with_traj(pair.unstable, pair.unstable_traj, out / "unstable"),
                "stable": _save_with_traj(pair.stable, pair.stable_traj, out / "stable")}
        return {"checksums": sums, "jitter": asdict(jitter)}
    samples_cfg = StabilizeConfig(m=args.degrade_m, k=max(args.degrade_m, 1))
    traj = gen_linear_trajectory(args.frames, args.speed, args.seed)
    clean = render_crop_sequence(img, traj, window, name="clean")
    degraded = iterative_stabilize(clean, builtin_interp, None, samples_cfg)
    sums = {"clean": _save_with_traj(clean, traj, out / "clean"),
            "degraded": _save_with_traj(degraded, None, out / "degraded")}
    return {"checksums": sums, "samples": max(0, args.frames - 4)}


# ---------------------------------------------------------------- train


def _refiner_dirs(root: Path) -> list[Path]:
    if (root / "clean").is_dir():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "clean").is_dir())
    if not dirs:
        raise ValidationError(f"no refiner directories under {root}")
    return dirs


def _train_data(args, dp: dict):
    if args.model == "refiner":
        if args.data:
            train = [s for d in _refiner_dirs(Path(args.data)) for s in _load_refiner_dir(d)]
        else:
            train = _procedural_refiner(args, dp, args.seed, args.pairs or dp["pairs"])
        if args.heldout:
            held = [s for d in _refiner_dirs(Path(args.heldout)) for s in _load_refiner_dir(d)]
        else:
            held = _procedural_refiner(args, dp, args.seed + 1,
                                       args.heldout_pairs or dp["heldout_pairs"])
        return train, held
    window = (dp["window"], dp["window"])
    if args.data:
        train = [_load_pair(d) for d in _pair_dirs(Path(args.data))]
    else:
        train = make_stab_dataset(args.pairs or dp["pairs"], seed=args.seed, window=window,
                                  image_size=dp["image_size"])
    if args.heldout:
        held = [_load_pair(d) for d in _pair_dirs(Path(args.heldout))]
    else:
        held = make_stab_dataset(args.heldout_pairs or dp["heldout_pairs"], seed=args.seed + 1,
                                 window=window, image_size=dp["image_size"])
    return train, held


def _procedural_refiner(args, dp, seed, clips):
    window = (dp["window"], dp["window"])
    out = []
    for i in range(clips):
        s = seed * 100_003 + i
        img = make_source_image(dp["image_size"], seed=s)
        out += make_refiner_samples(img, 64, window, degrade=args.degrade_m, seed=s)
    return out


def cmd_train(args) -> dict:
    import torch

    from .nets import (Discriminator, FeatureExtractor, Refiner, RefinerSpec, StabNet,
                       StabNetSpec)
    from .training import (PROFILES, TrainConfig, heldout_l2, refiner_psnr, train_refiner,
                           train_stage1, train_stage2)

    out = Path(args.out)
    prof = PROFILES[args.profile]
    if args.stage == 2 and args.model == "refiner":
        raise ConfigError("the refiner has a single training stage")
    if args.stage == 2 and not args.init:
        raise StateError("stage 2 needs --init <stage-1 checkpoint directory>")
    cfg = TrainConfig.for_profile(args.profile, args.stage, seed=args.seed,
                                  patch_size=args.patch, max_iters=args.iters,
                                  lambda_adv=args.lambda_adv, loss=args.loss)
    blocks = args.blocks or prof["residual_blocks"]
    width = args.width or prof["base_width"]
    resolved = {"train_config": asdict(cfg), "residual_blocks": blocks, "base_width": width,
                "data": DATA_PROFILES[args.profile]}
    _write_run(args, out, resolved)
    if args.dry_run:
        return resolved

    torch.manual_seed(args.seed)
    train, held = _train_data(args, DATA_PROFILES[args.profile])
    progress = _progress_logger(args.log_every)
    summary: dict = {"resolved": resolved}
    if args.model == "refiner":
        net = Refiner(RefinerSpec(residual_blocks=blocks, base_width=width))
        before = refiner_psnr(held)
        res = train_refiner(train, net, cfg, held, out_dir=out, progress=progress)
        summary.update(psnr_degraded=before, psnr_refined=refiner_psnr(held, net))
    elif args.stage == 1:
        net = StabNet(StabNetSpec(residual_blocks=blocks, base_width=width))
        before = heldout_l2(held, net)
        res = train_stage1(train, net, cfg, held, out_dir=out, progress=progress)
        summary.update(heldout_l2_init=before, heldout_l2_final=heldout_l2(held, net))
    else:
        net, res = train_stage2(train, args.init, Discriminator(), FeatureExtractor(), cfg,
                                out_dir=out, progress=progress)
        summary.update(heldout_l2_final=heldout_l2(held, net),
                       disc_score_range=[float(np.min(res.disc_scores)),
                                         float(np.max(res.disc_scores))])
    summary["checkpoint"] = str(res.checkpoint)
    summary["final_loss"] = res.history[-1]["loss_total"] if res.history else None
    _write_json(out / "summary.json", summary)
    return summary


def _progress_logger(every: int):
    def progress(row):
        if every and (row["iter"] % every == 0):
            log.info("iter %d loss %.6g lr %.3g", row["iter"], row["loss_total"], row["lr"])
    return progress


# ---------------------------------------------------------------- stabilize


def cmd_stabilize(args) -> dict:
    from .nets import StabNet, load_checkpoint, make_refine_fn, stabnet_forward

    out = Path(args.out)
    seq = load_sequence(args.input)
    cfg = StabilizeConfig(m=args.m, k=args.k, skip=args.skip)
    _write_run(args, out)
    if args.method == "net":
        if not args.checkpoint:
            raise StateError("--method net needs --checkpoint")
        net, _ = load_checkpoint(args.checkpoint)
        if not isinstance(net, StabNet):
            raise StateError(f"{args.checkpoint} is not a stabilization-network checkpoint")
        frames, times = [], []
        net.eval()
        n = len(seq)
        for t in range(n):
            t0 = time.perf_counter()
            out_t = stabnet_forward(seq.frames[window_indices(n, t)], net)
            frames.append(np.clip(out_t, 0.0, 1.0))
            times.append((time.perf_counter() - t0) * 1e3)
        result = seq.replace(np.stack(frames), name=f"{seq.name}_net")
    else:
        refiner = None
        if args.refiner:
            rnet, _ = load_checkpoint(args.refiner)
            refiner = make_refine_fn(rnet)
        t0 = time.perf_counter()
        result = iterative_stabilize(seq, builtin_interp, refiner, cfg, workers=args.workers)
        times = [(time.perf_counter() - t0) * 1e3 / len(seq)] * len(seq)
    manifest = save_sequence(result, out / "frames")
    _write_rows(out / "timing.csv", ("frame", "ms"), [(i, repr(float(ms))) for i, ms in enumerate(times)])
    mean_ms = float(np.mean(times))
    log.info("%d frames, %.1f ms/frame", len(seq), mean_ms)
    return {"checksum": manifest.checksum, "ms_per_frame": mean_ms}


# ---------------------------------------------------------------- evaluate


def _plot(out: Path, traj: Trajectory, kind: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(traj, out / TRAJ_FILE)
    spec = {name: spectrum(sig, kind) for name, sig in traj.signals().items()}
    bins = len(next(iter(spec.values())))
    _write_rows(out / "spectrum.csv", ("bin", *spec),
                [(k, *(repr(float(spec[n][k])) for n in spec)) for k in range(bins)])

    fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
    for ax, (name, sig) in zip(axes, traj.signals().items()):
        ax.plot(sig)
        ax.set_ylabel(name)
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(out / "trajectory.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, f in spec.items():
        ax.plot(np.arange(1, bins), f[1:] / max(f[1:].max(), 1e-12), marker=".", label=name)
    ax.axvspan(2, 6, alpha=0.15, color="green")
    ax.set_xlabel("frequency bin")
    ax.set_ylabel(f"normalised {kind}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "spectrum.png", dpi=100)
    plt.close(fig)


def cmd_evaluate(args) -> dict:
    out = Path(args.out)
    inp, outp = load_sequence(args.input), load_sequence(args.output)
    if len(inp) != len(outp):
        raise ValidationError(f"sequence lengths differ: {len(inp)} vs {len(outp)}")
    _write_run(args, out)
    traj = None
    if args.trajectory == "ground-truth":
        if not args.traj_csv:
            raise ConfigError("--trajectory ground-truth needs --traj-csv")
        known = read_trajectory_csv(args.traj_csv)
        if args.reference:
            traj = register_trajectory(outp, load_sequence(args.reference), known,
                                       seed=args.seed, failures=[])
        else:
            traj = known
    timing = 0.0
    if args.timing:
        with open(args.timing) as fh:
            timing = float(np.mean([float(r["ms"]) for r in csv.DictReader(fh)]))
    report = evaluate(inp, outp, timing, args.method, traj, args.spectrum, args.seed)
    (out / "report.json").write_text(report.to_json() + "\n")
    if args.plot:
        if traj is None:
            traj = chain_trajectory(outp, on_failure="bridge", seed=args.seed)
        _plot(out / "plots", traj, args.spectrum)
    return report.to_dict()


# ---------------------------------------------------------------- smooth-demo


def cmd_smooth_demo(args) -> dict:
    out = Path(args.out)
    _write_run(args, out)
    n, m = args.frames, args.m
    rad = args.jitter_px * RAD_PER_PX
    before = inject_jitter(gen_smooth_trajectory(n, seed=args.seed),
                           JitterSpec(args.jitter_px, rad, seed=args.seed))
    after = trajectory_smooth_oracle(before, m)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "before_after.csv",
                ("t", "tx_before", "ty_before", "theta_before", "tx_after", "ty_after",
                 "theta_after"),
                [(t, *(repr(float(v)) for v in before.as_array()[t]),
                  *(repr(float(v)) for v in after.as_array()[t])) for t in range(n)])
    # per-bin attenuation on pure tones, measured away from the fixed ends
    t = np.arange(n)
    inner = slice(m, n - m)
    rows = []
    for k in range(1, n // 2 + 1):
        w = 2 * np.pi * k / n
        # phase offset keeps the Nyquist tone off the sample zeros
        sig = Trajectory(np.sin(w * t + np.pi / 4), np.zeros(n), np.zeros(n))
        smoothed = trajectory_smooth_oracle(sig, m).tx
        gain = np.linalg.norm(smoothed[inner]) / np.linalg.norm(sig.tx[inner])
        rows.append((k, repr(float(w)), repr(float(abs(np.cos(w)) ** m)),
                     repr(float(gain))))
    _write_rows(out / "attenuation.csv", ("bin", "omega", "predicted", "measured"), rows)
    for k, w, pred, meas in rows[:: max(1, len(rows) // 8)]:
        print(f"bin {k:3d}  omega {float(w):.4f}  |cos|^m {float(pred):.6f}  "
              f"measured {float(meas):.6f}")
    s_before, s_after = stability_score(before)[2], stability_score(after)[2]
    print(f"stability {s_before:.4f} -> {s_after:.4f}")
    return {"stability_before": s_before, "stability_after": s_after}


# ---------------------------------------------------------------- replay


def cmd_replay(args) -> dict:
    body = json.loads(Path(args.run_json).read_text())
    saved = dict(body["args"])
    if args.out:
        saved["out"] = args.out
    ns = argparse.Namespace(**saved)
    ns.func = COMMANDS[saved["command"]]
    return ns.func(ns)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "stabilize": cmd_stabilize,
            "evaluate": cmd_evaluate, "smooth-demo": cmd_smooth_demo}


# ---------------------------------------------------------------- parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--log-level", default="INFO",
                   choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    p.add_argument("--config", help="JSON file of flag defaults (a run.json also works)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="interpstab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render synthetic clips")
    p.add_argument("kind", choices=("pair", "refiner"))
    p.add_argument("--image", help="source image; procedural texture when omitted")
    p.add_argument("--image-size", type=int, default=384)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--window", type=int, default=128)
    p.add_argument("--jitter-px", type=float, default=3.0)
    p.add_argument("--jitter-rad", type=float, default=None,
                   help="rotational jitter; scales with --jitter-px by default")
    p.add_argument("--speed", type=float, default=1.0, help="pixels per frame")
    p.add_argument("--turn-rate", type=float, default=0.002, help="radians per frame")
    p.add_argument("--degrade-m", type=int, default=4, help="interpolation passes (refiner)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--model", choices=("stabnet", "refiner"), default="stabnet")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--init", help="stage-1 checkpoint directory (stage 2)")
    p.add_argument("--data", help="pair directory, or a directory of them")
    p.add_argument("--heldout", help="held-out pair directory, or a directory of them")
    p.add_argument("--pairs", type=int, default=None, help="procedural training clips")
    p.add_argument("--heldout-pairs", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--lambda-adv", type=float, default=None)
    p.add_argument("--loss", choices=("l2", "l1"), default=None)
    p.add_argument("--degrade-m", type=int, default=4)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--dry-run", action="store_true", help="resolve and echo config only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stabilize", parents=[common], help="stabilize a sequence")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=("iterative", "net"), default="iterative")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--skip", type=int, default=1)
    p.add_argument("--checkpoint", help="stabilization-network checkpoint (net)")
    p.add_argument("--refiner", help="refiner checkpoint (iterative)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_stabilize)

    p = sub.add_parser("evaluate", parents=[common], help="score a stabilized sequence")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--trajectory", choices=("estimated", "ground-truth"), default="estimated")
    p.add_argument("--traj-csv", help="known trajectory (of --reference, when given)")
    p.add_argument("--reference", help="frames of known pose to register the output against")
    p.add_argument("--spectrum", choices=("magnitude", "energy"), default="magnitude")
    p.add_argument("--timing", help="timing.csv written by stabilize")
    p.add_argument("--method", default="unknown")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("smooth-demo", parents=[common], help="trajectory damping demo")
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--jitter-px", type=float, default=3.0)
    p.set_defaults(func=cmd_smooth_demo)

    p = sub.add_parser("replay", help="re-run a command from its run.json")
    p.add_argument("run_json")
    p.add_argument("--out", default=None)
    p.add_argument("--log-level", default="INFO")
    p.set_defaults(func=cmd_replay)
    return parser


def _config_defaults(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        raw = json.loads(Path(known.config).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {known.config}: {exc}") from exc
    return dict(raw.get("args", raw))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        defaults = _config_defaults(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if defaults:
        defaults.pop("command", None)
        subs = parser._subparsers._group_actions[0].choices
        for sp in subs.values():
            sp.set_defaults(**{k: v for k, v in defaults.items()
                               if any(a.dest == k for a in sp._actions)})
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except StabError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 4
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
