"""Desk-scale pilot runs behind the training thresholds.

Same seeds and configurations as the acceptance suite.  Writes the three loss
CSVs and summary.json next to this script (or into the given directory).
Takes about 20 minutes on one core.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from interpstab.metrics import register_trajectory, stability_score
from interpstab.nets import (Discriminator, FeatureExtractor, Refiner, RefinerSpec, StabNet,
                             StabNetSpec, load_checkpoint)
from interpstab.synth import make_refiner_samples, make_source_image, make_stab_dataset
from interpstab.training import (TrainConfig, apply_stabnet, heldout_l2, refiner_psnr,
                                 train_refiner, train_stage1, train_stage2)


def gt_stability(net, pair):
    out = apply_stabnet(pair.unstable, net)
    return stability_score(register_trajectory(out, pair.stable, pair.stable_traj))[2]


def refiner_clips(seed, count):
    out = []
    for i in range(count):
        s = seed * 100_003 + i
        out += make_refiner_samples(make_source_image(384, seed=s), 64, (128, 128),
                                    degrade=4, seed=s)
    return out


def main(out_dir):
    out_dir = Path(out_dir)
    work = out_dir / "work"
    train, held = make_stab_dataset(20, seed=1), make_stab_dataset(4, seed=2)

    torch.manual_seed(0)
    net = StabNet(StabNetSpec(residual_blocks=8, base_width=32))
    l2_init = heldout_l2(held, net)
    t0 = time.time()
    train_stage1(train, net, TrainConfig.for_profile("desk", 1, seed=0), heldout=held,
                 out_dir=work)
    l2_final = heldout_l2(held, net)
    summary = {"stage1": {
        "heldout_l2_init": l2_init, "heldout_l2_final": l2_final,
        "heldout_l2_drop": 1 - l2_final / l2_init,
        "stability_in": [stability_score(p.unstable_traj)[2] for p in held[:2]],
        "stability_out": [gt_stability(net, p) for p in held[:2]],
        "train_seconds": round(time.time() - t0)}}

    s1, _ = load_checkpoint(work / "stage1")
    torch.manual_seed(0)
    t0 = time.time()
    net2, res = train_stage2(train, work / "stage1", Discriminator(), FeatureExtractor(),
                             TrainConfig.for_profile("desk", 2, seed=0), out_dir=work)
    scores = np.array(res.disc_scores)
    summary["stage2"] = {
        "disc_score_min": float(scores.min()), "disc_score_max": float(scores.max()),
        "losses_finite": bool(all(np.isfinite(v) for r in res.history for v in r.values())),
        "stability_stage1": [gt_stability(s1, p) for p in held[:2]],
        "stability_stage2": [gt_stability(net2, p) for p in held[:2]],
        "train_seconds": round(time.time() - t0)}

    rtrain, rheld = refiner_clips(1, 8), refiner_clips(2, 2)
    base = refiner_psnr(rheld)
    torch.manual_seed(0)
    ref = Refiner(RefinerSpec(residual_blocks=6, base_width=32))
    t0 = time.time()
    train_refiner(rtrain, ref, TrainConfig.for_profile("desk", 1, seed=0, max_iters=1000), rheld,
                  out_dir=work)
    summary["refiner"] = {"psnr_degraded": base, "psnr_gain_db": refiner_psnr(rheld, ref) - base,
                          "train_seconds": round(time.time() - t0)}
    for name in ("stage1_loss.csv", "stage2_loss.csv", "refiner_loss.csv"):
        (out_dir / name).write_bytes((work / name).read_bytes())
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent)
