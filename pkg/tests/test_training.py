import csv
import math

import numpy as np
import pytest
import torch

from interpstab.errors import ConfigError, RangeError, ShapeError, StateError, ValidationError
from interpstab.nets import (Discriminator, DiscriminatorSpec, FeatureExtractor, Refiner,
                             RefinerSpec, StabNet, StabNetSpec, save_checkpoint)
from interpstab.synth import JitterSpec, make_refiner_samples, make_stab_pair
from interpstab.training import (HISTORY_COLUMNS, AugmentSpec, TrainConfig, augment, loss_l1,
                                 loss_l2, loss_perceptual, loss_stage2, lr_linear, lr_plateau,
                                 train_refiner, train_stage1, train_stage2)

TINY = StabNetSpec(residual_blocks=1, base_width=8)


@pytest.fixture(scope="module")
def tiny_pairs(source_image):
    return [make_stab_pair(source_image, 16, (48, 48), seed=s) for s in range(2)]


def tiny_cfg(stage=1, **kw):
    kw.setdefault("patch_size", 32)
    kw.setdefault("max_iters", 4)
    kw.setdefault("eval_every", 2)
    return TrainConfig(stage=stage, **kw)


# ---------------------------------------------------------------- losses


def test_l2_identities(rng):
    x = rng.random((4, 5, 3))
    assert float(loss_l2(x, x)) == 0
    assert float(loss_l2(np.ones((3, 3)), np.zeros((3, 3)))) == 1.0
    y = rng.random((4, 5, 3))
    assert float(loss_l2(x, y)) == pytest.approx(((x - y) ** 2).sum() / x.size, abs=1e-7)
    assert float(loss_l1(x, y)) == pytest.approx(np.abs(x - y).mean(), abs=1e-7)
    with pytest.raises(ShapeError):
        loss_l2(x, y[:3])


def test_perceptual_matches_feature_mse():
    torch.manual_seed(0)
    ext = FeatureExtractor()
    a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    fa, fb = ext(a).numpy(), ext(b).numpy()
    assert float(loss_perceptual(a, a, ext)) == 0
    got = float(loss_perceptual(a, b, ext))
    assert got >= 0 and got == pytest.approx(((fa - fb) ** 2).mean(), abs=1e-7)


def test_stage2_loss_arithmetic():
    assert float(loss_stage2(0.5, math.exp(-1), 0.01)) == pytest.approx(0.51)
    assert float(loss_stage2(0.37, 0.2, 0.0)) == 0.37
    with pytest.raises(RangeError):
        loss_stage2(0.5, 1.0)


def test_config_defaults():
    c1, c2 = TrainConfig(stage=1), TrainConfig(stage=2)
    assert (c1.lr_init, c1.lr_schedule, c1.batch_size) == (1e-4, "plateau", 5)
    assert (c2.lr_init, c2.lr_schedule, c2.batch_size) == (5e-5, "linear", 3)
    assert c1.lambda_adv == 0.01 and c1.patches_per_batch == 5
    paper = TrainConfig.for_profile("paper", 1)
    assert paper.patch_size == 220 and paper.max_iters == 70000
    for bad in ({"stage": 3}, {"lambda_adv": -1.0}, {"loss": "l3"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- augmentation


def test_augment_disabled_is_identity(rng):
    win, tgt = rng.random((5, 12, 10, 3)), rng.random((12, 10, 3))
    w2, t2 = augment(win, tgt, AugmentSpec.disabled(), rng)
    assert np.array_equal(w2, win) and np.array_equal(t2, tgt)


def test_augment_deterministic(rng):
    win, tgt = rng.random((5, 12, 10, 3)), rng.random((12, 10, 3))
    spec = AugmentSpec.desk(seed=4)
    a = augment(win, tgt, spec)
    b = augment(win, tgt, spec)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].min() >= 0 and a[0].max() <= 1


def test_augment_flip_involution(rng):
    win, tgt = rng.random((5, 12, 10, 3)), rng.random((12, 10, 3))
    spec = AugmentSpec(flip_h=True, flip_v=False, flip_prob=1.0, reverse_order=False)
    once = augment(win, tgt, spec, rng)
    assert np.array_equal(once[1], tgt[:, ::-1])
    twice = augment(*once, spec, rng)
    assert np.array_equal(twice[0], win) and np.array_equal(twice[1], tgt)


def test_augment_reverse_only_inputs(rng):
    win, tgt = rng.random((5, 6, 6, 3)), rng.random((6, 6, 3))
    spec = AugmentSpec(flip_h=False, flip_v=False, reverse_order=True, reverse_prob=1.0)
    w2, t2 = augment(win, tgt, spec, rng)
    assert np.array_equal(w2, win[::-1]) and np.array_equal(t2, tgt)


def test_augment_keeps_pairing(source_image):
    # without jitter the centre input is the target; any shared transform must keep that
    p = make_stab_pair(source_image, 8, (40, 40), JitterSpec(0, 0, 7, 0), seed=2)
    win, tgt = p.unstable.frames[1:6], p.stable.frames[3]
    spec = AugmentSpec.desk(seed=0)
    for seed in range(5):
        w2, t2 = augment(win, tgt, spec, np.random.default_rng(seed))
        assert np.array_equal(w2[2], t2)


# ---------------------------------------------------------------- schedules


def test_plateau_decreasing_history():
    hist = [1.0 - 0.01 * i for i in range(20)]
    assert all(lr_plateau(hist[:i + 1], 1e-4) == 1e-4 for i in range(20))


def test_plateau_flat_history_halves_once_per_window():
    hist = [1.0] * 16
    lr, cuts = 1e-4, []
    for i in range(len(hist)):
        new = lr_plateau(hist[:i + 1], lr)
        if new != lr:
            cuts.append(i)
        lr = new
    # first eval sets the best; windows close at evaluations 5, 10, 15
    assert cuts == [5, 10, 15] and lr == pytest.approx(1e-4 / 8)


def test_plateau_small_gains_do_not_count():
    hist = [1.0, 0.99999, 0.99998, 0.99997, 0.99996, 0.99995]
    assert lr_plateau(hist, 1.0) == 0.5
    with pytest.raises(ValidationError):
        lr_plateau(hist, 1.0, factor=1.0)


def test_linear_schedule():
    assert lr_linear(0, 500, 5e-5) == 5e-5
    assert lr_linear(500, 500, 5e-5) == 0
    assert lr_linear(250, 500, 5e-5) == pytest.approx(2.5e-5)
    with pytest.raises(RangeError):
        lr_linear(501, 500, 5e-5)


# ---------------------------------------------------------------- loops


def test_stage1_identical_pairs_zero_loss_at_init(source_image):
    pairs = [make_stab_pair(source_image, 12, (40, 40), JitterSpec(0, 0, 7, 0), seed=1)]
    torch.manual_seed(0)
    res = train_stage1(pairs, StabNet(TINY), tiny_cfg(max_iters=1))
    assert res.history[0]["loss_total"] == pytest.approx(0.0, abs=1e-12)


def test_stage1_deterministic_and_logged(tiny_pairs, tmp_path):
    losses = []
    for run in range(2):
        torch.manual_seed(0)
        res = train_stage1(tiny_pairs, StabNet(TINY), tiny_cfg(seed=5), out_dir=tmp_path / str(run))
        losses.append([r["loss_total"] for r in res.history])
    assert losses[0] == losses[1] and len(losses[0]) == 4
    with open(tmp_path / "0" / "stage1_loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == HISTORY_COLUMNS and len(rows) == 4
    assert (tmp_path / "0" / "stage1" / "checkpoint.json").is_file()


def test_stage1_patch_too_large(tiny_pairs):
    with pytest.raises(ConfigError):
        train_stage1(tiny_pairs, StabNet(TINY), tiny_cfg(patch_size=64))


def test_stage2_requires_checkpoint(tiny_pairs, tmp_path):
    ext, disc = FeatureExtractor(), Discriminator()
    with pytest.raises(StateError):
        train_stage2(tiny_pairs, None, disc, ext, tiny_cfg(stage=2))
    with pytest.raises(StateError):
        train_stage2(tiny_pairs, tmp_path / "missing", disc, ext, tiny_cfg(stage=2))


def test_stage2_runs_and_lambda_zero_identity(tiny_pairs, tmp_path):
    torch.manual_seed(0)
    init = save_checkpoint(tmp_path / "s1", StabNet(TINY), 1, 0, 0)
    disc = Discriminator(DiscriminatorSpec(widths=(8, 16, 16, 32)))
    _, res = train_stage2(tiny_pairs, init, disc, FeatureExtractor(),
                          tiny_cfg(stage=2, lambda_adv=0.0, max_iters=3))
    for row in res.history:
        assert row["loss_total"] == row["loss_content"]
        assert all(np.isfinite(row[k]) for k in HISTORY_COLUMNS)
    assert [r["lr"] for r in res.history] == pytest.approx([5e-5, 5e-5 * 2 / 3, 5e-5 / 3])
    assert all(0 < s < 1 for pair in res.disc_scores for s in pair)


def test_refiner_clean_samples_zero_loss(source_image):
    samples = make_refiner_samples(source_image, 10, (40, 40), degrade=0, seed=1)
    torch.manual_seed(0)
    net = Refiner(RefinerSpec(residual_blocks=1, base_width=8))
    res = train_refiner(samples, net, tiny_cfg(max_iters=1))
    assert res.history[0]["loss_total"] == pytest.approx(0.0, abs=1e-12)


def test_refiner_deterministic(source_image):
    samples = make_refiner_samples(source_image, 10, (40, 40), degrade=2, seed=1)
    finals = []
    for _ in range(2):
        torch.manual_seed(0)
        net = Refiner(RefinerSpec(residual_blocks=1, base_width=8))
        finals.append(train_refiner(samples, net, tiny_cfg(seed=2)).history[-1]["loss_total"])
    assert finals[0] == finals[1]
