"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (shown in the terminal summary and
printed with ``-s``). Criteria that are known to be unattainable as stated
are marked strict xfail so they still run at full tolerance and report FAIL.
"""

import time
from collections import Counter

import numpy as np
import pytest

from agelab import data, nn
from agelab import encoding as enc
from agelab.data import Dataset
from agelab.models import Checkpoint, load_checkpoint, save_checkpoint
from agelab.synth import SyntheticSpec, generate, reference_roster
from agelab.training import (ArchConfig, HierarchyModel, TrainConfig, build_model, evaluate_age,
                             evaluate_gender, hierarchy_report, predict, predict_hierarchical,
                             train)
from conftest import ACCEPTANCE_LINES
from oracles import check_param_gradients

# every run is checked for best <= final validation loss (criterion 9)
LOGGED_RUNS = []


def report(number, title, ok, detail, start):
    line = f"criterion {number:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail}; {time.perf_counter() - start:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def synthetic(count, seed, noise=10.0):
    images, records = generate(SyntheticSpec(count=count, seed=seed, noise=noise))
    return Dataset(images.astype(np.float32), records)


def logged_train(model, train_set, val_set, config):
    result = train(model, train_set, val_set, config)
    LOGGED_RUNS.append(result)
    return result


# -- 1 ------------------------------------------------------------------------

def test_criterion_01_gradients():
    from test_nn import NETWORKS, _loss_fn

    start = time.perf_counter()
    worst = {}
    for name, factory in sorted(NETWORKS.items()):
        for kind in (nn.MAE, nn.BCE):
            model = factory()
            rng = np.random.default_rng(7)
            x = rng.normal(size=(3,) + model.input_shape)
            drop = 11 if name == "dropout" else None
            out = model.forward(x, training=drop is not None, rng=np.random.default_rng(11))
            model.clear_cache()
            if kind == nn.MAE:
                target = np.clip(out + rng.choice([-1, 1], out.shape) * rng.uniform(0.05, 0.2, out.shape),
                                 0.01, 0.99)
            else:
                target = np.eye(out.shape[1])[rng.integers(0, out.shape[1], len(out))]
            worst[(name, kind)] = check_param_gradients(model, x, target, _loss_fn(kind), n_per_layer=20,
                                                        step=1e-3, dropout_seed=drop)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top <= 1e-3 and elapsed < 60
    report(1, "gradient correctness", ok, f"max rel err {top:.2e} over {len(worst)} net/loss pairs", start)
    assert ok


# -- 2 ------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="unnormalised LDAE with alpha 2.5 cannot meet the mass and "
                                       "expected-value bounds near ages 5 and 85")
def test_criterion_02_ldae():
    start = time.perf_counter()
    v = enc.ldae_encode(30, 2.5)
    values_ok = abs(v[25] - 0.15958) <= 1e-4 and abs(v[30] - 0.021596) <= 1e-4
    sums = {a: enc.ldae_encode(a, 2.5).sum() for a in range(7, 84)}
    bad_sums = [a for a, s in sums.items() if not 0.99 <= s <= 1.001]
    argmax_ok = all(enc.decode_argmax(enc.ldae_encode(a)) == a for a in range(5, 86))
    ev_err = {a: abs(enc.decode_expected_value(enc.ldae_encode(a)) - a) for a in range(10, 81)}
    bad_ev = [a for a, e in ev_err.items() if e > 0.02]
    elapsed = time.perf_counter() - start
    ok = values_ok and not bad_sums and argmax_ok and not bad_ev and elapsed < 1
    detail = (f"entries {'ok' if values_ok else 'off'}, argmax {'ok' if argmax_ok else 'off'}, "
              f"mass outside [0.99,1.001] at {len(bad_sums)} ages (min {min(sums.values()):.3f} at age {min(sums, key=sums.get)}), "
              f"EV error > 0.02 at {len(bad_ev)} ages (max {max(ev_err.values()):.3f})")
    report(2, "LDAE fidelity", ok, detail, start)
    assert ok


# -- 3 ------------------------------------------------------------------------

def test_criterion_03_standardization():
    start = time.perf_counter()
    images = synthetic(200, seed=3).images
    stats = data.compute_standardization_stats(images)
    z = data.standardize(images, stats).astype(np.float64)
    ref = data.standardize(np.array([142.46]), data.StandardizationStats(142.46, 59.85))[0]
    ok = abs(z.mean()) <= 1e-6 and abs(z.std() - 1) <= 1e-6 and abs(ref) <= 1e-6
    report(3, "standardization", ok, f"mean {z.mean():.1e}, std-1 {z.std() - 1:.1e}, 142.46 -> {ref:.1e}", start)
    assert ok


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_augmentation():
    start = time.perf_counter()
    x = np.random.default_rng(4).integers(0, 256, (3, 240, 200)).astype(np.float32)
    cw, ch = 160, 200
    crops = data.twelve_crop(x, cw, ch)
    origins = [(0, 0), (0, 200 - cw), (240 - ch, 0), (240 - ch, 200 - cw), ((240 - ch) // 2, (200 - cw) // 2)]
    direct_ok = True
    for crop, (top, left) in zip(crops[:5], origins):
        rows = (np.arange(ch) + top)[:, None]
        cols = (np.arange(cw) + left)[None, :]
        direct_ok &= np.array_equal(crop, x[:, rows, cols])
    mirror_ok = np.array_equal(data.mirror(data.mirror(x)), x)
    ok = len(crops) == 12 and direct_ok and mirror_ok
    report(4, "augmentation", ok, f"{len(crops)} crops, direct crops exact={direct_ok}, mirror involution={mirror_ok}",
           start)
    assert ok


# -- 5 ------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="10,280 + 10,280 + 34,344 = 54,904, but the reference roster "
                                       "has 55,134 images, so S3 cannot be 34,344 in a partition")
def test_criterion_05_subsetting():
    start = time.perf_counter()
    roster = reference_roster(seed=0)
    split = data.guo_mu_subset(roster, seed=0)
    ratio_ok = all(Counter(r.gender for r in s) == Counter({"M": 7710, "F": 2570}) for s in (split.s1, split.s2))
    sizes_ok = split.sizes() == (10_280, 10_280, 34_344)
    rng = np.random.default_rng(5)
    partition_ok = True
    for trial in range(100):
        n = int(rng.integers(200, 600))
        recs = [data.LabelRecord(f"s{i}", f"{i}.pgm", 30, "M" if rng.random() < 0.8 else "F",
                                 str(rng.choice(["B", "W", "O"], p=[.7, .2, .1]))) for i in range(n)]
        sp = data.guo_mu_subset(recs, seed=trial, size=40)
        paths = [r.image_path for r in sp.s1 + sp.s2 + sp.s3]
        partition_ok &= sorted(paths) == sorted(r.image_path for r in recs) and len(set(paths)) == n
    ok = sizes_ok and ratio_ok and partition_ok
    report(5, "subsetting", ok, f"sizes {split.sizes()}, 3:1 ratio={ratio_ok}, partition on 100 rosters={partition_ok}",
           start)
    assert ok


# -- 6 ------------------------------------------------------------------------

GENDER_EPOCHS = 5


@pytest.fixture(scope="module")
def gender_run():
    ds = synthetic(3000, seed=60)
    train_set, val_set, test_set = ds.take(range(2000)), ds.take(range(2000, 2500)), ds.take(range(2500, 3000))
    result = logged_train(build_model(ArchConfig(), "gender", 0), train_set, val_set,
                          TrainConfig(epochs=GENDER_EPOCHS, batch_size=50, seed=0))
    return result, test_set


def test_criterion_06_gender(gender_run):
    start = time.perf_counter()
    result, test_set = gender_run
    acc = evaluate_gender(result.best.to_model(), test_set)
    secs = sum(e.seconds for e in result.log.entries)
    ok = acc >= 0.97
    report(6, "synthetic gender training", ok, f"held-out accuracy {acc:.4f} after {GENDER_EPOCHS} epochs, "
           f"training {secs:.0f}s", start)
    assert ok


# -- 7 ------------------------------------------------------------------------

AGE_ARCH = ArchConfig(dense_sizes=[128, 128])
AGE_SEEDS = range(5)


@pytest.fixture(scope="module")
def age_runs():
    runs = []
    for seed in AGE_SEEDS:
        ds = synthetic(4000, seed=70 + seed)
        train_set, val_set, test_set = ds.take(range(3000)), ds.take(range(3000, 3500)), ds.take(range(3500, 4000))
        result = logged_train(build_model(AGE_ARCH, "age", seed), train_set, val_set,
                              TrainConfig(epochs=30, seed=seed, loss="ce", schedule=enc.AlphaSchedule.static(2.5)))
        best = result.best.to_model()
        runs.append((result, test_set, evaluate_age(best, test_set, "expected_value"),
                     evaluate_age(best, test_set, "argmax")))
    return runs


def test_criterion_07_age(age_runs):
    start = time.perf_counter()
    ev = np.array([r[2] for r in age_runs])
    am = np.array([r[3] for r in age_runs])
    secs = sum(e.seconds for r in age_runs for e in r[0].log.entries)
    ok = bool((ev <= 4.0).all() and ev.mean() <= am.mean() + 0.2)
    report(7, "synthetic age training", ok, f"EV MAE per seed {np.round(ev, 3).tolist()}, mean EV {ev.mean():.3f} "
           f"vs argmax {am.mean():.3f}, training {secs:.0f}s", start)
    assert ok


# -- 8 ------------------------------------------------------------------------

TRANSFER_SEEDS = range(200, 205)
TRANSFER_NOISE = 120.0


def test_criterion_08_transfer():
    start = time.perf_counter()
    wins, pairs = 0, []
    for seed in TRANSFER_SEEDS:
        ds = synthetic(3500, seed=seed, noise=TRANSFER_NOISE)
        task_a, val, task_b = ds.take(range(2000)), ds.take(range(2000, 2500)), ds.take(range(2500, 3500))
        pre = logged_train(build_model(AGE_ARCH, "gender", seed), task_a, val, TrainConfig(epochs=3, seed=seed))
        cfg = TrainConfig(epochs=3, seed=seed, loss="ce")
        frozen = logged_train(build_model(AGE_ARCH, "age", seed, backbone=pre.best.to_model(), freeze_backbone=True),
                              task_b, val, cfg)
        scratch = logged_train(build_model(AGE_ARCH, "age", seed), task_b, val, cfg)
        a, b = frozen.log.entries[2].val_loss, scratch.log.entries[2].val_loss
        pairs.append(f"{a:.3f}/{b:.3f}")
        wins += a < b
    ok = wins >= 4
    report(8, "transfer learning", ok, f"frozen-transfer beats scratch at epoch 3 on {wins}/5 seeds "
           f"(val loss transfer/scratch {', '.join(pairs)})", start)
    assert ok


# -- 9 ------------------------------------------------------------------------

def test_criterion_09_protocol(gender_run, age_runs, tmp_path):
    start = time.perf_counter()
    runs = LOGGED_RUNS
    best_ok = all(min(r.log.val_losses) == r.best.manifest["meta"]["val_loss"]
                  and r.best.manifest["meta"]["val_loss"] <= r.final.manifest["meta"]["val_loss"] for r in runs)
    ds = synthetic(700, seed=90)
    cfg = TrainConfig(epochs=2, seed=9, val_sample_size=200)
    reruns = [train(build_model(ArchConfig(), "age", 9), ds.take(range(500)), ds.take(range(500, 700)), cfg)
              for _ in range(2)]
    log_ok = reruns[0].log.fingerprint() == reruns[1].log.fingerprint()
    ckpt_ok = all(getattr(reruns[0], k).to_bytes() == getattr(reruns[1], k).to_bytes() for k in ("best", "final"))
    save_checkpoint(reruns[0].best.to_model(), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    bytes_ok = ((tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
                == reruns[0].best.to_bytes())
    ok = best_ok and log_ok and ckpt_ok and bytes_ok
    report(9, "protocol invariants", ok, f"best<=final on {len(runs)} runs={best_ok}, identical logs={log_ok}, "
           f"identical checkpoints={ckpt_ok}, save/load byte-identical={bytes_ok}", start)
    assert ok


# -- 10 -----------------------------------------------------------------------

def test_criterion_10_hierarchy(gender_run, age_runs, tmp_path):
    start = time.perf_counter()
    gender = gender_run[0].best.to_model()
    result, test_set, _, _ = age_runs[0]
    single = Checkpoint.from_bytes(result.best.to_bytes()).to_model()
    h = HierarchyModel(gender, result.best.to_model(), result.best.to_model())
    exact = True
    for decoder in ("argmax", "expected_value"):
        _, ages = predict_hierarchical(h, test_set.images, decoder)
        exact &= np.array_equal(ages, enc.decode_batch(predict(single, test_set.images), decoder))
    rep = hierarchy_report(h, single, test_set)
    produced = {"routing_accuracy", "hierarchy_mae", "single_mae", "reference_hierarchy_mae",
                "reference_single_mae"} <= set(rep)
    ok = exact and produced and rep["hierarchy_mae"] == rep["single_mae"]
    report(10, "hierarchy consistency", ok, f"per-sample identical={exact}, hierarchy MAE {rep['hierarchy_mae']:.3f} "
           f"vs single {rep['single_mae']:.3f} (published context {rep['reference_hierarchy_mae']} vs "
           f"{rep['reference_single_mae']})", start)
    assert ok
