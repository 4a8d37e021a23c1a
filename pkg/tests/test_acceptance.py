"""Acceptance gate. Each test records one PASS/FAIL line (see the terminal summary).

Criteria 5 and 6 train real models and take several minutes each.
"""

import os
import time

import numpy as np
import pytest

from acceptance_log import record
from floeberg import autodiff as ad
from floeberg import cli, icechart, regionloss, synthgen, trainer, unet
from floeberg.icechart import EXCLUDED, EggCode
from floeberg.trainer import TrainConfig
from oracles import brute_region_loss, param_fd_errors
from test_autodiff import check_op
from test_regionloss import random_instance

DATA = os.path.join(os.path.dirname(__file__), "data")


# ----------------------------------------------------------- 1: loss oracle


def test_c1_loss_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        probs, pm, land, charts = random_instance(rng)
        got = regionloss.batch_region_loss(ad.Tensor(probs), pm, land, charts).item()
        worst = max(worst, abs(got - brute_region_loss(probs, pm, land, charts, EXCLUDED)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < 30
    assert record("1", ok, f"loss vs brute force, 50 instances: max |diff| {worst:.2e} (<= 1e-12), {dt:.1f}s (< 30s)")


# -------------------------------------------------------- 2: gradient checks


def _op_cases():
    rng = np.random.default_rng(11)
    cx, cw, cb = rng.standard_normal((2, 3, 5, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    tx, tw, tb = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)
    other = rng.standard_normal((2, 3, 2, 2))
    seg = rng.integers(-1, 3, size=(2, 4, 4))
    seg[0, 0, :3] = [0, 1, 2]
    T = ad.Tensor

    def normal(*shape):
        return lambda r: r.standard_normal(shape)

    def away_from_kink(r):
        v = r.standard_normal((3, 7))
        return np.where(np.abs(v) < 0.1, 0.5, v)

    return {
        "conv2d/x": (lambda t: ad.conv2d(t, T(cw), T(cb)), normal(*cx.shape)),
        "conv2d/w": (lambda t: ad.conv2d(T(cx), t, T(cb)), normal(*cw.shape)),
        "conv2d/b": (lambda t: ad.conv2d(T(cx), T(cw), t), normal(*cb.shape)),
        "conv_transpose2d/x": (lambda t: ad.conv_transpose2d(t, T(tw), T(tb)), normal(*tx.shape)),
        "conv_transpose2d/w": (lambda t: ad.conv_transpose2d(T(tx), t, T(tb)), normal(*tw.shape)),
        "conv_transpose2d/b": (lambda t: ad.conv_transpose2d(T(tx), T(tw), t), normal(*tb.shape)),
        "maxpool2x2": (ad.maxpool2x2, lambda r: r.permutation(144).reshape(2, 3, 4, 6) * 0.1),
        "relu": (ad.relu, away_from_kink),
        "concat_channels": (lambda t: ad.concat_channels(t, T(other)), normal(2, 2, 2, 2)),
        "softmax_channels": (ad.softmax_channels, normal(2, 4, 3, 3)),
        "segment_mean": (lambda t: ad.segment_mean(t, seg, 3), normal(2, 3, 4, 4)),
        "log": (ad.log, lambda r: r.uniform(0.2, 3.0, (3, 4))),
        "clip": (lambda t: ad.clip(t, -0.5, 0.5), lambda r: r.choice([-1.2, -0.8, -0.3, -0.1, 0.2, 0.45, 0.9], (3, 4))),
        "mul": (lambda t: ad.mul(t, t), normal(3, 4)),
        "add": (lambda t: ad.add(t, np.ones(4)), normal(3, 4)),
        "neg": (ad.neg, normal(3, 4)),
        "reshape": (lambda t: ad.reshape(t, (4, 3)), normal(3, 4)),
        "tsum": (lambda t: ad.mul(ad.tsum(t), 1.0), normal(3, 4)),
    }


def test_c2_gradient_checks():
    t0 = time.perf_counter()
    failures, worst = [], 0.0
    for name, (f, domain) in _op_cases().items():
        reps = check_op(f, domain, n_instances=20, n_coords=25)
        worst = max(worst, max(r.max_rel_error for r in reps))
        if not all(r.passed for r in reps):
            failures.append(name)

    cfg = unet.UNetConfig(seed=21)
    p = unet.init_params(cfg)
    rng = np.random.default_rng(21)
    x = ad.Tensor(rng.standard_normal((1, 7, 16, 16)))
    pm = rng.integers(0, 5, (1, 16, 16))
    land = (rng.random((1, 16, 16)) < 0.1).astype(np.uint8)
    chart = {i: rng.dirichlet(np.ones(4)) for i in range(5)}
    coords = [(pi, int(rng.integers(p.tensors[pi].data.size))) for pi in rng.integers(len(p), size=20)]
    e2e = max(param_fd_errors(lambda: regionloss.batch_region_loss(unet.forward(p, x, cfg), pm, land, [chart]), p, coords))
    dt = time.perf_counter() - t0
    ok = not failures and e2e < 1e-3 and dt < 120
    assert record("2", ok, f"{len(_op_cases())} op checks x 20 instances: worst rel err {worst:.1e} (< 1e-4)"
                  f"{' failing ' + ','.join(failures) if failures else ''}; end-to-end 16x16 U-Net: {e2e:.1e} (< 1e-3);"
                  f" {dt:.0f}s (< 120s)")


# ------------------------------------------------------- 3: egg-code fidelity


def test_c3a_worked_example():
    lab = icechart.eggcode_to_label(EggCode(9, 2, 7, 0, 3, 2, 0))
    ok = np.allclose(lab, [0.1, 0.0, 0.7, 0.2], atol=1e-12, rtol=0)
    assert record("3a", ok, f"egg code 9;2,7,0;3,2,0 -> {np.round(lab, 12).tolist()}")


def test_c3b_round_trip_within_005():
    # Known unattainable: e.g. (0.34, 0.34, 0.32, 0) has no tenths vector summing
    # to one within 0.05; the minimax-optimal quantiser reaches 0.075 at worst.
    rng = np.random.default_rng(3)
    worst, over = 0.0, 0
    for lab in rng.dirichlet(np.ones(4), size=1000):
        err = np.abs(icechart.eggcode_to_label(icechart.label_to_eggcode(lab)) - lab).max()
        worst = max(worst, err)
        over += err > 0.05
    ok = worst <= 0.05
    assert record("3b", ok, f"round trip over 1000 labels: max err {worst:.4f} (<= 0.05); {over} labels above 0.05")


def test_c3c_label_sums():
    rng = np.random.default_rng(4)
    worst = 0.0
    for lab in rng.dirichlet(np.ones(4), size=1000):
        worst = max(worst, abs(icechart.eggcode_to_label(icechart.label_to_eggcode(lab)).sum() - 1))
    for ct in range(11):
        for ca in range(ct + 1):
            for cb in range(ct - ca + 1):
                e = EggCode(ct, ca, cb, ct - ca - cb, 3, 2, 1) if ct else EggCode(0, 0, 0, 0, 0, 0, 0)
                worst = max(worst, abs(icechart.eggcode_to_label(e).sum() - 1))
    ok = worst <= 1e-12
    assert record("3c", ok, f"label sums: max |sum - 1| {worst:.1e} (<= 1e-12)")


# -------------------------------------------------- 4: schedule and optimizer


def test_c4_schedule_and_optimizer():
    lr0 = trainer.cosine_lr(0, 50, 0.001)
    lr_end = trainer.cosine_lr(50, 50, 0.001, 2e-5)
    p = ad.Parameter(np.array([1.0]))
    trainer.sgdm_step([p], [np.array([0.1])], trainer.OptimizerState([np.zeros(1)]), 0.001, 0.9, 0.01)
    w = float(p.data[0])
    ok = lr0 == 0.001 and lr_end == 2e-5 and abs(w - 0.99989) <= 1e-15
    assert record("4", ok, f"cosine_lr(0)={lr0!r}, cosine_lr(T0)={lr_end!r} (eta_min 2e-05); sgdm w={w!r} (0.99989 +- 1e-15)")


# ------------------------------------------ 5: end-to-end weak supervision


def _scenes(preset, seed, n=48, size=128):
    cfg = synthgen.preset(preset, height=size, width=size)
    return [synthgen.gen_scene(cfg, s, f"{preset}-{i}") for i, s in enumerate(synthgen.scene_seeds(seed, n))]


@pytest.mark.slow
def test_c5_separable_end_to_end():
    t0 = time.perf_counter()
    cfg = TrainConfig.desk(epochs=4, restart_T0_epochs=4, val_scenes=8, seed=0, mode="weak")
    t = trainer.Trainer(_scenes("separable-v1", 500), cfg)
    t.fit()
    v = t.history.validation[-1]
    r2 = [r for r in v["r2"] if r is not None]
    dt = time.perf_counter() - t0
    iters = cfg.epochs * cfg.iterations_per_epoch
    ok = v["accuracy"] >= 0.90 and min(r2) >= 0.80 and iters <= 2000 and dt <= 900
    assert record("5", ok, f"separable-v1 40+8 scenes, {iters} iterations: val accuracy {v['accuracy']:.3f} (>= 0.90),"
                  f" R2 {[round(r, 3) for r in r2]} (all >= 0.80), {dt:.0f}s (<= 900s)")


# ---------------------------------------- 6: directional weak vs baseline


@pytest.mark.slow
def test_c6_weak_beats_baseline_on_mixed():
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        scenes = _scenes("mixed-v1", 600 + seed)
        r2 = {}
        for mode in ("weak", "baseline"):
            cfg = TrainConfig.desk(epochs=2, restart_T0_epochs=2, val_scenes=8, seed=seed, mode=mode)
            t = trainer.Trainer(scenes, cfg)
            t.fit()
            r2[mode] = t.history.validation[-1]["r2"]
        win = all(r2["weak"][k] >= r2["baseline"][k] for k in (1, 2))
        wins += win
        rows.append(f"s{seed}: young {r2['weak'][1]:.2f}/{r2['baseline'][1]:.2f}, FYI {r2['weak'][2]:.2f}/{r2['baseline'][2]:.2f}")
    dt = time.perf_counter() - t0
    ok = wins >= 4 and dt <= 3600
    assert record("6", ok, f"mixed-v1 weak >= baseline on young and FYI R2 in {wins}/5 seeds (>= 4),"
                  f" {dt:.0f}s (<= 3600s); weak/baseline " + "; ".join(rows))


# ------------------------------------------------------------ 7: determinism


def test_c7_deterministic_cli_runs(tmp_path):
    data = tmp_path / "data"
    assert cli.run(["gen", "--preset", "mixed-v1", "--scenes", "6", "--height", "64", "--width", "64",
                    "--seed", "70", "--out", str(data)]) == 0
    flags = ["--data", str(data), "--batch", "4", "--iters", "5", "--epochs", "2", "--patch", "32",
             "--val", "2", "--seed", "7", "--deterministic"]
    outs = []
    for run in ("a", "b"):
        assert cli.run(["train", "--out", str(tmp_path / run)] + flags) == 0
        outs.append({f: (tmp_path / run / f).read_bytes()
                     for f in ("model.ckpt", "history_iterations.csv", "history_epochs.csv")})
    same = outs[0] == outs[1]
    assert record("7", same, "two --deterministic train runs: checkpoint and loss histories byte-identical"
                  if same else "two --deterministic train runs differ")


# -------------------------------------------------------------- 8: rendering


def test_c8_render_golden(tmp_path):
    out = tmp_path / "fixture.ppm"
    code = cli.run(["render", "--input", os.path.join(DATA, "render_fixture.u8"), "--height", "3", "--width", "5",
                    "--out", str(out)])
    with open(os.path.join(DATA, "render_golden.ppm"), "rb") as fh:
        golden = fh.read()
    ok = code == 0 and out.read_bytes() == golden
    assert record("8", ok, f"render of the palette fixture byte-identical to golden ({len(golden)} bytes)")

