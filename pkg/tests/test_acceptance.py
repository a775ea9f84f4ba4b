"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

The two continual-learning criteria share one set of training runs through a
module-scoped cache; together they take several minutes on one CPU core.
"""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import SMALL, randomize
from fd2cl import cli, numcore as nc
from fd2cl.config import RunConfig
from fd2cl.continual import estimate_fisher, predict, project_gradient, run_protocol
from fd2cl.domains import PhaseGate, align_to_spatial, fourier_phase_view, haar_dwt2, haar_idwt2, \
    wavelet_highfreq_view
from fd2cl.losses import align_loss, bce_loss, ewc_penalty
from fd2cl.metrics import TaskMatrix, auc, average_accuracy, average_forgetting
from fd2cl.model import Model, ModelConfig
from fd2cl.numcore import Tensor, grad_check
from fd2cl.rng import Stream
from fd2cl.synthdata import PERTURB_KINDS, generate_dataset, perturb

SEEDS = (0, 1, 2)
ORDERS = ((0, 1, 2, 3), (0, 3, 2, 1), (0, 2, 3, 1))
VARIANTS = {
    "naive": ("naive",),
    "full": (),
    "no_ewc": ("no_ewc",),
    "no_ewc_freq": ("no_ewc", "no_freq_branches"),
}


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, f"criterion {number} ({title}) failed: {detail}"


# ---------------------------------------------------------------- 1

def full_loss_fn(model, x, y, mask, snapshot, f_real, f_fake, lam_ewc=3.0, lam_orth=0.1, lam_align=0.5,
                 orth_value=0.37):
    anchors = model.anchors()

    def loss():
        logits, f_align = model.forward(x, train=True, mask=mask)
        total = bce_loss(logits, y)
        total = nc.add(total, nc.scale(ewc_penalty(model.ewc_params(), snapshot, f_real, f_fake), lam_ewc))
        total = nc.add(total, nc.scale(align_loss(f_align, y, anchors), lam_align))
        # the orthogonality term is built from stored gradients and is a constant
        return nc.add(total, Tensor(np.array([lam_orth * orth_value])))

    return loss


def random_consolidation(model, rng, offset=0.05):
    snapshot = {p.name: p.data + offset * rng.normal(size=p.shape) for p in model.ewc_params()}
    f_real = {p.name: rng.uniform(size=p.shape) for p in model.ewc_params()}
    f_fake = {p.name: rng.uniform(size=p.shape) for p in model.ewc_params()}
    return snapshot, f_real, f_fake


def test_criterion_01_gradient_correctness(capsys):
    # moderate weights keep the loss O(10), so central differences resolve
    # gradients down to ~1e-7 instead of drowning them in round-off
    rng = np.random.default_rng(101)
    started = time.time()
    model = randomize(Model(SMALL, 5), rng, scale=0.1)
    x = rng.uniform(size=(4, SMALL.channels, SMALL.height, SMALL.width))
    y = np.array([0, 1, 1, 0])
    mask = model.draw_mask(Stream(9, 0, 0), 4)
    fn = full_loss_fn(model, x, y, mask, *random_consolidation(model, rng))
    params = model.trainable()
    rep = grad_check(fn, params, h=1e-5, tol=1e-4)
    elapsed = time.time() - started
    n_total = sum(p.size for p in params)

    # desk-scale model: a fixed random sample of entries from every tensor
    big = randomize(Model(ModelConfig(), 6), rng, scale=0.05)
    xb = rng.uniform(size=(4, 3, 32, 32))
    fn_big = full_loss_fn(big, xb, y, big.draw_mask(Stream(9, 0, 1), 4), *random_consolidation(big, rng, 0.01))
    picks = {id(p): rng.choice(p.size, size=min(p.size, 12), replace=False) for p in big.trainable()}
    rep_big = grad_check(fn_big, big.trainable(), h=1e-5, tol=1e-4, indices=picks)

    ok = rep.passed and rep.n_checked == n_total and elapsed < 60 and rep_big.passed
    verdict(capsys, 1, "gradient correctness", ok,
            f"max rel err {rep.max_rel_err:.2e} over all {rep.n_checked} entries in {elapsed:.1f}s; "
            f"desk-scale sample {rep_big.max_rel_err:.2e} over {rep_big.n_checked}")


# ---------------------------------------------------------------- 2

def test_criterion_02_projection_contract(capsys):
    rng = np.random.default_rng(202)
    fired_n = kept_n = empty_n = 0
    worst_dot = worst_energy = 0.0
    failures = []
    for case in range(1000):
        n = int(rng.integers(2, 65))
        g = rng.normal(size=n)
        tau = float(rng.uniform(0.0, 0.95))
        if case % 10 == 0:
            out, fired = project_gradient(g, None, tau)
            empty_n += 1
            if fired or out is not g:
                failures.append(case)
            continue
        h = rng.normal(size=n)
        if case % 3 == 0:
            h = h + 3.0 * g  # push some cases well past the threshold
        h /= np.linalg.norm(h)
        out, fired = project_gradient(g, h, tau)
        cos = abs(g @ h) / np.linalg.norm(g)
        if fired != (cos > tau):
            failures.append(case)
        if fired:
            fired_n += 1
            dot = abs(out @ h) / np.linalg.norm(g)
            energy = out @ out + (g @ h) ** 2 - g @ g
            worst_dot, worst_energy = max(worst_dot, dot), max(worst_energy, energy)
            if dot > 1e-10 or energy > 1e-9:
                failures.append(case)
        else:
            kept_n += 1
            if out is not g or out.tobytes() != g.tobytes():
                failures.append(case)
    ok = not failures and fired_n > 100 and kept_n > 100
    verdict(capsys, 2, "projection contract", ok,
            f"{fired_n} fired, {kept_n} untouched, {empty_n} empty-cache; worst |<g~,h>|/|g| {worst_dot:.1e}, "
            f"worst energy gap {worst_energy:.1e}; failures {failures[:5]}")


# ---------------------------------------------------------------- 3

def test_criterion_03_ewc_contract(capsys):
    rng = np.random.default_rng(303)
    min_entry = np.inf
    for draw in range(100):
        model = randomize(Model(SMALL, draw), rng, scale=float(rng.uniform(0.05, 1.0)))
        x = rng.uniform(size=(6, SMALL.channels, SMALL.height, SMALL.width))
        y = rng.permutation([0, 0, 0, 1, 1, 1])
        for cls in (0, 1):
            for v in estimate_fisher(model, x, y, cls, batch_size=6).values():
                min_entry = min(min_entry, float(v.min()))

    model = randomize(Model(SMALL, 1), rng)
    theta = model.ewc_params()
    snap = {p.name: p.data.copy() for p in theta}
    fisher = {p.name: rng.uniform(size=p.shape) for p in theta}
    at_anchor = ewc_penalty(theta, snap, fisher, fisher).item()

    w = Tensor(np.array([1.5]), requires_grad=True, name="w")
    hand = ewc_penalty([w], {"w": np.array([1.0])}, {"w": np.array([1.0])}, {"w": np.array([3.0])}).item()

    ok = min_entry >= 0.0 and at_anchor == 0.0 and hand == 1.0
    verdict(capsys, 3, "EWC contract", ok,
            f"min Fisher entry over 100 draws {min_entry:.3e}; penalty at anchor {at_anchor!r}; hand case {hand!r}")


# ---------------------------------------------------------------- 4

def test_criterion_04_alignment(capsys):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        b = int(rng.integers(2, 17))
        shape = (b, int(rng.integers(1, 4)), 8, 8)
        z = rng.normal(rng.uniform(-50, 50), rng.uniform(1e-3, 100), size=shape)
        s = rng.uniform(size=shape) * rng.uniform(0.01, 10) + rng.uniform(-5, 5)
        out = align_to_spatial(Tensor(z), s).data
        worst = max(worst, abs(out.mean() - s.mean()), abs(out.std() - s.std()))
    hand = align_to_spatial(Tensor(np.array([1.0, 2.0, 3.0])), np.array([10.0, 20.0, 30.0])).data
    hand_err = float(np.max(np.abs(hand - [10.0, 20.0, 30.0])))
    ok = worst <= 1e-6 and hand_err <= 1e-9
    verdict(capsys, 4, "alignment normalisation", ok,
            f"worst mean/std gap over 1000 batches {worst:.2e}; hand case error {hand_err:.1e}")


# ---------------------------------------------------------------- 5

def test_criterion_05_transform_oracles(capsys):
    rng = np.random.default_rng(505)
    haar = hf = zero = mag = 0.0
    for _ in range(100):
        h, w = 2 * int(rng.integers(1, 17)), 2 * int(rng.integers(1, 17))
        img = rng.normal(size=(2, 3, h, w)) * rng.uniform(0.1, 10)
        haar = max(haar, float(np.max(np.abs(haar_idwt2(*haar_dwt2(img)) - img))))
        v = wavelet_highfreq_view(img)
        hf = max(hf, float(np.max(np.abs(wavelet_highfreq_view(v) - v))))
        hg, wg = int(rng.integers(2, 33)), int(rng.integers(2, 33))
        x = rng.uniform(size=(2, 3, hg, wg))
        zero = max(zero, float(np.max(np.abs(fourier_phase_view(x, PhaseGate(hg, wg)).data - x))))
        gate = PhaseGate(hg, wg, scale=float(rng.uniform(0.1, 3.0)))
        gate.gain.data = rng.normal(size=gate.gain.shape) * 2
        out = fourier_phase_view(x, gate).data
        mag = max(mag, float(np.max(np.abs(np.abs(np.fft.fft2(out)) - np.abs(np.fft.fft2(x))))))
    ok = haar < 1e-9 and hf < 1e-9 and zero < 1e-6 and mag < 1e-6
    verdict(capsys, 5, "transform oracles", ok,
            f"Haar round trip {haar:.1e}; high-freq idempotence {hf:.1e}; zero gate {zero:.1e}; "
            f"magnitude {mag:.1e}")


# ---------------------------------------------------------------- 6

def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (pos.size * neg.size)


def test_criterion_06_metric_oracles(capsys):
    rng = np.random.default_rng(606)
    auc_bad = 0
    for i in range(200):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, int(rng.integers(2, 30)), n).astype(float) if i % 2 else rng.normal(size=n)
        auc_bad += auc(s, y) != brute_auc(s, y)

    worst = 0.0
    for _ in range(200):
        t = int(rng.integers(2, 9))
        rows = [list(rng.uniform(size=k + 1)) for k in range(t)]
        m = TaskMatrix([f"t{k}" for k in range(t)])
        for r in rows:
            m.add_row(r)
        aa = 0.0
        for k in range(t):
            aa += rows[t - 1][k]
        af = 0.0
        for k in range(t - 1):
            af += rows[k][k] - rows[t - 1][k]
        worst = max(worst, abs(average_accuracy(m) - aa / t), abs(average_forgetting(m) - af / (t - 1)))

    hand = auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = auc_bad == 0 and worst <= 1e-12 and hand == 0.75
    verdict(capsys, 6, "metric oracles", ok,
            f"{auc_bad}/200 AUC mismatches against brute force; AA/AF loop gap {worst:.1e}; hand case {hand!r}")


# ---------------------------------------------------------------- 7, 8

@pytest.fixture(scope="module")
def protocol_runs():
    """Lazily computed ``(variant, order, seed) -> (AA, AF)`` over the protocol2 config."""
    base = RunConfig.load("protocol2")
    datasets = [generate_dataset(spec) for spec in base.task_specs()]
    cache = {}

    def get(variant, order, seed):
        key = (variant, order, seed)
        if key not in cache:
            cfg = base.with_overrides(seed=seed, order=list(order), flags=VARIANTS[variant])
            model = Model(cfg.model_config(), cfg.seed)
            res = run_protocol(model, [datasets[i] for i in order], cfg.train_config())
            cache[key] = (average_accuracy(res.matrix), average_forgetting(res.matrix))
        return cache[key]

    get.started = time.time()
    return get


def seed_mean(get, variant, order=ORDERS[0]):
    vals = np.array([get(variant, order, s) for s in SEEDS])
    return vals.mean(axis=0), vals


@pytest.mark.slow
def test_criterion_07_continual_efficacy(capsys, protocol_runs):
    started = time.time()
    (aa_n, af_n), per_n = seed_mean(protocol_runs, "naive")
    (aa_f, af_f), per_f = seed_mean(protocol_runs, "full")
    (aa_e, _), _ = seed_mean(protocol_runs, "no_ewc")
    (aa_ef, _), _ = seed_mean(protocol_runs, "no_ewc_freq")
    elapsed = time.time() - started
    a = af_n >= 0.15
    b = af_f <= 0.5 * af_n and aa_f >= aa_n + 0.05
    c = aa_f >= aa_e - 0.01 and aa_e >= aa_ef - 0.01
    ok = a and b and c and elapsed < 30 * 60
    verdict(capsys, 7, "continual-learning efficacy", ok,
            f"(a) AF_naive {af_n:.3f} [{'ok' if a else 'no'}]; (b) AF_full {af_f:.3f}, AA_full {aa_f:.3f} "
            f"vs AA_naive {aa_n:.3f} [{'ok' if b else 'no'}]; (c) AA full/w-o EWC/w-o EWC&Freq "
            f"{aa_f:.3f}/{aa_e:.3f}/{aa_ef:.3f} [{'ok' if c else 'no'}]; seed means of 3; "
            f"per-seed AF naive {np.round(per_n[:, 1], 3).tolist()} full {np.round(per_f[:, 1], 3).tolist()}; "
            f"{elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_08_task_order_robustness(capsys, protocol_runs):
    means = [seed_mean(protocol_runs, "full", order)[0][0] for order in ORDERS]
    spread = max(means) - min(means)
    ok = spread <= 0.05
    verdict(capsys, 8, "task-order robustness", ok,
            "full AA per order " + ", ".join(f"{''.join(map(str, o))}={m:.3f}" for o, m in zip(ORDERS, means))
            + f"; spread {spread:.3f}; total protocol time {time.time() - protocol_runs.started:.0f}s")


# ---------------------------------------------------------------- 9

def reduced_config():
    doc = RunConfig.load("protocol2").doc
    doc["optim"]["epochs"] = 3
    for t in doc["tasks"]:
        t["counts"] = {"train": 64, "val": 16, "test": 32}
    doc["data_dir"] = "data"
    doc["output_dir"] = "runs"
    return doc


def cli_run(workdir):
    workdir.mkdir()
    (workdir / "cfg.json").write_text(json.dumps(reduced_config()))
    env = dict(os.environ, PYTHONHASHSEED="0")
    for cmd in (["gen", "--config", "cfg.json"], ["train", "--config", "cfg.json", "--seed", "7"]):
        subprocess.run([sys.executable, "-m", "fd2cl", *cmd], cwd=workdir, env=env, check=True,
                       capture_output=True)


def test_criterion_09_determinism(capsys, tmp_path):
    cli_run(tmp_path / "a")
    cli_run(tmp_path / "b")
    run = Path("runs") / "protocol2_full_seed7"
    files = [run / "metrics.json", run / "task_matrix.json", run / "config.json", run / "train_log.csv",
             run / "model.ckpt"]
    for t in reduced_config()["tasks"]:
        files += [Path("data") / t["name"] / "data.bin", Path("data") / t["name"] / "manifest.json"]
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differ
    verdict(capsys, 9, "determinism", ok,
            f"{len(files) - len(differ)}/{len(files)} files byte-identical across two seed-7 runs"
            + (f"; differing: {differ}" if differ else ""))


# ---------------------------------------------------------------- 10

def test_criterion_10_robustness_harness(capsys, tmp_path):
    doc = reduced_config()
    doc["optim"]["epochs"] = 2
    doc["data_dir"] = str(tmp_path / "data")
    doc["output_dir"] = str(tmp_path / "runs")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    assert cli.main(["gen", "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    run_dir = tmp_path / "runs" / "protocol2_full_seed0"
    args = cli.build_parser().parse_args(["robust", str(run_dir)])
    grid = cli.cmd_robust(args)
    metrics = json.loads((run_dir / "metrics.json").read_text())
    names = metrics["tasks"]

    complete = set(grid) == {(k, lv) for k in PERTURB_KINDS for lv in range(5)} and \
        all(len(v) == len(names) for v in grid.values())
    rows = (run_dir / "robustness.csv").read_text().splitlines()
    csv_ok = len(rows) == 1 + 4 * 5 and rows[0].split(",")[4:] == [*names, "Avg"]
    level0 = all(grid[(k, 0)] == [metrics["AUC"][n] for n in names] for k in PERTURB_KINDS)

    rng = np.random.default_rng(1010)
    img = rng.uniform(size=(3, 32, 32))
    identity = all(perturb(img, k, 0, seed=s).tobytes() == img.tobytes()
                   for k in PERTURB_KINDS for s in range(5))
    model = Model(ModelConfig(), 0)
    x = rng.uniform(size=(8, 3, 32, 32))
    direct = predict(model, x, 8)
    via = predict(model, np.stack([perturb(im, "GaussianNoise", 0, seed=1) for im in x]), 8)
    identity = identity and direct.tobytes() == via.tobytes()

    ok = complete and csv_ok and level0 and identity
    verdict(capsys, 10, "robustness harness", ok,
            f"grid complete {complete} ({len(grid)} cells x {len(names)} tasks), csv rows {len(rows) - 1}; "
            f"level 0 equals unperturbed AUC exactly {level0}; level-0 perturbation is identity {identity}")
