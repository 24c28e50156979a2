"""Acceptance suite: one test per criterion, each printed as a pass/fail line at the end of the run."""
import csv
import json
import math
import statistics
import time

import numpy as np
import pytest
import torch

from ncl_iml.cli import main as cli_main
from ncl_iml.data import save_dataset, synth_splice
from ncl_iml.losses import bce, ncl_loss, pc_loss
from ncl_iml.metrics import auc, evaluate, f1
from ncl_iml.pivot import PivotNet, PivotPair, pivot_forward
from ncl_iml.taxonomy import PatchLabel, partition_patches
from ncl_iml.trainer import TrainConfig, collate, compute_losses, fit, init_state, poly_lr

from oracles import brute_force_labels, grad_check, ncl_loop, pc_loop

SMOKE_SEEDS = (0, 1, 2)


def random_pivot(c, seed):
    torch.manual_seed(seed)
    net = PivotNet(c).double().eval()
    with torch.no_grad():
        for br in (net.plus, net.minus):
            br.bn.weight.uniform_(0.5, 1.5)
            br.bn.bias.uniform_(0.1, 0.4)  # keeps outputs away from the ReLU kink
            br.bn.running_mean.uniform_(-0.3, 0.3)
            br.bn.running_var.uniform_(0.5, 2.0)
    return net


def random_ncl_instance(rng):
    m, n, c = int(rng.integers(0, 7)), int(rng.integers(0, 7)), int(rng.integers(2, 9))
    pos = torch.from_numpy(rng.normal(size=(m, c)))
    neg = torch.from_numpy(rng.normal(size=(n, c)))
    pair = None
    if rng.random() < 0.8:
        pair = PivotPair(torch.from_numpy(np.abs(rng.normal(size=c))), torch.from_numpy(np.abs(rng.normal(size=c))))
    return pos, neg, pair, float(rng.uniform(0.05, 1.0))


def random_stages(rng):
    stages = []
    for _ in range(int(rng.integers(1, 4))):
        h, w = (int(v) for v in rng.integers(2, 9, size=2))
        probs = torch.from_numpy(rng.uniform(0.0, 1.0, size=(h, w)))
        gt = torch.from_numpy((rng.random((h, w)) < 0.4).astype(np.float64))
        contour = torch.from_numpy((rng.random((h, w)) < 0.3).astype(np.float64))
        stages.append((probs, gt, contour))
    return stages


# ------------------------------------------------------------------ smoke runs


def _train_and_score(seed, **flags):
    train = synth_splice(seed, 64, 64)
    held_out = synth_splice(seed + 1000, 16, 64)
    cfg = TrainConfig.tiny(seed=seed, **flags)
    t0 = time.perf_counter()
    state = fit(cfg, train)
    seconds = time.perf_counter() - t0
    res = evaluate(state.model, held_out)
    baseline = float(np.mean([f1(np.ones_like(s.mask), s.mask) for s in held_out]))
    return {
        "state": state,
        "held_out": held_out,
        "ratio": state.epoch_means[-1] / state.epoch_means[0],
        "f1": res.f1_fixed,
        "baseline_f1": baseline,
        "auc": res.auc,
        "seconds": seconds,
    }


@pytest.fixture(scope="session")
def smoke_full():
    return {s: _train_and_score(s) for s in SMOKE_SEEDS}


@pytest.fixture(scope="session")
def smoke_base():
    return {s: _train_and_score(s, enable_pivot=False, enable_pc=False) for s in SMOKE_SEEDS}


# -------------------------------------------------------------------- criteria


@pytest.mark.criterion(1, "loss oracles (100 ncl + 100 pc instances, 1e-6, <10 s)")
def test_criterion_01_loss_oracles(record):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_ncl = worst_pc = 0.0
    for _ in range(100):
        pos, neg, pair, tau = random_ncl_instance(rng)
        got = ncl_loss(pos, neg, pair, tau=tau).item()
        want = ncl_loop(pos, neg, None if pair is None else pair.se_plus, None if pair is None else pair.se_minus, tau)
        worst_ncl = max(worst_ncl, abs(got - want))
    for _ in range(100):
        stages, mu = random_stages(rng), float(rng.uniform(0, 1))
        got, per = pc_loss(stages, mu=mu)
        want, want_per = pc_loop(stages, mu)
        worst_pc = max([worst_pc, abs(got.item() - want)] + [abs(a.item() - b) for a, b in zip(per, want_per)])
    elapsed = time.perf_counter() - t0
    record(detail=f"max |ncl-oracle|={worst_ncl:.1e}, max |pc-oracle|={worst_pc:.1e}, {elapsed:.2f}s")
    assert worst_ncl <= 1e-6 and worst_pc <= 1e-6
    assert elapsed < 10


@pytest.mark.criterion(2, "closed-form NCL, identical embeddings (m=2, n=1, tau=1) = 3 ln 2 +- 1e-9")
def test_criterion_02_closed_form(record):
    u = torch.tensor([0.6, 0.8], dtype=torch.float64)
    got = ncl_loss(u.repeat(2, 1), u.repeat(1, 1), PivotPair(u.clone(), u.clone()), tau=1.0).item()
    oracle = ncl_loop(u.repeat(2, 1), u.repeat(1, 1), u, u, tau=1.0)
    record(detail=f"got {got:.12f}, loop oracle {oracle:.12f}, target 3 ln 2 = {3 * math.log(2):.12f}")
    assert got == pytest.approx(3 * math.log(2), abs=1e-9)


@pytest.mark.criterion(3, "gradients vs central differences (h=1e-4, rel 1e-3, 20 seeds, <60 s)")
def test_criterion_03_gradients(record):
    t0 = time.perf_counter()
    worst = {"ncl": 0.0, "pc": 0.0, "pivot": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m, n, c = int(rng.integers(2, 5)), int(rng.integers(1, 5)), int(rng.integers(3, 7))
        pos, neg = rng.normal(size=(m, c)), rng.normal(size=(n, c))
        sp, sm = np.abs(rng.normal(size=c)) + 0.1, np.abs(rng.normal(size=c)) + 0.1
        tau = float(rng.uniform(0.2, 1.0))
        fn = lambda p, q, a, b: ncl_loss(p, q, PivotPair(a, b), tau=tau)
        worst["ncl"] = max(worst["ncl"], grad_check(fn, [torch.from_numpy(x) for x in (pos, neg, sp, sm)]))

        h, w = (int(v) for v in rng.integers(3, 7, size=2))
        probs = torch.from_numpy(rng.uniform(0.05, 0.95, size=(h, w)))
        gt = torch.from_numpy((rng.random((h, w)) < 0.4).astype(np.float64))
        contour = torch.from_numpy((rng.random((h, w)) < 0.3).astype(np.float64))
        mu = float(rng.uniform(0, 1))
        worst["pc"] = max(worst["pc"], grad_check(lambda p: pc_loss([(p, gt, contour)], mu=mu)[0], [probs]))

        net = random_pivot(c, seed)
        rows = torch.from_numpy(rng.normal(size=(int(rng.integers(1, 6)), c)))
        wts = torch.from_numpy(rng.normal(size=(2, c)))

        def pivot_fn(x):
            pair = pivot_forward(net, x)
            return (wts[0] * pair.se_plus).sum() + (wts[1] * pair.se_minus).sum()

        worst["pivot"] = max(worst["pivot"], grad_check(pivot_fn, [rows]))
    elapsed = time.perf_counter() - t0
    record(detail=", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert max(worst.values()) < 1e-3
    assert elapsed < 60


@pytest.mark.criterion(4, "taxonomy vs brute force on 100 masks; complement symmetry")
def test_criterion_04_taxonomy(record):
    rng = np.random.default_rng(4)
    mismatches = asym = 0
    for _ in range(100):
        stride = int(rng.choice([1, 2, 3, 4, 8]))
        h, w = (int(v) for v in rng.integers(1, 41, size=2))
        mask = (rng.random((h, w)) < rng.uniform(0, 1)).astype(np.uint8)
        if rng.random() < 0.5:
            coarse = rng.random((-(-h // stride), -(-w // stride))) < 0.5
            mask = np.kron(coarse, np.ones((stride, stride))).astype(np.uint8)[:h, :w]
        labels = partition_patches(mask, stride).labels
        mismatches += not np.array_equal(labels, brute_force_labels(mask, stride))
        if h % stride == 0 and w % stride == 0:  # padding is authentic, so symmetry needs exact tiling
            flipped = partition_patches(1 - mask, stride).labels
            swapped = np.select([labels == PatchLabel.TAMPERED, labels == PatchLabel.AUTHENTIC],
                                [PatchLabel.AUTHENTIC, PatchLabel.TAMPERED], PatchLabel.CONTOUR)
            asym += not np.array_equal(flipped, swapped)
    record(detail=f"{mismatches} oracle mismatches, {asym} symmetry violations")
    assert mismatches == 0 and asym == 0


@pytest.mark.criterion(5, "pivot permutation invariance and shape for k in {1,2,5,50}")
def test_criterion_05_pivot(record):
    checked = 0
    for training in (False, True):
        for k in (1, 2, 5, 50):
            net = random_pivot(16, k).float().train(training)
            rows = torch.from_numpy(np.random.default_rng(k).normal(size=(k, 16))).float()
            ref = pivot_forward(net, rows)
            assert ref.se_plus.shape == (16,) and ref.se_minus.shape == (16,)
            for seed in range(10):
                perm = torch.from_numpy(np.random.default_rng(seed).permutation(k))
                out = pivot_forward(net, rows[perm])
                assert torch.equal(out.se_plus, ref.se_plus) and torch.equal(out.se_minus, ref.se_minus)
                checked += 1
    record(detail=f"{checked} permutations bit-identical")


@pytest.mark.criterion(6, "mu=0 gives mean BCE (1e-12); omega=0 gives zero pivot gradient")
def test_criterion_06_reductions(record):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        stages = random_stages(rng)
        got, _ = pc_loss(stages, mu=0.0)
        want = math.fsum(bce(p, g).mean().item() for p, g, _ in stages)
        worst = max(worst, abs(got.item() - want))

    cfg = TrainConfig.tiny(omega=0.0, crop_size=32)
    state = init_state(cfg)
    images, masks = collate(synth_splice(6, 4, 32))
    total, bd = compute_losses(state.model, images, masks, cfg)
    total.backward()
    grads = [p.grad for p in state.model.pivot.parameters()]
    max_grad = max(0.0 if g is None else float(g.abs().max()) for g in grads)
    with torch.no_grad():
        for p in state.model.pivot.parameters():
            p.add_(0.5)
    perturbed, _ = compute_losses(state.model, images, masks, cfg)
    record(detail=f"max |pc-bce|={worst:.1e}, ncl={bd.ncl:.3f}, max |pivot grad|={max_grad}")
    assert worst <= 1e-12
    assert bd.ncl > 0 and max_grad == 0.0
    assert perturbed.item() == total.item()


@pytest.mark.criterion(7, "poly_lr: 0.007 at step 0, 0 at the end, midpoint 0.0037486 +- 1e-6")
def test_criterion_07_schedule(record):
    total = 1000
    start, end, mid = poly_lr(0, total), poly_lr(total, total), poly_lr(total // 2, total)
    record(detail=f"start {start}, end {end}, midpoint {mid:.10f}")
    assert start == 0.007 and end == 0.0
    assert mid == pytest.approx(0.0037486, abs=1e-6)


@pytest.mark.criterion(8, "metric oracles: F1 = 2/3, AUC = 8/9, AUC monotone invariance")
def test_criterion_08_metrics(record):
    got_f1 = f1(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [0, 0]]))
    got_auc = auc(np.array([0.9, 0.8, 0.4, 0.7, 0.3, 0.1]), np.array([1, 1, 1, 0, 0, 0]))
    rng = np.random.default_rng(8)
    broken = 0
    for _ in range(20):
        gt = rng.random((16, 16)) < 0.3
        p = rng.random((16, 16))
        base = auc(p, gt)
        broken += any(auc(g(p), gt) != base for g in (np.sqrt, np.exp, lambda x: x**5, lambda x: np.log(x + 1e-3)))
    record(detail=f"F1 {got_f1}, AUC {got_auc}, {broken}/20 maps not invariant")
    assert got_f1 == 2 / 3 and got_auc == 8 / 9 and broken == 0


@pytest.mark.slow
@pytest.mark.criterion(9, "smoke training: loss ratio <= 0.5 on 3 seeds; F1 > all-positive on >= 2 seeds")
def test_criterion_09_smoke(record, smoke_full):
    runs = [smoke_full[s] for s in SMOKE_SEEDS]
    detail = "; ".join(
        f"seed {s}: ratio {r['ratio']:.3f}, f1 {r['f1']:.3f} vs {r['baseline_f1']:.3f}, {r['seconds']:.0f}s"
        for s, r in zip(SMOKE_SEEDS, runs)
    )
    record(detail=detail)
    assert all(r["ratio"] <= 0.5 for r in runs)
    assert sum(r["f1"] > r["baseline_f1"] for r in runs) >= 2
    assert sum(r["seconds"] for r in runs) < 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(10, "ablation (soft): median AUC Base+Pivot+PC >= Base over 3 seeds")
def test_criterion_10_ablation(record, smoke_full, smoke_base):
    full = statistics.median(smoke_full[s]["auc"] for s in SMOKE_SEEDS)
    base = statistics.median(smoke_base[s]["auc"] for s in SMOKE_SEEDS)
    per_seed = ", ".join(f"{smoke_full[s]['auc']:.3f}/{smoke_base[s]['auc']:.3f}" for s in SMOKE_SEEDS)
    ordered = full >= base
    record(detail=f"median AUC full {full:.4f}, base {base:.4f} (per seed full/base {per_seed})", flag=not ordered)
    if not ordered:
        # the criterion asks for the values to be reported and the run flagged, not for a hard failure
        import warnings

        warnings.warn(f"ablation ordering not reproduced: Base+Pivot+PC {full:.4f} < Base {base:.4f}")
    assert all(0.0 <= v <= 1.0 for v in (full, base))


@pytest.mark.slow
@pytest.mark.criterion(11, "attack-eval: 9 rows, AUC in [0,1], manifest reproduces on re-run")
def test_criterion_11_attack_eval(record, smoke_full, tmp_path):
    run = smoke_full[0]
    ckpt = tmp_path / "smoke.safetensors"
    run["state"].save(ckpt)
    data = tmp_path / "held_out"
    save_dataset(run["held_out"], data)
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli_main(["attack-eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out), "-q"]) == 0
        with open(out / "attack_eval.csv") as fh:
            rows = list(csv.DictReader(fh))
        outs.append((rows, json.loads((out / "manifest.json").read_text())))
    rows = outs[0][0]
    aucs = [float(r["auc"]) for r in rows]
    record(detail=f"{len(rows)} rows, AUC range [{min(aucs):.3f}, {max(aucs):.3f}], "
                  f"manifests identical: {outs[0][1] == outs[1][1]}")
    assert len(rows) == 9 and rows[0]["attack"] == "None"
    assert all(0.0 <= a <= 1.0 for a in aucs)
    assert outs[0] == outs[1]
