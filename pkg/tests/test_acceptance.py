"""Acceptance gate. Each test prints one PASS/FAIL line (also collected in the
terminal summary). Criteria 4-7 run full-size synthetic experiments and take
several minutes each on one core."""
import json
import os
import time

import numpy as np
import pytest
import torch

from conftest import record_criterion
from kgssl import neuralcore as nc
from kgssl.datahub import Dataset, EntityRecord, SyntheticConfig, fit_normalize, simulate_bucket, synthesize
from kgssl.experiments import run_experiment
from kgssl.inference import denoise_or_impute, estimate_characteristics
from kgssl.losses import ContrastiveBatch, contrastive_loss, pseudo_inverse_loss, reconstruction_loss
from kgssl.trainer import Checkpoint, TrainConfig, batch_losses, initial_params
from oracles import (
    brute_nt_xent,
    brute_pseudo_inverse_loss,
    brute_reconstruction_loss,
    finite_difference_gradient,
    manual_bucket,
    objective,
)

pytestmark = pytest.mark.acceptance
D = torch.float64


def check(number, passed, detail):
    record_criterion(number, bool(passed), detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 1: gradients against an independent numpy objective


def test_criterion_1_gradients():
    # eps 1e-4: see the ledger for why 1e-5 (roundoff) and 2e-4 (ReLU kinks) are worse
    rng = np.random.default_rng(0)
    start, worst, worst_case = time.perf_counter(), 0.0, None
    for case in range(100):
        h, w, dx = int(rng.integers(1, 9)), int(rng.integers(2, 11)), int(rng.integers(1, 4))
        n, dz = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        p = nc.init_model(case, dx + 1, h, dz, dtype=D)
        a, b = (torch.as_tensor(rng.normal(size=(n, w, dx + 1))) for _ in range(2))
        z, mask = torch.as_tensor(rng.normal(size=(n, dz))), torch.as_tensor(rng.random(n) < 0.7)
        lam, tau = rng.uniform(0.1, 2, 3), float(rng.uniform(0.2, 1.0))
        cfg = TrainConfig(lambda_rec=lam[0], lambda_cont=lam[1], lambda_inv=lam[2], temperature=tau, hidden_size=h, dtype="float64")
        analytic = nc.gradients(lambda q: batch_losses(q, a, b, z, mask, cfg).total, p)
        arrays = {k: v.numpy() for k, v in nc.named_tensors(p).items()}
        seqs = np.concatenate([a.numpy(), b.numpy()])
        fd = finite_difference_gradient(arrays, lambda P: objective(P, seqs, z.numpy(), mask.numpy(), lam, tau), eps=1e-4)
        for k in arrays:
            an = analytic[k].numpy()
            rel = float(np.max(np.abs(an - fd[k]) / np.maximum(np.maximum(np.abs(an), np.abs(fd[k])), 1e-6)))
            if rel > worst:
                worst, worst_case = rel, (case, k)
    elapsed = time.perf_counter() - start
    check(1, worst < 1e-4 and elapsed < 120, f"worst relative error {worst:.2e} at {worst_case}, {elapsed:.0f}s (limits 1e-4, 120s)")


# ---------------------------------------------------------------------------
# 2: loss laws


def test_criterion_2_loss_laws():
    rng = np.random.default_rng(1)
    start, failures = time.perf_counter(), []
    t = lambda a: torch.as_tensor(a, dtype=D)  # noqa: E731
    one = contrastive_loss(ContrastiveBatch(t(rng.normal(size=(1, 4))), t(rng.normal(size=(1, 4))), 0.5)).item()
    if one != 0.0:
        failures.append(f"N=1 loss {one}")
    for trial in range(300):
        n, hdim, tau = int(rng.integers(1, 6)), int(rng.integers(1, 6)), float(rng.uniform(0.05, 2))
        a, p = rng.normal(size=(n, hdim)), rng.normal(size=(n, hdim))
        base = contrastive_loss(ContrastiveBatch(t(a), t(p), tau)).item()
        if base < 0:
            failures.append(f"negative loss {base}")
        scale = rng.uniform(0.01, 100, size=(2, n, 1))
        scaled = contrastive_loss(ContrastiveBatch(t(a * scale[0]), t(p * scale[1]), tau)).item()
        if abs(scaled - base) > 1e-9:
            failures.append(f"scaling {abs(scaled - base):.1e}")
        perm = rng.permutation(n)
        if contrastive_loss(ContrastiveBatch(t(a[perm]), t(p[perm]), tau)).item() != base:
            failures.append("permutation not exact")
        if contrastive_loss(ContrastiveBatch(t(p), t(a), tau)).item() != base:
            failures.append("swap not exact")
        if abs(base - brute_nt_xent(a, p, tau)) > 1e-12:
            failures.append(f"nt-xent brute force {abs(base - brute_nt_xent(a, p, tau)):.1e}")
        w = int(rng.integers(1, 6))
        recs, origs = rng.normal(size=(n, w, 2)), rng.normal(size=(n, w, 2))
        if abs(reconstruction_loss(t(recs), t(origs)).item() - brute_reconstruction_loss(recs.tolist(), origs.tolist())) > 1e-12:
            failures.append("reconstruction brute force")
        zhat, z, m = rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.random((n, 3)) < 0.6
        if abs(pseudo_inverse_loss(t(zhat), t(z), torch.as_tensor(m)).item() - brute_pseudo_inverse_loss(zhat, z, m)) > 1e-12:
            failures.append("pseudo-inverse brute force")
    elapsed = time.perf_counter() - start
    check(2, not failures and elapsed < 60, f"{len(failures)} violations over 300 random instances {failures[:3]}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3: pooled estimate and uncertainty


def _pool_dataset():
    rng = np.random.default_rng(2)
    recs = [EntityRecord(f"e{i}", rng.normal(size=(400, 2)), rng.normal(size=400), rng.normal(size=2), np.ones(2, bool)) for i in range(6)]
    return fit_normalize(Dataset(tuple(recs), ("a", "b"), ("z0", "z1")))[0]


def test_criterion_3_uncertainty():
    std = _pool_dataset()
    cfg = TrainConfig(window=100, stride=100, hidden_size=8, seeds=(0,), dtype="float64")

    def ckpt(seed, bias=None):
        params = initial_params(std, cfg, seed)
        if bias is not None:
            tensors = nc.named_tensors(params)
            tensors["inverse_head.output.weight"] = torch.zeros_like(tensors["inverse_head.output.weight"])
            tensors["inverse_head.output.bias"] = torch.tensor(bias, dtype=D)
            params = nc.replace_tensors(params, tensors)
        return Checkpoint(params, std.stats, cfg, seed, std.driver_names, std.char_names)

    worst = 0.0
    for est in denoise_or_impute([ckpt(0), ckpt(1), ckpt(2)], std, stride=29):
        worst = max(worst, float(np.max(np.abs(est.uncertainty - np.std(est.window_predictions, axis=0)))))
    single = estimate_characteristics([ckpt(0)], std["e0"], period=(10, 110))
    pair = estimate_characteristics([ckpt(0, [1.0, 3.0]), ckpt(1, [3.0, 5.0])], std["e0"], period=(0, 100))
    ok = (
        worst <= 1e-9
        and np.all(single.uncertainty == 0.0)
        and pair.estimate.tolist() == [2.0, 4.0]
        and pair.uncertainty.tolist() == [1.0, 1.0]
    )
    check(3, ok, f"max |unc - pop std| {worst:.1e}; single-window unc {single.uncertainty.tolist()}; "
                 f"two-window estimate {pair.estimate.tolist()} unc {pair.uncertainty.tolist()}")


# ---------------------------------------------------------------------------
# 4-6: synthetic identifiability, robustness ordering, denoising


@pytest.fixture(scope="module")
def identifiability_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("identifiability")
    runs = {}
    for preset in ("synthetic-clean", "noise50", "noise90"):
        start = time.perf_counter()
        report = run_experiment(preset, root / preset)
        runs[preset] = (report, time.perf_counter() - start)
    return runs


def test_criterion_4_identifiability(identifiability_runs):
    report, elapsed = identifiability_runs["synthetic-clean"]
    corr = report.extra["median_seed_corr"]
    per_seed = {s: round(m["mean_corr"], 3) for s, m in report.extra["per_seed"].items()}
    per_char = [round(r["corr"], 3) for r in report.metrics]
    check(4, corr >= 0.8 and elapsed <= 1200,
          f"median-seed held-out CORR {corr:.3f} (>= 0.8), per seed {per_seed}, ensemble per characteristic {per_char}, {elapsed:.0f}s")


def test_criterion_5_robustness_ordering(identifiability_runs):
    c = {k: identifiability_runs[k][0].extra["median_seed_corr"] for k in ("synthetic-clean", "noise50", "noise90")}
    ok = c["synthetic-clean"] >= c["noise50"] - 0.02 and c["noise50"] >= c["noise90"] - 0.02
    check(5, ok, "clean {synthetic-clean:.3f} >= 50% {noise50:.3f} >= 90% {noise90:.3f} (slack 0.02)".format(**c))


def test_criterion_6_denoising(identifiability_runs):
    den = identifiability_runs["noise50"][0].extra["denoising"]
    rec, cor = den["median_rmse_reconstructed"], den["rmse_corrupted"]
    check(6, rec < cor, f"median-seed RMSE reconstructed {rec:.3f} < stored corrupted {cor:.3f}")


# ---------------------------------------------------------------------------
# 7: forward-model value


def test_criterion_7_forward(tmp_path):
    start = time.perf_counter()
    report = run_experiment("forward", tmp_path)
    elapsed = time.perf_counter() - start
    m = {arm: v["median_over_seeds"] for arm, v in report.nse.items()}
    gain = m["embedding"] - m["none"]
    ok = gain >= 0.05 and m["measured"] > m["measured_noisy"] and elapsed <= 900
    check(7, ok, f"median NSE embedding {m['embedding']:.3f} vs none {m['none']:.3f} (gain {gain:+.3f}, need >= 0.05); "
                 f"clean z {m['measured']:.3f} vs noisy z {m['measured_noisy']:.3f}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8: determinism and round-trip

SMALL = {
    "n_entities": "16", "n_days": "400", "n_test": "4", "window": "100", "stride": "100",
    "hidden_size": "8", "batch_entities": "8", "epochs": "3", "steps_per_epoch": "5", "seeds": "0,1",
}


def test_criterion_8_determinism(tmp_path):
    run_experiment("noise50", tmp_path / "a", SMALL)
    run_experiment("noise50", tmp_path / "b", SMALL)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ckpt = Checkpoint.load(tmp_path / "a" / "checkpoints" / "seed0.kgssl")
    ckpt.save(tmp_path / "resaved.kgssl")
    again = Checkpoint.load(tmp_path / "resaved.kgssl")
    data = fit_normalize(synthesize(SyntheticConfig(n_entities=4, n_days=400, seed=9)))[0]
    a = denoise_or_impute([ckpt], data)
    b = denoise_or_impute([again], data)
    bitwise = all(x.estimate.tobytes() == y.estimate.tobytes() and x.uncertainty.tobytes() == y.uncertainty.tobytes() for x, y in zip(a, b))
    same_bytes = (tmp_path / "resaved.kgssl").read_bytes() == (tmp_path / "a" / "checkpoints" / "seed0.kgssl").read_bytes()
    check(8, not differing and bitwise and same_bytes,
          f"{len(files)} run artifacts compared, {len(differing)} differ {differing[:3]}; reload estimates bitwise {bitwise}; resave identical {same_bytes}")


# ---------------------------------------------------------------------------
# 9: simulator conservation


def test_criterion_9_conservation():
    rng = np.random.default_rng(9)
    violations = mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(30, 400))
        p = np.where(rng.random(n) < rng.uniform(0.05, 0.8), rng.exponential(rng.uniform(1, 30), n), 0.0)
        temp = rng.normal(rng.uniform(-10, 15), rng.uniform(1, 10), n)
        k, tm, alpha = rng.uniform(0.01, 1.0), rng.uniform(-5, 5), rng.uniform(0.3, 2.5)
        q, s, _ = simulate_bucket(p, temp, k, tm, alpha)
        if np.any(np.cumsum(q) > np.cumsum(p) + 1e-9) or np.any(q < 0) or np.any(q > s + 1e-12):
            violations += 1
        if not np.allclose(q, manual_bucket(p, temp, k, tm, alpha), rtol=0, atol=1e-12):
            mismatches += 1
    q, s, _ = simulate_bucket(np.zeros(3), np.full(3, 10.0), 0.2, 0.0, 1.0, storage0=10.0)
    example = q[0] == 2.0 and s[1] == 8.0 and q[1] == 1.6
    check(9, violations == 0 and mismatches == 0 and example,
          f"{violations} conservation violations and {mismatches} oracle mismatches in 1000 configs; "
          f"k=0.2 example q1={float(q[0])!r} s1={float(s[1])!r} q2={float(q[1])!r}")


# ---------------------------------------------------------------------------
# 10: optional external-data run


@pytest.mark.skipif(not os.environ.get("KGSSL_DATA_ROOT"), reason="KGSSL_DATA_ROOT not set (optional CAMELS criterion)")
def test_criterion_10_camels(tmp_path):
    report = run_experiment("camels-table1", tmp_path)
    means = {k: v for k, v in json.loads((tmp_path / "report.json").read_text())["metric_means"].items()}
    ok = abs(means["rmse"] - 0.465) <= 0.05 and abs(means["corr"] - 0.824) <= 0.05
    check(10, ok, f"RMSE {means['rmse']:.3f} (0.465 +/- 0.05), CORR {means['corr']:.3f} (0.824 +/- 0.05); groups {report.groups}")
