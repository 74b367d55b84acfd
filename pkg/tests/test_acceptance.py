"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line (printed in the session summary) before
asserting, so a failure is reported with the measured numbers.
"""

import json
import time

import numpy as np
import pytest
import torch

from affiliation_oracle import label_sets, labels_matrix, oracle_batch
from gradient_suite import CHECKS
from helpers import FD_RTOL, worst
from redf.cli import run
from redf.core import Config
from redf.data import SynthSpec, generate_synthetic
from redf.evalmetrics import affiliation_batch, affiliation_from_labels
from redf.pipeline import (forecast_errors, forecast_only, generate_samples, score, split_train_val,
                           threshold, train)
from redf.rem import RemModel, SimilarityGraph, build_graph, dft, idft

SEEDS = range(5)
# desk-scale training: defaults for L, H, n and the encoder, narrower and shorter
DESK = dict(num_channels=4, hidden_dim=32, epochs=5, train_stride=8, learning_rate=1e-3,
            dropout=0.0)
VARIANTS = {"full": {}, "no-msp": {"msp_count": 0}, "no-contrastive": {"lambda_contra": 0.0}}


# 1 ---------------------------------------------------------------------------

def test_c1_dft_round_trip_and_direct_sum(verdict):
    rng = np.random.default_rng(1)
    lengths = [1, 2, 3, 16, 97, 192, 256, 500, 511, 512] + list(rng.integers(1, 513, 10))
    windows = [rng.normal(size=(4, int(n))) for n in lengths]
    start = time.perf_counter()
    spectra = [dft(torch.as_tensor(w)) for w in windows]
    back = [idft(sp) for sp in spectra]
    elapsed = time.perf_counter() - start
    trip = max(float((b - torch.as_tensor(w)).abs().max()) for b, w in zip(back, windows))
    direct = 0.0
    for w, sp in zip(windows, spectra):
        n = w.shape[-1]
        basis = np.exp(-2j * np.pi * np.outer(np.arange(n), np.arange(n)) / n)
        ref = w @ basis.T
        direct = max(direct, float(np.abs(sp.real.numpy() + 1j * sp.imag.numpy() - ref).max()))
        inv = (ref @ basis.conj().T / n).real
        direct = max(direct, float(np.abs(idft(sp).numpy() - inv).max()))
    ok = trip < 1e-9 and direct < 1e-9 and elapsed < 1.0
    verdict("1 dft/idft", ok, f"round trip {trip:.2e}, vs direct sum {direct:.2e}, "
            f"{len(windows)} windows in {elapsed:.3f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_c2_gradient_suite(verdict):
    start = time.perf_counter()
    results = {name: worst(check()) for name, check in CHECKS.items()}
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in results.items() if v[1] > FD_RTOL}
    top = max(results.items(), key=lambda kv: kv[1][1])
    ok = not bad and elapsed < 60
    verdict("2 gradient suite", ok, f"{len(results)} checks, worst {top[0]}:{top[1][0]} "
            f"{top[1][1]:.2e}, {elapsed:.1f}s" + (f", failing {sorted(bad)}" if bad else ""))
    assert ok


# 3 ---------------------------------------------------------------------------

def test_c3_generate_samples_oracle(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        lookback, horizon, n = int(rng.integers(1, 64)), int(rng.integers(1, 32)), int(rng.integers(0, 4))
        t = int(rng.integers(0, 50))
        length = t + lookback + (n + 1) * horizon + int(rng.integers(0, 10))
        series = rng.normal(size=(2, length))
        s = generate_samples(series, t, lookback, horizon, n)
        for k in range(n + 1):
            lo = t + k * horizon
            x = series[:, lo:lo + lookback]
            y = series[:, lo + lookback:lo + lookback + horizon]
            mismatches += not (np.array_equal(s.inputs[k], x) and np.array_equal(s.targets[k], y))
    verdict("3 sample windows", mismatches == 0, f"{mismatches} mismatches over 1000 tuples")
    assert mismatches == 0


# 4 ---------------------------------------------------------------------------

def test_c4_mask_respect(verdict):
    gen = torch.Generator().manual_seed(4)
    leaked = asym = diag = 0
    for i in range(100):
        c = int(torch.randint(2, 9, (1,), generator=gen))
        cfg = Config(num_channels=c, lookback=16, horizon=4, patch_size=4, patch_stride=2,
                     hidden_dim=8, dropout=0.0, seed=i)
        torch.manual_seed(i)
        rem = RemModel(cfg).double().train()
        feats = 3 * torch.randn(2, cfg.num_patches, c, 8, generator=gen, dtype=torch.float64)
        raw = torch.randn(8, generator=gen, dtype=torch.float64)
        g = build_graph(feats, raw, cfg.eps, cfg.gumbel_temperature, training=True)
        asym += not (torch.equal(g.similarity, g.similarity.transpose(-1, -2))
                     and torch.equal(g.distance, g.distance.transpose(-1, -2)))
        diag += not bool((torch.diagonal(g.mask, dim1=-2, dim2=-1) == 1).all())
        rem.inter_layer.attn.keep_weights = True
        rem.inter_attention(feats, SimilarityGraph(None, None, None, g.mask))
        w = rem.inter_layer.attn.last_weights
        blocked = (g.mask == 0).reshape(-1, 1, c, c).expand_as(w)
        leaked += int((w[blocked] != 0).sum())
    ok = leaked == 0 and asym == 0 and diag == 0
    verdict("4 mask respect", ok, f"100 graphs: {leaked} nonzero masked weights, "
            f"{asym} asymmetric graphs, {diag} graphs with a diagonal entry != 1")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_c5_dual_stream_null(verdict):
    cfg = Config(num_channels=4, lookback=64, horizon=16, patch_size=8, patch_stride=4,
                 hidden_dim=16, encoder_layers=1, epochs=1, train_stride=8, dropout=0.0)
    ds = generate_synthetic(SynthSpec(length=3000, num_events=4))
    model, _ = train(ds.train[:, :3000], cfg)
    null = score(model, ds.test, purified=lambda x: x)
    ok = bool(np.all(null.scores == 0)) and len(null.scores) > 0
    verdict("5 null test", ok, f"{len(null.scores)} scores, max {float(np.max(null.scores)):.1e}")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_c6_affiliation_exhaustive(verdict):
    start = time.perf_counter()
    pairs, worst_err, nan_mismatch = 0, 0.0, 0
    for length in range(1, 21):
        sets = label_sets(length)
        preds = labels_matrix(sets, length)
        for events in sets[1:]:
            p, r, _, _ = affiliation_batch(preds, events, length)
            po, ro = oracle_batch(preds, np.array([e[0] for e in events]),
                                  np.array([e[1] for e in events]), length)
            nan_mismatch += int(np.sum(np.isnan(p) != np.isnan(po)))
            both = ~np.isnan(p) & ~np.isnan(po)
            err = max(float(np.max(np.abs(p[both] - po[both]), initial=0)),
                      float(np.max(np.abs(r - ro))))
            worst_err = max(worst_err, err)
            pairs += len(preds)
    ok = worst_err <= 1e-9 and nan_mismatch == 0
    verdict("6 affiliation oracle", ok, f"{pairs} label pairs (T<=20, <=2 events), worst "
            f"difference {worst_err:.1e}, {nan_mismatch} definedness mismatches, "
            f"{time.perf_counter() - start:.0f}s")
    assert ok


# 7 and 8 ---------------------------------------------------------------------

def _random_f1(labels, n_val, index, seed, r_pct):
    rng = np.random.default_rng(seed)
    test_scores = rng.uniform(size=len(labels))[index]
    thr = threshold(rng.uniform(size=n_val), test_scores, r_pct)
    pred = np.zeros(len(labels), dtype=int)
    pred[index] = thr.apply(test_scores)
    return affiliation_from_labels(pred, labels).aff_f1


def _one_run(seed, changes):
    ds = generate_synthetic(SynthSpec(seed=seed))
    cfg = Config(**DESK, seed=seed).replace(**changes)
    train_part, val = split_train_val(ds.train, cfg.val_fraction)
    start = time.perf_counter()
    model, _ = train(train_part, cfg)
    s_val, s_test = score(model, val), score(model, ds.test)
    elapsed = time.perf_counter() - start

    labels, L, H = ds.test_labels, cfg.lookback, cfg.horizon
    dense = s_test.dense(len(labels))
    event, normal = [], []
    for s in range(0, len(labels) - L - H + 1, H):
        horizon = slice(s + L, s + L + H)
        (event if labels[horizon].any() else normal).append(dense[horizon].mean())
    thr = threshold(s_val.scores, s_test.scores, cfg.anomaly_ratio)
    pred = thr.apply(dense)
    f1 = affiliation_from_labels(pred, labels).aff_f1
    starts, forecasts = forecast_only(model, val)
    mse = forecast_errors(val, starts, forecasts, L)["mse"]
    return {"sep": float(np.mean(event) / np.mean(normal)), "f1": f1, "mse": mse,
            "random_f1": _random_f1(labels, len(s_val.scores), s_test.index, seed, cfg.anomaly_ratio),
            "seconds": elapsed}


@pytest.fixture(scope="module")
def synthetic_runs():
    torch.set_num_threads(1)
    return {(name, seed): _one_run(seed, changes)
            for name, changes in VARIANTS.items() for seed in SEEDS}


def _median(runs, variant, key):
    return float(np.median([runs[(variant, s)][key] for s in SEEDS]))


def _per_seed(runs, variant, key):
    return "[" + ", ".join(f"{runs[(variant, s)][key]:.3f}" for s in SEEDS) + "]"


def test_c7_runtime_budget(synthetic_runs, verdict):
    longest = max(r["seconds"] for r in synthetic_runs.values())
    ok = longest < 600
    verdict("7 runtime", ok, f"longest train+score {longest:.0f}s over {len(synthetic_runs)} runs "
            f"(budget 600s each)")
    assert ok


def test_c7a_score_separation(synthetic_runs, verdict):
    med = _median(synthetic_runs, "full", "sep")
    ok = med >= 3.0
    verdict("7a score separation", ok, f"median {med:.2f}x (need >= 3x), per seed "
            f"{_per_seed(synthetic_runs, 'full', 'sep')}")
    assert ok


def test_c7b_aff_f1_level(synthetic_runs, verdict):
    med = _median(synthetic_runs, "full", "f1")
    ok = med >= 0.6
    verdict("7b Aff-F1 level", ok, f"median {med:.3f} (need >= 0.6), per seed "
            f"{_per_seed(synthetic_runs, 'full', 'f1')}")
    assert ok


def test_c7b_aff_f1_above_random(synthetic_runs, verdict):
    gaps = [synthetic_runs[("full", s)]["f1"] - synthetic_runs[("full", s)]["random_f1"] for s in SEEDS]
    med = float(np.median(gaps))
    ok = med >= 0.3
    verdict("7b Aff-F1 above random", ok, f"median gap {med:.3f} (need >= 0.3); random scorer "
            f"{_per_seed(synthetic_runs, 'full', 'random_f1')}")
    assert ok


@pytest.mark.parametrize("ablation", ["no-msp", "no-contrastive"])
def test_c7c_ablation_direction(synthetic_runs, verdict, ablation):
    full, ablated = _median(synthetic_runs, "full", "f1"), _median(synthetic_runs, ablation, "f1")
    ok = ablated < full
    verdict(f"7c ablation {ablation}", ok, f"median Aff-F1 {ablated:.3f} vs full {full:.3f}, "
            f"per seed {_per_seed(synthetic_runs, ablation, 'f1')}")
    assert ok


def test_c8_msp_forecast_mse(synthetic_runs, verdict):
    full, no_msp = _median(synthetic_runs, "full", "mse"), _median(synthetic_runs, "no-msp", "mse")
    ok = full <= no_msp
    verdict("8 MSP forecast MSE", ok, f"median validation MSE {full:.5f} with MSP vs {no_msp:.5f} "
            f"without")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_c9_determinism(tmp_path, verdict):
    assert run(["synth", "--out", str(tmp_path), "--name", "d", "--length", "4000",
                "--num-events", "4", "--seed", "9"]) == 0
    flags = ["--lookback", "64", "--horizon", "16", "--patch_size", "8", "--patch_stride", "4",
             "--hidden_dim", "16", "--encoder_layers", "1", "--epochs", "2", "--train_stride", "8",
             "--seed", "9"]
    outputs = []
    for attempt in ("a", "b"):
        out = tmp_path / attempt
        for argv in (["train", "--data", str(tmp_path / "d"), "--out", str(out), *flags],
                     ["score", "--run", str(out)], ["eval", "--run", str(out)]):
            assert run(argv) == 0
        outputs.append({name: (out / name).read_bytes() for name in
                        ("checkpoint.zip", "train_log.csv", "scores.csv", "val_scores.csv",
                         "metrics.json", "predictions.csv")})
    differ = [name for name in outputs[0] if outputs[0][name] != outputs[1][name]]
    metas = [json.loads((tmp_path / a / "run_meta.json").read_text()) for a in "ab"]
    ok = not differ and metas[0]["train"] == metas[1]["train"]
    verdict("9 determinism", ok, f"{len(outputs[0])} artifacts compared, differing: {differ or 'none'}")
    assert ok
