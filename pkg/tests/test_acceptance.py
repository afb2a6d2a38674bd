"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section at the end of the
pytest run.  Run just this file with ``pytest tests/test_acceptance.py``.
"""

import filecmp
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_instance
from spikedict.coding import sparse_code, support
from spikedict.data_io import add_gaussian_noise, calibrate_sigma, reference_image
from spikedict.engine import NetworkSim, run_phase
from spikedict.learning import (calibrate_lambda2, coding_neuron_F_row, coding_neuron_gradient,
                                coding_neuron_H_row, contrastive_run, extract_gradients,
                                init_weights, input_neuron_B_row, learning_step, project_H,
                                train, update_FB, update_H)
from spikedict.metrics import denoise, psnr
from spikedict.model import NetworkWeights, RunConfig, weights_from_dictionary
from spikedict.oracle import LassoProblem, SGDConfig, sgd_train, solve_nn_lasso

REPORT = {}

N_INSTANCES = 20
N_GRADIENT_INSTANCES = 10


def _report(n, ok, detail):
    REPORT[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, REPORT[n]


# --- shared desk-scale runs -------------------------------------------------

@pytest.fixture(scope="module")
def convergence_runs(desk_data):
    """5000-sample runs on the desk dataset: SNN (two inits) and projected SGD."""
    train_set, test_set = desk_data
    cfg = RunConfig(eta_D=0.1, eta_H=1.5, metrics_every=1000)
    lam2 = calibrate_lambda2(train_set, cfg, iterations=1000)
    cfg = cfg.replace(lambda2=lam2)
    snn = train(train_set, cfg, 5000, testset=test_set)
    asym = train(train_set, cfg.replace(init_scheme="asymmetric"), 5000, testset=test_set)
    _, sgd_log, _ = sgd_train(train_set, SGDConfig(eta=0.05, metrics_every=1000), 5000, testset=test_set)
    return {"lambda2": lam2, "snn": snn, "asym": asym, "sgd": sgd_log}


# --- 1-4: neuron and coding dynamics ------------------------------------------

def test_criterion_01_single_neuron_isi():
    w = NetworkWeights(np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1), np.ones(1), 1.0, 0.0)
    sim = NetworkSim(w, np.array([0.5]))
    t0 = time.perf_counter()
    rate = run_phase(sim, 0.0, 100.0, 1 / 32).b[0]
    elapsed = time.perf_counter() - t0
    _report(1, 0.49 <= rate <= 0.51 and elapsed < 1.0, f"rate {rate:.4f}, {elapsed * 1e3:.1f} ms")


def test_criterion_02_rate_threshold_law():
    D, x = random_instance(100)
    w = weights_from_dictionary(D, 0.1)
    resid = {}
    for T in (50.0, 200.0):
        snap = run_phase(NetworkSim(w, x), 0.0, T, 1 / 32)
        resid[T] = float(np.abs(np.maximum(snap.u, 0) - w.theta * snap.a).max())
    bound = (w.theta.max() + 100 / 32) / 200
    ok = resid[200.0] <= bound and resid[200.0] < resid[50.0]
    _report(2, ok, f"residual T=200 {resid[200.0]:.4g} (bound {bound:.4g}), T=50 {resid[50.0]:.4g}")


def _coding_instances():
    out = []
    for seed in range(N_INSTANCES):
        D, x = random_instance(seed)
        w = weights_from_dictionary(D, 0.1)
        a_or, _ = solve_nn_lasso(LassoProblem(D, x, 0.1, 1.0), 1e-10, 100_000)
        a0, _ = sparse_code(w, x, T=200)
        ak, _ = sparse_code(w, x, T=200, gamma=0.7)
        out.append((a_or, a0, ak))
    return out


@pytest.fixture(scope="module")
def coding_instances():
    return _coding_instances()


def _same_support(a, b, T=200):
    return support(a, T).tolist() == support(b, T).tolist()


def test_criterion_03_oracle_equivalence(coding_instances):
    gaps = [np.abs(a0 - a_or).max() for a_or, a0, _ in coding_instances]
    n_gap = sum(g <= 0.05 for g in gaps)
    n_sup = sum(_same_support(a0, a_or) for a_or, a0, _ in coding_instances)
    ok = n_gap >= 19 and n_sup >= 19
    _report(3, ok, f"gap <= 0.05 on {n_gap}/20 (max {max(gaps):.4f}), support agrees on {n_sup}/20")


def test_criterion_04_gamma_invariance(coding_instances):
    gaps = [np.abs(a0 - ak).max() for _, a0, ak in coding_instances]
    n_sup = sum(_same_support(a0, ak) for _, a0, ak in coding_instances)
    ok = n_sup == N_INSTANCES and max(gaps) <= 0.05
    _report(4, ok, f"support agrees on {n_sup}/20, max gap {max(gaps):.4f}")


# --- 5-6: gradient identities ------------------------------------------------

def test_criterion_05_reconstruction_gradient():
    cfg = RunConfig(T_phase=100.0, kappa=0.7)
    ratios = []
    for seed in range(N_GRADIENT_INSTANCES):
        D, x = random_instance(seed)
        w = weights_from_dictionary(D, 0.1)
        pair = contrastive_run(w, x, cfg)
        g = extract_gradients(pair, w)
        target = cfg.kappa * (w.B @ pair.snapK.a - x)
        ratios.append(np.linalg.norm(g.g_D - target) / max(np.linalg.norm(target), 0.01))
    _report(5, max(ratios) <= 0.15,
            f"max relative error {max(ratios):.3f}, median {np.median(ratios):.3f} (limit 0.15)")


def test_criterion_06_consistency_gradient():
    cfg = RunConfig(T_phase=100.0, kappa=0.7)
    rng = np.random.default_rng(6)
    consistent, perturbed = [], []
    for seed in range(N_GRADIENT_INSTANCES):
        D, x = random_instance(seed)
        w = weights_from_dictionary(D, 0.1)
        g = extract_gradients(contrastive_run(w, x, cfg), w)
        consistent.append(np.abs(g.g_H).max())
        # rank-one non-negative spike keeps H a valid weight matrix
        u, v = rng.random(32), rng.random(32)
        delta = 0.1 * np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
        wp = NetworkWeights(w.F, w.B, w.H + delta, w.s, w.lambda1)
        pair = contrastive_run(wp, x, cfg)
        gp = extract_gradients(pair, wp)
        target = cfg.kappa * delta @ pair.snapK.a
        perturbed.append(np.linalg.norm(gp.g_H - target) / np.linalg.norm(target))
    ok = max(consistent) <= 0.1 and max(perturbed) <= 0.25
    _report(6, ok, f"H = FB: max |g_H| {max(consistent):.4f} (limit 0.1); "
                   f"H = FB + delta: max relative error {max(perturbed):.3f}, "
                   f"median {np.median(perturbed):.3f} (limit 0.25)")


# --- 7-8: update rules ---------------------------------------------------------

def test_criterion_07_symmetry_decay(desk_data):
    train_set, _ = desk_data
    cfg = RunConfig(init_scheme="asymmetric", lambda2=0.5, project_fb=False, metrics_every=1)
    res = train(train_set, cfg, 100, keep_trajectory=True)
    alpha = 1.0 - cfg.eta_D * cfg.lambda2
    first = res.trajectory[1][1]
    E1 = first.F.T - first.B
    dev = max(np.abs((w.F.T - w.B) - alpha ** (p - 1) * E1).max()
              for p, (_, w) in enumerate(res.trajectory[1:], start=1))
    _report(7, dev <= 1e-10, f"max deviation {dev:.3g} over 100 iterations (alpha {alpha})")


def test_criterion_08_locality_audit(desk_data):
    train_set, _ = desk_data
    cfg = RunConfig(lambda2=1e-3)
    rng = np.random.default_rng(8)
    w = init_weights(cfg, train_set.shape[1], rng)
    mismatches = 0
    for _ in range(5):
        x = train_set[rng.integers(len(train_set))]
        pair = contrastive_run(w, x, cfg)
        grads = extract_gradients(pair, w)
        s0, sk, k = pair.snap0, pair.snapK, pair.kappa
        g_D = sk.b - s0.b
        g_H = np.array([coding_neuron_gradient(w.H[i], s0.a, sk.a, s0.e[i], sk.e[i], k)
                        for i in range(w.n_atoms)])
        F = np.maximum([coding_neuron_F_row(w.F[i], sk.a[i], g_D, k, cfg.eta_D, cfg.lambda2)
                        for i in range(w.n_atoms)], 0.0)
        B = np.maximum([input_neuron_B_row(w.B[i], g_D[i], sk.a, k, cfg.eta_D, cfg.lambda2)
                        for i in range(w.n_inputs)], 0.0)
        H = project_H(np.array([coding_neuron_H_row(w.H[i], g_H[i], sk.a, k, cfg.eta_H, cfg.eta_D,
                                                    cfg.lambda2) for i in range(w.n_atoms)]),
                      cfg.theta_floor)
        matrix = update_H(update_FB(w, pair, grads, cfg), pair, grads, cfg)
        for local, full in ((g_D, grads.g_D), (g_H, grads.g_H), (F, matrix.F), (B, matrix.B),
                            (H, matrix.H)):
            mismatches += int(np.count_nonzero(local != full))
        w, _, _ = learning_step(w, x, cfg)
    _report(8, mismatches == 0, f"{mismatches} differing entries over 5 iterations")


# --- 9-11: desk-scale learning -------------------------------------------------

def test_criterion_09_consistency_maintenance(desk_data):
    train_set, _ = desk_data
    cfg = RunConfig(eta_D=0.005, eta_H=0.075, metrics_every=50)
    t0 = time.perf_counter()
    res = train(train_set, cfg, 2000)
    elapsed = time.perf_counter() - t0
    later = [r for r in res.log if r["iteration"] > 50]
    c = min(r["consistency"] for r in later)
    s = min(r["symmetry"] for r in later)
    ok = c >= 0.9 and s >= 0.95 and elapsed < 600
    _report(9, ok, f"min consistency {c:.4f}, min symmetry {s:.4f} after iteration 50, "
                   f"{elapsed:.0f} s (eta_D {cfg.eta_D})")


def test_criterion_10_convergence(convergence_runs):
    snn = [r["objective"] for r in convergence_runs["snn"].log]
    asym = convergence_runs["asym"].log[-1]["objective"]
    sgd = convergence_runs["sgd"][-1]["objective"]
    ok = snn[-1] <= 0.8 * snn[0] and snn[-1] <= 1.15 * sgd and asym <= 1.25 * snn[-1]
    _report(10, ok, f"SNN {snn[0]:.4f} -> {snn[-1]:.4f}, SGD {sgd:.4f}, asymmetric {asym:.4f} "
                    f"(lambda2 {convergence_runs['lambda2']:.3g})")


def test_criterion_11_denoising(convergence_runs):
    clean = reference_image()
    sigma = calibrate_sigma(clean, 18.69, seed=0)
    noisy = add_gaussian_noise(clean, sigma, 0)
    p_noisy = psnr(clean, noisy)
    w = convergence_runs["snn"].weights
    den, l0 = denoise(w.B, noisy, patch_size=8, lambda1=w.lambda1)
    p_den = psnr(clean, den)
    ok = abs(p_noisy - 18.69) <= 0.1 and p_den - p_noisy >= 3.0 and l0 <= 12
    _report(11, ok, f"sigma {sigma:.4f}, noisy {p_noisy:.2f} dB, denoised {p_den:.2f} dB "
                    f"(gain {p_den - p_noisy:.2f}), mean l0 {l0:.2f}")


# --- 12: determinism across thread counts ----------------------------------------

def _cli(tmp, name, threads, command):
    out = tmp / name
    env = dict(os.environ, LCA_THREADS=str(threads))
    args = [sys.executable, "-m", "spikedict.cli", command, "--set", "n_atoms=16",
            "--set", "train_patches=2000", "--set", "test_patches=50", "--set", "metrics_every=5",
            "--seed", "3", "--iterations", "20", "--out", str(out)]
    subprocess.run(args, check=True, env=env, capture_output=True)
    return out


def _tree_equal(a, b):
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return files == other and all(filecmp.cmp(a / f, b / f, shallow=False) for f in files)


def test_criterion_12_determinism(tmp_path):
    detail = []
    ok = True
    for command in ("train-snn", "train-sgd"):
        runs = [_cli(tmp_path, f"{command}-{t}-{k}", t, command) for t in (1, 4) for k in range(2)]
        same = all(_tree_equal(runs[0], r) for r in runs[1:])
        ok &= same
        n_files = sum(1 for p in runs[0].rglob("*") if p.is_file())
        detail.append(f"{command}: {n_files} files {'identical' if same else 'DIFFER'}")
    _report(12, ok, "; ".join(detail) + " (threads 1 and 4, two runs each)")
