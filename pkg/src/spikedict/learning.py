"""Contrastive two-phase dictionary learning with local weight updates.

One iteration: run the network at gamma = 0 then gamma = kappa (state carried
over), read the gradients off the rate differences, update F and B
(reconstruction gradient plus Frobenius decay), correct H towards F B, project,
and reset the l1 scaling to diag(H).

Every update is written twice: as a per-neuron rule that sees only that
neuron's stored row, its own snapshot entries and the rates it receives, and
as a matrix expression used by the training loop.  The two are arranged to
perform identical floating-point operations so they can be compared exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import NetworkSim, run_phase
from .metrics import consistency, symmetry
from .model import (CurrentBoundExceeded, NetworkWeights, PhaseSnapshot, SpikeDictError,
                    weights_from_dictionary)
from .oracle import random_unit_dictionary, surrogate_objective

log = logging.getLogger(__name__)


class ThresholdUnderflow(SpikeDictError, ValueError):
    pass


class TrainingAborted(SpikeDictError, RuntimeError):
    """The engine hit the current bound; ``weights`` are from the last completed iteration."""

    def __init__(self, iteration, weights, log, cause):
        self.iteration = iteration
        self.weights = weights
        self.log = log
        self.cause = cause
        super().__init__(f"training aborted at iteration {iteration}: {cause}")


@dataclass
class ContrastivePair:
    snap0: PhaseSnapshot
    snapK: PhaseSnapshot
    kappa: float


@dataclass
class Gradients:
    g_D: np.ndarray
    g_H: np.ndarray


def contrastive_run(weights, x, cfg, record_spikes=False, return_sim=False):
    """Run gamma = 0 for ``cfg.T_phase`` then gamma = kappa for the same time."""
    w = weights.copy()
    sim = NetworkSim(w, x, current_bound=cfg.current_bound, record_spikes=record_spikes)
    snap0 = run_phase(sim, 0.0, cfg.T_phase, cfg.dt, cfg.avg_reset)
    snapK = run_phase(sim, cfg.kappa, cfg.T_phase, cfg.dt, cfg.avg_reset)
    pair = ContrastivePair(snap0, snapK, cfg.kappa)
    return (pair, sim) if return_sim else pair


def _rowdot(H, v):
    # row-wise reduction; same summation as (H[i] * v).sum() for a single row
    return (H * v).sum(axis=1)


def extract_gradients(pair, weights):
    """g_D = b_kappa - b_0 and g_H = (1-k) H (a_0 - a_k) + ((1-k) e_0 - e_k)."""
    k1 = 1.0 - pair.kappa
    s0, sk = pair.snap0, pair.snapK
    g_D = sk.b - s0.b
    g_H = k1 * _rowdot(weights.H, s0.a - sk.a) + (k1 * s0.e - sk.e)
    return Gradients(g_D, g_H)


# --- per-neuron rules ------------------------------------------------------

def coding_neuron_gradient(H_row, a0, aK, e0_i, eK_i, kappa):
    """Entry i of g_H from coding neuron i's row of H, its own slacks, and received rates."""
    k1 = 1.0 - kappa
    return k1 * (H_row * (a0 - aK)).sum() + (k1 * e0_i - eK_i)


def coding_neuron_F_row(F_row, aK_i, g_D, kappa, eta_D, lambda2):
    """New row i of F: needs a_kappa_i (own rate) and g_D (rate changes of input neurons)."""
    return F_row - eta_D * ((aK_i / kappa) * g_D + lambda2 * F_row)


def input_neuron_B_row(B_row, g_D_i, aK, kappa, eta_D, lambda2):
    """New row i of B: needs g_D_i (own rate change) and the received coding rates."""
    return B_row - eta_D * (g_D_i * (aK / kappa) + lambda2 * B_row)


def coding_neuron_H_row(H_row, g_H_i, aK, kappa, eta_H, eta_D, lambda2):
    return H_row - eta_H * ((g_H_i / kappa) * aK) - (2.0 * eta_D * lambda2) * H_row


# --- matrix-level updates ---------------------------------------------------

def update_FB(weights, pair, grads, cfg, project=None):
    """Reconstruction-gradient step on F and B, then clip at zero unless disabled."""
    coef = pair.snapK.a / pair.kappa
    g = grads.g_D
    w = weights.copy()
    w.F = weights.F - cfg.eta_D * (np.outer(coef, g) + cfg.lambda2 * weights.F)
    w.B = weights.B - cfg.eta_D * (np.outer(g, coef) + cfg.lambda2 * weights.B)
    if cfg.project_fb if project is None else project:
        np.maximum(w.F, 0.0, out=w.F)
        np.maximum(w.B, 0.0, out=w.B)
    return w


def update_H(weights, pair, grads, cfg):
    """Catch-up correction of H towards F B plus decay; off-diagonal >= 0, diagonal >= theta_floor."""
    w = weights.copy()
    G_rows = grads.g_H / pair.kappa
    w.H = (weights.H - cfg.eta_H * np.outer(G_rows, pair.snapK.a)
           - (2.0 * cfg.eta_D * cfg.lambda2) * weights.H)
    project_H(w.H, cfg.theta_floor)
    return w


def project_H(H, theta_floor):
    d = np.diag(H).copy()
    np.maximum(H, 0.0, out=H)
    np.fill_diagonal(H, np.maximum(d, theta_floor))
    return H


def scaling_update(weights):
    d = np.diag(weights.H)
    if np.any(d <= 0):
        raise ThresholdUnderflow(f"threshold underflow at index {int(np.flatnonzero(d <= 0)[0])}")
    w = weights.copy()
    w.s = d.copy()
    return w


def catchup_norm(pair, grads):
    """Frobenius norm of the H correction direction kappa^-1 g_H a_kappa^T."""
    return float(np.linalg.norm(grads.g_H / pair.kappa) * np.linalg.norm(pair.snapK.a))


# --- initialisation and the training loop -----------------------------------

def init_weights(cfg, n_inputs, rng):
    """Initial weights for ``cfg.init_scheme``.

    ``consistent``: weights of a random non-negative unit-atom dictionary.
    ``asymmetric``: F^T and B independent column-normalised random matrices,
    H uniform on [0, 1.5] with diagonal 1.5.  In both cases s = diag(H).
    """
    n = cfg.n_atoms
    if cfg.init_scheme == "consistent":
        return weights_from_dictionary(random_unit_dictionary(rng, n_inputs, n), cfg.lambda1)
    F = random_unit_dictionary(rng, n_inputs, n).T.copy()
    B = random_unit_dictionary(rng, n_inputs, n)
    H = rng.uniform(0.0, 1.5, size=(n, n))
    np.fill_diagonal(H, 1.5)
    return NetworkWeights(F, B, H, np.diag(H).copy(), cfg.lambda1, 0.0)


@dataclass
class TrainResult:
    weights: NetworkWeights
    log: list
    trajectory: list = field(default_factory=list)


def snn_record(weights, iteration, testset, lambda1, max_abs_current, catchup, tol=1e-8):
    D = weights.F.T
    obj = float("nan")
    if testset is not None and np.all(D >= 0):
        obj = surrogate_objective(D, testset, lambda1, tol)
    return {
        "iteration": iteration,
        "objective": obj,
        "consistency": consistency(weights.H, weights.F, weights.B),
        "symmetry": symmetry(weights.F, weights.B),
        "mean_atom_norm": float(np.linalg.norm(weights.F, axis=1).mean()),
        "max_abs_current": float(max_abs_current),
        "catchup_norm": float(catchup),
        "max_s": float(weights.s.max()),
    }


def learning_step(weights, x, cfg, gradient_hook=None):
    """One full iteration on sample ``x``; returns ``(weights, pair, grads)``."""
    pair = contrastive_run(weights, x, cfg)
    grads = extract_gradients(pair, weights)
    if gradient_hook is not None:
        grads = gradient_hook(grads)
    w = update_FB(weights, pair, grads, cfg)
    w = update_H(w, pair, grads, cfg)
    w = scaling_update(w)
    w.gamma = 0.0
    return w, pair, grads


def train(dataset, cfg, iterations, testset=None, weights=None, gradient_hook=None,
          keep_trajectory=False, on_record=None):
    """Run the contrastive learning loop for ``iterations`` samples.

    Samples are drawn with replacement from the rows of ``dataset`` using a
    generator seeded by ``cfg.seed`` (the same generator that initialises the
    weights).  A metrics record is taken at iteration 0, every
    ``cfg.metrics_every`` iterations and at the end.
    """
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a non-empty P x M array")
    rng = np.random.default_rng(cfg.seed)
    w = init_weights(cfg, X.shape[1], rng) if weights is None else weights.copy()
    records, trajectory = [], []
    window_max = 0.0
    last_catchup = 0.0

    def record(it):
        rec = snn_record(w, it, testset, cfg.lambda1, window_max, last_catchup)
        records.append(rec)
        if keep_trajectory:
            trajectory.append((it, w.copy()))
        if on_record is not None:
            on_record(rec)

    record(0)
    for it in range(1, iterations + 1):
        x = X[rng.integers(X.shape[0])]
        try:
            w_new, pair, grads = learning_step(w, x, cfg, gradient_hook)
        except CurrentBoundExceeded as exc:
            raise TrainingAborted(it, w, records, exc) from exc
        w = w_new
        window_max = max(window_max, pair.snap0.max_abs_current, pair.snapK.max_abs_current)
        last_catchup = catchup_norm(pair, grads)
        if it % cfg.metrics_every == 0 or it == iterations:
            record(it)
            window_max = 0.0
    return TrainResult(w, records, trajectory)


def calibrate_lambda2(dataset, cfg, iterations=1000):
    """Pick the weight decay that would hold mean atom norms near one.

    A pre-run with ``lambda2 = 0`` from the same seed measures how far the
    mean row norm of F drifts from one; the returned ``lambda2`` is the decay
    rate that offsets that drift over the same number of iterations, i.e.
    ``log(norm) / (eta_D * iterations)``, clipped at zero.
    """
    pre = train(dataset, cfg.replace(lambda2=0.0, metrics_every=max(iterations, 1)), iterations)
    norm = float(np.linalg.norm(pre.weights.F, axis=1).mean())
    return max(0.0, float(np.log(norm)) / (cfg.eta_D * iterations))
