"""Sparse coding with the spiking network, and the perturbed-H check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import NetworkSim, run_phase
from .model import NetworkWeights, SpikeDictError, check_dictionary, weights_from_dictionary
from .oracle import LassoProblem, solve_nn_lasso


class PerturbationTooLarge(SpikeDictError, ValueError):
    pass


def support(a, T):
    """Indices whose rate exceeds one spike over the window (1.5 / T)."""
    return np.flatnonzero(np.asarray(a) > 1.5 / T)


def sparse_code(weights, x, T=200.0, dt=1.0 / 32.0, gamma=0.0, warmup=None,
                current_bound=100.0, scheme="exact"):
    """Run the network on ``x`` and return ``(a, snapshot)``.

    The network first runs at gamma = 0 for ``warmup`` time units (default
    ``T``) and then at ``gamma`` for ``T``, with state carried over as in the
    contrastive phases.  The returned rates average only the final window,
    so the start-up transient (spikes fired before lateral inhibition builds
    up) does not count.  Pass ``warmup=0`` to average from a cold start.
    """
    x = np.asarray(x, dtype=np.float64)
    w = weights.copy()
    sim = NetworkSim(w, x, current_bound=current_bound, scheme=scheme)
    if warmup is None:
        warmup = T
    if warmup > 0:
        run_phase(sim, 0.0, warmup, dt)
    snap = run_phase(sim, gamma, T, dt)
    return snap.a.copy(), snap


@dataclass
class PerturbationReport:
    gap: float                 # ||a_net - a_oracle(s_tilde)||_inf
    s_tilde: np.ndarray
    s_shift: float             # ||s - s_tilde||_inf
    s_condition: bool          # s_shift < min(s) / 2
    smallness: float           # 4 ||Delta_H||_1 ||a_net||_inf, must be < min(s)
    a_net: np.ndarray
    a_oracle: np.ndarray
    max_abs_current: float


def perturbation_smallness(delta_H, a):
    """4 * (entrywise l1 norm of delta_H) * ||a||_inf."""
    return 4.0 * float(np.abs(delta_H).sum()) * float(np.max(np.abs(a), initial=0.0))


def verify_perturbation(D, delta_H, gamma, x, cfg, T=200.0, s=None, oracle_tol=1e-10):
    """Code ``x`` with lateral weights ``D^T D + lambda1 (1 - gamma) delta_H`` and compare.

    With that lateral matrix the network's limiting slack reads
    ``(1-gamma) (D^T x - lambda1 (s + delta_H a) - D^T D a)``, so the rates
    should solve the non-negative lasso with scaling ``s + delta_H a``.
    The oracle is run with that scaling and the gap reported.
    """
    D = check_dictionary(D)
    base = weights_from_dictionary(D, cfg.lambda1)
    if s is not None:
        base.s = np.asarray(s, dtype=np.float64).copy()
    delta_H = np.asarray(delta_H, dtype=np.float64)
    H = base.H + cfg.lambda1 * (1.0 - gamma) * delta_H
    w = NetworkWeights(base.F, base.B, H, base.s, cfg.lambda1, 0.0)
    a_net, snap = sparse_code(w, x, T=T, dt=cfg.dt, gamma=gamma, current_bound=cfg.current_bound)
    smallness = perturbation_smallness(delta_H, a_net)
    if not smallness < base.s.min():
        raise PerturbationTooLarge(
            f"perturbation too large: 4*||dH||_1*||a||_inf = {smallness:.4g} >= min(s) = {base.s.min():.4g}")
    s_tilde = base.s + delta_H @ a_net
    a_or, _ = solve_nn_lasso(LassoProblem(D, x, cfg.lambda1, s_tilde), oracle_tol, max_iter=100_000)
    shift = float(np.max(np.abs(s_tilde - base.s)))
    return PerturbationReport(
        gap=float(np.max(np.abs(a_net - a_or))),
        s_tilde=s_tilde,
        s_shift=shift,
        s_condition=shift < base.s.min() / 2,
        smallness=smallness,
        a_net=a_net,
        a_oracle=a_or,
        max_abs_current=snap.max_abs_current,
    )
