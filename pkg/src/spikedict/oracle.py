"""Numerical ground truth: non-negative weighted-l1 sparse coding and an SGD learner.

The coding problem is

    minimize_{a >= 0}  0.5 * ||x - D a||^2 + lam * sum_i s_i a_i

solved by cyclic coordinate descent with an exact non-negative
soft-threshold per coordinate.  Nothing in here touches the spiking engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .model import SpikeDictError, WeightsError, check_dictionary


class NotConverged(SpikeDictError, RuntimeError):
    """Coordinate descent hit ``max_iter``; the best iterate is attached."""

    def __init__(self, a, kkt_gap, sweeps):
        self.a = a
        self.kkt_gap = kkt_gap
        self.sweeps = sweeps
        super().__init__(f"not converged after {sweeps} sweeps (KKT gap {kkt_gap:.3e})")


@dataclass
class LassoProblem:
    D: np.ndarray
    x: np.ndarray
    lam: float
    s: np.ndarray

    def __post_init__(self):
        self.D = check_dictionary(self.D)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.s = np.broadcast_to(np.asarray(self.s, dtype=np.float64), (self.D.shape[1],)).copy()
        if self.x.shape[0] != self.D.shape[0]:
            raise ValueError("x and D disagree on the number of pixels")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if np.any(self.s <= 0):
            raise ValueError("scaling vector must be positive")
        _reject_zero_atoms(self.D)


def _reject_zero_atoms(D):
    zero = np.flatnonzero(~np.any(D != 0, axis=0))
    if zero.size:
        raise WeightsError(f"zero atom at column {int(zero[0])}")


@numba.njit(cache=True)
def _kkt_gap(G, q, pen, a):
    # r = D^T x - lam s - D^T D a; optimality: r <= 0 and a * r = 0
    gap = 0.0
    n = a.shape[0]
    for i in range(n):
        r = q[i] - pen[i]
        for j in range(n):
            r -= G[i, j] * a[j]
        if r > gap:
            gap = r
        c = abs(a[i] * r)
        if c > gap:
            gap = c
    return gap


@numba.njit(cache=True)
def _cd_solve(G, q, pen, tol, max_sweeps, a, history):
    """Coordinate descent on 0.5 a'Ga - q'a + pen'a over a >= 0, in place.

    Returns (kkt_gap, sweeps).  When ``history`` is non-empty the objective
    after every sweep is stored in it.
    """
    n = q.shape[0]
    grad = np.empty(n)  # q - G a
    for i in range(n):
        g = q[i]
        for j in range(n):
            g -= G[i, j] * a[j]
        grad[i] = g
    track = history.shape[0] > 0
    gap = _kkt_gap(G, q, pen, a)
    sweeps = 0
    while gap > tol and sweeps < max_sweeps:
        for i in range(n):
            gii = G[i, i]
            if gii <= 0.0:
                continue
            old = a[i]
            new = (grad[i] + gii * old - pen[i]) / gii
            if new < 0.0:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                a[i] = new
                for j in range(n):
                    grad[j] -= G[j, i] * delta
        sweeps += 1
        if track and sweeps <= history.shape[0]:
            obj = 0.0
            for i in range(n):
                obj += a[i] * (0.5 * (q[i] - grad[i]) - q[i] + pen[i])
            history[sweeps - 1] = obj
        gap = _kkt_gap(G, q, pen, a)
    return gap, sweeps


@numba.njit(cache=True, parallel=True)
def _cd_batch(G, Q, pen, tol, max_sweeps, A, gaps, sweeps):
    empty = np.empty(0)
    for p in numba.prange(Q.shape[1]):
        a = np.zeros(Q.shape[0])
        g, k = _cd_solve(G, Q[:, p].copy(), pen, tol, max_sweeps, a, empty)
        A[:, p] = a
        gaps[p] = g
        sweeps[p] = k


def default_max_iter(n_atoms):
    return 10 * n_atoms


# sweep cap for solves inside training and evaluation loops, where a
# NotConverged on one ill-conditioned sample would abort a long run
LOOP_MAX_ITER = 100_000


def solve_nn_lasso(p, tol=1e-8, max_iter=None, history=None):
    """Solve the non-negative weighted lasso ``p`` to KKT gap ``tol``.

    Parameters
    ----------
    p : LassoProblem
    tol : float
        Target for max(positive stationarity residual, |a * residual|).
    max_iter : int, optional
        Maximum number of full coordinate sweeps, default ``10 * N``.
    history : ndarray, optional
        If given, receives the objective value after each sweep (without the
        constant ``0.5 ||x||^2``).

    Returns
    -------
    a : ndarray
    kkt_gap : float
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = default_max_iter(p.D.shape[1])
    G = p.D.T @ p.D
    q = p.D.T @ p.x
    a = np.zeros(p.D.shape[1])
    hist = np.empty(0) if history is None else history
    gap, sweeps = _cd_solve(G, q, p.lam * p.s, float(tol), int(max_iter), a, hist)
    if gap > tol:
        raise NotConverged(a, gap, sweeps)
    return a, gap


def solve_batch(D, X, lam, s=1.0, tol=1e-8, max_iter=None):
    """Code every column of ``X`` (M x P); returns ``(A, gaps)`` with A of shape N x P.

    Samples are solved independently (in parallel when numba threads > 1)
    and written to fixed slots, so results do not depend on thread count.
    """
    D = check_dictionary(D)
    _reject_zero_atoms(D)
    X = np.asarray(X, dtype=np.float64)
    n = D.shape[1]
    if max_iter is None:
        max_iter = default_max_iter(n)
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (n,))
    G = D.T @ D
    Q = np.ascontiguousarray(D.T @ X)
    A = np.zeros((n, X.shape[1]))
    gaps = np.zeros(X.shape[1])
    sweeps = np.zeros(X.shape[1], dtype=np.int64)
    _cd_batch(G, Q, lam * s, float(tol), int(max_iter), A, gaps, sweeps)
    bad = np.flatnonzero(gaps > tol)
    if bad.size:
        p = int(bad[0])
        raise NotConverged(A[:, p].copy(), float(gaps[p]), int(sweeps[p]))
    return A, gaps


def objective(D, x, a, lambda1, s=1.0, lambda2=0.0):
    """0.5 ||x - D a||^2 + lambda1 ||S a||_1 + 0.5 lambda2 ||D||_F^2."""
    D = np.asarray(D, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    r = np.asarray(x, dtype=np.float64) - D @ a
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), a.shape)
    return 0.5 * float(r @ r) + lambda1 * float(np.abs(s * a).sum()) + 0.5 * lambda2 * float((D * D).sum())


def surrogate_objective(D, testset, lambda1, tol=1e-8, max_iter=LOOP_MAX_ITER):
    """Mean coding cost of ``testset`` (P x M rows) under ``D`` with unit scaling."""
    X = np.asarray(testset, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("testset must be a non-empty P x M array")
    D = check_dictionary(D)
    A, _ = solve_batch(D, X.T, lambda1, 1.0, tol, max_iter)
    R = X.T - D @ A
    costs = 0.5 * (R * R).sum(axis=0) + lambda1 * A.sum(axis=0)
    # fixed left-to-right reduction keeps the value thread-count independent
    return math.fsum(costs) / X.shape[0]


def random_unit_dictionary(rng, m, n):
    """Non-negative uniform random dictionary with unit-norm atoms."""
    D = rng.random((m, n))
    return D / np.linalg.norm(D, axis=0)


@dataclass
class SGDConfig:
    eta: float = 0.05
    lambda1: float = 0.1
    n_atoms: int = 64
    seed: int = 0
    tol: float = 1e-8
    metrics_every: int = 50


def sgd_train(dataset, cfg, iterations, testset=None, D0=None, keep_trajectory=False, on_record=None):
    """Projected SGD baseline with unit-norm atoms.

    Each step draws one sample, codes it with :func:`solve_nn_lasso` (unit
    scaling), takes ``D -= eta (D a - x) a^T``, clips to ``D >= 0`` and
    renormalises every atom; atoms that collapse to zero are redrawn.

    Returns ``(D, log, trajectory)``; ``log`` has one dict per metrics point.
    """
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a non-empty P x M array")
    rng = np.random.default_rng(cfg.seed)
    m = X.shape[1]
    D = random_unit_dictionary(rng, m, cfg.n_atoms) if D0 is None else check_dictionary(D0).copy()
    log, trajectory = [], []

    def record(it):
        rec = sgd_record(D, it, testset, cfg.lambda1, cfg.tol)
        log.append(rec)
        if keep_trajectory:
            trajectory.append((it, D.copy()))
        if on_record is not None:
            on_record(rec)

    record(0)
    for it in range(1, iterations + 1):
        x = X[rng.integers(X.shape[0])]
        a, _ = solve_nn_lasso(LassoProblem(D, x, cfg.lambda1, 1.0), cfg.tol, LOOP_MAX_ITER)
        D -= cfg.eta * np.outer(D @ a - x, a)
        np.maximum(D, 0.0, out=D)
        norms = np.linalg.norm(D, axis=0)
        dead = np.flatnonzero(norms == 0)
        for j in dead:
            atom = rng.random(m)
            D[:, j] = atom / np.linalg.norm(atom)
            norms[j] = 1.0
        D /= norms
        if it % cfg.metrics_every == 0 or it == iterations:
            record(it)
    return D, log, trajectory


def sgd_record(D, iteration, testset, lambda1, tol):
    obj = float("nan") if testset is None else surrogate_objective(D, testset, lambda1, tol)
    return {
        "iteration": iteration,
        "objective": obj,
        "consistency": float("nan"),
        "symmetry": float("nan"),
        "mean_atom_norm": float(np.linalg.norm(D, axis=0).mean()),
        "max_abs_current": float("nan"),
        "catchup_norm": float("nan"),
        "max_s": float("nan"),
    }
