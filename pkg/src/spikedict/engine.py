"""Fixed-step integrate-and-fire simulation of the two-layer feedback network.

Coding neuron i: bias -(1-gamma)*lambda1*s_i, threshold H_ii, receives F_ij from
input neuron j and -H_ij from coding neuron j != i.  Input neuron i: bias
(1-gamma)*x_i, threshold 1, receives gamma*B_ij from coding neuron j.

The exponential synaptic kernel (tau = 1) is kept as one trace per neuron: a
spike adds its weight to every destination trace and traces decay by
exp(-dt) per step.  Spikes emitted during a step are delivered after every
neuron has been updated, in ascending source index (coding layer first), so
results do not depend on update order.

Two discretisations are available.  ``"exact"`` (default) integrates the
kernel exactly over each step (the current is the step average of the
decaying trace, so one spike contributes exactly its weight to the current
integral) and resets the potential by subtracting the threshold, which is
where the continuous-time reset at the in-step crossing would leave it.
``"literal"`` samples the decayed trace at the step end and resets the
potential to zero; it is biased by O(dt) and kept for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .model import AVG_RESETS, CurrentBoundExceeded, PhaseSnapshot

CODING = 0
INPUT = 1
LAYER_NAMES = ("coding", "input")
SCHEMES = ("exact", "literal")


@dataclass
class LayerState:
    """Per-neuron state of one layer, stored as parallel arrays."""

    current: np.ndarray
    potential: np.ndarray
    trace: np.ndarray
    spike_count: np.ndarray
    current_integral: np.ndarray
    bias: np.ndarray
    threshold: np.ndarray

    @classmethod
    def zeros(cls, n, threshold):
        return cls(
            current=np.zeros(n),
            potential=np.zeros(n),
            trace=np.zeros(n),
            spike_count=np.zeros(n, dtype=np.int64),
            current_integral=np.zeros(n),
            bias=np.zeros(n),
            threshold=np.asarray(threshold, dtype=np.float64).copy(),
        )

    def reset_window(self):
        self.spike_count[:] = 0
        self.current_integral[:] = 0.0


@numba.njit(cache=True)
def _advance(n_steps, dt, bound, step0,
             bias_c, theta_c, mu_c, rho_c, tr_c, cnt_c, int_c,
             bias_i, theta_i, mu_i, rho_i, tr_i, cnt_i, int_i,
             HT, FT, BgT, log, log_n, exact):
    # HT[j, i] = H[i, j], FT[j, i] = F[i, j], BgT[j, i] = gamma * B[i, j]
    n = bias_c.shape[0]
    m = bias_i.shape[0]
    decay = math.exp(-dt)
    # step average of exp(-s) over [0, dt]
    kfac = (1.0 - decay) / dt if exact else 1.0
    spk_c = np.empty(n, dtype=np.int64)
    spk_i = np.empty(m, dtype=np.int64)
    max_mu = 0.0
    logging = log.shape[0] > 0
    for k in range(n_steps):
        nc = 0
        for i in range(n):
            if exact:
                mu = bias_c[i] + tr_c[i] * kfac
                tr_c[i] *= decay
            else:
                tr_c[i] *= decay
                mu = bias_c[i] + tr_c[i]
            mu_c[i] = mu
            if abs(mu) > max_mu:
                max_mu = abs(mu)
            if abs(mu) > bound:
                return k, 0, i, max_mu, log_n
            rho_c[i] += mu * dt
            int_c[i] += mu * dt
            if rho_c[i] >= theta_c[i]:
                rho_c[i] = rho_c[i] - theta_c[i] if exact else 0.0
                cnt_c[i] += 1
                spk_c[nc] = i
                nc += 1
        ni = 0
        for i in range(m):
            if exact:
                mu = bias_i[i] + tr_i[i] * kfac
                tr_i[i] *= decay
            else:
                tr_i[i] *= decay
                mu = bias_i[i] + tr_i[i]
            mu_i[i] = mu
            if abs(mu) > max_mu:
                max_mu = abs(mu)
            if abs(mu) > bound:
                return k, 1, i, max_mu, log_n
            rho_i[i] += mu * dt
            int_i[i] += mu * dt
            if rho_i[i] >= theta_i[i]:
                rho_i[i] = rho_i[i] - theta_i[i] if exact else 0.0
                cnt_i[i] += 1
                spk_i[ni] = i
                ni += 1
        for q in range(nc):
            j = spk_c[q]
            for i in range(n):
                if i != j:
                    tr_c[i] -= HT[j, i]
            for i in range(m):
                tr_i[i] += BgT[j, i]
            if logging:
                log[log_n, 0] = 0
                log[log_n, 1] = j
                log[log_n, 2] = step0 + k + 1
                log_n += 1
        for q in range(ni):
            j = spk_i[q]
            for i in range(n):
                tr_c[i] += FT[j, i]
            if logging:
                log[log_n, 0] = 1
                log[log_n, 1] = j
                log[log_n, 2] = step0 + k + 1
                log_n += 1
    return -1, -1, -1, max_mu, log_n


class NetworkSim:
    """One network instance driven by a fixed non-negative input image ``x``.

    Weights are read at the start of every :meth:`run` call, so updating
    ``sim.weights`` between phases takes effect on the next phase.
    """

    def __init__(self, weights, x, current_bound=100.0, record_spikes=False, scheme="exact"):
        if scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        self.scheme = scheme
        self.weights = weights
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape != (weights.n_inputs,):
            raise ValueError(f"input has {x.size} entries, network expects {weights.n_inputs}")
        if np.any(x < 0) or not np.all(np.isfinite(x)):
            raise ValueError("input image must be finite and non-negative")
        self.x = x
        self.current_bound = float(current_bound)
        self.coding = LayerState.zeros(weights.n_atoms, np.diag(weights.H))
        self.input = LayerState.zeros(weights.n_inputs, np.ones(weights.n_inputs))
        self.steps = 0
        self.dt = None
        self.window_start = 0
        self.max_abs_current = 0.0
        self.record_spikes = record_spikes
        self._log_chunks = []
        self.set_gamma(weights.gamma)

    @property
    def t(self):
        return 0.0 if self.dt is None else self.steps * self.dt

    def set_gamma(self, gamma):
        """Switch the feedback strength and recompute both layers' biases."""
        if not 0 <= gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
        w = self.weights
        w.gamma = float(gamma)
        self.coding.bias[:] = -(1.0 - gamma) * w.lambda1 * w.s
        self.input.bias[:] = (1.0 - gamma) * self.x
        self.coding.threshold[:] = np.diag(w.H)

    def _check_dt(self, dt):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if self.dt is None:
            self.dt = float(dt)
        elif dt != self.dt:
            raise ValueError("dt cannot change during a simulation")

    def run(self, n_steps, dt):
        """Advance ``n_steps`` synchronous steps; raise on a current-bound violation."""
        self._check_dt(dt)
        w = self.weights
        HT = np.ascontiguousarray(w.H.T)
        FT = np.ascontiguousarray(w.F.T)
        BgT = np.ascontiguousarray((w.gamma * w.B).T)
        if self.record_spikes:
            log = np.empty((n_steps * (w.n_atoms + w.n_inputs), 3), dtype=np.int64)
        else:
            log = np.empty((0, 3), dtype=np.int64)
        c, i = self.coding, self.input
        bad_k, layer, idx, max_mu, log_n = _advance(
            n_steps, self.dt, self.current_bound, self.steps,
            c.bias, c.threshold, c.current, c.potential, c.trace, c.spike_count, c.current_integral,
            i.bias, i.threshold, i.current, i.potential, i.trace, i.spike_count, i.current_integral,
            HT, FT, BgT, log, 0, self.scheme == "exact",
        )
        self.max_abs_current = max(self.max_abs_current, max_mu)
        if self.record_spikes and log_n:
            self._log_chunks.append(log[:log_n].copy())
        if bad_k >= 0:
            self.steps += bad_k
            state = self.coding if layer == CODING else self.input
            raise CurrentBoundExceeded((self.steps + 1) * self.dt, LAYER_NAMES[layer], int(idx),
                                       float(state.current[idx]), self.current_bound)
        self.steps += n_steps

    def step(self, dt):
        """Advance one step and return the indices that spiked in (coding, input)."""
        before_c = self.coding.spike_count.copy()
        before_i = self.input.spike_count.copy()
        self.run(1, dt)
        return (np.flatnonzero(self.coding.spike_count != before_c),
                np.flatnonzero(self.input.spike_count != before_i))

    def spike_log(self):
        """All recorded spikes as an int array of rows (layer, neuron, step)."""
        if not self._log_chunks:
            return np.empty((0, 3), dtype=np.int64)
        return np.concatenate(self._log_chunks)

    def snapshot(self):
        elapsed = (self.steps - self.window_start) * self.dt
        c, i = self.coding, self.input
        return PhaseSnapshot.from_averages(
            a=c.spike_count / elapsed,
            b=i.spike_count / elapsed,
            u=c.current_integral / elapsed,
            v=i.current_integral / elapsed,
            theta=c.threshold.copy(),
            gamma=self.weights.gamma,
            window=(self.window_start * self.dt, self.steps * self.dt),
            max_abs_current=self.max_abs_current,
        )


def run_phase(sim, gamma, T, dt, avg_reset="reset_at_phase"):
    """Run one constant-gamma phase of length ``T`` and return its snapshot.

    Currents, potentials and traces carry over from the previous phase.  With
    ``avg_reset='reset_at_phase'`` the averaging window restarts here;
    ``'cumulative'`` keeps averaging from the first phase.
    """
    if avg_reset not in AVG_RESETS:
        raise ValueError(f"avg_reset must be one of {AVG_RESETS}")
    if not T >= dt:
        raise ValueError("phase duration must be at least one step")
    sim.set_gamma(gamma)
    if avg_reset == "reset_at_phase" or sim.steps == 0:
        sim.coding.reset_window()
        sim.input.reset_window()
        sim.window_start = sim.steps
    sim.run(int(round(T / dt)), dt)
    return sim.snapshot()


def kkt_residuals(snap, weights, x):
    """KKT residuals of a gamma = 0 code for the non-negative weighted lasso.

    Returns ``(stationarity_gap, complementarity, negativity)`` where the gap
    is the positive part of ``F x - lambda1 s - H a``.
    """
    a = np.asarray(snap.a, dtype=np.float64)
    r = weights.F @ np.asarray(x, dtype=np.float64) - weights.lambda1 * weights.s - weights.H @ a
    stationarity = np.maximum(r, 0.0)
    complementarity = float(np.max(np.abs(a * r))) if a.size else 0.0
    negativity = float(np.max(np.maximum(-a, 0.0))) if a.size else 0.0
    return stationarity, complementarity, negativity


def write_raster_csv(dest, spikes, dt):
    """Write spikes (layer, neuron, step) as ``layer,neuron,t`` CSV rows to a path or open text file."""
    if hasattr(dest, "write"):
        _write_raster(dest, spikes, dt)
        return
    with open(dest, "w", newline="\n") as fh:
        _write_raster(fh, spikes, dt)


def _write_raster(fh, spikes, dt):
    fh.write("layer,neuron,t\n")
    for layer, neuron, k in spikes:
        fh.write(f"{LAYER_NAMES[layer]},{neuron},{k * dt:.6f}\n")
