"""Shared domain types: dictionaries, network weights, phase snapshots, run config.

Everything here is plain data plus construction/validation; behaviour lives in
the engine, learning and oracle modules.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SpikeDictError(Exception):
    """Base class for errors raised by this package."""


class WeightsError(SpikeDictError, ValueError):
    pass


class FormatError(SpikeDictError, ValueError):
    """A file did not match its declared binary layout."""


class CurrentBoundExceeded(SpikeDictError, RuntimeError):
    """Raised when some |mu| exceeds the configured current bound."""

    def __init__(self, t, layer, neuron, current, bound):
        self.t = t
        self.layer = layer
        self.neuron = neuron
        self.current = current
        self.bound = bound
        super().__init__(
            f"current bound exceeded: |mu|={abs(current):.4g} > {bound:g} "
            f"at t={t:.6f} ({layer} neuron {neuron})"
        )


def check_dictionary(D, name="D"):
    """Return ``D`` as a float64 matrix, raising if it is not a valid dictionary."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] < 1 or D.shape[1] < 1:
        raise WeightsError(f"{name} must be a non-empty matrix, got shape {D.shape}")
    if not np.all(np.isfinite(D)):
        raise WeightsError(f"{name} has non-finite entries")
    if np.any(D < 0):
        raise WeightsError(f"{name} has negative entries")
    return D


@dataclass
class NetworkWeights:
    """Distributed weights of the two-layer feedback network.

    F (N x M) feeds input spikes to coding neurons, B (M x N) feeds coding
    spikes back to input neurons, and H (N x N) holds lateral inhibition off
    the diagonal and firing thresholds on it.
    """

    F: np.ndarray
    B: np.ndarray
    H: np.ndarray
    s: np.ndarray
    lambda1: float
    gamma: float = 0.0

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(-1)
        n, m = self.F.shape
        if self.B.shape != (m, n) or self.H.shape != (n, n) or self.s.shape != (n,):
            raise WeightsError(
                f"inconsistent shapes F{self.F.shape} B{self.B.shape} "
                f"H{self.H.shape} s{self.s.shape}"
            )

    @property
    def n_atoms(self):
        return self.F.shape[0]

    @property
    def n_inputs(self):
        return self.F.shape[1]

    @property
    def theta(self):
        """Coding-neuron firing thresholds (a copy of diag(H))."""
        return np.diag(self.H).copy()

    def copy(self):
        return NetworkWeights(self.F.copy(), self.B.copy(), self.H.copy(),
                              self.s.copy(), self.lambda1, self.gamma)


def validate(weights):
    """List every violated invariant of ``weights``; an empty list means ok."""
    problems = []
    for name in ("F", "B", "H", "s"):
        arr = getattr(weights, name)
        if not np.all(np.isfinite(arr)):
            problems.append(f"{name} finite")
    for name in ("F", "B"):
        bad = np.argwhere(getattr(weights, name) < 0)
        for i, j in bad:
            problems.append(f"{name} >= 0 at index ({i}, {j})")
    diag = np.diag(weights.H)
    for i in np.flatnonzero(~(diag > 0)):
        problems.append(f"diag(H) > 0 at index {i}")
    off = weights.H - np.diag(diag)
    for i, j in np.argwhere(off < 0):
        problems.append(f"off-diagonal H >= 0 at index ({i}, {j})")
    for i in np.flatnonzero(~(weights.s > 0)):
        problems.append(f"s > 0 at index {i}")
    if not weights.lambda1 > 0:
        problems.append("lambda1 > 0")
    if not 0 <= weights.gamma:
        problems.append("gamma >= 0")
    if not weights.gamma < 1:
        problems.append("gamma < 1")
    return problems


def weights_from_dictionary(D, lambda1, gamma=0.0):
    """Fully consistent weights F = D^T, B = D, H = D^T D with unit scaling."""
    D = check_dictionary(D)
    if not lambda1 > 0:
        raise WeightsError("lambda1 must be positive")
    if not 0 <= gamma < 1:
        raise WeightsError("gamma must lie in [0, 1)")
    norms = np.linalg.norm(D, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise WeightsError(f"zero atom at column {int(zero[0])}")
    F = np.ascontiguousarray(D.T)
    B = D.copy()
    return NetworkWeights(F, B, F @ B, np.ones(D.shape[1]), float(lambda1), float(gamma))


@dataclass
class PhaseSnapshot:
    """Window averages measured at the end of one constant-gamma phase.

    ``a``/``b`` are coding/input spike rates, ``u``/``v`` average currents,
    ``e = u - diag(H) a`` and ``f = v - b`` (input thresholds are 1).
    """

    a: np.ndarray
    b: np.ndarray
    u: np.ndarray
    v: np.ndarray
    e: np.ndarray
    f: np.ndarray
    gamma_used: float
    window: tuple
    max_abs_current: float = 0.0

    @classmethod
    def from_averages(cls, a, b, u, v, theta, gamma, window, max_abs_current=0.0):
        if not window[1] > window[0]:
            raise ValueError(f"empty averaging window {window}")
        return cls(a=a, b=b, u=u, v=v, e=u - theta * a, f=v - b,
                   gamma_used=float(gamma), window=tuple(window),
                   max_abs_current=float(max_abs_current))


INIT_SCHEMES = ("consistent", "asymmetric")
AVG_RESETS = ("reset_at_phase", "cumulative")


@dataclass
class RunConfig:
    """Simulation and learning hyperparameters.

    Defaults follow the training setup: dt = 1/32, 20 time units per phase,
    kappa = 0.7 and eta_H = 15 eta_D.
    """

    dt: float = 1.0 / 32.0
    T_phase: float = 20.0
    kappa: float = 0.7
    eta_D: float = 0.01
    eta_H: float = 0.15
    lambda1: float = 0.1
    lambda2: float = 0.0
    n_atoms: int = 64
    seed: int = 0
    init_scheme: str = "consistent"
    current_bound: float = 100.0
    theta_floor: float = 1e-3
    avg_reset: str = "reset_at_phase"
    project_fb: bool = True
    metrics_every: int = 50

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("invalid RunConfig: " + "; ".join(problems))

    def problems(self):
        out = []
        if not self.dt > 0:
            out.append("dt > 0")
        if not self.T_phase >= self.dt:
            out.append("T_phase >= dt")
        if not 0 < self.kappa < 1:
            out.append("0 < kappa < 1")
        if not (self.eta_D > 0 and self.eta_H > 0):
            out.append("eta_D, eta_H > 0")
        if not self.eta_H >= self.eta_D:
            out.append("eta_H >= eta_D")
        if self.lambda1 < 0 or self.lambda2 < 0:
            out.append("lambda1, lambda2 >= 0")
        if self.n_atoms < 1:
            out.append("n_atoms >= 1")
        if self.init_scheme not in INIT_SCHEMES:
            out.append(f"init_scheme in {INIT_SCHEMES}")
        if not self.current_bound > 0:
            out.append("current_bound > 0")
        if not self.theta_floor > 0:
            out.append("theta_floor > 0")
        if self.avg_reset not in AVG_RESETS:
            out.append(f"avg_reset in {AVG_RESETS}")
        if self.metrics_every < 1:
            out.append("metrics_every >= 1")
        return out

    @property
    def steps_per_phase(self):
        return int(round(self.T_phase / self.dt))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

# --- DLM1 matrix files -----------------------------------------------------

DLM1_MAGIC = b"DLM1"


def save_dlm(path, matrix):
    """Write a matrix as ``DLM1 <rows> <cols>\\n`` plus little-endian float64 payload."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError("DLM1 stores 2-D matrices only")
    with open(path, "wb") as fh:
        fh.write(b"DLM1 %d %d\n" % m.shape)
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_dlm(path):
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: truncated header")
    parts = data[:nl].split()
    if len(parts) != 3 or parts[0] != DLM1_MAGIC:
        raise FormatError(f"{path}: bad magic")
    try:
        rows, cols = int(parts[1]), int(parts[2])
    except ValueError:
        raise FormatError(f"{path}: bad header {data[:nl]!r}") from None
    payload = data[nl + 1:]
    if len(payload) < rows * cols * 8:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f8", count=rows * cols).reshape(rows, cols).astype(np.float64)


def save_weights(directory, weights, meta=None):
    """Checkpoint F, B, H, s as DLM1 files plus a small JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("F", "B", "H", "s"):
        save_dlm(directory / f"{name}.dlm", getattr(weights, name))
    info = {"lambda1": weights.lambda1, "gamma": weights.gamma}
    info.update(meta or {})
    (directory / "weights.json").write_text(json.dumps(info, sort_keys=True) + "\n")


def load_weights(directory):
    directory = Path(directory)
    info = json.loads((directory / "weights.json").read_text())
    F, B, H = (load_dlm(directory / f"{n}.dlm") for n in ("F", "B", "H"))
    s = load_dlm(directory / "s.dlm").reshape(-1)
    return NetworkWeights(F, B, H, s, float(info["lambda1"]), float(info.get("gamma", 0.0)))
