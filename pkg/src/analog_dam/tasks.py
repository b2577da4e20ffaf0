"""Hand-built XOR and Hamming(7,4) associative memories and their harnesses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DenseAMModel, SystemState
from .solver import NonConvergenceError, SolverConfig, Trajectory, simulate

# Smallest beta in {1, 2, 4, 8, 16, 32} giving exhaustive correctness at the
# readout tolerances below (sweep recorded in the README).
DEFAULT_XOR_BETA = 4.0
DEFAULT_HAMMING_BETA = 4.0

XOR_MEMORIES = np.array(
    [
        [0, 0, 0],
        [0, 1, 1],
        [1, 0, 1],
        [1, 1, 0],
    ],
    dtype=float,
)

AMBIGUITY_BAND = 0.4


class AmbiguousReadoutError(RuntimeError):
    """A visible unit settled too far from both 0 and 1 to read as a bit."""


@dataclass(frozen=True)
class XorSpec:
    beta: float = DEFAULT_XOR_BETA
    tau_v: float = 1.0
    tau_h: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


@dataclass(frozen=True)
class HammingSpec:
    beta: float = DEFAULT_HAMMING_BETA
    tau_v: float = 1.0
    tau_h: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


def memory_model(memories, beta, tau_v, tau_h) -> DenseAMModel:
    """DenseAM storing ``memories`` as rows, with ``a = 0`` and ``b = -|xi|^2/2``."""
    xi = np.asarray(memories, dtype=float)
    return DenseAMModel(
        xi=xi,
        a=np.zeros(xi.shape[1]),
        b=-0.5 * np.sum(xi**2, axis=1),
        tau_v=tau_v,
        tau_h=tau_h,
        visible_activation="identity",
        hidden_activation="softmax",
        beta=beta,
        hardware_realizable=True,
    )


def build_xor(spec: XorSpec = XorSpec()) -> DenseAMModel:
    return memory_model(XOR_MEMORIES, spec.beta, spec.tau_v, spec.tau_h)


def _require_converged(traj: Trajectory, what: str):
    if not traj.converged:
        raise NonConvergenceError(f"{what}: no convergence before t={traj.times[-1]:g}")


def infer_xor(model: DenseAMModel, x1: int, x2: int, cfg: SolverConfig | None = None):
    """Clamp the two inputs, start the output at 0.5, and read it out at convergence."""
    if x1 not in (0, 1) or x2 not in (0, 1):
        raise ValueError("XOR inputs must be bits")
    cfg = cfg or SolverConfig.for_model(model)
    init = SystemState(
        v=[x1, x2, 0.5],
        h=np.zeros(model.n_h),
        clamp_mask=[True, True, False],
    )
    traj = simulate(model, init, cfg)
    _require_converged(traj, f"XOR({x1},{x2})")
    return int(round(traj.final_state.v[2])), traj


def hamming_encode(data) -> np.ndarray:
    """Systematic Hamming(7,4): ``d1 d2 d3 d4 p1 p2 p3``."""
    d1, d2, d3, d4 = (int(x) for x in data)
    return np.array(
        [d1, d2, d3, d4, d2 ^ d3 ^ d4, d1 ^ d3 ^ d4, d1 ^ d2 ^ d4],
        dtype=int,
    )


def hamming_codewords() -> np.ndarray:
    """All 16 codewords ordered by data payload ``0000 .. 1111``."""
    rows = [hamming_encode([(n >> s) & 1 for s in (3, 2, 1, 0)]) for n in range(16)]
    return np.array(rows, dtype=int)


def build_hamming(spec: HammingSpec = HammingSpec()) -> DenseAMModel:
    return memory_model(hamming_codewords(), spec.beta, spec.tau_v, spec.tau_h)


def read_bits(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    bits = (v >= 0.5).astype(int)
    if np.any(np.abs(v - bits) > AMBIGUITY_BAND):
        raise AmbiguousReadoutError(f"state {np.round(v, 3)} is not near a bit pattern")
    return bits


def decode_hamming(model: DenseAMModel, received, cfg: SolverConfig | None = None):
    """Let every visible unit evolve from the received word and round the result."""
    received = np.asarray(received, dtype=float).reshape(-1)
    if received.size != model.n_v or not np.all(np.isin(received, (0.0, 1.0))):
        raise ValueError(f"received word must be {model.n_v} bits")
    cfg = cfg or SolverConfig.for_model(model)
    init = SystemState(v=received, h=np.zeros(model.n_h))
    traj = simulate(model, init, cfg)
    _require_converged(traj, "Hamming decode")
    return read_bits(traj.final_state.v), traj


def bits_to_str(bits) -> str:
    return "".join(str(int(b)) for b in bits)


def str_to_bits(text: str) -> np.ndarray:
    text = text.strip()
    if not text or any(c not in "01" for c in text):
        raise ValueError(f"not a bit string: {text!r}")
    return np.array([int(c) for c in text], dtype=int)
