"""Ideal op-amp neuron and BJT softmax circuits, reduced to the DenseAM equations.

Crossbar conductances are ``G = xi / R1``: a weight of 1 is a resistor equal
to ``R1``.  With ``R1 = 1`` ohm this is the literal ``R = 1/xi`` rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .core import logsumexp
from .tasks import XOR_MEMORIES

THERMAL_VOLTAGE = 0.025852  # kT/q at 300 K


@dataclass(frozen=True)
class NeuronCircuit:
    """Resistors R1..R10 in ohms, state capacitor C1 in farads, bias source in volts."""

    R1: float = 1.0
    R2: float = 1e4
    R3: float = 1e4
    R4: float = 1e4
    R5: float = 1e4
    R6: float = 1e4
    R7: float = 1e4
    R8: float = 1e4
    R9: float = 1e3
    R10: float = 1e3
    C1: float = 10e-6
    b_mu: float = 0.0

    def __post_init__(self):
        for k in range(1, 11):
            if not getattr(self, f"R{k}") > 0 and k != 9:
                raise ValueError(f"R{k} must be > 0")
        if self.R9 < 0:  # R9 = 0 turns U2 into a follower (zero self-term gain)
            raise ValueError("R9 must be >= 0")
        if not self.C1 > 0:
            raise ValueError("C1 must be > 0")

    @classmethod
    def equal(cls, R: float, self_gain: float, R2: float = 1e4, R10: float = 1e3,
              C1: float = 10e-6, b_mu: float = 0.0) -> "NeuronCircuit":
        """``R1 = R3 = ... = R8 = R`` with ``R9/R10 = self_gain``."""
        return cls(R1=R, R2=R2, R3=R, R4=R, R5=R, R6=R, R7=R, R8=R,
                   R9=self_gain * R10, R10=R10, C1=C1, b_mu=b_mu)

    @property
    def self_gain(self) -> float:
        return self.R9 / self.R10

    @property
    def tau(self) -> float:
        return self.R2 * self.C1

    def replace(self, **changes) -> "NeuronCircuit":
        return replace(self, **changes)


def self_term_output(c: NeuronCircuit, f_mu):
    """Output of the non-inverting U2 stage: ``s = (1 + R9/R10) f``."""
    return (1.0 + c.R9 / c.R10) * f_mu


def drive_voltage(c: NeuronCircuit, f_mu, m_mu, s_mu, b_mu=None):
    """Output ``d`` of the U3 summer that drives the ``R2 C1`` stage."""
    b = c.b_mu if b_mu is None else b_mu
    gain = (c.R6 * c.R7 + c.R8 * (c.R6 + c.R7)) / (c.R6 * c.R7)
    u3p = (c.R4 * c.R5 * b + c.R3 * c.R5 * s_mu) / (c.R4 * c.R5 + c.R3 * c.R5 + c.R3 * c.R4)
    return gain * u3p - (c.R8 / c.R6) * m_mu


def crossbar_current(c: NeuronCircuit, xi_row, g, f_mu) -> float:
    """Current into the neuron node, ``sum_i G_i (g_i - f)`` with ``G = xi / R1``."""
    xi_row = np.asarray(xi_row, dtype=float)
    return float(np.sum(xi_row / c.R1 * (np.asarray(g, dtype=float) - f_mu)))


def neuron_rhs(c: NeuronCircuit, xi_row, g, f_mu, h_mu, b_mu=None) -> float:
    """``R2 C1 dh/dt = d - h`` evaluated stage by stage."""
    J = crossbar_current(c, xi_row, g, f_mu)
    m = f_mu - c.R1 * J
    s = self_term_output(c, f_mu)
    return float(drive_voltage(c, f_mu, m, s, b_mu) - h_mu)


def canonical_rhs(xi_row, g, h_mu, b_mu) -> float:
    return float(np.dot(xi_row, g) + b_mu - h_mu)


def neuron_dynamics_check(c: NeuronCircuit, xi_row, g, f_mu, h_mu, b_mu=None) -> float:
    """``|circuit RHS - (xi . g + b - h)|`` in volts."""
    b = c.b_mu if b_mu is None else b_mu
    return abs(neuron_rhs(c, xi_row, g, f_mu, h_mu, b) - canonical_rhs(xi_row, g, h_mu, b))


def matched_circuit(xi_row, R: float = 1.0, **kw) -> NeuronCircuit:
    """Equal-resistance neuron whose self-term gain cancels ``-f sum_i xi_i``."""
    return NeuronCircuit.equal(R, float(np.sum(xi_row)), **kw)


# -- BJT softmax ---------------------------------------------------------------------

@dataclass(frozen=True)
class BjtSoftmaxCircuit:
    """Differential pair generalised to ``N`` branches sharing one tail current."""

    V_T: float = THERMAL_VOLTAGE
    I_EE: float = 1e-3
    R: float = 1e3
    V_CC: float = 5.0
    N: Optional[int] = None
    I_S: float = 1e-14

    def __post_init__(self):
        if not (self.V_T > 0 and self.I_EE > 0 and self.I_S > 0 and self.R > 0):
            raise ValueError("V_T, I_EE, I_S and R must be > 0")

    @property
    def beta(self) -> float:
        return 1.0 / self.V_T


class BjtState(NamedTuple):
    currents: np.ndarray
    v_emitter: float
    collector_voltages: np.ndarray


def bjt_operating_point(c: BjtSoftmaxCircuit, h) -> BjtState:
    """Solve the shared-emitter KCL ``I_EE = sum I_S exp((h - V_E)/V_T)`` and read the branches."""
    h = np.asarray(h, dtype=float)
    if c.N is not None and h.shape != (c.N,):
        raise ValueError(f"expected {c.N} base voltages")
    v_e = c.V_T * (logsumexp(h / c.V_T) - math.log(c.I_EE / c.I_S))
    currents = c.I_S * np.exp((h - v_e) / c.V_T)
    return BjtState(currents, float(v_e), c.V_CC - currents * c.R)


def bjt_softmax(c: BjtSoftmaxCircuit, h):
    """Returns ``(collector currents, f)`` where ``f`` is the shifted and negated collector voltage."""
    st = bjt_operating_point(c, h)
    f = c.V_CC - st.collector_voltages
    return st.currents, f


# -- component values of the XOR board -------------------------------------------------

R_TRUE = 1.0
R_FALSE = 1000.0


class SelfTermRow(NamedTuple):
    neuron: int
    ratio: float
    conductance_sum: float
    rel_error: float


def xor_self_term_check(R1: float = 1.0, documented=((3, 1000), (2000, 1000), (2000, 1000), (2000, 1000))):
    """Compare each hidden neuron's documented ``R9/R10`` with its weight sum.

    A truth-table 1 is ``R_TRUE`` and a 0 is ``R_FALSE``; weights are
    ``R1 / R``.
    """
    weights = np.where(XOR_MEMORIES == 1, R1 / R_TRUE, R1 / R_FALSE)
    rows = []
    for mu, (num, den) in enumerate(documented):
        ratio = num / den
        total = float(weights[mu].sum())
        rows.append(SelfTermRow(mu + 1, ratio, total, abs(ratio - total) / total))
    return rows


def xor_board_weights(R1: float = 1.0) -> np.ndarray:
    return np.where(XOR_MEMORIES == 1, R1 / R_TRUE, R1 / R_FALSE)
