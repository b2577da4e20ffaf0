"""Dense Associative Memory model, activations, dynamics and energies.

A DenseAM has ``N_v`` visible neurons with pre-activations ``v`` and ``N_h``
hidden neurons with pre-activations ``h``, coupled by one non-square weight
matrix ``xi`` of shape ``(N_h, N_v)`` that is used in both directions::

    tau_v dv/dt = xi.T @ f(h) + a - v
    tau_h dh/dt = xi   @ g(v) + b - h

``g`` and ``f`` are gradients of convex Lagrangians, which makes the global
energy a Lyapunov function of the flow.  Setting ``tau_h = 0`` selects the
adiabatic model in which the hidden layer is integrated out.

Hidden activations may be a single selector (``"softmax"``, ``"relu"``,
``"identity"``) or a block layout such as ``(("softmax", 8), ("relu", 16))``,
which is how the Energy Transformer's attention and Hopfield units share one
crossbar.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

VISIBLE_KINDS = ("identity", "relu")
HIDDEN_KINDS = ("softmax", "relu", "identity")

HiddenSpec = Union[str, Sequence[tuple]]


RNG_ALGORITHM = "numpy.random.Philox (4x64-10)"


def make_rng(seed):
    """Counter-based generator so seeded runs replay across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


class DimensionError(ValueError):
    pass


def logsumexp(x, beta=1.0, axis=-1):
    """``(1/beta) * log(sum(exp(beta * x)))`` with max subtraction."""
    x = np.asarray(x, dtype=float)
    z = beta * x
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) / beta


def softmax(x, beta=1.0, axis=-1):
    z = beta * np.asarray(x, dtype=float)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def _normalize_segments(spec: HiddenSpec, n_h: int) -> tuple:
    if isinstance(spec, str):
        segments = ((spec, n_h),)
    else:
        segments = tuple((str(kind), int(size)) for kind, size in spec)
    for kind, size in segments:
        if kind not in HIDDEN_KINDS:
            raise ValueError(f"unknown hidden activation {kind!r}")
        if size < 0:
            raise ValueError("segment sizes must be non-negative")
    if sum(size for _, size in segments) != n_h:
        raise DimensionError(
            f"hidden segments cover {sum(s for _, s in segments)} units, xi has {n_h} rows"
        )
    segments = tuple(s for s in segments if s[1] > 0)
    kinds = [k for k, _ in segments]
    # kernel layout: at most one leading softmax block, then one elementwise block
    if kinds.count("softmax") > 1 or ("softmax" in kinds and kinds[0] != "softmax"):
        raise ValueError("softmax may only appear once, as the leading hidden block")
    if len([k for k in kinds if k != "softmax"]) > 1:
        raise ValueError("at most one elementwise hidden block is supported")
    return segments


@dataclass(frozen=True, eq=False)
class DenseAMModel:
    """Immutable DenseAM parameters.

    ``xi`` is ``(N_h, N_v)``; ``a`` has length ``N_v`` and ``b`` length ``N_h``.
    ``tau_h == 0`` selects the adiabatic (hidden-integrated-out) model.
    """

    xi: np.ndarray
    a: np.ndarray
    b: np.ndarray
    tau_v: float = 1.0
    tau_h: float = 0.1
    visible_activation: str = "identity"
    hidden_activation: HiddenSpec = "softmax"
    beta: float = 1.0
    hardware_realizable: bool = False
    segments: tuple = field(init=False, repr=False)

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float, copy=True)
        if xi.ndim != 2:
            raise DimensionError("xi must be a 2-d (N_h, N_v) matrix")
        a = np.array(self.a, dtype=float, copy=True).reshape(-1)
        b = np.array(self.b, dtype=float, copy=True).reshape(-1)
        n_h, n_v = xi.shape
        if a.shape != (n_v,):
            raise DimensionError(f"a has length {a.size}, expected N_v={n_v}")
        if b.shape != (n_h,):
            raise DimensionError(f"b has length {b.size}, expected N_h={n_h}")
        if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("model parameters must be finite")
        if self.hardware_realizable and np.any(xi < 0):
            raise ValueError("hardware-realizable weights must be non-negative conductances")
        if not self.tau_v > 0:
            raise ValueError("tau_v must be > 0")
        if not self.tau_h >= 0:
            raise ValueError("tau_h must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.visible_activation not in VISIBLE_KINDS:
            raise ValueError(f"unknown visible activation {self.visible_activation!r}")
        for arr in (xi, a, b):
            arr.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "segments", _normalize_segments(self.hidden_activation, n_h))

    @property
    def n_v(self) -> int:
        return self.xi.shape[1]

    @property
    def n_h(self) -> int:
        return self.xi.shape[0]

    @property
    def adiabatic(self) -> bool:
        return self.tau_h == 0

    @property
    def n_softmax(self) -> int:
        """Size of the leading softmax block (0 if there is none)."""
        kind, size = self.segments[0] if self.segments else ("relu", 0)
        return size if kind == "softmax" else 0

    @property
    def elementwise_kind(self) -> str:
        """Activation of the non-softmax hidden units."""
        for kind, _ in self.segments:
            if kind != "softmax":
                return kind
        return "identity"

    @property
    def is_pure_softmax(self) -> bool:
        return self.n_softmax == self.n_h

    def has_distance_biases(self, atol=1e-12) -> bool:
        """True when ``b_mu = -|xi_mu|^2 / 2`` and ``a = 0``."""
        return bool(
            np.allclose(self.b, -0.5 * np.sum(self.xi**2, axis=1), rtol=0, atol=atol)
            and not np.any(self.a)
        )

    def replace(self, **changes) -> "DenseAMModel":
        kwargs = dict(
            xi=self.xi,
            a=self.a,
            b=self.b,
            tau_v=self.tau_v,
            tau_h=self.tau_h,
            visible_activation=self.visible_activation,
            hidden_activation=self.hidden_activation,
            beta=self.beta,
            hardware_realizable=self.hardware_realizable,
        )
        kwargs.update(changes)
        return DenseAMModel(**kwargs)


@dataclass
class SystemState:
    v: np.ndarray
    h: np.ndarray
    clamp_mask: np.ndarray | None = None
    t: float = 0.0

    def __post_init__(self):
        self.v = np.array(self.v, dtype=float).reshape(-1)
        self.h = np.array(self.h, dtype=float).reshape(-1)
        if self.clamp_mask is None:
            self.clamp_mask = np.zeros(self.v.size, dtype=bool)
        self.clamp_mask = np.array(self.clamp_mask, dtype=bool).reshape(-1)
        if self.clamp_mask.size != self.v.size:
            raise DimensionError("clamp_mask length must equal N_v")
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.h))):
            raise ValueError("state must be finite")

    @classmethod
    def zeros(cls, model: DenseAMModel, clamp_mask=None) -> "SystemState":
        return cls(np.zeros(model.n_v), np.zeros(model.n_h), clamp_mask)

    def copy(self) -> "SystemState":
        return SystemState(self.v.copy(), self.h.copy(), self.clamp_mask.copy(), self.t)


@dataclass(frozen=True)
class ActivationResult:
    g: np.ndarray
    f: np.ndarray


# -- activation functions ---------------------------------------------------

def visible_activation(model: DenseAMModel, v):
    v = np.asarray(v, dtype=float)
    if model.visible_activation == "relu":
        return relu(v)
    return v.copy()


def hidden_activation(model: DenseAMModel, h):
    """Hidden outputs; works on a single vector or a stack of vectors (last axis)."""
    h = np.asarray(h, dtype=float)
    out = np.empty_like(h)
    start = 0
    for kind, size in model.segments:
        block = h[..., start : start + size]
        if kind == "softmax":
            out[..., start : start + size] = softmax(block, model.beta)
        elif kind == "relu":
            out[..., start : start + size] = relu(block)
        else:
            out[..., start : start + size] = block
        start += size
    return out


def visible_lagrangian(model: DenseAMModel, v):
    v = np.asarray(v, dtype=float)
    if model.visible_activation == "relu":
        return 0.5 * np.sum(relu(v) ** 2, axis=-1)
    return 0.5 * np.sum(v**2, axis=-1)


def hidden_lagrangian(model: DenseAMModel, h):
    h = np.asarray(h, dtype=float)
    total = np.zeros(h.shape[:-1])
    start = 0
    for kind, size in model.segments:
        block = h[..., start : start + size]
        if kind == "softmax":
            total = total + logsumexp(block, model.beta)
        elif kind == "relu":
            total = total + 0.5 * np.sum(relu(block) ** 2, axis=-1)
        else:
            total = total + 0.5 * np.sum(block**2, axis=-1)
        start += size
    return total


def _check_state(model: DenseAMModel, v, h=None):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != model.n_v:
        raise DimensionError(f"v has length {v.shape[-1]}, expected {model.n_v}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite visible state")
    if h is not None:
        h = np.asarray(h, dtype=float)
        if h.shape[-1] != model.n_h:
            raise DimensionError(f"h has length {h.shape[-1]}, expected {model.n_h}")
        if not np.all(np.isfinite(h)):
            raise ValueError("non-finite hidden state")


def activations(model: DenseAMModel, state: SystemState) -> ActivationResult:
    _check_state(model, state.v, state.h)
    return ActivationResult(visible_activation(model, state.v), hidden_activation(model, state.h))


# -- right-hand sides -------------------------------------------------------

def rhs_full(model: DenseAMModel, state: SystemState):
    """Time derivatives ``(dv/dt, dh/dt)`` of the coupled two-layer dynamics."""
    if model.adiabatic:
        raise ValueError("tau_h == 0: use rhs_effective for the adiabatic model")
    _check_state(model, state.v, state.h)
    act = activations(model, state)
    dv = (model.xi.T @ act.f + model.a - state.v) / model.tau_v
    dv[state.clamp_mask] = 0.0
    dh = (model.xi @ act.g + model.b - state.h) / model.tau_h
    return dv, dh


def steady_hidden(model: DenseAMModel, v):
    """Hidden pre-activations once the hidden layer has relaxed: ``xi g(v) + b``."""
    return visible_activation(model, v) @ model.xi.T + model.b


def rhs_effective(model: DenseAMModel, v, clamp_mask=None):
    """Visible-only dynamics with the hidden layer integrated out.

    With distance-form biases ``b_mu = -|xi_mu|^2/2`` the softmax argument
    ``beta (xi v + b)`` differs from ``-beta/2 |xi_mu - v|^2`` by a term that
    is the same for every ``mu``, so one formula covers both parametrizations.
    """
    if model.visible_activation != "identity" or not model.is_pure_softmax:
        raise ValueError("rhs_effective needs identity visible and softmax hidden activations")
    _check_state(model, v)
    v = np.asarray(v, dtype=float)
    f = softmax(v @ model.xi.T + model.b, model.beta)
    dv = (f @ model.xi + model.a - v) / model.tau_v
    if clamp_mask is not None:
        dv = np.where(np.asarray(clamp_mask, dtype=bool), 0.0, dv)
    return dv


# -- energies ---------------------------------------------------------------

def energy_global(model: DenseAMModel, state: SystemState):
    """Two-layer Lyapunov energy (Legendre terms of both layers + interaction)."""
    _check_state(model, state.v, state.h)
    return _energy_global(model, state.v, state.h)


def _energy_global(model, v, h):
    """Vectorized over leading axes of ``v``/``h``."""
    g = visible_activation(model, v)
    f = hidden_activation(model, h)
    e_vis = np.sum(g * (v - model.a), axis=-1) - visible_lagrangian(model, v)
    e_hid = np.sum(f * (h - model.b), axis=-1) - hidden_lagrangian(model, h)
    e_int = np.sum((f @ model.xi) * g, axis=-1)
    out = e_vis + e_hid - e_int
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite energy")
    return out if np.ndim(out) else float(out)


def energy_effective(model: DenseAMModel, v, form: str = "auto"):
    """Visible-only energy of the adiabatic model.

    ``form="distance"`` evaluates ``-(1/beta) log sum exp(-beta/2 |xi_mu - v|^2)``
    and requires distance-form biases; ``form="general"`` evaluates
    ``|v|^2/2 - a.v - LSE_beta(xi v + b)``.  For distance-form biases the two
    agree exactly.  ``"auto"`` picks distance when applicable.
    """
    if model.visible_activation != "identity" or not model.is_pure_softmax:
        raise ValueError("energy_effective needs identity visible and softmax hidden activations")
    v = np.asarray(v, dtype=float)
    _check_state(model, v)
    if form == "auto":
        form = "distance" if model.has_distance_biases() else "general"
    if form == "distance":
        if not model.has_distance_biases():
            raise ValueError("distance form requires b = -|xi|^2/2 and a = 0")
        d2 = np.sum((v[..., None, :] - model.xi) ** 2, axis=-1)
        out = -logsumexp(-0.5 * d2, model.beta)
    elif form == "general":
        out = 0.5 * np.sum(v**2, axis=-1) - v @ model.a - logsumexp(v @ model.xi.T + model.b, model.beta)
    else:
        raise ValueError(f"unknown form {form!r}")
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite energy")
    return out if np.ndim(out) else float(out)


def energy_series(model: DenseAMModel, v_series, h_series):
    """Energy per recorded sample.

    In adiabatic mode the recorded ``h`` is the relaxed ``xi g(v) + b``, where
    the global energy reduces to the effective one.
    """
    return np.atleast_1d(_energy_global(model, np.asarray(v_series), np.asarray(h_series)))
