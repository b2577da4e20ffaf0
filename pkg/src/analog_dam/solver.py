"""Fixed-step integration with convergence detection and power accounting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels
from .core import (
    ActivationResult,
    DenseAMModel,
    SystemState,
    energy_series,
    hidden_activation,
    steady_hidden,
    visible_activation,
)

METHODS = {"euler": 0, "rk4": 1}
MAX_STEPS = 10**8


class SimulationError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    dt: float = 1e-2
    t_max: float = 50.0
    conv_eps: float = 1e-6
    record_stride: int = 10
    kappa: float = 1.0  # voltage swing used for the recorded crossbar power

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {sorted(METHODS)}")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.t_max > 0:
            raise ValueError("t_max must be > 0")
        if self.conv_eps < 0:
            raise ValueError("conv_eps must be >= 0")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be >= 1")
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")

    @classmethod
    def for_model(cls, model: DenseAMModel, **overrides) -> "SolverConfig":
        """Defaults: ``dt = tau_min/100`` and ``t_max = 50 tau_v``."""
        kw = dict(dt=tau_min(model) / 100.0, t_max=50.0 * model.tau_v)
        kw.update(overrides)
        return cls(**kw)

    def check_stability(self, model: DenseAMModel) -> None:
        if not self.dt < tau_min(model) / 10.0:
            raise ValueError(
                f"dt={self.dt:g} violates the stability guard dt < tau_min/10 = {tau_min(model) / 10:g}"
            )

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


def tau_min(model: DenseAMModel) -> float:
    return min(model.tau_v, model.tau_h) if model.tau_h > 0 else model.tau_v


@dataclass
class Trajectory:
    times: np.ndarray
    v_series: np.ndarray
    h_series: np.ndarray
    energy_series: np.ndarray
    power_series: np.ndarray
    converged_at: Optional[float]
    final_state: SystemState
    steps: int
    kappa: float = 1.0

    def __len__(self):
        return len(self.times)

    @property
    def converged(self) -> bool:
        return self.converged_at is not None

    def to_csv(self, path=None) -> str:
        """Write ``t, v_*, h_*, energy, power`` rows; returns the text."""
        n_v = self.v_series.shape[1]
        n_h = self.h_series.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"v_{i}" for i in range(n_v)] + [f"h_{m}" for m in range(n_h)] + ["energy", "power"])
        for k in range(len(self.times)):
            row = [self.times[k], *self.v_series[k], *self.h_series[k], self.energy_series[k], self.power_series[k]]
            w.writerow([format_float(x) for x in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def format_float(x) -> str:
    return format(float(x), ".17g")


def power_weights(model: DenseAMModel, act: ActivationResult, kappa: float = 1.0) -> float:
    """Ohmic crossbar power ``sum_{mu,i} xi_{mu i} (kappa g_i - kappa f_mu)^2``."""
    if not kappa > 0:
        raise ValueError("kappa must be > 0")
    g = np.asarray(act.g, dtype=float)
    f = np.asarray(act.f, dtype=float)
    if g.shape[-1] != model.n_v or f.shape[-1] != model.n_h:
        raise ValueError("activation dimensions do not match the model")
    return _power(model.xi, g, f, kappa)


def _power(xi, g, f, kappa):
    # sum xi (g_i - f_mu)^2 = sum_i colsum_i g_i^2 + sum_mu rowsum_mu f_mu^2 - 2 f.xi.g
    g = np.asarray(g)
    f = np.asarray(f)
    col = xi.sum(axis=0)
    row = xi.sum(axis=1)
    p = (g**2) @ col + (f**2) @ row - 2.0 * np.sum((f @ xi) * g, axis=-1)
    p = kappa**2 * p
    return p if np.ndim(p) else float(p)


def power_bound(model: DenseAMModel, kappa: float = 1.0) -> float:
    """Upper bound ``2 kappa^2 (C_c N_v + C_r)`` using the model's own max column/row sums."""
    c_c = float(np.max(model.xi.sum(axis=0)))
    c_r = float(np.max(model.xi.sum(axis=1)))
    return 2.0 * kappa**2 * (c_c * model.n_v + c_r)


def simulate(model: DenseAMModel, init: SystemState, cfg: SolverConfig, backend=None) -> Trajectory:
    """Integrate from ``init`` until ``cfg.t_max`` or convergence.

    Convergence: ``max |tau_v dv_i|`` over free indices and (full mode)
    ``max |tau_h dh_mu|`` both at most ``cfg.conv_eps``.  Clamped visible
    entries never move.  Adiabatic models (``tau_h == 0``) record the relaxed
    hidden state ``xi g(v) + b``.
    """
    cfg.check_stability(model)
    if init.v.size != model.n_v or init.h.size != model.n_h:
        raise ValueError("initial state dimensions do not match the model")
    n_total = int(round(cfg.t_max / cfg.dt))
    if n_total > MAX_STEPS:
        raise ValueError(f"{n_total} steps exceeds the limit of {MAX_STEPS}")
    advance = kernels.get_advance(backend)

    v = np.ascontiguousarray(init.v, dtype=float).copy()
    h = np.ascontiguousarray(init.h, dtype=float).copy()
    if model.adiabatic:
        h[:] = steady_hidden(model, v)
    free = (~init.clamp_mask).astype(float)
    xi = np.ascontiguousarray(model.xi)
    args = (
        xi, model.a, model.b, float(model.tau_v), float(model.tau_h), float(model.beta),
        1 if model.visible_activation == "relu" else 0,
        model.n_softmax,
        1 if model.elementwise_kind == "relu" else 0,
    )
    method = METHODS[cfg.method]
    stride = int(cfg.record_stride)

    times = [init.t]
    vs = [v.copy()]
    hs = [h.copy()]
    steps = 0
    converged_at = None
    while steps < n_total:
        chunk = min(stride, n_total - steps)
        done, status = advance(*args, v, h, free, cfg.dt, chunk, method, cfg.conv_eps)
        steps += done
        if status == kernels.NONFINITE:
            raise SimulationError(f"non-finite state at step {steps}", step=steps)
        if done:
            times.append(init.t + steps * cfg.dt)
            vs.append(v.copy())
            hs.append(h.copy())
        if status == kernels.CONVERGED:
            converged_at = init.t + steps * cfg.dt
            break

    v_series = np.array(vs)
    h_series = np.array(hs)
    g = visible_activation(model, v_series)
    f = hidden_activation(model, h_series)
    final = SystemState(v.copy(), h.copy(), init.clamp_mask.copy(), times[-1])
    return Trajectory(
        times=np.array(times),
        v_series=v_series,
        h_series=h_series,
        energy_series=energy_series(model, v_series, h_series),
        power_series=np.atleast_1d(_power(model.xi, g, f, cfg.kappa)),
        converged_at=converged_at,
        final_state=final,
        steps=steps,
        kappa=cfg.kappa,
    )


def measure_convergence_time(model: DenseAMModel, init: SystemState, cfg: SolverConfig,
                             epsilon_rel: float = 1e-3, backend=None) -> float:
    """First time the energy gap falls to ``epsilon_rel`` of its initial value.

    The reference energy ``E*`` is taken at the trajectory's own converged
    endpoint.  The trajectory is sampled every step.
    """
    if not 0 < epsilon_rel < 1:
        raise ValueError("epsilon_rel must lie in (0, 1)")
    traj = simulate(model, init, cfg.replace(record_stride=1), backend=backend)
    if not traj.converged:
        raise NonConvergenceError(f"no convergence before t_max={cfg.t_max:g}")
    return convergence_time_from_energy(traj.times, traj.energy_series, epsilon_rel)


def convergence_time_from_energy(times, energies, epsilon_rel) -> float:
    energies = np.asarray(energies, dtype=float)
    e_star = energies[-1]
    gap = energies - e_star
    target = epsilon_rel * gap[0]
    idx = np.flatnonzero(gap <= target)
    return float(times[idx[0]] - times[0])
