"""Scaling sweeps, hardware budgets, convexity diagnostics and amplifier timing bounds."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from .core import DenseAMModel, SystemState, logsumexp, make_rng, softmax
from .solver import (
    SimulationError,
    SolverConfig,
    Trajectory,
    convergence_time_from_energy,
    format_float,
    simulate,
)


_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # numpy < 2 only has trapz


# -- budgets and voltage scaling ----------------------------------------------

@dataclass(frozen=True)
class HardwareBudget:
    """Crossbar limits: per-weight, row-sum and column-sum conductance, and voltage swing."""

    G_max: float = 1.0
    C_r: float = 8.0
    C_c: float = 8.0
    kappa_volts: float = 1.0

    def __post_init__(self):
        for name in ("G_max", "C_r", "C_c", "kappa_volts"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


class Normalized(NamedTuple):
    xi: np.ndarray
    b: np.ndarray
    beta: float
    kappa: float


def normalize_to_budget(xi, b, beta, budget: HardwareBudget) -> Normalized:
    """Shrink ``xi`` by one scalar until all three conductance budgets hold.

    ``xi' = kappa xi``, ``b' = kappa^2 b``, ``beta' = beta / kappa^2``.  With
    ``v' = kappa v`` the softmax argument ``beta' (xi' v' + b')`` is unchanged.
    """
    xi = np.asarray(xi, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(xi < 0):
        raise ValueError("conductances must be non-negative")
    kappa = 1.0
    if np.any(xi > 0):
        kappa = min(
            1.0,
            budget.G_max / xi.max(),
            budget.C_c / xi.sum(axis=0).max(),
            budget.C_r / xi.sum(axis=1).max(),
        )
    xi2 = kappa * xi
    # relative slack absorbs the rounding in kappa * xi
    tol = 1e-12
    assert xi2.max(initial=0.0) <= budget.G_max * (1 + tol)
    assert xi2.sum(axis=0).max(initial=0.0) <= budget.C_c * (1 + tol)
    assert xi2.sum(axis=1).max(initial=0.0) <= budget.C_r * (1 + tol)
    return Normalized(xi2, kappa**2 * b, beta / kappa**2, kappa)


def normalize_model(model: DenseAMModel, budget: HardwareBudget):
    """Budget-normalized copy of ``model`` (``a`` scales like ``v``).  Returns ``(model', kappa)``."""
    n = normalize_to_budget(model.xi, model.b, model.beta, budget)
    return model.replace(xi=n.xi, b=n.b, beta=n.beta, a=n.kappa * model.a), n.kappa


# -- convexity diagnostics ------------------------------------------------------

def _require_softmax(model: DenseAMModel):
    if model.visible_activation != "identity" or not model.is_pure_softmax:
        raise ValueError("needs identity visible and softmax hidden activations")


def convexity_margin(model: DenseAMModel) -> float:
    """``alpha = 1 - beta max_mu |xi_mu|^2``; positive means uniformly convex effective energy."""
    _require_softmax(model)
    return float(1.0 - model.beta * np.max(np.sum(model.xi**2, axis=1)))


def effective_hessian(model: DenseAMModel, v) -> np.ndarray:
    """``I - beta Cov_f(xi)`` where ``f = softmax(beta (xi v + b))``."""
    _require_softmax(model)
    v = np.asarray(v, dtype=float)
    f = softmax(model.xi @ v + model.b, model.beta)
    m = model.xi.T @ f
    cov = model.xi.T @ (f[:, None] * model.xi) - np.outer(m, m)
    return np.eye(model.n_v) - model.beta * cov


def lse_slack(model: DenseAMModel, v) -> float:
    """``LSE_beta(s) - max_mu s_mu`` for ``s = xi v + b``; lies in ``[0, log(N_h)/beta]``."""
    s = model.xi @ np.asarray(v, dtype=float) + model.b
    return float(logsumexp(s, model.beta) - s.max())


def energy_gap_rate(times, energies, floor: float = 1e-9) -> float:
    """Least-squares decay rate of ``log(E - E*)``, with ``E*`` the final energy.

    Samples whose gap has fallen below ``floor`` times the initial gap are
    dropped, since rounding dominates there.
    """
    times = np.asarray(times, dtype=float)
    gap = np.asarray(energies, dtype=float) - energies[-1]
    keep = gap > floor * gap[0]
    if keep.sum() < 3:
        raise ValueError("too few samples above the rounding floor to fit a rate")
    slope = np.polyfit(times[keep], np.log(gap[keep]), 1)[0]
    return float(-slope)


# -- energy and area ------------------------------------------------------------

class EnergyAccount(NamedTuple):
    E_weights: float
    E_cap_bound: float
    E_other: float


def energy_account(traj: Trajectory, model: DenseAMModel, budget: HardwareBudget,
                   capacitances, static_power: float = 0.0) -> EnergyAccount:
    """Energy of one inference in joules.

    ``E_weights`` integrates the recorded crossbar power (rescaled to the
    budget's voltage swing); ``E_cap_bound`` is the upper bound
    ``kappa^2 sum C`` for charging every neuron capacitor once;
    ``E_other`` is ``static_power`` per neuron over the run.
    """
    if traj.power_series is None or len(traj.power_series) != len(traj.times):
        raise ValueError("trajectory has no power series")
    scale = (budget.kappa_volts / traj.kappa) ** 2
    e_w = scale * float(_trapezoid(traj.power_series, traj.times)) if len(traj.times) > 1 else 0.0
    caps = np.asarray(capacitances, dtype=float)
    e_cap = budget.kappa_volts**2 * float(caps.sum())
    duration = float(traj.times[-1] - traj.times[0])
    e_other = static_power * (model.n_v + model.n_h) * duration
    return EnergyAccount(e_w, e_cap, e_other)


def weights_energy_bound(model: DenseAMModel, budget: HardwareBudget, duration: float) -> float:
    """``2 kappa^2 (C_c N_v + C_r) T`` for states inside the voltage swing."""
    return 2.0 * budget.kappa_volts**2 * (budget.C_c * model.n_v + budget.C_r) * duration


def area_estimate(n_v: int, n_h: int):
    """``(crossbar cells, neuron cells)`` = ``(N_v N_h, N_v + N_h)``."""
    return n_v * n_h, n_v + n_h


# -- scaling sweeps ---------------------------------------------------------------

Family = Callable[[int, int, int], tuple]


def random_memory_family(beta: float, budget: HardwareBudget = HardwareBudget(), noise: float = 0.3,
                         tau_v: float = 1.0, tau_h: float = 0.0) -> Family:
    """Random non-negative unit-norm memories, budget-normalized.

    ``family(N_v, N_h, seed)`` returns ``(model, init)``.  The initial state is
    a stored memory plus noise of norm ``noise``, clipped to ``[0, 1]`` so the
    run stays inside the voltage swing, then scaled by the budget ``kappa``.
    """

    def family(n_v: int, n_h: int, seed: int):
        rng = make_rng(seed)
        xi = np.abs(rng.normal(size=(n_h, n_v)))
        xi /= np.linalg.norm(xi, axis=1, keepdims=True)
        model = DenseAMModel(
            xi=xi, a=np.zeros(n_v), b=-0.5 * np.sum(xi**2, axis=1),
            tau_v=tau_v, tau_h=tau_h, beta=beta, hardware_realizable=True,
        )
        model, kappa = normalize_model(model, budget)
        z = rng.normal(size=n_v)
        v0 = np.clip(xi[rng.integers(n_h)] + noise * z / np.linalg.norm(z), 0.0, 1.0)
        return model, SystemState(kappa * v0, np.zeros(n_h))

    return family


@dataclass
class ScalingRecord:
    n_v: int
    n_h: int
    times: list
    energies: list
    failures: int = 0

    @property
    def t_mean(self) -> float:
        return float(np.mean(self.times)) if self.times else math.nan

    @property
    def t_max(self) -> float:
        return float(np.max(self.times)) if self.times else math.nan

    @property
    def t_std(self) -> float:
        return float(np.std(self.times)) if self.times else math.nan

    @property
    def energy_mean(self) -> float:
        return float(np.mean(self.energies)) if self.energies else math.nan

    @property
    def area(self):
        return area_estimate(self.n_v, self.n_h)


def loglog_slope(x, y) -> float:
    """Ordinary least-squares slope of ``log y`` against ``log x``."""
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    if np.ptp(x) == 0:
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ScalingReport:
    records: list = field(default_factory=list)
    epsilon_rel: float = 1e-3

    def __post_init__(self):
        sizes = [(r.n_v, r.n_h) for r in self.records]
        for (v0, h0), (v1, h1) in zip(sizes, sizes[1:]):
            if v1 < v0 or h1 < h0 or (v1, h1) == (v0, h0):
                raise ValueError("sizes must be strictly increasing")

    @property
    def slope_nv(self) -> float:
        return loglog_slope([r.n_v for r in self.records], [r.t_mean for r in self.records])

    @property
    def slope_nh(self) -> float:
        return loglog_slope([r.n_h for r in self.records], [r.t_mean for r in self.records])

    @property
    def energy_slope_nv(self) -> float:
        return loglog_slope([r.n_v for r in self.records], [r.energy_mean for r in self.records])

    @property
    def failures(self) -> int:
        return sum(r.failures for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N_v", "N_h", "runs", "failures", "t_conv_mean", "t_conv_max", "t_conv_std",
                    "E_weights_mean", "crossbar_cells", "neuron_cells"])
        for r in self.records:
            w.writerow([r.n_v, r.n_h, len(r.times), r.failures, format_float(r.t_mean),
                        format_float(r.t_max), format_float(r.t_std), format_float(r.energy_mean), *r.area])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"sizes: {len(self.records)}  epsilon_rel: {self.epsilon_rel:g}  non-converged runs: {self.failures}"]
        lines.append(f"log-log slope of T_conv vs N_v: {self.slope_nv:+.4f}")
        if not math.isnan(self.slope_nh):
            lines.append(f"log-log slope of T_conv vs N_h: {self.slope_nh:+.4f}")
        lines.append(f"log-log slope of E_weights vs N_v: {self.energy_slope_nv:+.4f}")
        return "\n".join(lines) + "\n"


def scaling_sweep(family: Family, sizes, cfg: Optional[SolverConfig] = None, epsilon_rel: float = 1e-3,
                  seeds=range(5), budget: HardwareBudget = HardwareBudget(), backend=None) -> ScalingReport:
    """Measure convergence time and crossbar energy over model sizes.

    ``sizes`` is a sequence of ``(N_v, N_h)``.  Runs that fail to converge are
    counted in ``failures`` and left out of the statistics.
    """
    records = []
    for n_v, n_h in sizes:
        rec = ScalingRecord(int(n_v), int(n_h), [], [])
        for seed in seeds:
            model, init = family(int(n_v), int(n_h), int(seed))
            run_cfg = (cfg or SolverConfig.for_model(model)).replace(record_stride=1, kappa=budget.kappa_volts)
            try:
                traj = simulate(model, init, run_cfg, backend=backend)
            except SimulationError:
                rec.failures += 1
                continue
            if not traj.converged:
                rec.failures += 1
                continue
            rec.times.append(convergence_time_from_energy(traj.times, traj.energy_series, epsilon_rel))
            rec.energies.append(energy_account(traj, model, budget, np.zeros(0)).E_weights)
        records.append(rec)
    return ScalingReport(records, epsilon_rel)


# -- amplifier timing bounds ----------------------------------------------------

@dataclass(frozen=True)
class AmplifierSpec:
    """Op-amp figures: slew rate in V/us, gain-bandwidth in MHz, output current in A."""

    name: str
    sr: float
    gbw: float
    i_max: Optional[float] = None
    L_g: float = 1.0
    L_f: float = 1.0
    A_v: float = 1.0
    A_h: float = 1.0
    A_self: float = 1.0
    C1: Optional[float] = None

    def __post_init__(self):
        if not (self.sr > 0 and self.gbw > 0):
            raise ValueError("sr and gbw must be > 0")


class TauBounds(NamedTuple):
    tau_gbw: float
    tau_sr: float
    tau_i_limit: float
    tau_min: float
    t_conv: float


def tau_bounds(spec: AmplifierSpec) -> TauBounds:
    """Lower bounds on the neuron time constant, in seconds; ``t_conv = 10 tau_min``."""
    sr = spec.sr * 1e6  # V/s
    gbw = spec.gbw * 1e6  # Hz
    tau_gbw = max(1.0, spec.A_self) / (2.0 * math.pi * gbw)
    lh = spec.L_f * spec.A_h
    tau_sr = max(lh, spec.A_self * lh, spec.A_self * max(lh, spec.L_g * spec.A_v)) / sr
    tau_i = spec.C1 * spec.A_h / spec.i_max if spec.C1 is not None and spec.i_max else 0.0
    tau_min = max(tau_gbw, tau_sr, tau_i)
    return TauBounds(tau_gbw, tau_sr, tau_i, tau_min, 10.0 * tau_min)


# CMOS amplifiers from the literature, unity swing and slopes.
BUILTIN_AMPLIFIERS = (
    AmplifierSpec("perez2012performance", 84.50, 321.50),
    AmplifierSpec("assaad2009recycling", 94.10, 134.20),
    AmplifierSpec("yen2020high", 202.00, 10.70),
    AmplifierSpec("naderi2018operational", 1250.00, 3600.00),
    AmplifierSpec("schlogl2007design", 1650.00, 2510.00),
)

TAU_TABLE_COLUMNS = ("amplifier", "SR (V/us)", "GBW (MHz)", "tau_SR (ns)", "tau_GBW (ns)", "T_conv (ns)")


def tau_table_rows(specs=BUILTIN_AMPLIFIERS):
    rows = []
    for s in specs:
        t = tau_bounds(s)
        rows.append((s.name, f"{s.sr:.2f}", f"{s.gbw:.2f}", f"{t.tau_sr * 1e9:.2f}",
                     f"{t.tau_gbw * 1e9:.2f}", f"{t.t_conv * 1e9:.2f}"))
    return rows


def format_tau_table(specs=BUILTIN_AMPLIFIERS) -> str:
    rows = [TAU_TABLE_COLUMNS] + tau_table_rows(specs)
    widths = [max(len(r[k]) for r in rows) for k in range(len(TAU_TABLE_COLUMNS))]
    out = []
    for i, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells))
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def tau_table_csv(specs=BUILTIN_AMPLIFIERS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["amplifier", "sr_v_per_us", "gbw_mhz", "tau_sr_ns", "tau_gbw_ns", "t_conv_ns"])
    w.writerows(tau_table_rows(specs))
    return buf.getvalue()


def load_amplifier_specs(path) -> list:
    """Read a JSON list of amplifier objects with ``AmplifierSpec`` field names."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc.get("amplifiers", [doc])
    return [AmplifierSpec(**item) for item in doc]
