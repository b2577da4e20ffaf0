"""Analog Energy Transformer on bit tokens.

One visible vector ``v`` (the next-token embedding, length ``D``) talks to two
hidden populations on a shared crossbar:

* attention units, one per context token, whose weight rows are the context
  embeddings and whose outputs are ``softmax(beta h_attn)``;
* ``M`` Hopfield units with learned weights ``xi_hopf`` and ReLU outputs.

Dynamics::

    tau_v dv      = xi_attn.T f_attn + xi_hopf.T f_hopf + a - v
    tau_h dh_attn = xi_attn v + b - h_attn
    tau_h dh_hopf = xi_hopf v + c - h_hopf

A linear decoder on the settled ``v`` gives next-token logits.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RNG_ALGORITHM, DenseAMModel, SystemState, logsumexp, make_rng, relu, softmax
from .solver import NonConvergenceError, SolverConfig, simulate

VOCAB = 2
CHECKPOINT_FORMAT = "analog-et-checkpoint"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("embed", "xi_hopf", "decode", "decode_bias", "a", "b", "c")

# Evaluation defaults for trained parity models.
TAU_V = 0.1
TAU_H = 0.01
DT_EVAL = 1e-4
HORIZON = 1.0


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EnergyTransformerModel:
    embed: np.ndarray  # (2, D)
    xi_hopf: np.ndarray  # (M, D)
    decode: np.ndarray  # (D, 2)
    decode_bias: np.ndarray  # (2,)
    a: np.ndarray  # (D,)
    b: np.ndarray  # (L,)
    c: np.ndarray  # (M,)
    beta: float = 1.0
    tau_v: float = TAU_V
    tau_h: float = TAU_H
    split_seed: int | None = None

    def __post_init__(self):
        arrays = {}
        for name in PARAM_NAMES:
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        d = arrays["embed"].shape[1] if arrays["embed"].ndim == 2 else -1
        checks = {
            "embed": (VOCAB, d),
            "xi_hopf": (arrays["c"].size, d),
            "decode": (d, VOCAB),
            "decode_bias": (VOCAB,),
            "a": (d,),
        }
        for name, shape in checks.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name} has shape {arrays[name].shape}, expected {shape}")
        if arrays["b"].ndim != 1 or arrays["c"].ndim != 1:
            raise ValueError("b and c must be vectors")
        if not (self.beta > 0 and self.tau_v > 0 and self.tau_h >= 0):
            raise ValueError("need beta > 0, tau_v > 0, tau_h >= 0")

    @property
    def D(self) -> int:
        return self.embed.shape[1]

    @property
    def L(self) -> int:
        return self.b.size

    @property
    def M(self) -> int:
        return self.c.size

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    def params(self) -> dict:
        return {n: np.array(getattr(self, n)) for n in PARAM_NAMES}

    @classmethod
    def from_params(cls, params: dict, **kw) -> "EnergyTransformerModel":
        return cls(**{n: params[n] for n in PARAM_NAMES}, **kw)

    def replace(self, **changes) -> "EnergyTransformerModel":
        kw = self.params()
        kw.update(beta=self.beta, tau_v=self.tau_v, tau_h=self.tau_h, split_seed=self.split_seed)
        kw.update(changes)
        return EnergyTransformerModel(**kw)


def zero_model(D=16, L=8, M=16, **kw) -> EnergyTransformerModel:
    return EnergyTransformerModel(
        embed=np.zeros((VOCAB, D)),
        xi_hopf=np.zeros((M, D)),
        decode=np.zeros((D, VOCAB)),
        decode_bias=np.zeros(VOCAB),
        a=np.zeros(D),
        b=np.zeros(L),
        c=np.zeros(M),
        **kw,
    )


# -- context -----------------------------------------------------------------

@dataclass
class ContextState:
    """Attention-block programming for one context.

    ``xi_attn`` rows are physical hidden neurons.  ``slots`` lists the row
    holding each token in chronological order, so a sliding window can
    reprogram the oldest row in place.  ``bias`` is the per-row attention bias.
    """

    xi_attn: np.ndarray
    tokens: list
    bias: np.ndarray
    slots: list = field(default_factory=list)

    def __post_init__(self):
        self.xi_attn = np.array(self.xi_attn, dtype=float).reshape(len(self.tokens), -1)
        self.bias = np.array(self.bias, dtype=float).reshape(-1)
        if not self.slots:
            self.slots = list(range(len(self.tokens)))
        if self.bias.size != self.xi_attn.shape[0]:
            raise ValueError("one attention bias per context row is required")

    def __len__(self):
        return len(self.tokens)


def _check_token(token):
    if token not in range(VOCAB):
        raise ValueError(f"token {token!r} is not in the vocabulary {{0, 1}}")


def attention_bias(model: EnergyTransformerModel, n: int) -> np.ndarray:
    """Biases for ``n`` attention rows; rows past the trained length get 0."""
    out = np.zeros(n)
    k = min(n, model.L)
    out[:k] = model.b[:k]
    return out


def make_context(model: EnergyTransformerModel, tokens) -> ContextState:
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("context must be non-empty")
    for t in tokens:
        _check_token(t)
    return ContextState(
        xi_attn=model.embed[tokens],
        tokens=tokens,
        bias=attention_bias(model, len(tokens)),
    )


def append_context(ctx: ContextState, model: EnergyTransformerModel, token: int,
                   mode: str = "grow") -> ContextState:
    """Program the embedding of ``token`` into the attention block.

    ``grow`` connects a new hidden neuron; ``sliding_window`` reprograms the
    row of the oldest token, leaving its bias and the row count unchanged.
    """
    _check_token(token)
    e = model.embed[token]
    if mode == "grow":
        n = len(ctx)
        bias_new = attention_bias(model, n + 1)[n]
        return ContextState(
            xi_attn=np.vstack([ctx.xi_attn, e]),
            tokens=ctx.tokens + [token],
            bias=np.append(ctx.bias, bias_new),
            slots=ctx.slots + [ctx.xi_attn.shape[0]],
        )
    if mode in ("sliding_window", "window"):
        xi = ctx.xi_attn.copy()
        oldest = ctx.slots[0]
        xi[oldest] = e
        return ContextState(
            xi_attn=xi,
            tokens=ctx.tokens[1:] + [token],
            bias=ctx.bias.copy(),
            slots=ctx.slots[1:] + [oldest],
        )
    raise ValueError(f"unknown append mode {mode!r}")


# -- dynamics and energy -----------------------------------------------------

def et_rhs(model: EnergyTransformerModel, ctx: ContextState, v, h_attn, h_hopf):
    v = np.asarray(v, dtype=float)
    h_attn = np.asarray(h_attn, dtype=float)
    h_hopf = np.asarray(h_hopf, dtype=float)
    if v.shape != (model.D,) or h_attn.shape != (len(ctx),) or h_hopf.shape != (model.M,):
        raise ValueError("state dimensions do not match the model/context")
    if ctx.xi_attn.shape[1] != model.D:
        raise ValueError("context rows do not match the token dimension")
    f_attn = softmax(h_attn, model.beta)
    f_hopf = relu(h_hopf)
    dv = (ctx.xi_attn.T @ f_attn + model.xi_hopf.T @ f_hopf + model.a - v) / model.tau_v
    if model.tau_h == 0:
        return dv, np.zeros_like(h_attn), np.zeros_like(h_hopf)
    dh_attn = (ctx.xi_attn @ v + ctx.bias - h_attn) / model.tau_h
    dh_hopf = (model.xi_hopf @ v + model.c - h_hopf) / model.tau_h
    return dv, dh_attn, dh_hopf


def et_steady_hidden(model: EnergyTransformerModel, ctx: ContextState, v):
    v = np.asarray(v, dtype=float)
    return ctx.xi_attn @ v + ctx.bias, model.xi_hopf @ v + model.c


def et_energy_effective(model: EnergyTransformerModel, ctx: ContextState, v):
    """Visible-only energy: quadratic + attention log-sum-exp + ReLU Hopfield terms."""
    v = np.asarray(v, dtype=float)
    s_attn = v @ ctx.xi_attn.T + ctx.bias
    s_hopf = v @ model.xi_hopf.T + model.c
    e = (
        0.5 * np.sum((v - model.a) ** 2, axis=-1)
        - logsumexp(s_attn, model.beta)
        - 0.5 * np.sum(relu(s_hopf) ** 2, axis=-1)
    )
    if not np.all(np.isfinite(e)):
        raise FloatingPointError("non-finite energy")
    return e if np.ndim(e) else float(e)


def et_energy_full(model: EnergyTransformerModel, ctx: ContextState, v, h_attn, h_hopf):
    """Energy of the coupled system with explicit hidden states."""
    v = np.asarray(v, dtype=float)
    f_attn = softmax(h_attn, model.beta)
    f_hopf = relu(np.asarray(h_hopf, dtype=float))
    e = (
        0.5 * np.sum((v - model.a) ** 2)
        - v @ (ctx.xi_attn.T @ f_attn + model.xi_hopf.T @ f_hopf)
        + f_attn @ (h_attn - ctx.bias)
        + f_hopf @ (h_hopf - model.c)
        - logsumexp(h_attn, model.beta)
        - 0.5 * np.sum(f_hopf**2)
    )
    return float(e)


def as_dense_am(model: EnergyTransformerModel, ctx: ContextState, adiabatic: bool = False) -> DenseAMModel:
    """The same circuit as a two-layer DenseAM with a softmax + ReLU hidden layer.

    Its global energy differs from ``et_energy_full`` by the constant ``|a|^2/2``.
    """
    return DenseAMModel(
        xi=np.vstack([ctx.xi_attn, model.xi_hopf]),
        a=model.a,
        b=np.concatenate([ctx.bias, model.c]),
        tau_v=model.tau_v,
        tau_h=0.0 if adiabatic else model.tau_h,
        visible_activation="identity",
        hidden_activation=(("softmax", len(ctx)), ("relu", model.M)),
        beta=model.beta,
    )


def logits(model: EnergyTransformerModel, v):
    return np.asarray(v, dtype=float) @ model.decode + model.decode_bias


def default_eval_config(model: EnergyTransformerModel, **overrides) -> SolverConfig:
    kw = dict(method="euler", dt=DT_EVAL, t_max=HORIZON, conv_eps=1e-6, record_stride=100)
    kw.update(overrides)
    return SolverConfig(**kw)


def infer_next_token(model: EnergyTransformerModel, ctx: ContextState, cfg: SolverConfig | None = None,
                     sampling: str = "argmax", seed: int | None = None, readout_tol: float = 1e-3):
    """Settle ``v`` from zero and decode the next token.

    The run stops at convergence or at ``cfg.t_max``; in the latter case the
    state must still satisfy ``max |tau_v dv| <= readout_tol``.
    Returns ``(token, v_final, trajectory)``.
    """
    if len(ctx) == 0:
        raise ValueError("context must be non-empty")
    cfg = cfg or default_eval_config(model)
    dam = as_dense_am(model, ctx)
    traj = simulate(dam, SystemState.zeros(dam), cfg)
    v_final = traj.final_state.v
    if not traj.converged:
        h = traj.final_state.h
        dv, _, _ = et_rhs(model, ctx, v_final, h[: len(ctx)], h[len(ctx):])
        if np.max(np.abs(model.tau_v * dv)) > readout_tol:
            raise NonConvergenceError(
                f"visible state still moving at t={traj.times[-1]:g} (|tau_v dv| = {np.max(np.abs(model.tau_v * dv)):.3g})"
            )
    z = logits(model, v_final)
    if sampling == "argmax":
        token = int(np.argmax(z))
    elif sampling == "stochastic":
        p = softmax(z)
        token = int(make_rng(0 if seed is None else seed).choice(VOCAB, p=p))
    else:
        raise ValueError(f"unknown sampling mode {sampling!r}")
    return token, v_final, traj


def generate(model: EnergyTransformerModel, prompt, steps: int, mode: str = "grow",
             cfg: SolverConfig | None = None, sampling: str = "argmax", seed: int | None = None):
    """Autoregressive loop: infer, append, repeat.  Returns per-step records."""
    ctx = make_context(model, prompt)
    records = []
    for k in range(steps):
        token, v, traj = infer_next_token(
            model, ctx, cfg, sampling=sampling, seed=None if seed is None else seed + k
        )
        p = softmax(logits(model, v))
        ctx = append_context(ctx, model, token, mode)
        records.append(
            dict(step=k, token=token, confidence=float(p[token]), context="".join(map(str, ctx.tokens)),
                 context_rows=ctx.xi_attn.shape[0], converged_at=traj.converged_at)
        )
    return records, ctx


# -- parity data -------------------------------------------------------------

def parity_dataset(L: int = 8, seed: int = 0, holdout: int | None = None):
    """All ``2^L`` bit strings labelled with their parity, split by a seeded shuffle.

    For ``L = 8`` the split is 204 train / 52 hold-out.
    """
    n = 2**L
    if holdout is None:
        holdout = max(1, round(n * 52 / 256))
    strings = [np.array([(k >> (L - 1 - j)) & 1 for j in range(L)], dtype=int) for k in range(n)]
    data = [(s, int(s.sum() % 2)) for s in strings]
    order = make_rng(seed).permutation(n)
    shuffled = [data[i] for i in order]
    return shuffled[holdout:], shuffled[:holdout]


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: EnergyTransformerModel, path, extra: dict | None = None) -> None:
    """JSON checkpoint: dims, scalars and every array as ``{shape, data}`` (row-major)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {"D": model.D, "L": model.L, "M": model.M, "vocab": VOCAB},
        "beta": model.beta,
        "tau_v": model.tau_v,
        "tau_h": model.tau_h,
        "split_seed": model.split_seed,
        "n_params": model.n_params,
        "arrays": {
            n: {"shape": list(getattr(model, n).shape), "data": getattr(model, n).ravel().tolist()}
            for n in PARAM_NAMES
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> EnergyTransformerModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an analog ET checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        arrays = {
            n: np.array(doc["arrays"][n]["data"], dtype=float).reshape(doc["arrays"][n]["shape"])
            for n in PARAM_NAMES
        }
        return EnergyTransformerModel(
            **arrays,
            beta=float(doc["beta"]),
            tau_v=float(doc["tau_v"]),
            tau_h=float(doc["tau_h"]),
            split_seed=doc.get("split_seed"),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
