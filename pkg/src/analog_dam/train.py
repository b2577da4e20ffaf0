"""Backpropagation through time for the Analog ET on the parity task.

The forward pass is the explicit Euler unroll of the ET dynamics from
``v = 0, h = 0``; the backward pass is the exact discrete adjoint of that
unroll.  The per-example loss is the cross-entropy of the decoded logits at
``t = T`` plus ``lambda * |dv/dt(T)|^2``, which pushes trained models onto
fixed points.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .et import (
    PARAM_NAMES,
    VOCAB,
    EnergyTransformerModel,
    make_rng,
    parity_dataset,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MAX_UNROLL_STEPS = 10**7
LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "holdout_acc", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 0  # 0 = full batch
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0
    split_seed: int = 0
    fixed_point_penalty: float = 0.1
    dt_train: float = 1e-3
    horizon: float = 1.0
    beta: float = 1.0
    tau_v: float = 0.1
    tau_h: float = 0.01
    D: int = 16
    L: int = 8
    M: int = 16
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables global-norm clipping
    init_scale: float = 0.25  # weight std is init_scale / sqrt(D)
    init_gains: tuple = (1.0, 1.0, 1.0)  # extra factors for embed, xi_hopf, decode
    hopf_bias_init: str = "zero"  # "zero" or "spread"
    lr_schedule: str = "constant"  # "constant" or "cosine"
    lr_multipliers: tuple = ()  # (parameter name, factor) pairs

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.fixed_point_penalty < 0:
            raise ValueError("fixed_point_penalty must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if not (self.dt_train > 0 and self.horizon > 0):
            raise ValueError("dt_train and horizon must be > 0")
        if self.batch_size < 0 or self.epochs < 0:
            raise ValueError("epochs and batch_size must be >= 0")
        if len(self.init_gains) != 3 or not all(g > 0 for g in self.init_gains):
            raise ValueError("init_gains must be three positive factors")
        if self.hopf_bias_init not in ("zero", "spread"):
            raise ValueError("hopf_bias_init must be 'zero' or 'spread'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        for name, factor in self.lr_multipliers:
            if name not in PARAM_NAMES or not factor >= 0:
                raise ValueError(f"bad learning-rate multiplier {name!r}: {factor!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt_train))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["init_gains"] = list(self.init_gains)
        d["lr_multipliers"] = [list(pair) for pair in self.lr_multipliers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Inverse of ``to_dict``; JSON lists become the tuple fields."""
        d = dict(d)
        for k in ("adam_betas", "init_gains"):
            if k in d:
                d[k] = tuple(d[k])
        if "lr_multipliers" in d:
            d["lr_multipliers"] = tuple((str(n), float(f)) for n, f in d["lr_multipliers"])
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


def init_params(cfg: TrainConfig, tokens=None) -> dict:
    """Zero biases; weights ~ N(0, (gain * init_scale)^2 / D).

    A Hopfield gain below one keeps the ReLU feedback ``xi_hopf.T xi_hopf``
    contracting at the start of training.  With ``hopf_bias_init="spread"``
    the Hopfield biases are then set from a forward pass over ``tokens`` so
    that unit ``mu`` switches on at fraction ``(mu + 1/2) / M`` of the range
    its input covers, which spreads the ReLU kinks across the data.
    """
    rng = make_rng(cfg.seed)
    s = cfg.init_scale / math.sqrt(cfg.D)
    ge, gh, gd = cfg.init_gains
    p = {
        "embed": rng.normal(0.0, s * ge, (VOCAB, cfg.D)),
        "xi_hopf": rng.normal(0.0, s * gh, (cfg.M, cfg.D)),
        "decode": rng.normal(0.0, s * gd, (cfg.D, VOCAB)),
        "decode_bias": np.zeros(VOCAB),
        "a": np.zeros(cfg.D),
        "b": np.zeros(cfg.L),
        "c": np.zeros(cfg.M),
    }
    if cfg.hopf_bias_init == "spread":
        if tokens is None:
            raise ValueError("spread Hopfield bias init needs the training tokens")
        _, (v, _, _) = _unroll(p, np.asarray(tokens, dtype=int), cfg.beta, cfg.tau_v, cfg.tau_h,
                               cfg.dt_train, cfg.n_steps, keep=False)
        pre = v @ p["xi_hopf"].T
        lo, hi = pre.min(axis=0), pre.max(axis=0)
        p["c"] = -(lo + (hi - lo) * (np.arange(cfg.M) + 0.5) / cfg.M)
    return p


# -- forward / backward --------------------------------------------------------

def _softmax(z, beta):
    z = beta * z
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _token_mass(w, onehot):
    """Sum per-position weights ``w`` (B, L) by token: returns (B, VOCAB)."""
    return np.einsum("bl,blt->bt", w, onehot)


def _check_tokens(p, tokens):
    if tokens.ndim != 2 or tokens.shape[1] != p["b"].size:
        raise ValueError(f"token batch must have shape (B, {p['b'].size})")
    if np.any((tokens < 0) | (tokens >= VOCAB)):
        raise ValueError("tokens must be bits")


def _unroll(p, tokens, beta, tau_v, tau_h, dt, n_steps, keep=True):
    """Euler unroll for a batch of token sequences ``(B, L)``.

    Context row ``A`` is ``embed[tokens[:, A]]``, so attention products are
    taken through the ``VOCAB x D`` embedding instead of a ``(B, L, D)``
    stack.  Returns the one-hot tokens and either the full state history
    (``keep=True``) or only the final state.
    """
    _check_tokens(p, tokens)
    onehot = np.eye(VOCAB)[tokens]  # (B, L, VOCAB)
    E, W = p["embed"], p["xi_hopf"]
    B, L = tokens.shape
    v = np.zeros((B, E.shape[1]))
    ha = np.zeros((B, L))
    hh = np.zeros((B, W.shape[0]))
    if keep:
        V = np.empty((n_steps + 1,) + v.shape)
        HA = np.empty((n_steps + 1,) + ha.shape)
        HH = np.empty((n_steps + 1,) + hh.shape)
        V[0], HA[0], HH[0] = v, ha, hh
    cv, ch = dt / tau_v, dt / tau_h
    b, c, a = p["b"], p["c"], p["a"]
    rows = np.arange(B)[:, None]
    for k in range(n_steps):
        fa = _softmax(ha, beta)
        fh = np.maximum(hh, 0.0)
        rv = _token_mass(fa, onehot) @ E + fh @ W + a - v
        rha = (v @ E.T)[rows, tokens] + b - ha
        rhh = v @ W.T + c - hh
        v = v + cv * rv
        ha = ha + ch * rha
        hh = hh + ch * rhh
        if keep:
            V[k + 1], HA[k + 1], HH[k + 1] = v, ha, hh
    if keep:
        return onehot, (V, HA, HH)
    return onehot, (v, ha, hh)


def _visible_residual(p, onehot, v, ha, hh, beta):
    fa = _softmax(ha, beta)
    fh = np.maximum(hh, 0.0)
    return _token_mass(fa, onehot) @ p["embed"] + fh @ p["xi_hopf"] + p["a"] - v, fa, fh


def _terminal_loss(p, onehot, v, ha, hh, labels, cfg_like):
    beta, tau_v, lam = cfg_like
    z = v @ p["decode"] + p["decode_bias"]
    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(len(labels)), labels]
    rv, fa, fh = _visible_residual(p, onehot, v, ha, hh, beta)
    dvdt = rv / tau_v
    pen = lam * np.sum(dvdt**2, axis=1)
    return ce, pen, z, rv, fa, fh


def batch_loss(p, tokens, labels, cfg: TrainConfig):
    """Mean loss over a batch, plus per-example logits and ``|dv/dt(T)|``."""
    tokens = np.asarray(tokens, dtype=int)
    labels = np.asarray(labels, dtype=int)
    O, (v, ha, hh) = _unroll(p, tokens, cfg.beta, cfg.tau_v, cfg.tau_h, cfg.dt_train, cfg.n_steps, keep=False)
    ce, pen, z, rv, _, _ = _terminal_loss(p, O, v, ha, hh, labels, (cfg.beta, cfg.tau_v, cfg.fixed_point_penalty))
    return float(np.mean(ce + pen)), z, np.linalg.norm(rv / cfg.tau_v, axis=1)


def batch_grad(p, tokens, labels, cfg: TrainConfig, mask=None):
    """Exact gradient of ``batch_loss`` through the unrolled Euler dynamics.

    ``p`` maps parameter names to arrays; ``tokens`` is ``(B, L)``.  Rows with
    ``mask == 0`` are simulated and returned in the logits but carry no loss.
    Returns ``(loss, grads, logits)`` with ``grads`` keyed like ``p``.
    """
    n_steps = cfg.n_steps
    if n_steps > MAX_UNROLL_STEPS:
        raise ValueError(f"{n_steps} unroll steps exceeds the limit of {MAX_UNROLL_STEPS}")
    tokens = np.asarray(tokens, dtype=int)
    labels = np.asarray(labels, dtype=int)
    beta, tau_v, tau_h, dt, lam = cfg.beta, cfg.tau_v, cfg.tau_h, cfg.dt_train, cfg.fixed_point_penalty
    O, (V, HA, HH) = _unroll(p, tokens, beta, tau_v, tau_h, dt, n_steps)
    B = tokens.shape[0]
    E, W = p["embed"], p["xi_hopf"]
    rows = np.arange(B)[:, None]

    wt = np.full(B, 1.0 / B) if mask is None else np.asarray(mask, dtype=float) / np.sum(mask)

    v, ha, hh = V[-1], HA[-1], HH[-1]
    ce, pen, z, rv, fa, fh = _terminal_loss(p, O, v, ha, hh, labels, (beta, tau_v, lam))
    loss = float(np.sum(wt * (ce + pen)))

    g = {n: np.zeros_like(p[n]) for n in PARAM_NAMES}

    # cross-entropy head
    prob = np.exp(z - z.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    dz = prob
    dz[np.arange(B), labels] -= 1.0
    dz *= wt[:, None]
    g["decode"] += v.T @ dz
    g["decode_bias"] += dz.sum(axis=0)
    Av = dz @ p["decode"].T

    # fixed-point penalty: d/d(rv) of lam |rv / tau_v|^2, weighted like the loss
    q = (2.0 * lam / tau_v**2) * wt[:, None] * rv
    Av = Av - q
    adj_fa = (q @ E.T)[rows, tokens]
    Aha = beta * fa * (adj_fa - np.sum(fa * adj_fa, axis=1, keepdims=True))
    Ahh = (hh > 0) * (q @ W.T)
    g["embed"] += _token_mass(fa, O).T @ q
    g["xi_hopf"] += fh.T @ q
    g["a"] += q.sum(axis=0)

    cv, ch = dt / tau_v, dt / tau_h
    for k in range(n_steps - 1, -1, -1):
        v, ha, hh = V[k], HA[k], HH[k]
        fa = _softmax(ha, beta)
        fh = np.maximum(hh, 0.0)
        gv = cv * Av
        gha = ch * Aha
        ghh = ch * Ahh
        adj_fa = (gv @ E.T)[rows, tokens]
        adj_fh = gv @ W.T
        mass_a = _token_mass(fa, O)
        mass_g = _token_mass(gha, O)
        Av = Av - gv + mass_g @ E + ghh @ W
        Aha = Aha - gha + beta * fa * (adj_fa - np.sum(fa * adj_fa, axis=1, keepdims=True))
        Ahh = Ahh - ghh + (hh > 0) * adj_fh
        g["embed"] += mass_a.T @ gv + mass_g.T @ v
        g["xi_hopf"] += fh.T @ gv + ghh.T @ v
        g["a"] += gv.sum(axis=0)
        g["b"] += gha.sum(axis=0)
        g["c"] += ghh.sum(axis=0)
    return loss, g, z


def _model_cfg(model: EnergyTransformerModel, cfg: TrainConfig) -> TrainConfig:
    return cfg.replace(beta=model.beta, tau_v=model.tau_v, tau_h=model.tau_h)


def loss(model: EnergyTransformerModel, example, cfg: TrainConfig = TrainConfig()) -> float:
    """Loss of one ``(bits, parity)`` example, using the model's own beta and taus."""
    bits, label = example
    value, _, _ = batch_loss(model.params(), [bits], [label], _model_cfg(model, cfg))
    if not math.isfinite(value):
        raise FloatingPointError("non-finite loss")
    return value


def grad_bptt(model: EnergyTransformerModel, example, cfg: TrainConfig = TrainConfig()) -> dict:
    """Gradient of ``loss`` for one example with respect to every parameter."""
    bits, label = example
    _, grads, _ = batch_grad(model.params(), [bits], [label], _model_cfg(model, cfg))
    return grads


# -- optimisation ----------------------------------------------------------------

class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, scale=None):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.scale = dict(scale or {})
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.s = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in params:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.s[k] = self.b2 * self.s[k] + (1 - self.b2) * grads[k] ** 2
            lr = self.lr * self.scale.get(k, 1.0)
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.s[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, lr, scale=None):
        self.lr = lr
        self.scale = dict(scale or {})

    def step(self, params, grads):
        for k in params:
            params[k] = params[k] - self.lr * self.scale.get(k, 1.0) * grads[k]


def _as_arrays(examples):
    tokens = np.array([bits for bits, _ in examples], dtype=int)
    labels = np.array([y for _, y in examples], dtype=int)
    return tokens, labels


def accuracy(p, examples, cfg: TrainConfig) -> float:
    tokens, labels = _as_arrays(examples)
    _, z, _ = batch_loss(p, tokens, labels, cfg)
    return float(np.mean(np.argmax(z, axis=1) == labels))


@dataclass
class TrainResult:
    model: EnergyTransformerModel
    log: list = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.log:
            w.writerow([row["epoch"]] + [format(float(row[c]), ".17g") for c in LOG_COLUMNS[1:]])
        return buf.getvalue()


def _model_from(p, cfg):
    return EnergyTransformerModel.from_params(
        p, beta=cfg.beta, tau_v=cfg.tau_v, tau_h=cfg.tau_h, split_seed=cfg.split_seed
    )


def _clip(grads, norm, limit):
    """Rescale ``grads`` to global norm ``limit`` when it is exceeded (0 disables)."""
    if limit and norm > limit:
        return {k: gr * (limit / norm) for k, gr in grads.items()}
    return grads


def train_parity(cfg: TrainConfig = TrainConfig(), checkpoint=None, log_path=None,
                 stop_at_perfect: bool = False, stop_after: int | None = None) -> TrainResult:
    """Train on the 8-bit parity split; log per-epoch loss and accuracy.

    Log row ``epoch = k`` describes the parameters after ``k`` updates (row 0
    is the untrained model): the train loss, train and hold-out accuracy, and
    the norm of the full-batch gradient there.  With ``stop_at_perfect`` the
    run ends at the first row with 100% train and hold-out accuracy.
    ``stop_after`` ends the run after that many updates without changing the
    learning-rate schedule, which replays a prefix of a longer run exactly.
    """
    train, holdout = parity_dataset(cfg.L, cfg.split_seed)
    tokens, labels = _as_arrays(train)
    h_tokens, h_labels = _as_arrays(holdout)
    n = len(train)
    # hold-out rows ride along in every forward pass with zero loss weight
    both = np.concatenate([tokens, h_tokens])
    both_labels = np.concatenate([labels, h_labels])
    mask = np.r_[np.ones(n), np.zeros(len(holdout))]

    p = init_params(cfg, tokens)
    scale = dict(cfg.lr_multipliers)
    if cfg.optimizer == "adam":
        opt = Adam(p, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps, scale)
    else:
        opt = SGD(p, cfg.learning_rate, scale)
    rng = make_rng(cfg.seed + 1)
    bs = cfg.batch_size or n
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    result = TrainResult(model=_model_from(p, cfg))
    last_good = None

    def fail(epoch):
        if last_good is not None:
            result.model = _model_from(last_good, cfg)
            if checkpoint is not None:
                save_checkpoint(result.model, checkpoint, extra={"train_config": cfg.to_dict()})
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good=result.model if last_good else None)

    epoch = 0
    while True:
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, z = batch_grad(p, both, both_labels, cfg, mask)
        gnorm = math.sqrt(sum(float(np.sum(gr**2)) for gr in grads.values()))
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            fail(epoch)
        last_good = {k: v.copy() for k, v in p.items()}
        ok = np.argmax(z, axis=1) == both_labels
        row = dict(epoch=epoch, train_loss=loss, train_acc=float(np.mean(ok[:n])),
                   holdout_acc=float(np.mean(ok[n:])), grad_norm=gnorm)
        result.log.append(row)
        log.info("epoch %d loss %.4f train %.3f holdout %.3f |g| %.3g", epoch, loss,
                 row["train_acc"], row["holdout_acc"], gnorm)
        if stop_at_perfect and row["train_acc"] == 1.0 and row["holdout_acc"] == 1.0:
            break
        if epoch >= last:
            break
        epoch += 1
        if cfg.lr_schedule == "cosine":
            opt.lr = 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
        if bs >= n:
            opt.step(p, _clip(grads, gnorm, cfg.grad_clip))
            continue
        for idx in np.array_split(rng.permutation(n), range(bs, n, bs)):
            with np.errstate(over="ignore", invalid="ignore"):
                mb_loss, mb_grads, _ = batch_grad(p, tokens[idx], labels[idx], cfg)
            mb_norm = math.sqrt(sum(float(np.sum(gr**2)) for gr in mb_grads.values()))
            if not (math.isfinite(mb_loss) and math.isfinite(mb_norm)):
                fail(epoch)
            opt.step(p, _clip(mb_grads, mb_norm, cfg.grad_clip))

    result.model = _model_from(p, cfg)
    if checkpoint is not None:
        save_checkpoint(result.model, checkpoint, extra={"train_config": cfg.to_dict()})
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            fh.write(result.log_csv())
    return result


# Configuration of the bundled reference checkpoint.
REFERENCE_CONFIG = TrainConfig(
    epochs=400,
    learning_rate=1e-2,
    seed=23,
    beta=0.01,
    fixed_point_penalty=1000.0,
    init_scale=1.0,
    init_gains=(8.0, 0.25, 16.0),
    hopf_bias_init="spread",
    lr_schedule="cosine",
    lr_multipliers=(("c", 0.1), ("decode", 3.0), ("decode_bias", 3.0)),
)
