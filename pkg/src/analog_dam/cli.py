"""``analog-dam`` command line: task runners, ET training and inference, sweeps, bounds, circuit checks.

Exit codes: 0 success, 1 usage error, 2 non-convergence or failed check,
3 file or checkpoint error.  Every run writes ``manifest.json`` into its
output directory with the resolved configuration.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import io
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, circuit, et, kernels, tasks, train
from .core import RNG_ALGORITHM, make_rng, softmax
from .solver import NonConvergenceError, SimulationError, SolverConfig, format_float

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_IO = 0, 1, 2, 3

REFERENCE_CHECKPOINT = "parity_reference.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- defaults per command; flags > config file > these ------------------------------

DEFAULTS = {
    "xor": dict(x1=None, x2=None, all=False, beta=tasks.DEFAULT_XOR_BETA, tau_v=1.0, tau_h=0.1,
                dt=None, t_max=None, method="euler", record_stride=10),
    "hamming": dict(word=None, exhaustive=False, beta=tasks.DEFAULT_HAMMING_BETA, tau_v=1.0, tau_h=0.1,
                    dt=None, t_max=None, method="euler", record_stride=10),
    "et-train": dict(train.REFERENCE_CONFIG.to_dict()),
    "et-infer": dict(checkpoint=None, context=None, sampling="argmax", seed=0, dt=et.DT_EVAL, t_max=et.HORIZON),
    "et-generate": dict(checkpoint=None, prompt=None, steps=3, mode="grow", sampling="argmax", seed=0,
                        dt=et.DT_EVAL, t_max=et.HORIZON),
    "scale": dict(sizes=None, n_h=None, beta=None, regime="low", seeds=5, epsilon_rel=1e-3, noise=0.3,
                  G_max=1.0, C_r=8.0, C_c=8.0, kappa_volts=1.0),
    "hwbounds": dict(builtin=False, spec=None),
    "circuit-check": dict(seed=0, trials=100),
}

REGIME_BETA = {"low": 0.5, "high": 10.0}


def _add(p, *names, **kw):
    kw.setdefault("default", argparse.SUPPRESS)
    p.add_argument(*names, **kw)


def _bits(text):
    try:
        return tasks.str_to_bits(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _bit(text):
    if text not in ("0", "1"):
        raise argparse.ArgumentTypeError(f"expected 0 or 1, got {text!r}")
    return int(text)


def _sizes(text):
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers: {text!r}") from None
    if any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be positive")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="analog-dam", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option values (flat, or keyed by command)")
    parser.add_argument("--out", help="output directory (default runs/<command>)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def solver_flags(p):
        _add(p, "--beta", type=float)
        _add(p, "--tau-v", dest="tau_v", type=float)
        _add(p, "--tau-h", dest="tau_h", type=float, help="0 selects the adiabatic model")
        _add(p, "--dt", type=float)
        _add(p, "--t-max", dest="t_max", type=float)
        _add(p, "--method", choices=["euler", "rk4"])

    p = sub.add_parser("xor", help="XOR inference with clamped inputs")
    _add(p, "--x1", type=_bit)
    _add(p, "--x2", type=_bit)
    _add(p, "--all", action="store_true", help="run all four input pairs")
    solver_flags(p)

    p = sub.add_parser("hamming", help="Hamming(7,4) decoding")
    _add(p, "--word", type=_bits)
    _add(p, "--exhaustive", action="store_true", help="16 clean + 112 single-error words")
    solver_flags(p)

    p = sub.add_parser("et", help="Energy Transformer on bit parity")
    et_sub = p.add_subparsers(dest="et_command", required=True, parser_class=_Parser)
    q = et_sub.add_parser("train")
    _add(q, "--seed", type=int)
    _add(q, "--split-seed", dest="split_seed", type=int)
    _add(q, "--epochs", type=int)
    _add(q, "--batch-size", dest="batch_size", type=int)
    _add(q, "--lr", dest="learning_rate", type=float)
    _add(q, "--optimizer", choices=["adam", "sgd"])
    _add(q, "--lambda", dest="fixed_point_penalty", type=float)
    _add(q, "--beta", type=float)
    _add(q, "--dt-train", dest="dt_train", type=float)
    for name in ("infer", "generate"):
        q = et_sub.add_parser(name)
        _add(q, "--checkpoint", help="default: the bundled reference model")
        _add(q, "--sampling", choices=["argmax", "stochastic"])
        _add(q, "--seed", type=int)
        _add(q, "--dt", type=float)
        _add(q, "--t-max", dest="t_max", type=float)
        if name == "infer":
            _add(q, "--context", type=_bits)
        else:
            _add(q, "--prompt", type=_bits)
            _add(q, "--steps", type=int)
            _add(q, "--mode", choices=["grow", "window", "sliding_window"])

    p = sub.add_parser("scale", help="convergence-time scaling sweep")
    _add(p, "--sizes", type=_sizes, help="comma-separated N_v values, at least three")
    _add(p, "--n-h", dest="n_h", type=int, help="fixed N_h (default N_h = N_v)")
    _add(p, "--beta", type=float)
    _add(p, "--regime", choices=["low", "high"])
    _add(p, "--seeds", type=int)
    _add(p, "--eps", dest="epsilon_rel", type=float)

    p = sub.add_parser("hwbounds", help="amplifier time-constant bounds")
    g = p.add_mutually_exclusive_group()
    _add(g, "--builtin", action="store_true")
    _add(g, "--spec", help="JSON list of amplifier specs")

    p = sub.add_parser("circuit-check", help="circuit reduction checks")
    _add(p, "--seed", type=int)
    _add(p, "--trials", type=int)
    return parser


# -- plumbing --------------------------------------------------------------------------

def _load_config(path, command):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    section = doc.get(command, doc)
    if not isinstance(section, dict):
        raise UsageError(f"config section {command!r} must be an object")
    return {k.replace("-", "_"): v for k, v in section.items() if not isinstance(v, dict)}


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    from_file = _load_config(getattr(args, "config", None), command)
    unknown = set(from_file) - set(cfg)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg.update(from_file)
    skip = {"config", "out", "verbose", "command", "et_command"}
    cfg.update({k: v for k, v in vars(args).items() if k not in skip})
    return cfg


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, tuple):
        return list(x)
    return x


class Run:
    """Owns one output directory and its manifest."""

    def __init__(self, command, out, config, argv):
        self.command = command
        self.dir = Path(out or Path("runs") / command)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.argv = argv
        self.outputs = []
        self.result = {}

    def write(self, name, text):
        (self.dir / name).write_text(text)
        self.outputs.append(name)

    def manifest(self, exit_code):
        doc = {
            "command": self.command,
            "argv": self.argv,
            "config": {k: _jsonable(v) for k, v in self.config.items()},
            "seed": _jsonable(self.config.get("seed")),
            "rng": RNG_ALGORITHM,
            "backend": kernels.BACKEND,
            "package_version": _version(),
            "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
            "outputs": self.outputs,
            "result": {k: _jsonable(v) for k, v in self.result.items()},
            "exit_code": exit_code,
        }
        (self.dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _version():
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # not installed as a distribution
        return "unknown"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _solver_cfg(model, c) -> SolverConfig:
    kw = dict(method=c["method"], record_stride=c["record_stride"])
    if c.get("dt") is not None:
        kw["dt"] = c["dt"]
    if c.get("t_max") is not None:
        kw["t_max"] = c["t_max"]
    try:
        cfg = SolverConfig.for_model(model, **kw)
        cfg.check_stability(model)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# -- commands ----------------------------------------------------------------------------

def cmd_xor(run: Run) -> int:
    c = run.config
    if c["all"]:
        cases = [(0, 0), (0, 1), (1, 0), (1, 1)]
    elif c["x1"] is None or c["x2"] is None:
        raise UsageError("give --x1 and --x2, or --all")
    else:
        cases = [(int(c["x1"]), int(c["x2"]))]
    try:
        model = tasks.build_xor(tasks.XorSpec(beta=c["beta"], tau_v=c["tau_v"], tau_h=c["tau_h"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg = _solver_cfg(model, c)
    rows, ok = [], True
    for x1, x2 in cases:
        pred, traj = tasks.infer_xor(model, x1, x2, cfg)
        target = x1 ^ x2
        ok &= pred == target
        rows.append([x1, x2, target, pred, format_float(traj.final_state.v[2]), format_float(traj.converged_at)])
        run.write(f"trajectory_{x1}{x2}.csv", traj.to_csv())
        print(f"XOR({x1},{x2}) -> {pred}  v3={traj.final_state.v[2]:.6f}  t={traj.converged_at:g}")
    run.write("results.csv", _csv(["x1", "x2", "target", "predicted", "v3_final", "converged_at"], rows))
    run.result = {"all_correct": bool(ok), "cases": len(cases)}
    return EXIT_OK if ok else EXIT_FAIL


def _nearest_codeword(word):
    cw = tasks.hamming_codewords()
    return cw[np.argmin(np.sum(cw != word, axis=1))]


def cmd_hamming(run: Run) -> int:
    c = run.config
    if c["exhaustive"]:
        words = []
        for code in tasks.hamming_codewords():
            words.append(code)
            for k in range(7):
                w = code.copy()
                w[k] ^= 1
                words.append(w)
    elif c["word"] is not None:
        word = np.asarray(c["word"], dtype=int)
        if word.size != 7:
            raise UsageError("--word must have 7 bits")
        words = [word]
    else:
        raise UsageError("give --word or --exhaustive")
    try:
        model = tasks.build_hamming(tasks.HammingSpec(beta=c["beta"], tau_v=c["tau_v"], tau_h=c["tau_h"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg = _solver_cfg(model, c)
    rows, n_ok = [], 0
    for w in words:
        expected = _nearest_codeword(w)
        decoded, traj = tasks.decode_hamming(model, w, cfg)
        good = bool(np.array_equal(decoded, expected))
        n_ok += good
        rows.append([tasks.bits_to_str(w), tasks.bits_to_str(decoded), tasks.bits_to_str(expected),
                     int(good), format_float(traj.converged_at)])
        if len(words) == 1:
            run.write("trajectory.csv", traj.to_csv())
            print(f"{tasks.bits_to_str(w)} -> {tasks.bits_to_str(decoded)}")
    run.write("results.csv", _csv(["received", "decoded", "expected", "correct", "converged_at"], rows))
    run.result = {"correct": n_ok, "cases": len(words)}
    if len(words) > 1:
        print(f"{n_ok}/{len(words)} words decoded correctly")
    return EXIT_OK if n_ok == len(words) else EXIT_FAIL


def _load_model(path):
    if path is None:
        ref = resources.files("analog_dam") / "data" / REFERENCE_CHECKPOINT
        with resources.as_file(ref) as p:
            return et.load_checkpoint(p)
    return et.load_checkpoint(path)


def cmd_et_train(run: Run) -> int:
    c = run.config
    try:
        cfg = train.TrainConfig.from_dict(c)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    ckpt = run.dir / "checkpoint.json"
    try:
        result = train.train_parity(cfg, checkpoint=ckpt)
    except train.TrainingDiverged as exc:
        run.outputs.append("checkpoint.json")
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    run.outputs.append("checkpoint.json")
    run.write("train_log.csv", result.log_csv())
    last = result.log[-1]
    run.result = {k: last[k] for k in ("epoch", "train_acc", "holdout_acc")}
    print(f"epoch {last['epoch']}: train_acc={last['train_acc']:.4f} holdout_acc={last['holdout_acc']:.4f}")
    return EXIT_OK


def _eval_cfg(model, c):
    try:
        return et.default_eval_config(model, dt=c["dt"], t_max=c["t_max"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_et_infer(run: Run) -> int:
    c = run.config
    if c["context"] is None:
        raise UsageError("--context is required")
    model = _load_model(c["checkpoint"])
    ctx = et.make_context(model, c["context"])
    token, v, traj = et.infer_next_token(model, ctx, _eval_cfg(model, c), sampling=c["sampling"], seed=c["seed"])
    p = softmax(et.logits(model, v))
    context = tasks.bits_to_str(c["context"])
    run.write("result.csv", _csv(["context", "token", "confidence", "p0", "p1"],
                                 [[context, token, format_float(p[token]), format_float(p[0]), format_float(p[1])]]))
    run.result = {"token": token, "confidence": float(p[token])}
    print(f"token={token} confidence={p[token]:.6f}")
    return EXIT_OK


def cmd_et_generate(run: Run) -> int:
    c = run.config
    if c["prompt"] is None:
        raise UsageError("--prompt is required")
    if int(c["steps"]) < 0:
        raise UsageError("--steps must be >= 0")
    model = _load_model(c["checkpoint"])
    mode = "sliding_window" if c["mode"] == "window" else c["mode"]
    records, ctx = et.generate(model, c["prompt"], int(c["steps"]), mode=mode, cfg=_eval_cfg(model, c),
                               sampling=c["sampling"], seed=c["seed"])
    rows = [[r["step"], r["token"], format_float(r["confidence"]), r["context"], r["context_rows"]] for r in records]
    run.write("generate.csv", _csv(["step", "token", "confidence", "context", "context_rows"], rows))
    run.result = {"final_context": "".join(map(str, ctx.tokens)), "context_rows": [r["context_rows"] for r in records]}
    for r in records:
        print(f"step {r['step']}: token={r['token']} confidence={r['confidence']:.4f} context={r['context']}")
    return EXIT_OK


def cmd_scale(run: Run) -> int:
    c = run.config
    sizes = c["sizes"]
    if sizes is None or len(sizes) < 3:
        raise UsageError("scale needs at least three sizes to fit a trend")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise UsageError("sizes must be strictly increasing")
    beta = c["beta"] if c["beta"] is not None else REGIME_BETA[c["regime"]]
    try:
        budget = analysis.HardwareBudget(c["G_max"], c["C_r"], c["C_c"], c["kappa_volts"])
        fam = analysis.random_memory_family(beta, budget, noise=c["noise"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    pairs = [(n, c["n_h"] or n) for n in sizes]
    rep = analysis.scaling_sweep(fam, pairs, epsilon_rel=c["epsilon_rel"], seeds=range(int(c["seeds"])), budget=budget)
    run.write("scaling.csv", rep.to_csv())
    run.write("summary.txt", rep.summary())
    run.result = {"slope_nv": rep.slope_nv, "failures": rep.failures, "beta": beta}
    print(rep.summary(), end="")
    return EXIT_OK


def cmd_hwbounds(run: Run) -> int:
    c = run.config
    if c["spec"]:
        try:
            specs = analysis.load_amplifier_specs(c["spec"])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad amplifier spec: {exc}") from exc
    else:
        specs = analysis.BUILTIN_AMPLIFIERS
    run.write("tau_bounds.csv", analysis.tau_table_csv(specs))
    print(analysis.format_tau_table(specs), end="")
    return EXIT_OK


def circuit_report(seed: int = 0, trials: int = 100):
    """Rows of ``(check, worst residual, tolerance, passed)``."""
    rng = make_rng(seed)
    worst_neuron = 0.0
    for _ in range(trials):
        n_v = int(rng.integers(1, 9))
        xi = rng.uniform(0.0, 2.0, n_v)
        c = circuit.matched_circuit(xi, R=float(rng.uniform(1.0, 1e4)), b_mu=float(rng.normal()))
        worst_neuron = max(worst_neuron, circuit.neuron_dynamics_check(
            c, xi, rng.normal(size=n_v), float(rng.normal()), float(rng.normal())))
    bjt = circuit.BjtSoftmaxCircuit()
    worst_bjt = 0.0
    for _ in range(trials):
        h = rng.normal(0.0, 0.1, int(rng.integers(2, 9)))
        _, f = circuit.bjt_softmax(bjt, h)
        worst_bjt = max(worst_bjt, float(np.max(np.abs(f - softmax(h, bjt.beta)))))
    rows = [
        ("neuron_equal_R_reduction", worst_neuron, 1e-12, worst_neuron < 1e-12),
        ("bjt_softmax_vs_softmax", worst_bjt, 1e-12, worst_bjt < 1e-12),
    ]
    for r in circuit.xor_self_term_check():
        rows.append((f"xor_self_term_neuron_{r.neuron}", r.rel_error, 1e-3, r.rel_error <= 1e-3))
    return rows


def cmd_circuit_check(run: Run) -> int:
    c = run.config
    rows = circuit_report(int(c["seed"]), int(c["trials"]))
    run.write("circuit_check.csv", _csv(["check", "residual", "tolerance", "passed"],
                                        [[n, format_float(r), format_float(t), int(ok)] for n, r, t, ok in rows]))
    for name, res, tol, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  residual={res:.3e}  tol={tol:.0e}")
    run.result = {"passed": all(r[3] for r in rows)}
    return EXIT_OK if run.result["passed"] else EXIT_FAIL


COMMANDS = {
    "xor": cmd_xor,
    "hamming": cmd_hamming,
    "et-train": cmd_et_train,
    "et-infer": cmd_et_infer,
    "et-generate": cmd_et_generate,
    "scale": cmd_scale,
    "hwbounds": cmd_hwbounds,
    "circuit-check": cmd_circuit_check,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, errors exit EXIT_USAGE
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    command = f"et-{args.et_command}" if args.command == "et" else args.command
    try:
        config = resolve(command, args)
        run = Run(command, args.out, config, argv)
    except UsageError as exc:
        print(f"analog-dam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"analog-dam: error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        code = COMMANDS[command](run)
    except UsageError as exc:
        print(f"analog-dam: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (NonConvergenceError, SimulationError, tasks.AmbiguousReadoutError) as exc:
        print(f"analog-dam: {exc}", file=sys.stderr)
        code = EXIT_FAIL
    except (et.CheckpointError, OSError) as exc:
        print(f"analog-dam: error: {exc}", file=sys.stderr)
        code = EXIT_IO
    run.manifest(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
