"""Command-line entry point: ``htprecond <gen|train|solve|bench|audit|spectrum>``.

Resolved settings follow CLI flags > ``--config`` JSON file > built-in
defaults, and are printed as one JSON line before any work starts.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(breakdown, or non-convergence under ``--strict``), 4 I/O error.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
METHODS = ("none", "jacobi", "ic0", "hfactor")

DEFAULTS = {
    "gen": {"out": None, "scales": [1024], "train": 100, "test": 20, "seed": 0, "leaf_size": 128},
    "train": {"frame": None, "N": 1024, "seed": 0, "index": 0, "split": "train",
              "out": "factors.hftc", "history": None, "loss": "cosine", "max_steps": 20000,
              "lr": 2e-4, "weight_decay": 1e-4, "grad_clip": 1.0, "contexts": 4,
              "log_every": 100, "init": "jacobi_seed", "init_sigma": 1e-2, "target_iters": None,
              "eval_max_iters": 20000, "leaf_size": 128, "coarse_size": 32},
    "solve": {"frames": [], "method": "jacobi", "checkpoint": None, "rtol": 1e-8,
              "max_iters": 20000, "emit_residuals": None, "out": None, "strict": False},
    "bench": {"frames": [], "methods": list(METHODS), "checkpoint": None, "rtol": 1e-8,
              "max_iters": 20000, "out_csv": "summary.csv", "out_json": None, "jobs": 1,
              "strict": False},
    "audit": {"frames": [], "N": 1024, "count": 10, "seed": 0, "eps": [1e-3, 1e-6, 1e-9],
              "leaf_size": 128, "coarse_size": 32, "cap": 2048, "out": "rank_audit.csv"},
    "spectrum": {"frames": [], "methods": ["jacobi", "hfactor"], "checkpoint": None,
                 "cap": 2048, "out": "spectra.csv"},
}


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _csv_list(kind):
    def parse(s):
        try:
            return [kind(x) for x in s.split(",") if x]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser():
    ap = argparse.ArgumentParser(prog="htprecond", description=__doc__.splitlines()[0],
                                 argument_default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.argument_default = argparse.SUPPRESS
        p.add_argument("--config", help="JSON file of settings (overridden by flags)")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved settings and exit")
        return p

    p = common(sub.add_parser("gen", help="generate MPPF benchmark frames"))
    p.add_argument("--out", help="output directory (default: $HTPRECOND_DATA or ./data)")
    p.add_argument("--scales", type=_csv_list(int))
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--leaf-size", dest="leaf_size", type=int)

    p = common(sub.add_parser("train", help="fit factors to one frame"))
    p.add_argument("--frame", help="MPPF file (otherwise generated from --N/--seed/--index)")
    p.add_argument("--N", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--index", type=int)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--out", help="HFTC checkpoint path")
    p.add_argument("--history", help="JSONL history path (default: checkpoint path + .jsonl)")
    p.add_argument("--loss", choices=("cosine", "sai"))
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--contexts", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--init", choices=("jacobi_seed", "random"))
    p.add_argument("--init-sigma", dest="init_sigma", type=float)
    p.add_argument("--target-iters", dest="target_iters", type=int)
    p.add_argument("--eval-max-iters", dest="eval_max_iters", type=int)
    p.add_argument("--leaf-size", dest="leaf_size", type=int)
    p.add_argument("--coarse-size", dest="coarse_size", type=int)

    for name, helptext in (("solve", "PCG solve with one method"),
                           ("bench", "PCG solves for several methods plus a summary CSV")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--frames", nargs="+", help="MPPF files or glob patterns")
        if name == "solve":
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--emit-residuals", dest="emit_residuals",
                           help="write per-iteration residual vectors (.npy)")
            p.add_argument("--out", help="JSON-lines report path (default: stdout)")
        else:
            p.add_argument("--methods", type=_csv_list(str))
            p.add_argument("--out-csv", dest="out_csv")
            p.add_argument("--out-json", dest="out_json")
            p.add_argument("--jobs", type=int)
        p.add_argument("--checkpoint", help="HFTC checkpoint for hfactor")
        p.add_argument("--rtol", type=float)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--strict", action="store_true",
                       help="exit 3 if any solve breaks down or fails to converge")

    p = common(sub.add_parser("audit", help="rank audit of inverse tiles"))
    p.add_argument("--frames", nargs="+")
    p.add_argument("--N", type=int)
    p.add_argument("--count", type=int, help="frames to generate when --frames is absent")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=_csv_list(float))
    p.add_argument("--leaf-size", dest="leaf_size", type=int)
    p.add_argument("--coarse-size", dest="coarse_size", type=int)
    p.add_argument("--cap", type=int, help="dense size cap")
    p.add_argument("--out")

    p = common(sub.add_parser("spectrum", help="spectra of M A on the deflated space"))
    p.add_argument("--frames", nargs="+")
    p.add_argument("--method", "--methods", dest="methods", type=_csv_list(str))
    p.add_argument("--checkpoint")
    p.add_argument("--cap", type=int)
    p.add_argument("--out")
    return ap


def resolve_config(args):
    """Merge built-in defaults, the optional JSON config file and CLI flags."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config", "print_config")}
    path = getattr(args, "config", None)
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise CliError(EXIT_USAGE, f"config {path} must hold a JSON object")
        file_cfg = file_cfg.get(cmd, file_cfg)
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown {cmd} settings in {path}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    return cfg


def _expand_frames(patterns):
    paths = []
    for pat in patterns or []:
        hits = sorted(glob.glob(pat)) if glob.has_magic(pat) else [pat]
        if not hits:
            raise CliError(EXIT_IO, f"no frames match {pat!r}")
        paths.extend(hits)
    for p in paths:
        if not Path(p).is_file():
            raise CliError(EXIT_IO, f"frame file not found: {p}")
    return paths


def _out(msg):
    print(msg, flush=True)


# -- subcommands --------------------------------------------------------------

def cmd_gen(cfg):
    from .bench import default_data_dir, file_digest, generate_dataset

    out = Path(cfg["out"]) if cfg["out"] else default_data_dir()
    paths = generate_dataset(out, cfg["scales"], cfg["train"], cfg["test"], cfg["seed"],
                             cfg["leaf_size"])
    h = hashlib.sha256()
    for N in cfg["scales"]:
        mine = [p for p in paths if p.parent.parent.name == f"N{N}"]
        _out(f"N={N}: {sum(p.parent.name == 'train' for p in mine)} train, "
             f"{sum(p.parent.name == 'test' for p in mine)} test")
    for p in paths:
        h.update(file_digest(p).encode())
    _out(f"wrote {len(paths)} frames to {out}; sha256 {h.hexdigest()}")
    return EXIT_OK


def _load_frame(cfg):
    from .bench import generate_frame
    from .io import read_frame

    if cfg.get("frame"):
        return read_frame(cfg["frame"])
    return generate_frame(cfg["N"], cfg["seed"], cfg["index"], cfg["split"])


def cmd_train(cfg):
    from .io import write_checkpoint
    from .linalg import RngStream
    from .partition import build_partition, effective_leaf_size
    from .training import TrainConfig, train_factors

    frame = _load_frame(cfg)
    tc = TrainConfig(**{k: cfg[k] for k in ("loss", "max_steps", "lr", "weight_decay", "grad_clip",
                                            "contexts", "log_every", "init", "init_sigma",
                                            "target_iters", "eval_max_iters")})
    part = build_partition(frame.N, effective_leaf_size(frame.N, cfg["leaf_size"]))

    def report(rec):
        _out(json.dumps(rec))

    factors, hist = train_factors(frame.A, part, cfg["coarse_size"], tc,
                                  RngStream(cfg["seed"], purpose="train"), eval_rhs=frame.b,
                                  callback=report)
    out = Path(cfg["out"])
    factors.metadata["frame"] = frame.frame_id
    write_checkpoint(out, factors.astype("single"))
    hpath = Path(cfg["history"]) if cfg["history"] else out.with_name(out.name + ".jsonl")
    try:
        hpath.write_text(hist.to_jsonl())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write history {hpath}: {exc}") from exc
    _out(f"stop: {hist.stop_reason} after {hist.steps} steps; wrote {out} and {hpath}")
    return EXIT_NUMERICAL if hist.stop_reason == "diverged" else EXIT_OK


def _make_applier(method, A, factors):
    from .estimators import factor_applier
    from .pcg import ic0_applier, ic0_factorize, identity_applier, jacobi_applier

    if method == "none":
        return identity_applier()
    if method == "jacobi":
        return jacobi_applier(A)
    if method == "ic0":
        return ic0_applier(ic0_factorize(A))
    if method == "hfactor":
        if factors is None:
            raise CliError(EXIT_USAGE, "method hfactor needs --checkpoint")
        if factors.N != A.shape[0]:
            raise CliError(EXIT_USAGE, f"checkpoint has N={factors.N}, frame has N={A.shape[0]}")
        return factor_applier(factors, A.diagonal())
    raise CliError(EXIT_USAGE, f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def _load_checkpoint(path):
    from .io import read_checkpoint

    return read_checkpoint(path) if path else None


def _solve_one(path, method, checkpoint, rtol, max_iters, record=False):
    from .io import read_frame
    from .pcg import SolveConfig, pcg_solve

    frame = read_frame(path)
    precond = _make_applier(method, frame.A, _load_checkpoint(checkpoint))
    _, rep = pcg_solve(frame.A, frame.b, precond, SolveConfig(rtol, max_iters, record),
                       method=method, frame_id=frame.frame_id)
    return rep


def _bench_task(task):
    return _solve_one(*task).to_dict()


def cmd_solve(cfg):
    paths = _expand_frames(cfg["frames"])
    if not paths:
        raise CliError(EXIT_USAGE, "solve needs --frames")
    record = bool(cfg["emit_residuals"])
    lines, vectors, bad = [], [], False
    for p in paths:
        rep = _solve_one(p, cfg["method"], cfg["checkpoint"], cfg["rtol"], cfg["max_iters"], record)
        lines.append(rep.to_json())
        bad |= rep.breakdown or not rep.converged
        if record:
            vectors.append(np.stack(rep.residual_vectors))
        _out(f"{rep.frame_id} {rep.method}: {rep.iterations} iterations, "
             f"converged={rep.converged}, breakdown={rep.breakdown}")
    if cfg["out"]:
        Path(cfg["out"]).write_text("\n".join(lines) + "\n")
    else:
        for line in lines:
            _out(line)
    if record:
        target = Path(cfg["emit_residuals"])
        if len(vectors) == 1:
            np.save(target, vectors[0])
        else:
            np.savez(target, **{f"frame_{i:05d}": v for i, v in enumerate(vectors)})
        _out(f"residual vectors written to {target}")
    return EXIT_NUMERICAL if (bad and cfg["strict"]) else EXIT_OK


def cmd_bench(cfg):
    from .analysis import SUMMARY_COLUMNS, aggregate_reports, rows_to_csv, rows_to_json

    paths = _expand_frames(cfg["frames"])
    if not paths:
        raise CliError(EXIT_USAGE, "bench needs --frames")
    for m in cfg["methods"]:
        if m not in METHODS:
            raise CliError(EXIT_USAGE, f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if "hfactor" in cfg["methods"] and not cfg["checkpoint"]:
        raise CliError(EXIT_USAGE, "method hfactor needs --checkpoint")
    tasks = [(p, m, cfg["checkpoint"], cfg["rtol"], cfg["max_iters"])
             for m in cfg["methods"] for p in paths]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(cfg["jobs"]) as ex:
            reports = list(ex.map(_bench_task, tasks))
    else:
        reports = [_bench_task(t) for t in tasks]
    rows = aggregate_reports(reports)
    rows_to_csv(rows, SUMMARY_COLUMNS, cfg["out_csv"])
    if cfg["out_json"]:
        rows_to_json({"summary": rows, "reports": reports}, cfg["out_json"])
    for r in rows:
        _out(f"{r['method']:>8} N={r['N']}: {r['iters_mean']:.1f} +- {r['iters_std']:.1f} "
             f"iterations, {r['failures']} failures")
    _out(f"summary written to {cfg['out_csv']}")
    bad = any(r["breakdown"] or not r["converged"] for r in reports)
    return EXIT_NUMERICAL if (bad and cfg["strict"]) else EXIT_OK


def _audit_operators(cfg):
    from .bench import generate_frame
    from .io import read_frame

    paths = _expand_frames(cfg["frames"])
    if paths:
        return [read_frame(p).A for p in paths]
    if cfg["N"] > cfg["cap"]:
        raise CliError(EXIT_USAGE, f"N={cfg['N']} exceeds the dense cap {cfg['cap']}; "
                                   "pass a smaller --N or raise --cap")
    return [generate_frame(cfg["N"], cfg["seed"], i, "test").A for i in range(cfg["count"])]


def cmd_audit(cfg):
    from .analysis import RANK_COLUMNS, rank_audit, rows_to_csv
    from .partition import build_partition, effective_leaf_size

    ops = _audit_operators(cfg)
    N = ops[0].shape[0]
    if N > cfg["cap"]:
        raise CliError(EXIT_USAGE, f"N={N} exceeds the dense cap {cfg['cap']}; raise --cap")
    if any(A.shape[0] != N for A in ops):
        raise CliError(EXIT_USAGE, "audit frames must share one size")
    part = build_partition(N, effective_leaf_size(N, cfg["leaf_size"]))
    rep = rank_audit(ops, part, cfg["eps"], cfg["coarse_size"], cfg["cap"])
    rows_to_csv(rep.rows(), RANK_COLUMNS, cfg["out"])
    for r in rep.rows():
        _out(f"S={r['S']} eps={r['eps']:.0e}: provided {r['provided']:.4f}, "
             f"required {r['required_mean']:.4f} +- {r['required_std']:.4f}")
    _out(f"rank audit written to {cfg['out']}")
    return EXIT_OK


def cmd_spectrum(cfg):
    from .analysis import SPECTRUM_COLUMNS, precond_spectrum, rows_to_csv
    from .io import read_frame

    paths = _expand_frames(cfg["frames"])
    if not paths:
        raise CliError(EXIT_USAGE, "spectrum needs --frames")
    factors = _load_checkpoint(cfg["checkpoint"])
    rows = []
    for p in paths:
        frame = read_frame(p)
        if frame.N > cfg["cap"]:
            raise CliError(EXIT_USAGE, f"{p}: N={frame.N} exceeds the dense cap {cfg['cap']}; "
                                       "raise --cap or use a smaller frame")
        for m in cfg["methods"]:
            rep = precond_spectrum(frame.A, _make_applier(m, frame.A, factors), cfg["cap"],
                                   method=m, frame=frame.frame_id)
            rows.append(rep.row())
            _out(f"{frame.frame_id} {m}: kappa {rep.kappa:.4g}, negative {rep.neg_count}")
    rows_to_csv(rows, SPECTRUM_COLUMNS, cfg["out"])
    _out(f"spectra written to {cfg['out']}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "solve": cmd_solve, "bench": cmd_bench,
            "audit": cmd_audit, "spectrum": cmd_spectrum}


def main(argv=None):
    from .io import FormatError
    from .validation import ConfigError, ContractError, NumericalError

    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        _out("config: " + json.dumps({"command": args.command, **cfg}, sort_keys=True))
        if getattr(args, "print_config", False):
            return EXIT_OK
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
