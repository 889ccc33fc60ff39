"""Command-line entry point: ``synth``, ``train``, ``eval``, ``bench`` and ``nr``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path


from . import bench as bench_mod
from . import evaluate, io, synth
from .config import load_config
from .grid import build_admittance
from .model import ModelConfig, ModelParams
from .numerics import State, nr_solve
from .train import train as run_training

log = logging.getLogger("pignn_acpf")

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# --- synth ----------------------------------------------------------------------------

def synthesize_filtered(regime, count, seed, n_min, n_max, workers=1, max_draws=synth.MAX_DRAWS,
                        load_profile="scaled"):
    """Synthesize, filter with Tukey fences from the first pass, then top up with the fences frozen."""
    report = synth.SynthesisReport(synth.regime_ranges(regime).name, count)
    scenarios, _ = synth.synthesize_corpus(regime, count, seed, n_min, n_max, workers=workers,
                                           max_draws=max_draws, load_profile=load_profile, report=report)
    if not scenarios:
        return [], report
    kept, dropped, fences = synth.iqr_filter(scenarios)
    report.iqr_dropped += len(dropped)
    report.fences = fences
    next_index = count
    while len(kept) < count:
        missing = count - len(kept)
        extra, _ = synth.synthesize_corpus(regime, missing, seed, n_min, n_max, start_index=next_index,
                                           workers=workers, max_draws=max_draws, load_profile=load_profile,
                                           report=report)
        next_index += missing
        if not extra:
            break
        more, dropped, _ = synth.iqr_filter(extra, fences)
        report.iqr_dropped += len(dropped)
        kept.extend(more)
    return kept[:count], report


def cmd_synth(args) -> int:
    cfg = load_config(args.config, _overrides(args.set)).synth
    regime = args.regime or cfg.regime
    count = args.count if args.count is not None else cfg.count
    seed = args.seed if args.seed is not None else cfg.seed
    n_min = args.n_min if args.n_min is not None else cfg.n_min
    n_max = args.n_max if args.n_max is not None else cfg.n_max
    workers = args.workers or 1
    scenarios, report = synthesize_filtered(regime, count, seed, n_min, n_max, workers, cfg.max_draws,
                                            cfg.load_profile)
    if not scenarios:
        print("error: no scenario was accepted", file=sys.stderr)
        return EXIT_FAILURE
    out = Path(args.out)
    try:
        paths = io.write_splits(out, scenarios, regime.lower())
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    summary = report.as_dict()
    summary["written"] = {name: str(p) for name, p in paths.items()}
    summary["counts"] = {name: sum(1 for _ in open(p)) for name, p in paths.items()}
    (out / f"{regime.lower()}_synthesis_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("regime", "accepted", "draws", "acceptance_rate",
                                              "rejections", "iqr_dropped", "counts")}))
    return 0


# --- train ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    model_cfg = replace(cfg.model, kind=args.model)
    init = None
    if args.init:
        try:
            init, _, _ = io.load_checkpoint(args.init)
        except io.SchemaError as exc:
            print(f"error: refusing to resume: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if init.config.kind != args.model:
            print(f"error: refusing to resume a {init.config.kind} checkpoint as {args.model}", file=sys.stderr)
            return EXIT_USAGE
        model_cfg = init.config
    train_set = io.read_many(args.train)
    val_set = io.read_many(args.val) if args.val else []
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def on_epoch(record):
        print(record.line(), flush=True)
        if log_fh:
            log_fh.write(record.line() + "\n")
            log_fh.flush()

    try:
        result = run_training(train_set, val_set, model_cfg, tcfg, cfg.line_search, init, on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    extra = {"best_val_loss": result.best_val_loss, "best_epoch": result.best_epoch,
             "initial_val_loss": result.initial_val_loss, "train_config": asdict(tcfg), "aborted": result.aborted}
    io.save_checkpoint(args.out, result.params, cfg.line_search, extra)
    if args.figure:
        from .plots import plot_training
        plot_training(result.history, args.figure)
    print(json.dumps({"checkpoint": str(args.out), "best_epoch": result.best_epoch,
                      "best_val_loss": result.best_val_loss, "aborted": result.aborted}))
    return EXIT_FAILURE if result.aborted else 0


# --- eval -----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    params, ls_config, header = io.load_checkpoint(args.checkpoint)
    data = io.read_many(args.data)
    if not data:
        print("error: evaluation data is empty", file=sys.stderr)
        return EXIT_FAILURE
    K = args.K if args.K is not None else header.get("extra", {}).get("train_config", {}).get("K", 10)
    modes = evaluate.ABLATION_MODES if args.mode == "all" else (args.mode,)
    regimes = sorted({s.regime for s in data})
    rows = []
    for regime in regimes:
        part = [s for s in data if s.regime == regime]
        for mode in modes:
            res = evaluate.rmse_eval(params, part, mode, K, ls_config, regime, args.all_buses)
            row = res.row()
            row["model"] = params.config.kind
            rows.append(row)
    evaluate.write_rows(args.out, rows)
    for row in rows:
        print(f"{row['regime']} {row['model']} {row['mode']}: V {row['rmse_v_pu']:.4e} p.u., "
              f"theta {row['rmse_theta_deg']:.4f} deg")
    return 0


# --- bench ----------------------------------------------------------------------------

def _bench_models(args):
    models = {}
    for solver, path, kind, mode in (("PIGNN-MLP", args.mlp, "mlp", "base"),
                                     ("PIGNN-Attn-LS", args.attn, "attn", "caps_ls")):
        if path:
            params, _, _ = io.load_checkpoint(path)
        else:
            params = ModelParams.init(ModelConfig(kind=kind), seed=0)
        models[solver] = (params, mode)
    return models


def cmd_bench(args) -> int:
    cfg = load_config(args.config, _overrides(args.set)).bench
    sizes = _int_list(args.sizes) if args.sizes else _int_list(cfg.sizes)
    warmup = args.warmup if args.warmup is not None else cfg.warmup
    repeat = args.repeat if args.repeat is not None else cfg.repeat
    models = _bench_models(args)
    if args.regime == "single":
        cases = {}
        for n in sizes:
            found, _ = synth.synthesize_corpus(args.grid_regime, 1, args.seed + n, n, n)
            if not found:
                print(f"error: no convergent {n}-bus scenario", file=sys.stderr)
                return EXIT_FAILURE
            cases[n] = found[0]
        records = bench_mod.bench_single(cases, models, args.K, warmup, repeat)
    else:
        count = args.count if args.count is not None else cfg.count
        workers = args.workers or cfg.workers or bench_mod.default_workers()
        budget = args.node_budget or cfg.node_budget
        corpora = {n: synth.synthesize_corpus(args.grid_regime, count, args.seed + n, n, n)[0] for n in sizes}
        try:
            records = bench_mod.bench_multi(corpora, models, workers, budget, args.K, warmup, repeat)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    bench_mod.write_records(args.out, records)
    long_path = Path(args.out).with_name(Path(args.out).stem + "_long.csv")
    evaluate.write_rows(long_path, bench_mod.long_format(records))
    if args.figure:
        from .plots import plot_bench
        plot_bench(records, args.figure, f"{args.regime}-scenario regime")
    for r in records:
        print(f"n={r.n} {r.solver} micro_batch={r.micro_batch} median={r.median_seconds:.4e}s")
    return 0


# --- nr -------------------------------------------------------------------------------

def _inline_scenario(record: dict):
    """Scenario from a partial record: buses and lines are required, the rest gets defaults."""
    n = len(record["buses"])
    full = {"schema": io.DATASET_SCHEMA, "regime": "HV", "seed": 0, "index": 0, "attempt": 0,
            "v_base": 1.0, "s_base": 1.0, "lengths_km": [],
            "nr": {"converged": True, "iterations": 0, "final_merit": 0.0, "reason": "", "merit_trail": []}}
    full.update(record)
    full.setdefault("initial", {"v": [1.0] * n, "theta": [0.0] * n})
    full.setdefault("reference", full["initial"])
    scenario = io.record_to_scenario(full)
    if "initial" not in record:
        scenario.initial_state = State.flat(scenario.grid)
    return scenario


def cmd_nr(args) -> int:
    if args.grid_json:
        source = Path(args.grid_json)
        record = json.loads(source.read_text() if source.exists() else args.grid_json)
        scenario = _inline_scenario(record)
    elif args.data:
        data = io.read_dataset(args.data)
        if not 0 <= args.index < len(data):
            print(f"error: index {args.index} outside 0..{len(data) - 1}", file=sys.stderr)
            return EXIT_USAGE
        scenario = data[args.index]
    else:
        print("error: give --data FILE or --grid-json RECORD", file=sys.stderr)
        return EXIT_USAGE
    state, report = nr_solve(scenario.grid, build_admittance(scenario.grid), scenario.initial_state,
                             args.tol, args.max_iter)
    if args.json:
        print(json.dumps({"converged": report.converged, "iterations": report.iterations,
                          "final_merit": report.final_merit, "reason": report.reason,
                          "merit_trail": report.merit_trail, "wall_time": report.wall_time,
                          "v": state.v.tolist(), "theta": state.theta.tolist()}))
    else:
        for k, f in enumerate(report.merit_trail):
            print(f"iter {k:2d}  merit {f:.3e}")
        status = "converged" if report.converged else f"not converged ({report.reason})"
        print(f"{status} after {report.iterations} iterations")
    return 0 if report.converged else EXIT_FAILURE


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pignn-acpf", description="AC power flow with unrolled graph solvers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    p = sub.add_parser("synth", help="synthesize, solve, filter and split a scenario corpus")
    common(p)
    p.add_argument("--regime", choices=["HV", "MV", "hv", "mv"])
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-min", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on the physics loss")
    common(p)
    p.add_argument("--model", choices=["mlp", "attn"], required=True)
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--val", nargs="*")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init", help="checkpoint to continue from")
    p.add_argument("--log", help="write one line per epoch here")
    p.add_argument("--figure", help="loss-curve PNG")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE against the stored references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--mode", choices=[*evaluate.ABLATION_MODES, "all"], default="caps_ls")
    p.add_argument("--K", type=int)
    p.add_argument("--all-buses", action="store_true", help="count Slack and PV buses in both errors")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock comparison with Newton-Raphson")
    common(p)
    p.add_argument("--regime", choices=["single", "multi"], default="single")
    p.add_argument("--grid-regime", choices=["HV", "MV"], default="HV")
    p.add_argument("--sizes")
    p.add_argument("--count", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--node-budget", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--repeat", type=int)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mlp", help="MLP checkpoint (untrained weights if omitted)")
    p.add_argument("--attn", help="attention checkpoint (untrained weights if omitted)")
    p.add_argument("--figure", help="time-versus-size PNG")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("nr", help="standalone Newton-Raphson solve")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--grid-json", help="scenario record (JSON text or file) with buses and lines")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=30)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_nr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, io.SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
