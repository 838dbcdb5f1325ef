"""Command-line entry point: ``sgunlearn <subcommand> [options]``.

Exit codes: 0 success, 1 selftest failure, 2 configuration or usage error,
3 numeric or solver error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness as hx
from .datasets import save_csv
from .errors import ConfigError, ContractError, NumericError, ParseError, SolverError
from .metrics import assemble_report
from .models import load_ckpt, save_ckpt

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
ALPHA_GRID = "0.05,0.1,0.25,0.5,1,2,5"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config(args) -> hx.ExperimentConfig:
    cfg = hx.load_config(args.config) if args.config else hx.ExperimentConfig()
    if getattr(args, "seeds_list", None):
        cfg = cfg.with_values("run", seeds=args.seeds_list)
    if args.out_dir:
        cfg = cfg.with_values("run", output_dir=args.out_dir)
    return cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    bundle = cfg.load_bundle()
    save_csv(bundle, args.out)
    print(f"wrote {len(bundle.labels)} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    bundle = cfg.load_bundle()
    ckpt = hx.original_model(cfg, bundle, args.seed)
    out = Path(args.out) if args.out else cfg.output_dir / f"orig_s{args.seed}_{cfg.digest()}.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ckpt(ckpt, out)
    print(out)
    return EXIT_OK


def _run_all(cfg: hx.ExperimentConfig, seeds, *, track_curve=False, keep_losses=False,
             save_models=False) -> list:
    bundle = cfg.load_bundle()
    out_dir = cfg.output_dir
    records = []
    for seed in seeds:
        rec, ckpt = hx.run_experiment(cfg, seed, bundle, track_curve=track_curve,
                                      keep_losses=keep_losses, cache_dir=out_dir / "cache")
        path = rec.save(out_dir)
        if save_models:
            save_ckpt(ckpt, path.with_suffix(".ckpt"))
        print(f"{path}  mia_acc={rec.metrics.mia_acc:.4f} acc_gap={rec.metrics.acc_gap:.4f}")
        records.append(rec)
    return records


def cmd_unlearn(args) -> int:
    cfg = _config(args)
    if args.method:
        cfg = cfg.with_method(args.method, **(cfg.method_params() if args.method == cfg.method else {}))
    _run_all(cfg, cfg.seeds, keep_losses=args.keep_losses, save_models=True)
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _config(args)
    bundle = cfg.load_bundle()
    ckpt = load_ckpt(args.ckpt)
    seed = args.seed if args.seed is not None else int(ckpt.meta.get("unlearn_seed", ckpt.meta.get("seed", 0)))
    report = assemble_report(ckpt, bundle, cfg.partition(bundle, seed), cfg.audit_config(), seed)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if cfg.method != "sg":
        cfg = cfg.with_method("sg")
    records = []
    for alpha in hx.parse_float_list(args.alpha):
        run_cfg = cfg.with_method("sg", **{**cfg.method_params(), "alpha": alpha})
        records.extend(_run_all(run_cfg, run_cfg.seeds))
    for p in hx.emit_plot_data(records, "alpha-sweep", cfg.output_dir / "plots"):
        print(p)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args).with_values("run", seeds=",".join(str(s) for s in range(args.seeds)))
    records = []
    for alpha in (0.0, 1.0):
        run_cfg = cfg.with_method("sg", **{**(cfg.method_params() if cfg.method == "sg" else {}),
                                           "alpha": alpha})
        records.extend(_run_all(run_cfg, run_cfg.seeds, track_curve=True, keep_losses=True))
    plots = cfg.output_dir / "plots"
    for kind in ("ablation", "loss-hist"):
        for p in hx.emit_plot_data(records, kind, plots):
            print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    records = hx.load_records(args.runs)
    rows = hx.aggregate(records, keys=("method", "alpha"))
    out = Path(args.out) if args.out else Path(args.runs) / "report.csv"
    hx.write_csv(rows, out)
    print(out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest(quick=not args.full)
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgunlearn", description="Stackelberg-game machine unlearning experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--out-dir", help="output directory (the SGUNLEARN_OUT variable wins)")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write the dataset bundle as CSV")
    p.add_argument("--out", required=True)
    p = add("train", cmd_train, "train the original model and save a checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p = add("unlearn", cmd_unlearn, "run one unlearning method over the configured seeds")
    p.add_argument("--method", choices=hx.METHODS)
    p.add_argument("--seeds", dest="seeds_list", help="comma-separated seeds")
    p.add_argument("--keep-losses", action="store_true", help="store per-row losses in the record")
    p = add("audit", cmd_audit, "print the metrics report of a checkpoint as JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int)
    p = add("sweep", cmd_sweep, "run SG over a list of alpha values")
    p.add_argument("--alpha", default=ALPHA_GRID)
    p.add_argument("--seeds", dest="seeds_list", help="comma-separated seeds")
    p = add("ablate", cmd_ablate, "paired alpha=0 / alpha=1 runs with per-epoch curves")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (0..N-1)")
    p = add("report", cmd_report, "aggregate run records into a mean/std CSV")
    p.add_argument("--runs", required=True, help="directory of run record JSON files")
    p.add_argument("--out")
    p = add("selftest", cmd_selftest, "run the built-in oracle and gradient checks")
    p.add_argument("--full", action="store_true", help="use the full seed counts")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SolverError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
