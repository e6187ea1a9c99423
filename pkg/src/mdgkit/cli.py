"""Command-line entry points: generate / train / sweep / report / ablate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datagen, harness


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.ExperimentConfig.from_json(args.config)
    else:
        cfg = harness.default_experiment_config()
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "test_domain", None) is not None:
        cfg.test_domain = args.test_domain if args.test_domain == "all" else int(args.test_domain)
    if getattr(args, "seeds", None):
        cfg.seeds = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "method", None):
        if args.method not in harness.METHODS:
            raise ValueError(f"--method must be one of {harness.METHODS}")
        cfg.methods = {args.method: dict(cfg.methods.get(args.method, {}))}
    overrides = {
        "mrs": ("dreame", "mrs_strategy"),
        "eta": ("dreame", "eta"),
        "M": ("dreame", "M"),
        "lambda_reg": ("groupdro_pp", "lambda_reg"),
        "gamma": ("groupdro_pp", "gamma"),
        "eta_q": ("groupdro_pp", "eta_q"),
    }
    for flag, (method, key) in overrides.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if method not in cfg.methods:
            raise ValueError(f"--{flag.replace('_', '-')} applies to method {method!r}, "
                             f"which is not part of this experiment")
        cfg.methods[method] = dict(cfg.methods[method])
        cfg.methods[method][key] = value
    return cfg


def _add_common_flags(p):
    p.add_argument("--config", metavar="PATH", help="experiment config JSON")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--method", help=f"restrict to one method {harness.METHODS}")
    p.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
    p.add_argument("--test-domain", dest="test_domain", help='held-out domain index or "all"')
    p.add_argument("--mrs", help="relevance strategy for dreame")
    p.add_argument("--eta", type=float, help="meta-loss weight for dreame")
    p.add_argument("--M", type=int, help="ensemble size for dreame")
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float, help="regularizer weight")
    p.add_argument("--gamma", type=float, help="regularizer sharpness")
    p.add_argument("--eta-q", dest="eta_q", type=float, help="group-weight step size")


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(harness.to_jsonable(payload), indent=2, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    dataset = harness.build_dataset(cfg.dataset)
    out = Path(args.file) if args.file else _out_dir(cfg) / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.save_jsonl(dataset, out)
    print(f"wrote {dataset.n} samples across {dataset.num_domains} domains to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if len(cfg.methods) != 1:
        raise ValueError("train runs exactly one method; pass --method")
    if cfg.test_domain == "all":
        raise ValueError("train runs exactly one fold; pass --test-domain N")
    method = next(iter(cfg.methods))
    fold = int(cfg.test_domain)
    seed = cfg.seeds[0]
    run = harness.run_single(cfg, method, fold, seed)
    out = _out_dir(cfg) / f"run_{fold}_{seed}.json"
    _write_json(out, run)
    acc = run["test_accuracy"][cfg.selection]
    print(f"{method} fold={fold} seed={seed}: test accuracy {acc:.4f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)

    def progress(run):
        tag = f"{run['method']} fold={run['test_domain']} seed={run['seed']}"
        if "error" in run:
            print(f"  {tag}: FAILED ({run['error']})", file=sys.stderr)
        else:
            print(f"  {tag}: {run['test_accuracy'][cfg.selection]:.4f}")

    table, runs = harness.run_leave_one_out(cfg, progress=progress)
    for run in runs:
        _write_json(out / f"run_{run['method']}_{run['test_domain']}_{run['seed']}.json", run)
    table.to_csv(out / "results.csv")
    text = table.render_text()
    (out / "results.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.runs) if args.runs else Path(cfg.out_dir)
    runs = []
    for path in sorted(run_dir.glob("run_*.json")):
        runs.append(json.loads(path.read_text()))
    if not runs:
        raise ValueError(f"no run_*.json files under {run_dir}")
    table = harness.aggregate_results(runs, cfg.selection)
    table.to_csv(run_dir / "results.csv")
    print(table.render_text())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if "dreame" not in cfg.methods:
        cfg.methods["dreame"] = {}
    out = _out_dir(cfg)
    if args.what == "eta":
        etas = [float(v) for v in args.values.split(",")] if args.values else (0.2, 0.4, 0.6, 0.8, 1.0)
        table = harness.run_eta_ablation(cfg, etas)
    else:
        sizes = [int(v) for v in args.values.split(",")] if args.values else (2, 3, 4)
        table = harness.run_ensemble_size_ablation(cfg, sizes)
    table.to_csv(out / f"ablation_{args.what}.csv")
    print(table.render_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdgkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the configured dataset as JSON lines")
    _add_common_flags(p)
    p.add_argument("--file", help="output file (default <out>/dataset.jsonl)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one (method, fold, seed)")
    _add_common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="full leave-one-domain-out grid")
    _add_common_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run_*.json files into a table")
    _add_common_flags(p)
    p.add_argument("--runs", help="directory of run_*.json files (default: out dir)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="meta-loss-weight or ensemble-size sweep")
    _add_common_flags(p)
    p.add_argument("--what", choices=("eta", "ensemble-size"), required=True)
    p.add_argument("--values", help="comma-separated sweep values")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
