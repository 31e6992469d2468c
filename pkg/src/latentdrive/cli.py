"""Command-line interface: ``latentdrive {train,eval,sweep,dump,report,selfcheck}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ENV_PREFIX, RunConfig, load_config, write_resolved
from .errors import CheckpointError, ConfigError, InputDomainError

log = logging.getLogger("latentdrive")

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_INPUT = 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable (e.g. train.mode=SHARED)")
    p.add_argument("--out", help="output directory (default: config 'out')")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    p.add_argument("--workers", type=int, default=1, help="parallel (variant, seed) jobs")
    p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="latentdrive",
        description="Latent-style inference for merging at a T-intersection.",
        epilog=f"Environment variables {ENV_PREFIX}A__B=v act like --set a.b=v.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent, or every cell of the experiment block")
    _common(p)
    p.add_argument("--plan", action="store_true", help="run the [experiment] block (variants x seeds)")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("sweep", help="robustness sweep over one environment axis")
    _common(p)
    p.add_argument("--checkpoint", action="append", default=[], help="repeatable")

    p = sub.add_parser("dump", help="per-step interpretability log (JSON lines)")
    _common(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("report", help="render PNG plots from metrics / sweep CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("selfcheck", help="gradient, GAE, determinism and IDM checks")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return ap


def _resolve(args) -> tuple:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f'out="{args.out}"')
    cfg = load_config(args.config, overrides)
    out = Path(cfg.out)
    write_resolved(cfg, out)
    return cfg, out


def _bundle_from_config(cfg: RunConfig):
    from .trainer import AgentBundle
    return AgentBundle.build(cfg.train.mode, cfg.network_spec("policy"), cfg.network_spec("inference"),
                             cfg.train, cfg.seed)


def _plots(csvs, out: Path, no_plots: bool, name=None):
    if no_plots:
        return []
    from .plotting import render_plots
    files = render_plots(csvs, out / "plots", name=name)
    for f in files:
        log.info("wrote %s", f)
    return files


def cmd_train(args) -> int:
    from .harness import run_experiment, train_run
    cfg, out = _resolve(args)
    if args.plan:
        rows = run_experiment(cfg.experiment_plan(), out, cfg.world, workers=args.workers)
        for r in rows:
            print(f"{r['variant']} seed={r['seed']} success_rate={r['success_rate']:.3f} "
                  f"inference_accuracy={r['inference_accuracy']:.3f}"
                  + (f" FAILED {r['error']}" if r.get("error") else ""))
        _plots(sorted((out / "curves").glob("*.csv")), out, args.no_plots)
        return 0 if not any(r.get("error") for r in rows) else 1
    bundle = _bundle_from_config(cfg)
    log.info("mode %s, %d parameters", bundle.mode.value, bundle.parameter_count())

    def progress(st):
        log.info("epoch %d return %.3f train_success %.2f eval_success %s accuracy %.3f",
                 st.epoch, st.mean_return, st.train_success_rate, st.eval_success_rate,
                 st.inference_accuracy)

    st = train_run(bundle, cfg.world, cfg.train, out, progress=progress)
    print(f"epochs={cfg.train.epochs} eval_success_rate={st.eval_success_rate:.3f} "
          f"inference_accuracy={st.inference_accuracy:.3f} out={out}")
    _plots([out / "metrics.csv"], out, args.no_plots)
    return 0


def cmd_eval(args) -> int:
    from .harness import load_bundle
    from .trainer import evaluate
    cfg, out = _resolve(args)
    path = args.checkpoint or cfg.eval.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint or eval.checkpoint)", "eval.checkpoint")
    bundle = load_bundle(path, expected=_bundle_from_config(cfg))
    res = evaluate(bundle, cfg.world, cfg.eval.episodes, np.random.default_rng(cfg.seed))
    row = {"checkpoint": str(path), "episodes": res.episodes, "success_rate": res.success_rate,
           "inference_accuracy": res.inference_accuracy, "mean_return": res.mean_return}
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    print(f"success_rate={res.success_rate:.4f} inference_accuracy={res.inference_accuracy:.4f} "
          f"mean_return={res.mean_return:.4f}")
    return 0


def cmd_sweep(args) -> int:
    from .harness import SweepSpec, run_sweep
    cfg, out = _resolve(args)
    ckpts = args.checkpoint or cfg.sweep.checkpoints
    spec = SweepSpec(cfg.sweep.axis, list(cfg.sweep.values), list(ckpts), cfg.sweep.episodes, cfg.seed)
    target = out / f"{spec.axis.value.lower()}_seed{cfg.seed}.csv"
    rows = run_sweep(spec, target, cfg.world)
    for r in rows:
        print(f"{r['axis_value']} {r['variant']} success_rate={r['success_rate']:.3f}")
    _plots([target], out, args.no_plots)
    return 0


def cmd_dump(args) -> int:
    from .harness import dump_interpretability
    cfg, out = _resolve(args)
    path = args.checkpoint or cfg.dump.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint or dump.checkpoint)", "dump.checkpoint")
    n = dump_interpretability(path, cfg.world, cfg.dump.episodes, out / "interpretability.jsonl", cfg.seed)
    print(f"records={n} episodes={cfg.dump.episodes} out={out / 'interpretability.jsonl'}")
    return 0


def cmd_report(args) -> int:
    from .plotting import render_plots
    for f in render_plots(args.csv, Path(args.out)):
        print(f)
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    return 0 if run_selfcheck(args.corrupt) else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "dump": cmd_dump,
            "report": cmd_report, "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except InputDomainError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
