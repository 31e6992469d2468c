"""Desk-scale comparison runs (500 epochs x 1000 steps, 3 seeds).

    python -m latentdrive.desk --out results/desk [--stage arch|inference|sweep|all]

Every stage is resumable: finished cells (those with ``ckpt_final``) are reused.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from .harness import (ExperimentPlan, InferenceStudy, SweepAxis, SweepSpec, Variant,
                      load_bundle, run_experiment, run_inference_study, run_sweep)
from .nn.networks import NetKind
from .trainer import Mode

SEEDS = [0, 1, 2]
EPOCHS = 500
STEPS = 1000
P_VALUES = [0.1, 0.3, 0.5, 0.7, 0.9]
L_VALUES = [0.1, 0.2, 0.3, 0.4]
SWEEP_EPISODES = 100
STUDY_PASSES = 2

ARCH_VARIANTS = [Variant(NetKind.LSTM_NET, NetKind.LSTM_NET, m) for m in Mode]


def arch_plan(epochs=EPOCHS, steps=STEPS, seeds=SEEDS) -> ExperimentPlan:
    return ExperimentPlan(variants=list(ARCH_VARIANTS), seeds=list(seeds), epochs=epochs,
                          steps_per_epoch=steps, eval_every=25, eval_episodes=50)


def study(epochs=EPOCHS, steps=STEPS, seeds=SEEDS) -> InferenceStudy:
    return InferenceStudy(seeds=list(seeds), epochs=epochs, steps_per_epoch=steps, passes=STUDY_PASSES)


def sweep_checkpoints(arch_dir: Path, seed: int) -> dict:
    return {v.name: arch_dir / "runs" / f"{v.name}_seed{seed}" / "ckpt_final.npz" for v in ARCH_VARIANTS}


def run_sweeps(arch_dir: Path, out: Path, episodes=SWEEP_EPISODES, seeds=SEEDS):
    out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        paths = sweep_checkpoints(arch_dir, seed)
        bundles = {name: load_bundle(p) for name, p in paths.items()}
        for axis, values in ((SweepAxis.LATENT_DISTRIBUTION, P_VALUES), (SweepAxis.GAP_INTERVAL_LENGTH, L_VALUES)):
            target = out / f"{axis.value.lower()}_seed{seed}.csv"
            if target.exists():
                continue
            spec = SweepSpec(axis, values, [str(p) for p in paths.values()], episodes, seed)
            run_sweep(spec, target, bundles=bundles)
            logging.info("wrote %s", target)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("--stage", choices=["arch", "inference", "sweep", "all"], default="all")
    ap.add_argument("--epochs", type=int, default=EPOCHS)
    ap.add_argument("--steps", type=int, default=STEPS)
    ap.add_argument("--seeds", type=int, nargs="+", default=SEEDS)
    ap.add_argument("--sweep-episodes", type=int, default=SWEEP_EPISODES)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    if args.stage in ("arch", "all"):
        run_experiment(arch_plan(args.epochs, args.steps, args.seeds), out / "arch")
    if args.stage in ("inference", "all"):
        run_inference_study(study(args.epochs, args.steps, args.seeds), out / "inference")
    if args.stage in ("sweep", "all"):
        run_sweeps(out / "arch", out / "sweep", args.sweep_episodes, args.seeds)


if __name__ == "__main__":
    main()
