"""Learning-curve and sweep figures from the metrics / sweep CSVs.

Curves from several seeds of one variant are drawn as the across-seed mean with
a min-max band; a single seed gives a plain line.
"""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InputDomainError  # noqa: E402
from .harness import METRIC_FIELDS, SWEEP_FIELDS  # noqa: E402

CURVE_METRICS = ("eval_success_rate", "inference_accuracy")
SEED_RE = re.compile(r"_seed(\d+)$")


class CsvParseError(InputDomainError):
    """Malformed metrics or sweep CSV; the message names the file and row."""


def _parse(path: Path, required: tuple, numeric: tuple) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvParseError(f"{path}: empty file")
        missing = [c for c in required if c not in header]
        if missing:
            raise CsvParseError(f"{path}: row 1 (header) lacks columns {missing}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise CsvParseError(f"{path}: row {lineno} has {len(raw)} fields, expected {len(header)}")
            row = dict(zip(header, raw))
            for c in numeric:
                v = row.get(c, "")
                try:
                    row[c] = float(v) if v != "" else math.nan
                except ValueError:
                    raise CsvParseError(f"{path}: row {lineno} column {c!r} is not numeric: {v!r}") from None
            rows.append(row)
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    return rows


def _curve_label(path: Path) -> tuple:
    m = SEED_RE.search(path.stem)
    if m:
        return path.stem[:m.start()], int(m.group(1))
    if path.stem == "metrics":  # runs/<variant>_seed<k>/metrics.csv
        return _curve_label(path.parent.with_suffix(".csv"))
    return path.stem, 0


def _band(ax, xs_per_seed: list, ys_per_seed: list, label: str):
    grid = sorted(set().union(*[set(x) for x in xs_per_seed]))
    table = np.full((len(ys_per_seed), len(grid)), np.nan)
    pos = {x: i for i, x in enumerate(grid)}
    for k, (xs, ys) in enumerate(zip(xs_per_seed, ys_per_seed)):
        for x, y in zip(xs, ys):
            table[k, pos[x]] = y
    keep = ~np.all(np.isnan(table), axis=0)
    grid = np.asarray(grid)[keep]
    table = table[:, keep]
    mean = np.nanmean(table, axis=0)
    (line,) = ax.plot(grid, mean, label=label, marker="o" if len(grid) < 25 else None, ms=3)
    if len(ys_per_seed) > 1:
        ax.fill_between(grid, np.nanmin(table, axis=0), np.nanmax(table, axis=0),
                        color=line.get_color(), alpha=0.2)
    return line


def plot_curves(paths: list, out_dir, metrics=CURVE_METRICS, name: str = "curves") -> list:
    out_dir = Path(out_dir)
    parsed = {Path(p): _parse(Path(p), ("epoch",), tuple(METRIC_FIELDS)) for p in paths}
    groups = defaultdict(list)
    for p, rows in parsed.items():
        groups[_curve_label(p)[0]].append(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        for variant, runs in sorted(groups.items()):
            xs, ys = [], []
            for rows in runs:
                pts = [(r["epoch"], r[metric]) for r in rows if not math.isnan(r[metric])]
                xs.append([p[0] for p in pts])
                ys.append([p[1] for p in pts])
            if any(xs):
                _band(ax, xs, ys, variant)
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric.replace("_", " "))
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        f = out_dir / f"{name}_{metric}.png"
        fig.savefig(f, dpi=120)
        plt.close(fig)
        files.append(f)
    return files


def plot_sweep(paths: list, out_dir, name: str = "sweep") -> list:
    out_dir = Path(out_dir)
    rows = []
    for p in paths:
        rows += _parse(Path(p), SWEEP_FIELDS, ("axis_value", "seed", "success_rate",
                                               "inference_accuracy", "relative_success"))
    metric = "relative_success" if any(not math.isnan(r["relative_success"]) for r in rows) else "success_rate"
    by_variant = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_variant[r["variant"]][r["seed"]].append((r["axis_value"], r[metric]))
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, seeds in sorted(by_variant.items()):
        xs = [[p[0] for p in sorted(v)] for v in seeds.values()]
        ys = [[p[1] for p in sorted(v)] for v in seeds.values()]
        _band(ax, xs, ys, variant)
    ax.set_xlabel(Path(paths[0]).stem.rsplit("_seed", 1)[0].replace("_", " "))
    ax.set_ylabel(metric.replace("_", " "))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    f = out_dir / f"{name}.png"
    fig.savefig(f, dpi=120)
    plt.close(fig)
    return [f]


def render_plots(csv_paths: list, out_dir, name: str | None = None) -> list:
    """Render every CSV (metrics curves or sweep tables) to PNGs in ``out_dir``.

    All inputs are parsed before anything is written, so a malformed file
    leaves no output behind.
    """
    if not csv_paths:
        raise InputDomainError("no CSV files given")
    curves, sweeps = [], []
    for p in map(Path, csv_paths):
        with open(p, newline="") as fh:
            header = next(csv.reader(fh), None)
        if header is None:
            raise CsvParseError(f"{p}: empty file")
        (sweeps if "axis_value" in header else curves).append(p)
    for p in curves:
        _parse(p, ("epoch",), tuple(METRIC_FIELDS))
    for p in sweeps:
        _parse(p, SWEEP_FIELDS, ("axis_value", "seed", "success_rate", "inference_accuracy", "relative_success"))
    files = []
    if curves:
        files += plot_curves(curves, out_dir, name=name or "curves")
    if sweeps:
        by_axis = defaultdict(list)
        for p in sweeps:
            by_axis[p.stem.rsplit("_seed", 1)[0]].append(p)
        for axis, ps in sorted(by_axis.items()):
            files += plot_sweep(ps, out_dir, name=f"{name}_{axis}" if name else axis)
    return files
