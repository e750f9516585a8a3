"""CSV / JSON report writers and the per-run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def summary_schema() -> dict:
    return json.loads(resources.files("predsearch.data").joinpath("report_summary.schema.json").read_text())


def _fmt(x):
    return repr(float(x))


def emit_report(report, out_dir, curves=None, prefix="report"):
    """Write ``<prefix>.csv`` (one row per repeat + mean/std rows), ``<prefix>.json``
    and, when ``curves`` is given, ``<prefix>_curves.csv``. Returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    csv_path = out / f"{prefix}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "dataset", "n", "k", "value", "select_value", "queries", "arch"])
        for i, (v, s, q, a) in enumerate(zip(report.values, report.select_values, report.queries, report.archs)):
            w.writerow([i, report.dataset, report.n, report.k, _fmt(v), _fmt(s), q, a])
        w.writerow(["mean", report.dataset, report.n, report.k, _fmt(report.mean), "", "", ""])
        w.writerow(["std", report.dataset, report.n, report.k, _fmt(report.std), "", "", ""])
    paths.append(csv_path)
    json_path = out / f"{prefix}.json"
    json_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    paths.append(json_path)
    if curves is not None:
        paths.append(write_curves(curves, out / f"{prefix}_curves.csv"))
    return paths


def write_curves(curves, path):
    """Per-iteration trace rows: trajectory, iteration, score, flops, in_window, arch."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory", "iteration", "score", "flops", "in_window", "arch"])
        for c in curves:
            flops = "" if c.get("flops") is None else c["flops"]
            w.writerow([c["trajectory"], c["iteration"], _fmt(c["score"]), flops, int(bool(c["in_window"])), c["arch"]])
    return Path(path)


def emit_grid(grid, out_dir, prefix="ablation"):
    """CSV of an ``{(n, k): ExperimentReport}`` grid plus a JSON dump."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{prefix}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "k", "repeats", "mean", "std", "std_undefined", "values"])
        for (n, k), rep in sorted(grid.items()):
            w.writerow([n, k, rep.repeats, _fmt(rep.mean), _fmt(rep.std), int(rep.single_repeat),
                        ";".join(_fmt(v) for v in rep.values)])
    json_path = out / f"{prefix}.json"
    json_path.write_text(
        json.dumps([rep.summary() for _, rep in sorted(grid.items())], indent=2, sort_keys=True) + "\n"
    )
    return [csv_path, json_path]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, subcommand, args: dict, outputs=(), inputs=(), seeds=None, wall_time=None):
    """Record how files in ``out_dir`` were produced.

    One ``manifest.json`` per directory. Each run is one record; a new run
    replaces earlier records that wrote any of the same outputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MANIFEST_NAME
    outputs = sorted(Path(o).name for o in outputs)
    record = {
        "subcommand": subcommand,
        "args": {k: v for k, v in sorted(args.items())},
        "seeds": seeds or {},
        "inputs": {os.fspath(p): file_digest(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {name: file_digest(out / name) for name in outputs if (out / name).is_file()},
        "version": __version__,
        "python": sys.version.split()[0],
        "wall_time_s": wall_time,
    }
    runs = []
    if path.is_file():
        try:
            runs = json.loads(path.read_text()).get("runs", [])
        except (ValueError, AttributeError):
            runs = []
    runs = [r for r in runs if not set(r.get("outputs", {})) & set(outputs)]
    runs.append(record)
    manifest = {"tool": "predsearch", "version": __version__, "runs": runs}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path
