"""Command-line entry point: ``predsearch <group> <action> [options]``.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
All randomness derives from ``--seed``; every command that writes files also
writes ``manifest.json`` beside them.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    DATASETS,
    GVR_DEFAULTS,
    SyntheticOracle,
    collect_training_set,
    evaluate_topk,
    gradient_vs_random_seeds,
    load_tabular,
    repeat_seeds,
    run_nb201,
    run_nk_ablation,
    run_random_nb201,
    write_synthetic_nb201,
)
from .cost import anynet_cost_values
from .errors import (
    ArchParseError,
    BudgetExceeded,
    CheckpointError,
    EmptyPoolError,
    MembershipError,
    NonFiniteError,
    OracleMiss,
)
from .predictor import PredictorSpec, TrainingSample, load_checkpoint, save_checkpoint, train
from .report import emit_grid, emit_report, write_curves, write_manifest
from .search import DEFAULT_ALPHA_GRID, SearchConfig, alpha_grid, run_search
from .space import (
    SSS,
    TSS,
    arch_to_string,
    build_anynet_space,
    build_nb201_space,
    load_space,
    parse_arch,
    sample_random,
)

log = logging.getLogger("predsearch")

DATA_ENV = "PREDNAS_DATA"
PRESETS = {"anynet": build_anynet_space, "nb201": build_nb201_space}
DOMAIN_ERRORS = (
    ArchParseError,
    BudgetExceeded,
    CheckpointError,
    EmptyPoolError,
    MembershipError,
    NonFiniteError,
    OracleMiss,
    OSError,
    ValueError,
    KeyError,
)


class DomainError(Exception):
    pass


# -- helpers ------------------------------------------------------------------


def data_path(p):
    """Resolve ``p`` as given, else relative to ``$PREDNAS_DATA``."""
    if p is None:
        return None
    path = Path(p)
    if path.exists() or path.is_absolute():
        return path
    root = os.environ.get(DATA_ENV)
    if root and (Path(root) / path).exists():
        return Path(root) / path
    return path


def require_file(p, what):
    path = data_path(p)
    if path is None or not path.is_file():
        raise DomainError(f"{what} not found: {p}")
    return path


def get_space(spec):
    if spec in PRESETS:
        return PRESETS[spec](), None
    path = require_file(spec, "space file")
    return load_space(path), path


def csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


def dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def manifest(args, outputs, inputs=(), seeds=None, t0=None):
    outputs = [Path(o) for o in outputs]
    if not outputs:
        return
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifest(
        outputs[0].parent,
        args.command,
        flags,
        outputs=outputs,
        inputs=[p for p in inputs if p],
        seeds=seeds,
        wall_time=None if t0 is None else round(time.perf_counter() - t0, 3),
    )


def get_oracle(args, space):
    if getattr(args, "table", None):
        path = require_file(args.table, "tabular file")
        return load_tabular(path, space), path
    if space.kind == TSS:
        raise DomainError("a TSS oracle needs --table (see 'bench make-synthetic-nb201')")
    return SyntheticOracle(space, args.oracle_seed), None


SAMPLE_COLUMNS = ("arch", "performance", "cost")


def read_samples(path, space):
    """Training samples from CSV (``arch,performance,cost``) or a JSON array."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text())
    else:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(SAMPLE_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise DomainError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
    return [TrainingSample(parse_arch(space, r["arch"]), float(r["performance"]), float(r["cost"])) for r in rows]


def write_samples(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".json":
        dump_json(rows, path)
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SAMPLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "performance": repr(r["performance"]), "cost": repr(r["cost"])})


def split_out(out, default_prefix):
    """``--out`` may name a directory or a ``.csv`` report path; returns ``(dir, prefix)``."""
    out = Path(out)
    if out.suffix.lower() == ".csv":
        return out.parent, out.stem
    return out, default_prefix


# -- space ----------------------------------------------------------------------


def cmd_space_validate(args):
    space, _ = get_space(args.space)
    dump_json(
        {
            "name": space.name,
            "kind": space.kind,
            "encoding_shape": list(space.encoding_shape),
            "cardinality": space.cardinality(),
            "fingerprint": space.fingerprint(),
        }
    )
    return 0


def cmd_space_sample(args):
    space, path = get_space(args.space)
    rng = np.random.default_rng(args.seed)
    lines = [arch_to_string(space, sample_random(space, rng)) for _ in range(args.n)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        manifest(args, [args.out], [path], {"sample": args.seed})
    else:
        sys.stdout.write(text)
    return 0


# -- cost -----------------------------------------------------------------------


def cmd_cost_anynet(args):
    path = require_file(args.arch, "architecture file")
    obj = json.loads(path.read_text())
    try:
        d, w, g = obj["d"], obj["w"], obj["g"]
    except KeyError as exc:
        raise DomainError(f"{path}: missing key {exc.args[0]!r} (need d, w, g and optionally r)") from None
    r = obj.get("r", [1.0] * len(d))
    if not len(d) == len(w) == len(g) == len(r):
        raise DomainError(f"{path}: d, w, r, g must have the same length")
    flops, params = anynet_cost_values(d, w, r, g)
    dump_json({"flops": flops, "params": params})
    return 0


# -- collect / predictor --------------------------------------------------------


def cmd_collect(args):
    t0 = time.perf_counter()
    space, space_path = get_space(args.space)
    oracle, table = get_oracle(args, space)
    metric = args.metric if table else None
    samples = collect_training_set(space, oracle, args.n, args.seed, metric=metric)
    rows = [{"arch": arch_to_string(space, s.arch), "performance": s.performance, "cost": s.cost} for s in samples]
    write_samples(rows, args.out)
    manifest(args, [args.out], [space_path, table], {"collect": args.seed, "oracle": args.oracle_seed}, t0)
    return 0


def cmd_predictor_train(args):
    t0 = time.perf_counter()
    space, space_path = get_space(args.space)
    samples_path = require_file(args.samples, "samples file")
    samples = read_samples(samples_path, space)
    spec = PredictorSpec.for_space(space)
    pred, stats, history = train(spec, space, samples, args.seed, role=args.role, epochs=args.epochs, lr=args.lr)
    save_checkpoint(pred, args.out)
    log.info("trained %s predictor: %d params, final loss %.4g", args.role, pred.n_params(), history[-1])
    manifest(args, [args.out], [space_path, samples_path], {"train": args.seed}, t0)
    return 0


# -- search ---------------------------------------------------------------------


def load_predictor(path, space, what):
    return load_checkpoint(require_file(path, f"{what} checkpoint"), space)


def cmd_search_run(args):
    t0 = time.perf_counter()
    space, space_path = get_space(args.space)
    p_main = load_predictor(args.main, space, "main predictor")
    p_aux = load_predictor(args.aux, space, "aux predictor") if args.aux else None
    base = SearchConfig.for_nb201() if space.kind == TSS else SearchConfig()
    over = {
        k: v
        for k, v in dict(
            trajectories=args.trajectories,
            iterations=args.tmax,
            lr=args.lr,
            top_k=args.topk,
            delta=args.delta,
            alpha=args.alpha,
            curve_trajectories=args.curves,
        ).items()
        if v is not None
    }
    cfg = SearchConfig(**{**base.__dict__, **over, "seed": args.seed, "jobs": args.jobs})
    if space.kind == TSS and args.target_flops:
        raise DomainError("--target-flops applies to size search spaces only")
    if (cfg.alpha or args.alpha_grid) and p_aux is None:
        raise DomainError("a nonzero alpha needs --aux")
    out = Path(args.out)
    targets = args.target_flops or [None]
    if args.alpha_grid:
        if targets == [None]:
            raise DomainError("--alpha-grid needs at least one --target-flops")
        pools = alpha_grid(space, p_main, p_aux, targets, args.alpha_grid, cfg)
    else:
        pools = {f: run_search(space, p_main, p_aux, SearchConfig(**{**cfg.__dict__, "target_flops": f})) for f in targets}
    rows = []
    for f, pool in pools.items():
        for e in pool:
            rows.append({**e.to_json(space), "target_flops": f})
        for fail in pool.failures:
            log.warning("trajectory %(trajectory)d failed at iteration %(iteration)d: %(reason)s", fail)
    dump_json(rows, out)
    outputs = [out]
    if args.curves:
        curves = [c for pool in pools.values() for c in pool.curves]
        outputs.append(write_curves(curves, out.with_name(out.stem + "_curves.csv")))
    manifest(
        args,
        outputs,
        [space_path, data_path(args.main), data_path(args.aux)],
        {"search": args.seed, "derivation": "SeedSequence([seed, trajectory])"},
        t0,
    )
    log.info("wrote %d pool entries to %s (explored %d projections)", len(rows), out,
             sum(p.explored for p in pools.values()))
    return 0


def cmd_search_evaluate(args):
    t0 = time.perf_counter()
    space, space_path = get_space(args.space)
    pool_path = require_file(args.pool, "pool file")
    doc = json.loads(pool_path.read_text())
    oracle, table = get_oracle(args, space)
    sel = f"{args.dataset}_val" if table else None
    rep = f"{args.dataset}_test" if table else None
    by_target: dict = {}
    for e in doc:
        by_target.setdefault(e.get("target_flops"), []).append(_PoolRow(parse_arch(space, e["arch_string"]), e["arch_string"]))
    if not by_target:
        raise EmptyPoolError(f"{pool_path}: empty pool")
    results = []
    for f, entries in by_target.items():
        res = evaluate_topk(entries, oracle, args.k, sel, rep)
        res["target_flops"] = f
        results.append(res)
    dump_json(results, args.out)
    manifest(args, [args.out], [space_path, pool_path, table], {"oracle": args.oracle_seed}, t0)
    return 0


class _PoolRow:
    __slots__ = ("arch", "key")

    def __init__(self, arch, key):
        self.arch = arch
        self.key = key


# -- bench ----------------------------------------------------------------------


def _nb201_oracle(args):
    path = require_file(args.data, "tabular file")
    return load_tabular(path, build_nb201_space()), path


def _search_cfg_nb201(args):
    kw = {"jobs": 1}
    if args.lr is not None:
        kw["lr"] = args.lr
    return SearchConfig.for_nb201(**kw)


def _repeat_seed_doc(args, repeats):
    return {"master": args.seed, "per_repeat": {r: repeat_seeds(args.seed, r) for r in range(repeats)}}


def cmd_bench_nb201(args):
    t0 = time.perf_counter()
    oracle, table = _nb201_oracle(args)
    outputs = []
    for ds in args.dataset:
        report = run_nb201(
            oracle, ds, args.n, args.k, args.repeats, args.seed, _search_cfg_nb201(args), args.jobs, args.epochs
        )
        out_dir, prefix = split_out(args.out, "nb201")
        outputs += emit_report(report, out_dir, prefix=prefix if len(args.dataset) == 1 else f"{prefix}_{ds}")
        print(f"{ds}: mean {report.mean:.2f} std {report.std:.2f} over {report.repeats} repeats, "
              f"{report.budget} queries each")
    manifest(args, outputs, [table], _repeat_seed_doc(args, args.repeats), t0)
    return 0


def cmd_bench_random(args):
    t0 = time.perf_counter()
    oracle, table = _nb201_oracle(args)
    outputs = []
    out_dir, prefix = split_out(args.out, "random")
    for ds in args.dataset:
        report = run_random_nb201(oracle, ds, args.budget, args.repeats, args.seed)
        outputs += emit_report(report, out_dir, prefix=prefix if len(args.dataset) == 1 else f"{prefix}_{ds}")
        print(f"{ds}: mean {report.mean:.2f} std {report.std:.2f} over {report.repeats} repeats")
    manifest(args, outputs, [table], _repeat_seed_doc(args, args.repeats), t0)
    return 0


def cmd_bench_ablate(args):
    t0 = time.perf_counter()
    oracle, table = _nb201_oracle(args)
    grid = run_nk_ablation(
        oracle, args.ns, args.ks, args.repeats, args.seed, args.dataset[0], _search_cfg_nb201(args), args.jobs, args.epochs
    )
    out_dir, prefix = split_out(args.out, "ablation")
    outputs = emit_grid(grid, out_dir, prefix=prefix)
    for (n, k), rep in sorted(grid.items()):
        print(f"N={n:3d} K={k:3d}: {rep.mean:.2f} +- {rep.std:.2f}")
    manifest(args, outputs, [table], _repeat_seed_doc(args, args.repeats), t0)
    return 0


def cmd_bench_make_table(args):
    n = write_synthetic_nb201(args.out, args.seed)
    manifest(args, [args.out], seeds={"table": args.seed})
    print(f"wrote {n} rows to {args.out}")
    return 0


def cmd_bench_gvr(args):
    t0 = time.perf_counter()
    space = build_anynet_space()
    cfg = SearchConfig(trajectories=args.trajectories, iterations=args.tmax, lr=args.lr, alpha=args.alpha)
    rows = gradient_vs_random_seeds(space, args.seeds, args.jobs, n_train=args.n, k=args.k, search_cfg=cfg)
    wins = sum(r["gradient_best"] >= r["random_best"] for r in rows)
    for r in rows:
        print(f"seed {r['seed']}: gradient {r['gradient_best']:.3f}  random {r['random_best']:.3f}")
    print(f"gradient >= random in {wins} of {len(rows)} seeds")
    if args.out:
        dump_json({"rows": rows, "wins": wins}, args.out)
        manifest(args, [args.out], seeds={"oracle_seeds": args.seeds}, t0=t0)
    return 0


# -- parser -----------------------------------------------------------------------


def _add(sub, name, func, help):
    p = sub.add_parser(name, help=help, description=help)
    p.set_defaults(func=func, command=None)
    return p


def build_parser():
    ap = argparse.ArgumentParser(prog="predsearch", description="Predictor-guided gradient architecture search.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    groups = ap.add_subparsers(dest="group", metavar="{space,cost,collect,predictor,search,bench}")
    jobs_default = os.cpu_count() or 1

    # space
    g = groups.add_parser("space", help="inspect search spaces").add_subparsers(dest="action", required=True)
    p = _add(g, "validate", cmd_space_validate, "check a space definition and print its summary")
    p.add_argument("space", help="preset (anynet, nb201) or space JSON file")
    p = _add(g, "sample", cmd_space_sample, "print uniformly sampled architectures")
    p.add_argument("space")
    p.add_argument("-n", "--n", dest="n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    # cost
    g = groups.add_parser("cost", help="analytic FLOPs / parameter counts").add_subparsers(dest="action", required=True)
    p = _add(g, "anynet", cmd_cost_anynet, "FLOPs and params of an AnyNet architecture JSON")
    p.add_argument("--arch", required=True, help='JSON with per-stage lists "d", "w", "g" (group counts), optional "r"')

    # collect
    p = _add(groups, "collect", cmd_collect, "query N distinct random architectures from an oracle")
    p.add_argument("--space", required=True)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", "--table", dest="table", help="tabular benchmark CSV (otherwise a synthetic oracle)")
    p.add_argument("--oracle-seed", type=int, default=0, help="seed of the synthetic oracle")
    p.add_argument("--metric", default="cifar100_val", help="tabular column used as performance")
    p.add_argument("--out", required=True, help="samples file (.csv, or .json)")

    # predictor
    g = groups.add_parser("predictor", help="train predictors").add_subparsers(dest="action", required=True)
    p = _add(g, "train", cmd_predictor_train, "train a main (performance) or aux (cost) predictor")
    p.add_argument("--space", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--role", choices=("main", "aux"), default="main")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", required=True)

    # search
    g = groups.add_parser("search", help="gradient search over a trained predictor").add_subparsers(
        dest="action", required=True
    )
    p = _add(g, "run", cmd_search_run, "projected gradient search; writes pool.json")
    p.add_argument("--space", required=True)
    p.add_argument("--main", required=True, help="main predictor checkpoint")
    p.add_argument("--aux", help="aux (cost) predictor checkpoint")
    p.add_argument("--target-flops", type=float, action="append", help="target FLOPs; repeat for several")
    p.add_argument("--delta", type=float, help="window half-width (default 5%% of the target)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-grid", nargs="?", const=list(DEFAULT_ALPHA_GRID), type=csv_list(float),
                   help="grid-search alpha (default grid %s)" % ",".join(map(str, DEFAULT_ALPHA_GRID)))
    p.add_argument("--tmax", type=int, help="iterations per trajectory")
    p.add_argument("--trajectories", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--curves", type=int, help="log per-iteration curves for the first N trajectories")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=jobs_default)
    p.add_argument("--out", required=True, help="pool file (JSON array of entries)")
    p = _add(g, "evaluate", cmd_search_evaluate, "query the top-K of a pool on an oracle")
    p.add_argument("--space", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--data", "--table", dest="table")
    p.add_argument("--oracle-seed", type=int, default=0)
    p.add_argument("--dataset", choices=DATASETS, default="cifar100")
    p.add_argument("--out", required=True)

    # bench
    g = groups.add_parser("bench", help="benchmark protocols").add_subparsers(dest="action", required=True)

    def nb201_common(p, repeats=15):
        p.add_argument("--data", "--table", dest="data", default="nb201.csv",
                       help=f"tabular CSV (also looked up under ${DATA_ENV})")
        p.add_argument("--dataset", "--datasets", dest="dataset", type=csv_list(str), default=["cifar100"],
                       help="comma-separated subset of " + ",".join(DATASETS))
        p.add_argument("--repeats", type=int, default=repeats)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory or report .csv path")

    p = _add(g, "nb201", cmd_bench_nb201, "N samples + top-K protocol on the tabular benchmark")
    nb201_common(p)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--jobs", type=int, default=jobs_default)
    p = _add(g, "random-baseline", cmd_bench_random, "pure random search with the same query budget")
    nb201_common(p)
    p.add_argument("--budget", type=int, default=70)
    p = _add(g, "ablate-nk", cmd_bench_ablate, "grid over training-set size N and top K")
    nb201_common(p)
    p.add_argument("--ns", type=csv_list(int), default=[10, 20, 30, 40, 50])
    p.add_argument("--ks", type=csv_list(int), default=[10, 20, 30, 40, 50])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--jobs", type=int, default=jobs_default)
    p = _add(g, "make-synthetic-nb201", cmd_bench_make_table, "write a synthetic full-coverage stand-in table")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p = _add(g, "gradient-vs-random", cmd_bench_gvr, "gradient search vs predictor-filtered random search")
    p.add_argument("--seeds", type=csv_list(int), default=[0, 1, 2, 3, 4])
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--trajectories", type=int, default=GVR_DEFAULTS["trajectories"])
    p.add_argument("--tmax", type=int, default=GVR_DEFAULTS["iterations"])
    p.add_argument("--lr", type=float, default=GVR_DEFAULTS["lr"])
    p.add_argument("--alpha", type=float, default=GVR_DEFAULTS["alpha"])
    p.add_argument("--jobs", type=int, default=jobs_default)
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    args.command = " ".join(x for x in (args.group, getattr(args, "action", None)) if x)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    for name in ("dataset",):
        val = getattr(args, name, None)
        for ds in val if isinstance(val, list) else []:
            if ds not in DATASETS:
                parser.error(f"unknown dataset {ds!r}; choose from {', '.join(DATASETS)}")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (DomainError, *DOMAIN_ERRORS) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"predsearch: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
