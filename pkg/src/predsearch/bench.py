"""Ground-truth oracles, sample collection, baselines and experiment protocols."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cost import anynet_cost_values, split_stages
from .errors import BudgetExceeded, OracleMiss
from .predictor import PredictorSpec, TrainingSample, train
from .search import SearchConfig, run_search, search_all
from .space import (
    NB201_OPS,
    SSS,
    TSS,
    DiscreteArch,
    SpaceDef,
    arch_to_string,
    build_nb201_space,
    encode,
    parse_arch,
    sample_random,
)

log = logging.getLogger(__name__)

TABULAR_COLUMNS = (
    "arch",
    "cifar10_val",
    "cifar10_test",
    "cifar100_val",
    "cifar100_test",
    "in16_val",
    "in16_test",
    "flops",
    "params",
)
DATASETS = ("cifar10", "cifar100", "in16")


# -- oracles ------------------------------------------------------------------


class TabularOracle:
    """Precomputed metrics keyed by canonical architecture string."""

    kind = "tabular"

    def __init__(self, space: SpaceDef, rows: dict):
        self.space = space
        self.rows = rows

    def query(self, arch: DiscreteArch) -> dict:
        key = arch_to_string(self.space, arch)
        try:
            return self.rows[key]
        except KeyError:
            raise OracleMiss(key) from None

    def performance(self, arch, metric="cifar100_val"):
        return self.query(arch)[metric]

    def cost(self, arch):
        return self.query(arch)["flops"]


def load_tabular(csv_path, space: SpaceDef) -> TabularOracle:
    rows = {}
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = [c for c in TABULAR_COLUMNS if c not in (reader.fieldnames or ())]
        if missing_cols:
            raise ValueError(f"{csv_path}: missing columns {missing_cols}")
        for lineno, rec in enumerate(reader, start=2):
            arch = parse_arch(space, rec["arch"])
            key = arch_to_string(space, arch)
            if key in rows:
                raise ValueError(f"{csv_path}:{lineno}: duplicate architecture {key}")
            rows[key] = {c: float(rec[c]) for c in TABULAR_COLUMNS[1:]}
    if space.kind == TSS:
        expected = space.cardinality()
        if len(rows) != expected:
            for ops in itertools.product(range(space.n_selectable), repeat=len(space.interior_nodes)):
                key = arch_to_string(space, DiscreteArch(ops))
                if key not in rows:
                    raise ValueError(f"{csv_path}: {expected - len(rows)} architectures missing, first: {key}")
    return TabularOracle(space, rows)


class SyntheticOracle:
    """Smooth seeded test function over a size-space encoding.

    ``F(x) = 100 - 40*|x - x_opt|^2 + sum_j a_j cos(w_j . x + p_j)`` with
    ``sum_j a_j = 1``, so the cosine term stays within ``[-1, 1]``. Cost is the
    analytic FLOPs count for AnyNet, otherwise a seeded positive linear form.
    """

    kind = "synthetic"
    n_modes = 5

    def __init__(self, space: SpaceDef, seed):
        if space.kind != SSS:
            raise ValueError("synthetic oracle needs a size search space")
        self.space = space
        rng = np.random.default_rng(seed)
        d = space.encoding_shape[0]
        self.optimum = rng.uniform(0.2, 0.8, size=d)
        self.freqs = rng.normal(scale=2.0, size=(self.n_modes, d))
        self.phases = rng.uniform(0.0, 2 * math.pi, size=self.n_modes)
        amps = rng.uniform(0.5, 1.0, size=self.n_modes)
        self.amps = amps / amps.sum()
        self.cost_weights = rng.uniform(0.5, 1.5, size=d)

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        diff = x - self.optimum
        waves = np.cos(x @ self.freqs.T + self.phases) @ self.amps
        return 100.0 - 40.0 * (diff * diff).sum(axis=-1) + waves

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        s = np.sin(x @ self.freqs.T + self.phases) * self.amps
        return -80.0 * (x - self.optimum) - s @ self.freqs

    def performance(self, arch, metric=None):
        return float(self.value(encode(self.space, arch)))

    def cost(self, arch):
        if self.space.name == "anynet":
            return float(anynet_cost_values(*split_stages(self.space, arch))[0])
        return float(1.0 + encode(self.space, arch) @ self.cost_weights)

    def query(self, arch) -> dict:
        return {"performance": self.performance(arch), "flops": self.cost(arch)}


def synthetic_oracle(space: SpaceDef, seed) -> SyntheticOracle:
    return SyntheticOracle(space, seed)


class FunctionPredictor:
    """Predictor-shaped wrapper around a closed-form function and its gradient."""

    def __init__(self, space, fn, grad):
        self.space = space
        self.fn = fn
        self.gradient = grad

    def value_and_grad(self, X):
        return self.fn(X), self.gradient(X)

    def forward(self, X, train=False, rng=None):
        return self.fn(X)

    def predict_denorm(self, X):
        return self.fn(X)


def quadratic_predictor(space: SpaceDef, target):
    """``-|x - target|^2``: maximised exactly at ``target``."""
    target = np.asarray(target, dtype=np.float64)
    return FunctionPredictor(
        space,
        lambda X: -((np.asarray(X) - target) ** 2).sum(axis=-1),
        lambda X: -2.0 * (np.asarray(X) - target),
    )


class QueryCounter:
    """Oracle wrapper that counts queries and refuses to exceed a budget."""

    def __init__(self, oracle, budget=None):
        self.oracle = oracle
        self.budget = budget
        self.count = 0

    def query(self, arch):
        if self.budget is not None and self.count >= self.budget:
            raise BudgetExceeded(f"query budget of {self.budget} exhausted")
        self.count += 1
        return self.oracle.query(arch)


# -- synthetic NAS-Bench-201 stand-in ------------------------------------------

_OP_STRENGTH = {"none": 0.0, "skip_connect": 0.2, "nor_conv_1x1": 0.6, "nor_conv_3x3": 1.0, "avg_pool_3x3": 0.3}
# input->output paths through the cell, as indices into the six edge slots
_CELL_PATHS = ((3,), (0, 4), (1, 5), (0, 2, 5))
_RANGES = {"cifar10": (55.0, 94.4, 10.0), "cifar100": (20.0, 73.5, 1.0), "in16": (10.0, 47.3, 0.83)}


def synthetic_nb201_rows(seed=0):
    """A full 15625-row table with NAS-Bench-201-like structure (not real data).

    Accuracy rises with the number of live input->output paths and the
    convolution content along them, saturates, and carries seeded per-arch
    noise. Cells with no live path sit at chance level.
    """
    space = build_nb201_space()
    rng = np.random.default_rng(seed)
    all_ops = list(itertools.product(range(5), repeat=6))
    quality = np.zeros(len(all_ops))
    alive_any = np.zeros(len(all_ops), dtype=bool)
    for i, ops in enumerate(all_ops):
        names = [NB201_OPS[o] for o in ops]
        q = 0.0
        n_conv_paths = 0
        for path in _CELL_PATHS:
            if all(names[e] != "none" for e in path):
                alive_any[i] = True
                q += sum(_OP_STRENGTH[names[e]] for e in path) + 0.15
                n_conv_paths += any(names[e].startswith("nor_conv") for e in path)
        if names[3] == "skip_connect" and n_conv_paths:
            q += 0.8
        quality[i] = q
    shape = 1.0 - np.exp(-quality / 2.5)
    shape /= shape.max()
    arch_noise = rng.normal(scale=0.4, size=len(all_ops))
    rows = []
    conv_cost = {"nor_conv_1x1": 1.0, "nor_conv_3x3": 9.0}
    for i, ops in enumerate(all_ops):
        rec = {"arch": arch_to_string(space, DiscreteArch(ops))}
        for ds in DATASETS:
            lo, hi, chance = _RANGES[ds]
            if alive_any[i]:
                val = lo + (hi - lo) * shape[i] + (hi - lo) / 50 * arch_noise[i] + rng.normal(scale=0.2)
            else:
                val = chance + abs(rng.normal(scale=0.05))
            test = val + rng.normal(scale=0.3)
            rec[f"{ds}_val"] = round(float(min(val, 99.9)), 4)
            rec[f"{ds}_test"] = round(float(min(test, 99.9)), 4)
        units = sum(conv_cost.get(NB201_OPS[o], 0.0) for o in ops)
        rec["flops"] = round(15.6 + 12.3 * units, 4)
        rec["params"] = round(0.073 + 0.0645 * units, 4)
        rows.append(rec)
    return rows


def write_synthetic_nb201(path, seed=0):
    rows = synthetic_nb201_rows(seed)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABULAR_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)


# -- protocol pieces ----------------------------------------------------------------


def collect_training_set(space: SpaceDef, oracle, n, seed, metric=None):
    """``n`` distinct random architectures, each queried once."""
    if n < 2:
        raise ValueError("need at least two samples")
    if n > space.cardinality():
        raise ValueError(f"cannot draw {n} distinct architectures from a space of {space.cardinality()}")
    rng = np.random.default_rng(seed)
    seen = set()
    samples = []
    while len(samples) < n:
        arch = sample_random(space, rng)
        if arch in seen:
            continue
        seen.add(arch)
        row = oracle.query(arch)
        perf = row[metric] if metric else row["performance"]
        samples.append(TrainingSample(arch, float(perf), float(row["flops"])))
    return samples


def _metric(row, name):
    return row[name] if name else row["performance"]


def evaluate_topk(pool, oracle, k, select_metric=None, report_metric=None):
    """Query the top-``k`` pool entries; pick the best by ``select_metric``.

    Returns a dict with the selected architecture, its selection and report
    values and the number of queries spent.
    """
    entries = list(pool)[:k]
    if not entries:
        raise ValueError("cannot evaluate an empty pool")
    if len(entries) < k:
        log.warning("pool has %d entries, fewer than k=%d; evaluating all", len(entries), k)
    best = None
    for rank, e in enumerate(entries):
        row = oracle.query(e.arch)
        sel = _metric(row, select_metric)
        if best is None or sel > best[0]:
            best = (sel, _metric(row, report_metric or select_metric), e, rank)
    sel, rep, entry, rank = best
    return {
        "arch": entry.key,
        "select_value": float(sel),
        "report_value": float(rep),
        "rank": rank,
        "queried": len(entries),
        "truncated": len(entries) < k,
    }


def random_search_baseline(space, oracle, budget, k, seed, predictor=None, window=None,
                           select_metric=None, report_metric=None):
    """Random-search baselines.

    Without ``predictor`` (pure random): query ``budget`` distinct random
    architectures and keep the best. With ``predictor``: draw ``budget``
    architectures (optionally restricted to the FLOPs ``window``), rank them by
    the predictor and query only the top ``k``.
    """
    if budget < k:
        raise ValueError("budget must be at least k")
    rng = np.random.default_rng(seed)
    if predictor is None:
        archs = []
        seen = set()
        while len(archs) < min(budget, space.cardinality()):
            a = sample_random(space, rng)
            if a not in seen:
                seen.add(a)
                archs.append(a)
        pool = [_Candidate(a, arch_to_string(space, a)) for a in archs]
        return evaluate_topk(pool, oracle, len(pool), select_metric, report_metric)
    archs = [sample_random(space, rng) for _ in range(budget)]
    if window is not None:
        f, delta = window
        archs = [a for a in archs if abs(anynet_cost_values(*split_stages(space, a))[0] - f) <= delta]
    uniq = sorted({arch_to_string(space, a): a for a in archs}.items())
    if not uniq:
        raise ValueError("no random candidates fall inside the FLOPs window")
    X = np.stack([encode(space, a) for _, a in uniq])
    scores = np.asarray(predictor.predict_denorm(X), dtype=np.float64)
    order = sorted(range(len(uniq)), key=lambda i: (-scores[i], uniq[i][0]))
    pool = [_Candidate(uniq[i][1], uniq[i][0]) for i in order]
    out = evaluate_topk(pool, oracle, k, select_metric, report_metric)
    out["candidates"] = len(uniq)
    return out


@dataclass(frozen=True)
class _Candidate:
    arch: DiscreteArch
    key: str


# -- experiment reports ---------------------------------------------------------------


@dataclass
class ExperimentReport:
    name: str
    dataset: str
    n: int
    k: int
    values: list = field(default_factory=list)
    select_values: list = field(default_factory=list)
    archs: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def repeats(self):
        return len(self.values)

    @property
    def budget(self):
        return self.n + self.k

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def std(self):
        return float(np.std(self.values)) if len(self.values) > 1 else 0.0

    @property
    def single_repeat(self):
        return len(self.values) == 1

    def summary(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "n": self.n,
            "k": self.k,
            "budget": self.budget,
            "repeats": self.repeats,
            "mean": self.mean,
            "std": self.std,
            "std_undefined": self.single_repeat,
            "values": list(self.values),
            "queries": list(self.queries),
        }


def repeat_seeds(master_seed, repeat):
    """Independent (collect, predictor, search) seeds for one repeat."""
    children = np.random.SeedSequence([int(master_seed), int(repeat)]).spawn(3)
    return [int(c.generate_state(1)[0]) for c in children]


def _nb201_repeat(args):
    space, oracle, dataset, n, ks, repeat, seed, search_cfg, epochs = args
    s_collect, s_train, s_search = repeat_seeds(seed, repeat)
    counter = QueryCounter(oracle, budget=n + max(ks))
    samples = collect_training_set(space, counter, n, s_collect, metric=f"{dataset}_val")
    pred, _, _ = train(PredictorSpec.for_space(space), space, samples, s_train, role="main", epochs=epochs)
    pool = search_all(space, pred, None, replace(search_cfg, seed=s_search, top_k=max(ks)))
    results = {}
    for k in ks:
        # every k cell continues from the queries actually spent on collection
        cell = QueryCounter(oracle, budget=n + k)
        cell.count = counter.count
        res = evaluate_topk(pool.entries, cell, k, f"{dataset}_val", f"{dataset}_test")
        res["queries"] = cell.count
        results[k] = res
    return results


def _run_repeats(space, oracle, dataset, n, ks, repeats, seed, search_cfg, jobs, epochs):
    tasks = [(space, oracle, dataset, n, ks, r, seed, search_cfg, epochs) for r in range(repeats)]
    if jobs > 1 and repeats > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_nb201_repeat, tasks))
    return [_nb201_repeat(t) for t in tasks]


def run_nb201(oracle, dataset="cifar100", n=30, k=40, repeats=15, seed=0, search_cfg=None, jobs=1, epochs=300):
    """Sample ``n`` cells, train a GCN, search, query the top ``k``; repeat."""
    if dataset not in DATASETS:
        raise ValueError(f"dataset must be one of {DATASETS}")
    space = oracle.space
    cfg = search_cfg or SearchConfig.for_nb201()
    t0 = time.perf_counter()
    per_repeat = _run_repeats(space, oracle, dataset, n, [k], repeats, seed, cfg, jobs, epochs)
    report = ExperimentReport("gradient", dataset, n, k)
    for res in per_repeat:
        r = res[k]
        report.values.append(r["report_value"])
        report.select_values.append(r["select_value"])
        report.archs.append(r["arch"])
        report.queries.append(r["queries"])
    report.wall_time = time.perf_counter() - t0
    return report


def run_random_nb201(oracle, dataset="cifar100", budget=70, repeats=15, seed=0):
    """Pure random search with the same query budget."""
    t0 = time.perf_counter()
    report = ExperimentReport("random", dataset, budget, 0)
    for r in range(repeats):
        counter = QueryCounter(oracle, budget=budget)
        res = random_search_baseline(
            oracle.space, counter, budget, budget, repeat_seeds(seed, r)[0],
            select_metric=f"{dataset}_val", report_metric=f"{dataset}_test",
        )
        report.values.append(res["report_value"])
        report.select_values.append(res["select_value"])
        report.archs.append(res["arch"])
        report.queries.append(counter.count)
    report.wall_time = time.perf_counter() - t0
    return report


def run_nk_ablation(oracle, ns, ks, repeats=15, seed=0, dataset="cifar100", search_cfg=None, jobs=1, epochs=300):
    """Grid over training-set size ``n`` and evaluated top ``k``.

    For one ``(n, repeat)`` the sample set, predictor and search are shared by
    all ``k`` cells; only the number of queried candidates differs.
    """
    ns, ks = list(ns), list(ks)
    if not ns or not ks:
        raise ValueError("need at least one n and one k")
    space = oracle.space
    cfg = search_cfg or SearchConfig.for_nb201()
    grid = {}
    for n in ns:
        t0 = time.perf_counter()
        per_repeat = _run_repeats(space, oracle, dataset, n, ks, repeats, seed, cfg, jobs, epochs)
        for k in ks:
            rep = ExperimentReport("gradient", dataset, n, k)
            for res in per_repeat:
                rep.values.append(res[k]["report_value"])
                rep.select_values.append(res[k]["select_value"])
                rep.archs.append(res[k]["arch"])
                rep.queries.append(res[k]["queries"])
            rep.wall_time = time.perf_counter() - t0
            grid[(n, k)] = rep
    return grid


# -- gradient vs. random on synthetic size-space oracles ------------------------------


DEFAULT_REGIME_QUANTILES = (0.1, 0.3, 0.5, 0.7, 0.9)
# chosen on oracle seeds 100-104, disjoint from the seeds used for acceptance
GVR_DEFAULTS = dict(trajectories=250, iterations=40, lr=0.005, alpha=0.0)


def predictor_filtered_topk(space, oracle, predictor, archs, flops, window, k):
    """Best true value among the top-``k`` (by ``predictor``) of ``archs`` inside ``window``."""
    f, delta = window
    keep = {}
    for a, c in zip(archs, flops):
        if abs(c - f) <= delta:
            keep.setdefault(arch_to_string(space, a), a)
    if not keep:
        raise ValueError("no random candidates fall inside the FLOPs window")
    keys = sorted(keep)
    X = np.stack([encode(space, keep[key]) for key in keys])
    scores = np.asarray(predictor.predict_denorm(X), dtype=np.float64)
    order = sorted(range(len(keys)), key=lambda i: (-scores[i], keys[i]))
    pool = [_Candidate(keep[keys[i]], keys[i]) for i in order]
    out = evaluate_topk(pool, oracle, k)
    out["candidates"] = len(keys)
    return out


def gradient_vs_random(space, seed, n_train=30, k=15, search_cfg=None, targets=None,
                       quantiles=DEFAULT_REGIME_QUANTILES, epochs=300):
    """One seeded comparison on a synthetic oracle over several FLOPs regimes.

    Both sides share the sample set and predictors. For every target the
    gradient search fills a pool and its top ``k`` are queried. The random side
    draws as many architectures as the gradient search explored over all
    targets, once; per target it keeps the draws inside the window, ranks them
    by the main predictor and queries the top ``k``. Targets default to
    quantiles of the training-sample costs. Returned ``*_best`` values are
    means over targets of the best queried true value.
    """
    oracle = SyntheticOracle(space, seed)
    s_collect, s_train, s_search = repeat_seeds(seed, 0)
    samples = collect_training_set(space, oracle, n_train, s_collect)
    spec = PredictorSpec.for_space(space)
    p_main, _, _ = train(spec, space, samples, s_train, role="main", epochs=epochs)
    p_aux, _, _ = train(spec, space, samples, s_train + 1, role="aux", epochs=epochs)
    cfg = search_cfg or SearchConfig(**GVR_DEFAULTS)
    if targets is None:
        costs = [s.cost for s in samples]
        targets = [float(np.quantile(costs, q)) for q in quantiles]
    targets = [float(t) for t in targets]
    grad_best, windows, explored = [], [], 0
    for f in targets:
        cell = replace(cfg, target_flops=f, top_k=k, seed=s_search)
        pool = run_search(space, p_main, p_aux, cell)
        explored += pool.explored
        grad_best.append(evaluate_topk(pool, oracle, k)["report_value"])
        windows.append(cell.window)
    rng = np.random.default_rng(s_search + 1)
    archs = [sample_random(space, rng) for _ in range(explored)]
    flops = [anynet_cost_values(*split_stages(space, a))[0] for a in archs]
    rand_best, cands = [], []
    for w in windows:
        res = predictor_filtered_topk(space, oracle, p_main, archs, flops, w, k)
        rand_best.append(res["report_value"])
        cands.append(res["candidates"])
    return {
        "seed": seed,
        "targets": targets,
        "explored": explored,
        "gradient_best": float(np.mean(grad_best)),
        "random_best": float(np.mean(rand_best)),
        "gradient_per_target": grad_best,
        "random_per_target": rand_best,
        "random_candidates": cands,
    }


def _gvr_task(args):
    space, seed, kw = args
    return gradient_vs_random(space, seed, **kw)


def gradient_vs_random_seeds(space, seeds, jobs=1, **kw):
    """``gradient_vs_random`` for several oracle seeds, one process per seed."""
    tasks = [(space, s, kw) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
            return list(ex.map(_gvr_task, tasks))
    return [_gvr_task(t) for t in tasks]
