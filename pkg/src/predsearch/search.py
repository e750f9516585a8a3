"""Projected gradient ascent on architecture encodings.

Each trajectory starts from a random architecture, repeatedly steps its
encoding along ``dP_m/da - alpha * dP_aux/da`` (SGD with momentum on the loss
``-P_m + alpha * P_aux``) and projects the result back onto the space. Every
projected architecture that satisfies the FLOPs window joins the model pool.

Trajectories are processed in fixed-size blocks so that the batched numerics
do not depend on how many worker processes are used.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cost import CostCache, in_window
from .errors import EmptyPoolError, NonFiniteError
from .space import SSS, TSS, DiscreteArch, SpaceDef, arch_to_json, arch_to_string, encode, project, sample_random
from .tensor import StepSchedule

log = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (0.05, 0.1, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class SearchConfig:
    trajectories: int = 1000
    iterations: int = 100
    lr: float = 0.02
    lr_factor: float = 0.1
    momentum: float = 0.9
    alpha: float = 0.0
    target_flops: float | None = None
    delta: float | None = None
    top_k: int = 30
    seed: int = 0
    block_size: int = 50
    jobs: int = 1
    curve_trajectories: int = 0

    def __post_init__(self):
        if min(self.trajectories, self.iterations, self.top_k, self.block_size, self.jobs) < 1:
            raise ValueError("trajectories, iterations, top_k, block_size and jobs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.delta is not None and self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.target_flops is not None and not self.target_flops > 0:
            raise ValueError("target_flops must be positive")

    @classmethod
    def for_nb201(cls, **kw):
        base = dict(trajectories=100, iterations=200, lr=0.5, lr_factor=0.5, top_k=40)
        base.update(kw)
        return cls(**base)

    @property
    def window(self):
        """``(f, delta)`` or ``None`` when no FLOPs constraint applies."""
        if self.target_flops is None:
            return None
        delta = 0.05 * self.target_flops if self.delta is None else self.delta
        return self.target_flops, delta

    def schedule(self):
        return StepSchedule.thirds(self.lr, self.iterations, self.lr_factor)


@dataclass(frozen=True)
class ModelPoolEntry:
    arch: DiscreteArch
    score: float
    flops: float | None
    trajectory: int
    iteration: int
    alpha: float
    key: str = ""
    seed: int = 0

    def sort_key(self):
        return (-self.score, self.key)

    def to_json(self, space: SpaceDef) -> dict:
        return {
            "arch": arch_to_json(space, self.arch),
            "arch_string": self.key,
            "score": self.score,
            "flops": self.flops,
            "provenance": {
                "trajectory": self.trajectory,
                "seed": self.seed,
                "iteration": self.iteration,
                "alpha": self.alpha,
            },
        }


@dataclass
class ModelPool:
    entries: list
    total: int
    truncated: bool = False
    failures: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    explored: int = 0

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def trajectory_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


# -- objective ----------------------------------------------------------------


def objective_grad(enc, P_m, P_aux, alpha):
    """``L = -P_m(enc) + alpha * P_aux(enc)`` and ``dL/d enc`` (batched or single)."""
    v_m, g_m = P_m.value_and_grad(enc)
    loss = -v_m
    grad = -g_m
    if alpha != 0.0 and P_aux is not None:
        v_a, g_a = P_aux.value_and_grad(enc)
        loss = loss + alpha * v_a
        grad = grad + alpha * g_a
    if np.ndim(loss) == 0 and not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NonFiniteError("objective or gradient is not finite")
    return loss, grad


# -- trajectories -------------------------------------------------------------


@dataclass
class _BlockResult:
    found: dict  # arch -> (trajectory, iteration, flops) of first emission
    failures: list
    curves: list
    explored: int
    emissions: list


def _run_block(space: SpaceDef, P_m, P_aux, cfg: SearchConfig, indices, inits, keep_all=False) -> _BlockResult:
    enc = np.stack([encode(space, a) for a in inits])
    vel = np.zeros_like(enc)
    sched = cfg.schedule()
    window = cfg.window
    cost = CostCache(space) if (space.kind == SSS and window is not None) else None
    alive = np.ones(len(inits), dtype=bool)
    found: dict = {}
    failures = []
    curves = []
    curve_rows = {r for r, i in enumerate(indices) if i < cfg.curve_trajectories}
    emissions = []
    explored = 0
    for t in range(1, cfg.iterations + 1):
        with np.errstate(all="ignore"):
            _, grad = objective_grad(enc, P_m, P_aux, cfg.alpha)
        bad = alive & ~np.isfinite(grad.reshape(len(grad), -1)).all(axis=1)
        for r in np.flatnonzero(bad):
            failures.append({"trajectory": int(indices[r]), "iteration": t, "reason": "non-finite gradient"})
            log.warning("trajectory %d failed at iteration %d: non-finite gradient", indices[r], t)
        alive &= ~bad
        grad[~alive] = 0.0
        vel = cfg.momentum * vel + grad
        enc = enc - sched(t - 1) * vel
        if space.kind == SSS:
            np.clip(enc, 0.0, 1.0, out=enc)
        for r in np.flatnonzero(alive):
            arch = project(space, enc[r])
            explored += 1
            flops = cost(arch) if cost is not None else None
            ok = window is None or in_window(flops, *window)
            if ok and arch not in found:
                found[arch] = (int(indices[r]), t, flops)
            if ok and keep_all:
                emissions.append((arch, int(indices[r]), t, flops))
            if r in curve_rows:
                curves.append({"trajectory": int(indices[r]), "iteration": t, "arch": arch, "flops": flops, "in_window": ok})
    return _BlockResult(found, failures, curves, explored, emissions)


def _block_task(args):
    return _run_block(*args)


def run_trajectory(space: SpaceDef, init: DiscreteArch, P_m, P_aux, cfg: SearchConfig, index: int = 0):
    """One trajectory from ``init``.

    Returns one entry per iteration whose projected architecture passed the
    window, in iteration order (no deduplication).
    """
    space.check(init)
    res = _run_block(space, P_m, P_aux, cfg, [index], [init], keep_all=True)
    scores = _score(space, P_m, [e[0] for e in res.emissions])
    seed = trajectory_seed(cfg.seed, index)
    return [
        ModelPoolEntry(a, s, flops, index, t, cfg.alpha, arch_to_string(space, a), seed)
        for (a, _, t, flops), s in zip(res.emissions, scores)
    ]


def _score(space, P_m, archs, chunk=256):
    """Denormalized P_m of each architecture's re-encoding."""
    out = []
    for i in range(0, len(archs), chunk):
        X = np.stack([encode(space, a) for a in archs[i : i + chunk]])
        out.extend(float(s) for s in np.atleast_1d(P_m.predict_denorm(X)))
    return out


def _explore(space, P_m, P_aux, cfg: SearchConfig):
    indices = list(range(cfg.trajectories))
    inits = [sample_random(space, trajectory_rng(cfg.seed, i)) for i in indices]
    tasks = [
        (space, P_m, P_aux, cfg, indices[i : i + cfg.block_size], inits[i : i + cfg.block_size])
        for i in range(0, len(indices), cfg.block_size)
    ]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            results = list(ex.map(_block_task, tasks))
    else:
        results = [_block_task(t) for t in tasks]
    found: dict = {}
    failures, curves, explored = [], [], 0
    for res in results:
        for arch, prov in res.found.items():
            if arch not in found or prov[:2] < found[arch][:2]:
                found[arch] = prov
        failures += res.failures
        curves += res.curves
        explored += res.explored
    return found, failures, curves, explored


def _entries(space, P_m, found, alpha, seed):
    keyed = sorted((arch_to_string(space, a), a) for a in found)
    scores = _score(space, P_m, [a for _, a in keyed])
    entries = []
    for (key, arch), score in zip(keyed, scores):
        traj, it, flops = found[arch]
        if not math.isfinite(score):
            continue
        entries.append(ModelPoolEntry(arch, score, flops, traj, it, alpha, key, trajectory_seed(seed, traj)))
    entries.sort(key=ModelPoolEntry.sort_key)
    return entries


def _score_curves(space, P_m, curves):
    if not curves:
        return []
    scores = _score(space, P_m, [c["arch"] for c in curves])
    out = []
    for c, s in zip(curves, scores):
        row = dict(c)
        row["arch"] = arch_to_string(space, c["arch"])
        row["score"] = s
        out.append(row)
    out.sort(key=lambda r: (r["trajectory"], r["iteration"]))
    return out


def _truncate(entries, k, **extra):
    if k > len(entries):
        log.warning("pool holds %d candidates, fewer than top_k=%d", len(entries), k)
    return ModelPool(entries[:k], total=len(entries), truncated=k > len(entries), **extra)


def search_all(space: SpaceDef, P_m, P_aux, cfg: SearchConfig) -> ModelPool:
    """Full deduplicated pool, sorted by score (no top-K truncation)."""
    found, failures, curves, explored = _explore(space, P_m, P_aux, cfg)
    entries = _entries(space, P_m, found, cfg.alpha, cfg.seed)
    return ModelPool(
        entries, total=len(entries), failures=failures, curves=_score_curves(space, P_m, curves), explored=explored
    )


def run_search(space: SpaceDef, P_m, P_aux, cfg: SearchConfig) -> ModelPool:
    """Top-K of the deduplicated model pool, highest predicted score first."""
    full = search_all(space, P_m, P_aux, cfg)
    if not full.entries:
        raise EmptyPoolError(
            "no candidates in window; try a larger delta or a different alpha"
            if cfg.window
            else "search produced no candidates"
        )
    return _truncate(full.entries, cfg.top_k, failures=full.failures, curves=full.curves, explored=full.explored)


def merge_entries(*lists):
    """Union keyed by architecture, keeping the highest score (earliest provenance on ties)."""
    best: dict = {}
    for lst in lists:
        for e in lst:
            cur = best.get(e.key)
            if cur is None or (-e.score, e.trajectory, e.iteration, e.alpha) < (
                -cur.score,
                cur.trajectory,
                cur.iteration,
                cur.alpha,
            ):
                best[e.key] = e
    return sorted(best.values(), key=ModelPoolEntry.sort_key)


def alpha_grid(space: SpaceDef, P_m, P_aux, targets, grid=DEFAULT_ALPHA_GRID, cfg: SearchConfig | None = None):
    """Run the search for every (target FLOPs, alpha) pair; returns ``{target: ModelPool}``."""
    cfg = cfg or SearchConfig()
    targets = list(targets)
    grid = list(grid)
    if not targets or not grid:
        raise ValueError("alpha_grid needs at least one target and one alpha")
    pools = {}
    for f in targets:
        cells = []
        failures, curves, explored = [], [], 0
        for a in grid:
            cell = search_all(space, P_m, P_aux, replace(cfg, alpha=a, target_flops=f))
            if not cell.entries:
                log.warning("no candidates for target %g at alpha %g", f, a)
            cells.append(cell.entries)
            failures += cell.failures
            curves += cell.curves
            explored += cell.explored
        merged = merge_entries(*cells)
        if not merged:
            raise EmptyPoolError(f"no candidates in window for target {f:g} at any alpha in {grid}")
        pools[f] = _truncate(merged, cfg.top_k, failures=failures, curves=curves, explored=explored)
    return pools


def pool_to_json(space: SpaceDef, pool) -> list:
    return [e.to_json(space) for e in pool]
