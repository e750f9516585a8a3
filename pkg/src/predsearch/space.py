"""Search spaces, continuous encodings and projection back to discrete architectures.

Two flavours of space are supported:

* ``SSS`` (size search space): an ordered list of :class:`ParamSpec`. The
  encoding is a flat vector with every component normalized to ``[0, 1]``.
* ``TSS`` (topology search space): a fixed DAG whose interior nodes each carry
  one operation. The encoding is a ``node_count x option_count`` logit matrix;
  the input/output rows are frozen one-hot rows.

Architectures are plain tuples wrapped in :class:`DiscreteArch` so they hash
and compare by value.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArchParseError, MembershipError

SSS = "SSS"
TSS = "TSS"

#: logit placed on the chosen operation when encoding a TSS cell
LOGIT_SCALE = 5.0

PARAM_KINDS = ("int", "multiple", "choice", "divisor")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _nearest(candidates, x):
    """Nearest candidate to ``x``; ties go to the smaller candidate."""
    best = None
    best_dist = math.inf
    for c in sorted(candidates):
        d = abs(c - x)
        if d < best_dist:
            best, best_dist = c, d
    return best


def divisors(n: int) -> list[int]:
    small, large = [], []
    i = 1
    while i * i <= n:
        if n % i == 0:
            small.append(i)
            if i != n // i:
                large.append(n // i)
        i += 1
    return small + large[::-1]


@dataclass(frozen=True)
class ParamSpec:
    """One dimension of a size search space.

    ``kind`` selects the domain:

    - ``int``: ``lo, lo+step, ..., <= hi``
    - ``multiple``: integers in ``[lo, hi]`` divisible by ``step``
    - ``choice``: the finite sorted set ``choices``
    - ``divisor``: integers in ``[lo, hi]`` that divide the channel quantity
      ``round(value(channel) * value(ratio))``; ``ratio`` is optional.
    """

    name: str
    kind: str
    lo: float = 0
    hi: float = 0
    step: int = 1
    choices: tuple = ()
    channel: str | None = None
    ratio: str | None = None
    span: tuple | None = None

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "choice":
            if not self.choices:
                raise ValueError(f"{self.name}: empty choice set")
            if list(self.choices) != sorted(self.choices):
                raise ValueError(f"{self.name}: choices must be sorted ascending")
            object.__setattr__(self, "choices", tuple(float(c) for c in self.choices))
        else:
            if self.lo > self.hi:
                raise ValueError(f"{self.name}: lo > hi")
            if self.step <= 0:
                raise ValueError(f"{self.name}: step must be positive")
            if self.kind == "multiple" and not self.grid():
                raise ValueError(f"{self.name}: no multiple of {self.step} in range")
            if self.kind == "divisor":
                if self.channel is None:
                    raise ValueError(f"{self.name}: divisor spec needs a channel reference")
                if self.lo != 1:
                    # 1 divides everything, which keeps projection total
                    raise ValueError(f"{self.name}: divisor spec must start at 1")
        if self.span is None:
            if self.kind == "choice":
                span = (self.choices[0], self.choices[-1])
            else:
                span = (self.lo, self.hi)
            object.__setattr__(self, "span", tuple(float(s) for s in span))

    def grid(self) -> list:
        """Legal values, ignoring any divisor dependency."""
        if self.kind == "choice":
            return list(self.choices)
        if self.kind == "multiple":
            first = math.ceil(self.lo / self.step) * self.step
            return list(range(int(first), int(self.hi) + 1, self.step))
        return list(range(int(self.lo), int(self.hi) + 1, self.step if self.kind == "int" else 1))

    def normalize(self, value: float) -> float:
        lo, hi = self.span
        return 0.0 if hi == lo else (value - lo) / (hi - lo)

    def denormalize(self, x: float) -> float:
        lo, hi = self.span
        return lo + x * (hi - lo)


@dataclass(frozen=True)
class DiscreteArch:
    values: tuple

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


@dataclass(frozen=True)
class SpaceDef:
    kind: str
    name: str = ""
    params: tuple = ()
    # topology spaces
    nodes: tuple = ()
    options: tuple = ()
    adjacency: tuple = ()
    input_node: int = 0
    output_node: int = 0
    cell_edges: tuple = ()
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == SSS:
            if not self.params:
                raise ValueError("SSS space needs at least one parameter")
            for i, p in enumerate(self.params):
                if p.name in self._index:
                    raise ValueError(f"duplicate parameter {p.name}")
                self._index[p.name] = i
                if p.kind == "divisor":
                    for ref in (p.channel, p.ratio):
                        if ref is None:
                            continue
                        if ref not in self._index:
                            raise ValueError(f"{p.name}: reference {ref!r} must name an earlier parameter")
                        if self.params[self._index[ref]].kind == "divisor":
                            raise ValueError(f"{p.name}: cannot reference another divisor")
        elif self.kind == TSS:
            n = len(self.nodes)
            adj = np.asarray(self.adjacency)
            if adj.shape != (n, n) or not np.isin(adj, (0, 1)).all():
                raise ValueError("adjacency must be a binary node_count x node_count matrix")
            if self.input_node == self.output_node:
                raise ValueError("input and output node must differ")
            if len(self.options) < 3:
                raise ValueError("need at least one selectable option plus input/output")
            if self.cell_edges and len(self.cell_edges) != len(self.interior_nodes):
                raise ValueError("cell_edges must name one edge per interior node")
            _toposort(adj)
        else:
            raise ValueError(f"unknown space kind {self.kind!r}")

    # -- shape helpers -------------------------------------------------
    @property
    def encoding_shape(self) -> tuple:
        if self.kind == SSS:
            return (len(self.params),)
        return (len(self.nodes), len(self.options))

    @property
    def interior_nodes(self) -> list[int]:
        return [i for i in range(len(self.nodes)) if i not in (self.input_node, self.output_node)]

    @property
    def n_selectable(self) -> int:
        """Options an interior node may take; the last two are INPUT and OUTPUT."""
        return len(self.options) - 2

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.nodes), dtype=bool)
        mask[self.interior_nodes] = True
        return mask

    def param(self, name: str) -> ParamSpec:
        return self.params[self._index[name]]

    # -- membership ----------------------------------------------------
    def channel_value(self, p: ParamSpec, values) -> int:
        c = values[self._index[p.channel]]
        if p.ratio is not None:
            c = c * values[self._index[p.ratio]]
        return round_half_up(c)

    def check(self, arch: DiscreteArch) -> None:
        """Raise :class:`MembershipError` naming the first violating field."""
        values = tuple(arch)
        if self.kind == TSS:
            if len(values) != len(self.interior_nodes):
                raise MembershipError("ops", values, f"expected {len(self.interior_nodes)} operations")
            for node, op in zip(self.interior_nodes, values):
                if not isinstance(op, (int, np.integer)) or not 0 <= op < self.n_selectable:
                    raise MembershipError(self.nodes[node], op, f"not in 0..{self.n_selectable - 1}")
            return
        if len(values) != len(self.params):
            raise MembershipError("arch", values, f"expected {len(self.params)} values")
        for p, v in zip(self.params, values):
            if p.kind == "choice":
                if float(v) not in p.choices:
                    raise MembershipError(p.name, v, f"not one of {list(p.choices)}")
                continue
            if float(v) != int(v):
                raise MembershipError(p.name, v, "not an integer")
            v = int(v)
            if not p.lo <= v <= p.hi:
                raise MembershipError(p.name, v, f"outside [{p.lo}, {p.hi}]")
            if p.kind == "int" and (v - p.lo) % p.step:
                raise MembershipError(p.name, v, f"not on the grid {p.lo} + k*{p.step}")
            if p.kind == "multiple" and v % p.step:
                raise MembershipError(p.name, v, f"not divisible by {p.step}")
            if p.kind == "divisor":
                c = self.channel_value(p, values)
                if c <= 0 or c % v:
                    raise MembershipError(p.name, v, f"does not divide channel count {c}")

    def contains(self, arch: DiscreteArch) -> bool:
        try:
            self.check(arch)
        except MembershipError:
            return False
        return True

    def cardinality(self) -> int:
        """Exact number of members (divisor constraints included)."""
        if self.kind == TSS:
            return self.n_selectable ** len(self.interior_nodes)
        coupled = set()
        total = 1
        for p in self.params:
            if p.kind != "divisor":
                continue
            coupled.update(r for r in (p.channel, p.ratio) if r is not None)
        seen = set()
        for p in self.params:
            if p.kind == "divisor":
                refs = [r for r in (p.channel, p.ratio) if r is not None]
                if seen & set(refs):
                    raise ValueError("cardinality needs disjoint divisor references")
                seen.update(refs)
                grids = [self.param(r).grid() for r in refs]
                count = 0
                for combo in _product(grids):
                    c = round_half_up(math.prod(combo))
                    count += sum(1 for d in divisors(c) if p.lo <= d <= p.hi) if c > 0 else 0
                total *= count
            elif p.name not in coupled:
                total *= len(p.grid())
        return total

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        if self.kind == SSS:
            out = []
            for p in self.params:
                d = {"name": p.name, "kind": p.kind}
                if p.kind == "choice":
                    d["choices"] = list(p.choices)
                else:
                    d.update(lo=p.lo, hi=p.hi)
                    if p.kind in ("int", "multiple"):
                        d["step"] = p.step
                if p.kind == "divisor":
                    d["channel"] = p.channel
                    if p.ratio is not None:
                        d["ratio"] = p.ratio
                d["span"] = list(p.span)
                out.append(d)
            return {"kind": SSS, "name": self.name, "params": out}
        return {
            "kind": TSS,
            "name": self.name,
            "nodes": list(self.nodes),
            "options": list(self.options),
            "adjacency": [list(r) for r in self.adjacency],
            "input_node": self.input_node,
            "output_node": self.output_node,
            "cell_edges": [list(e) for e in self.cell_edges],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _product(grids):
    if not grids:
        yield ()
        return
    for v in grids[0]:
        for rest in _product(grids[1:]):
            yield (v,) + rest


def _toposort(adj: np.ndarray) -> list[int]:
    n = adj.shape[0]
    indeg = adj.sum(axis=0).astype(int).tolist()
    order = [i for i in range(n) if indeg[i] == 0]
    k = 0
    while k < len(order):
        u = order[k]
        k += 1
        for v in np.flatnonzero(adj[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                order.append(int(v))
    if len(order) != n:
        raise ValueError("adjacency contains a cycle")
    return order


def space_from_dict(d: dict) -> SpaceDef:
    kind = d.get("kind")
    if kind == SSS:
        if d.get("preset") == "anynet":
            return build_anynet_space(**d.get("options", {}))
        params = []
        for p in d["params"]:
            kw = {k: p[k] for k in ("lo", "hi", "step", "channel", "ratio") if k in p}
            if "choices" in p:
                kw["choices"] = tuple(p["choices"])
            if "span" in p:
                kw["span"] = tuple(p["span"])
            params.append(ParamSpec(name=p["name"], kind=p["kind"], **kw))
        return SpaceDef(kind=SSS, name=d.get("name", ""), params=tuple(params))
    if kind == TSS:
        if d.get("preset") == "nb201":
            return build_nb201_space()
        return SpaceDef(
            kind=TSS,
            name=d.get("name", ""),
            nodes=tuple(d["nodes"]),
            options=tuple(d["options"]),
            adjacency=tuple(tuple(int(x) for x in r) for r in d["adjacency"]),
            input_node=d["input_node"],
            output_node=d["output_node"],
            cell_edges=tuple(tuple(e) for e in d.get("cell_edges", ())),
        )
    raise ValueError(f"unknown space kind {kind!r}")


def load_space(path) -> SpaceDef:
    with open(path) as fh:
        return space_from_dict(json.load(fh))


# -- the two spaces used in experiments ----------------------------------


def build_anynet_space(max_depth=16, min_width=24, max_width=1024, max_group=32, stages=4) -> SpaceDef:
    """AnyNet: per stage a depth, a width divisible by 8, a bottleneck ratio and a group count."""
    params = []
    for i in range(1, stages + 1):
        params.append(ParamSpec(f"d{i}", "int", lo=1, hi=max_depth))
    for i in range(1, stages + 1):
        params.append(ParamSpec(f"w{i}", "multiple", lo=min_width, hi=max_width, step=8))
    for i in range(1, stages + 1):
        params.append(ParamSpec(f"r{i}", "choice", choices=(0.25, 0.5, 1.0)))
    for i in range(1, stages + 1):
        params.append(ParamSpec(f"g{i}", "divisor", lo=1, hi=max_group, channel=f"w{i}", ratio=f"r{i}"))
    return SpaceDef(kind=SSS, name="anynet", params=tuple(params))


NB201_OPS = ("none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3")


def build_nb201_space() -> SpaceDef:
    """NAS-Bench-201 cell as an 8-node operation-on-node DAG with maximal connections."""
    nodes = ("input", "e01", "e02", "e12", "e03", "e13", "e23", "output")
    options = ("zeroize", "skip_connect", "conv1x1", "conv3x3", "avgpool3x3", "INPUT", "OUTPUT")
    idx = {name: i for i, name in enumerate(nodes)}
    edges = [
        ("input", "e01"), ("input", "e02"), ("input", "e03"),
        ("e01", "e12"), ("e01", "e13"),
        ("e02", "e23"), ("e12", "e23"),
        ("e03", "output"), ("e13", "output"), ("e23", "output"),
    ]
    adj = [[0] * len(nodes) for _ in nodes]
    for a, b in edges:
        adj[idx[a]][idx[b]] = 1
    return SpaceDef(
        kind=TSS,
        name="nb201",
        nodes=nodes,
        options=options,
        adjacency=tuple(tuple(r) for r in adj),
        input_node=0,
        output_node=7,
        cell_edges=((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)),
    )


# -- encode / project / sample ---------------------------------------------


def encode(space: SpaceDef, arch: DiscreteArch) -> np.ndarray:
    space.check(arch)
    if space.kind == SSS:
        return np.array([p.normalize(float(v)) for p, v in zip(space.params, arch)], dtype=np.float64)
    enc = np.zeros(space.encoding_shape)
    n_opt = len(space.options)
    enc[space.input_node, n_opt - 2] = 1.0
    enc[space.output_node, n_opt - 1] = 1.0
    for node, op in zip(space.interior_nodes, arch):
        enc[node, op] = LOGIT_SCALE
    return enc


def frozen_rows(space: SpaceDef) -> np.ndarray:
    """The input/output rows every TSS encoding carries."""
    enc = np.zeros(space.encoding_shape)
    n_opt = len(space.options)
    enc[space.input_node, n_opt - 2] = 1.0
    enc[space.output_node, n_opt - 1] = 1.0
    return enc[[space.input_node, space.output_node]]


def _snap(p: ParamSpec, x: float, space: SpaceDef, values: list):
    if p.kind == "choice":
        return _nearest(p.choices, x)
    if p.kind == "int":
        k = round_half_up((x - p.lo) / p.step)
        k = min(max(k, 0), int((p.hi - p.lo) // p.step))
        return int(p.lo + k * p.step)
    if p.kind == "multiple":
        first = math.ceil(p.lo / p.step) * p.step
        last = math.floor(p.hi / p.step) * p.step
        below = math.floor(x / p.step) * p.step
        v = below if x - below <= below + p.step - x else below + p.step
        return int(min(max(v, first), last))
    c = space.channel_value(p, values)
    legal = [d for d in divisors(c) if p.lo <= d <= p.hi]
    return int(_nearest(legal, x))


def project(space: SpaceDef, enc: np.ndarray) -> DiscreteArch:
    """Nearest member of ``space`` to a continuous encoding."""
    enc = np.asarray(enc, dtype=np.float64)
    if enc.shape != space.encoding_shape:
        raise ValueError(f"encoding shape {enc.shape} != {space.encoding_shape}")
    if space.kind == TSS:
        k = space.n_selectable
        # argmax returns the first maximum, i.e. ties go to the lowest index
        return DiscreteArch(tuple(int(np.argmax(enc[node, :k])) for node in space.interior_nodes))
    values: list = []
    for p, x in zip(space.params, enc):
        values.append(_snap(p, p.denormalize(min(max(float(x), 0.0), 1.0)), space, values))
    return DiscreteArch(tuple(values))


def sample_random(space: SpaceDef, rng) -> DiscreteArch:
    """Uniform independent draw per dimension; ``rng`` is a seed or a numpy Generator."""
    rng = np.random.default_rng(rng)
    if space.kind == TSS:
        ops = rng.integers(0, space.n_selectable, size=len(space.interior_nodes))
        return DiscreteArch(tuple(int(o) for o in ops))
    values: list = []
    for p in space.params:
        if p.kind == "divisor":
            c = space.channel_value(p, values)
            legal = [d for d in divisors(c) if p.lo <= d <= p.hi]
        else:
            legal = p.grid()
        values.append(legal[int(rng.integers(len(legal)))])
    return DiscreteArch(tuple(values))


def random_encoding(space: SpaceDef, rng) -> np.ndarray:
    """A random continuous point (used for property checks and fuzzing)."""
    rng = np.random.default_rng(rng)
    if space.kind == SSS:
        return rng.uniform(-0.2, 1.2, size=space.encoding_shape)
    enc = rng.normal(scale=3.0, size=space.encoding_shape)
    enc[[space.input_node, space.output_node]] = frozen_rows(space)
    return enc


# -- canonical strings -------------------------------------------------------

_GROUPED = re.compile(r"^([A-Za-z_]+)(\d+)$")


def _groups(space: SpaceDef):
    """Map prefix -> [param index ...] when every name is ``<prefix><n>``, else None."""
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(space.params):
        m = _GROUPED.match(p.name)
        if not m:
            return None
        groups.setdefault(m.group(1), []).append(i)
    return groups


def arch_to_json(space: SpaceDef, arch: DiscreteArch):
    space.check(arch)
    if space.kind == TSS:
        return {"ops": [NB201_OPS[o] if space.cell_edges else int(o) for o in arch]}
    groups = _groups(space)

    def py(p, v):
        return float(v) if p.kind == "choice" else int(v)

    if groups is None:
        return {p.name: py(p, v) for p, v in zip(space.params, arch)}
    return {k: [py(space.params[i], arch[i]) for i in idx] for k, idx in groups.items()}


def arch_from_json(space: SpaceDef, obj) -> DiscreteArch:
    if space.kind == TSS:
        ops = obj["ops"] if isinstance(obj, dict) else obj
        return _checked(space, tuple(NB201_OPS.index(o) if isinstance(o, str) else int(o) for o in ops))
    values = []
    groups = _groups(space)
    for i, p in enumerate(space.params):
        if p.name in obj:
            v = obj[p.name]
        elif groups is not None:
            prefix = _GROUPED.match(p.name).group(1)
            try:
                v = obj[prefix][groups[prefix].index(i)]
            except (KeyError, IndexError):
                raise MembershipError(p.name, None, "missing") from None
        else:
            raise MembershipError(p.name, None, "missing")
        values.append(float(v) if p.kind == "choice" else int(v))
    return _checked(space, tuple(values))


def _checked(space, values):
    arch = DiscreteArch(values)
    space.check(arch)
    return arch


def arch_to_string(space: SpaceDef, arch: DiscreteArch) -> str:
    """Canonical string; NAS-Bench-201 ``|op~src|+|...|`` format for cell spaces."""
    if space.kind == SSS:
        return json.dumps(arch_to_json(space, arch), separators=(",", ":"))
    space.check(arch)
    if not space.cell_edges:
        return ",".join(str(o) for o in arch)
    by_dst: dict[int, list[str]] = {}
    for (src, dst), op in zip(space.cell_edges, arch):
        by_dst.setdefault(dst, []).append(f"{NB201_OPS[op]}~{src}")
    return "+".join("|" + "|".join(by_dst[d]) + "|" for d in sorted(by_dst))


def parse_arch(space: SpaceDef, text: str) -> DiscreteArch:
    if space.kind == SSS:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ArchParseError(exc.msg, exc.pos) from None
        if not isinstance(obj, dict):
            raise ArchParseError("expected a JSON object", 0)
        return arch_from_json(space, obj)
    if not space.cell_edges:
        ops = []
        pos = 0
        for tok in text.split(","):
            if not tok.strip().isdigit():
                raise ArchParseError(f"bad operation index {tok!r}", pos)
            ops.append(int(tok))
            pos += len(tok) + 1
        return _checked(space, tuple(ops))
    return _parse_cell(space, text)


def _parse_cell(space: SpaceDef, text: str) -> DiscreteArch:
    edge_index = {e: i for i, e in enumerate(space.cell_edges)}
    ops = [None] * len(space.cell_edges)
    pos = 0
    dst = 0
    for group in text.split("+"):
        dst += 1
        if len(group) < 2 or group[0] != "|" or group[-1] != "|":
            raise ArchParseError("node group must be wrapped in '|'", pos)
        inner_pos = pos + 1
        for tok in group[1:-1].split("|"):
            name, sep, src = tok.partition("~")
            if not sep or not src.isdigit():
                raise ArchParseError(f"expected 'op~index', got {tok!r}", inner_pos)
            if name not in NB201_OPS:
                raise ArchParseError(f"unknown operation {name!r}", inner_pos)
            key = (int(src), dst)
            if key not in edge_index:
                raise ArchParseError(f"edge {src}->{dst} is not part of the cell", inner_pos)
            if ops[edge_index[key]] is not None:
                raise ArchParseError(f"edge {src}->{dst} given twice", inner_pos)
            ops[edge_index[key]] = NB201_OPS.index(name)
            inner_pos += len(tok) + 1
        pos += len(group) + 1
    if any(o is None for o in ops):
        missing = space.cell_edges[ops.index(None)]
        raise ArchParseError(f"edge {missing[0]}->{missing[1]} missing", len(text))
    return _checked(space, tuple(ops))


def load_arch(space: SpaceDef, path) -> DiscreteArch:
    text = Path(path).read_text().strip()
    if space.kind == SSS or text.startswith("{"):
        try:
            return arch_from_json(space, json.loads(text))
        except json.JSONDecodeError as exc:
            raise ArchParseError(exc.msg, exc.pos) from None
    return parse_arch(space, text)
