"""Instrumented layer forward passes for checking asymptotic layer costs.

Every layer runs real numpy arithmetic through a counting einsum that tallies
multiply-accumulates (MACs).  Path lengths come from breadth-first search over
explicitly constructed dependency graphs.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

KINDS = ("self_attention", "recurrent", "convolutional",
         "restricted_self_attention", "separable_convolutional")
AXES = ("n", "d", "k", "r")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n: int
    d: int
    k: int = 3
    r: int = 3
    dilated: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.n, self.d, self.k, self.r) < 1:
            raise ValueError("n, d, k, r must be positive")
        if self.kind in ("convolutional", "separable_convolutional") and self.k > self.n:
            raise ValueError(f"kernel k={self.k} exceeds n={self.n}")
        if self.kind == "restricted_self_attention" and self.r > self.n:
            raise ValueError(f"neighborhood r={self.r} exceeds n={self.n}")
        if self.dilated and self.kind != "convolutional":
            raise ValueError("dilated only applies to convolutional layers")
        if self.dilated and self.k < 2:
            raise ValueError("dilated convolution needs k >= 2")

    def with_axis(self, axis: str, value: int) -> "LayerSpec":
        return LayerSpec(**{**self.__dict__, axis: value})


@dataclass(frozen=True)
class CostReport:
    mac_count: int
    sequential_ops: int
    max_path_length: int | None  # None when not measured or unreachable
    attention_memory: int
    core_macs: int = 0  # attention score and mixing products only
    stack_depth: int = 1  # layers stacked for the path measurement


class MacCounter:
    def __init__(self):
        self.macs = 0

    def einsum(self, subscripts: str, *operands: np.ndarray) -> np.ndarray:
        """``np.einsum`` that adds the product of all index extents to the tally."""
        inputs = subscripts.split("->")[0].split(",")
        extents: dict[str, int] = {}
        for letters, op in zip(inputs, operands):
            for ch, size in zip(letters, op.shape):
                if extents.setdefault(ch, size) != size:
                    raise ValueError(f"index {ch} has inconsistent extents")
        self.macs += math.prod(extents.values())
        return np.einsum(subscripts, *operands)


class StageTracker:
    """Assigns each computed position a stage: 1 + latest same-layer dependency."""

    def __init__(self, n: int):
        self.stage = np.zeros(n, dtype=np.int64)

    def compute(self, positions, after: Iterable[int] = ()) -> None:
        prev = max((int(self.stage[a]) for a in after), default=0)
        self.stage[positions] = prev + 1

    @property
    def sequential_ops(self) -> int:
        return int(self.stage.max())


def _weights(rng, *shape):
    return rng.standard_normal(shape) / math.sqrt(shape[0])


def restricted_window(p: int, n: int, r: int) -> np.ndarray:
    """Neighborhood of size r centred on p, shifted to stay inside [0, n)."""
    start = min(max(p - (r - 1) // 2, 0), n - r)
    return np.arange(start, start + r)


def conv_offsets(k: int, dilation: int = 1) -> np.ndarray:
    return np.arange(k) * dilation


# forward passes: each returns (output, StageTracker); memory via `mem`

def _self_attention(x, rng, c: MacCounter, mem: list):
    n, d = x.shape
    wq, wk, wv, wo = (_weights(rng, d, d) for _ in range(4))
    q, k, v = (c.einsum("nd,de->ne", x, w) for w in (wq, wk, wv))
    before = c.macs
    s = c.einsum("nd,md->nm", q, k) / math.sqrt(d)
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    mem.append(a.size)
    o = c.einsum("nm,md->nd", a, v)
    core = c.macs - before
    tr = StageTracker(n)
    tr.compute(np.arange(n))
    return c.einsum("nd,de->ne", o, wo), tr, core


def _restricted_attention(x, r, rng, c: MacCounter, mem: list):
    n, d = x.shape
    wq, wk, wv, wo = (_weights(rng, d, d) for _ in range(4))
    q, k, v = (c.einsum("nd,de->ne", x, w) for w in (wq, wk, wv))
    idx = np.stack([restricted_window(p, n, r) for p in range(n)])  # [n, r]
    before = c.macs
    s = c.einsum("nd,nrd->nr", q, k[idx]) / math.sqrt(d)
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    mem.append(a.size)
    o = c.einsum("nr,nrd->nd", a, v[idx])
    core = c.macs - before
    tr = StageTracker(n)
    tr.compute(np.arange(n))
    return c.einsum("nd,de->ne", o, wo), tr, core


def _recurrent(x, rng, c: MacCounter, mem: list):
    n, d = x.shape
    w, u = _weights(rng, d, d), _weights(rng, d, d)
    h = np.zeros(d)
    out = np.empty_like(x)
    tr = StageTracker(n)
    for t in range(n):
        h = np.tanh(c.einsum("d,de->e", x[t], w) + c.einsum("d,de->e", h, u))
        out[t] = h
        tr.compute([t], after=[t - 1] if t else [])
    return out, tr, 0


def _causal_conv(x, k, dilation, rng, c: MacCounter, mem: list):
    n, d = x.shape
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((pad, d)), x])
    out = np.zeros_like(x)
    for j, off in enumerate(conv_offsets(k, dilation)):
        out += c.einsum("nd,de->ne", xp[pad - off: pad - off + n], _weights(rng, d, d))
    tr = StageTracker(n)
    tr.compute(np.arange(n))
    return out, tr, 0


def _separable_conv(x, k, rng, c: MacCounter, mem: list):
    n, d = x.shape
    pad = k - 1
    xp = np.concatenate([np.zeros((pad, d)), x])
    depth = np.zeros_like(x)
    taps = rng.standard_normal((k, d))
    for j in range(k):
        depth += c.einsum("nd,d->nd", xp[pad - j: pad - j + n], taps[j])
    out = c.einsum("nd,de->ne", depth, _weights(rng, d, d))
    tr = StageTracker(n)
    tr.compute(np.arange(n))
    return out, tr, 0


# dependency graphs

@dataclass
class DependencyGraph:
    """Nodes ``layer * n + position``; layer 0 holds the inputs."""
    n: int
    depth: int
    causal: bool
    preds: list[list[int]] = field(default_factory=list)

    @property
    def inputs(self) -> np.ndarray:
        return np.arange(self.n)

    @property
    def outputs(self) -> np.ndarray:
        return self.depth * self.n + np.arange(self.n)

    def node(self, layer: int, pos: int) -> int:
        return layer * self.n + pos


def _layer_sources(spec: LayerSpec, layer: int, p: int) -> Sequence[int]:
    n = spec.n
    if spec.kind == "self_attention":
        return range(n)
    if spec.kind == "recurrent":
        return [p]
    if spec.kind == "restricted_self_attention":
        return restricted_window(p, n, spec.r).tolist()
    dilation = spec.k ** layer if spec.dilated else 1
    return [p - int(o) for o in conv_offsets(spec.k, dilation) if p - o >= 0]


def dependency_graph(spec: LayerSpec, depth: int = 1) -> DependencyGraph:
    """Stack ``depth`` layers of ``spec`` and record every data dependency."""
    g = DependencyGraph(spec.n, depth, causal=spec.kind in (
        "recurrent", "convolutional", "separable_convolutional"))
    g.preds = [[] for _ in range(spec.n)]
    for layer in range(depth):
        for p in range(spec.n):
            ps = [g.node(layer, q) for q in _layer_sources(spec, layer, p)]
            if spec.kind == "recurrent" and p > 0:
                ps.append(g.node(layer + 1, p - 1))  # hidden state chain
            g.preds.append(ps)
    return g


def bfs_distances(graph: DependencyGraph) -> np.ndarray:
    """Shortest path lengths ``[input, output]``; -1 where unreachable.

    Level-synchronous BFS from every input at once; the set of sources that
    reached a node is a packed bitset, one bit per input position.
    """
    num = len(graph.preds)
    width = max(len(p) for p in graph.preds)
    sentinel = num
    pred = np.full((num + 1, max(width, 1)), sentinel, dtype=np.int64)
    for v, ps in enumerate(graph.preds):
        pred[v, : len(ps)] = ps
    words = (graph.n + 63) // 64
    visited = np.zeros((num + 1, words), dtype=np.uint64)
    for s in range(graph.n):
        visited[graph.inputs[s], s // 64] |= np.uint64(1) << np.uint64(s % 64)
    frontier = visited.copy()
    dist = np.full((graph.n, graph.n), -1, dtype=np.int64)
    outs = graph.outputs
    is_out = np.zeros(num + 1, dtype=bool)
    is_out[outs] = True
    level = 0
    while frontier.any():
        level += 1
        active = frontier.any(axis=1)
        todo = np.flatnonzero(active[pred].any(axis=1))
        new = np.zeros_like(frontier)
        new[todo] = np.bitwise_or.reduce(frontier[pred[todo]], axis=1) & ~visited[todo]
        new[sentinel] = 0
        visited |= new
        frontier = new
        reached = todo[is_out[todo]]
        if len(reached):
            bits = np.unpackbits(new[reached].view(np.uint8), axis=1, bitorder="little")[:, : graph.n]
            cols = reached - outs[0]
            hit = (bits.T == 1) & (dist[:, cols] < 0)
            sub = dist[:, cols]
            sub[hit] = level
            dist[:, cols] = sub
    return dist


def required_pairs(graph: DependencyGraph) -> np.ndarray:
    i, j = np.meshgrid(np.arange(graph.n), np.arange(graph.n), indexing="ij")
    return i <= j if graph.causal else np.ones_like(i, dtype=bool)


def max_path_length(graph: DependencyGraph, spec: LayerSpec | None = None) -> int | None:
    """Longest shortest path over required (input, output) pairs, None if any is unreachable."""
    dist = bfs_distances(graph)
    d = dist[required_pairs(graph)]
    if (d < 0).any():
        return None
    return int(d.max())


def connecting_depth(spec: LayerSpec, limit: int | None = None) -> tuple[int, int]:
    """Smallest stack depth connecting all required pairs, and its path length."""
    if spec.kind in ("self_attention", "recurrent"):
        g = dependency_graph(spec, 1)
        return 1, max_path_length(g, spec)
    limit = limit or spec.n

    def path_at(depth):
        return max_path_length(dependency_graph(spec, depth), spec)

    # every layer keeps each position's own input, so reachability only grows
    # with depth and the smallest connecting depth can be found by bisection
    hi = 1
    while path_at(hi) is None:
        if hi >= limit:
            raise RuntimeError(f"{spec} not connected within {limit} layers")
        hi = min(2 * hi, limit)
    lo = hi // 2  # lo == 0 or disconnected at lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if path_at(mid) is None:
            lo = mid
        else:
            hi = mid
    return hi, path_at(hi)


def run_layer(spec: LayerSpec, seed: int = 0, measure_paths: bool | None = None) -> CostReport:
    """Run one forward pass of ``spec`` with counting arithmetic.

    Path lengths need an explicit graph, so by default they are only measured
    for ``n <= 128``.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((spec.n, spec.d))
    c = MacCounter()
    mem: list[int] = []
    if spec.kind == "self_attention":
        _, tr, core = _self_attention(x, rng, c, mem)
    elif spec.kind == "restricted_self_attention":
        _, tr, core = _restricted_attention(x, spec.r, rng, c, mem)
    elif spec.kind == "recurrent":
        _, tr, core = _recurrent(x, rng, c, mem)
    elif spec.kind == "convolutional":
        # one layer of the dilated stack has dilation 1, same cost either way
        _, tr, core = _causal_conv(x, spec.k, 1, rng, c, mem)
    else:
        _, tr, core = _separable_conv(x, spec.k, rng, c, mem)
    if measure_paths is None:
        measure_paths = spec.n <= 128
    depth, path = connecting_depth(spec) if measure_paths else (1, None)
    return CostReport(mac_count=c.macs, sequential_ops=tr.sequential_ops, max_path_length=path,
                      attention_memory=sum(mem), core_macs=core, stack_depth=depth)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log2(np.asarray(xs, float)), np.log2(np.asarray(ys, float)), 1)
    return float(slope)


def scaling_fit(kind: str, sweep: Sequence[LayerSpec], axis: str, metric: str = "mac_count") -> float:
    """Least-squares slope of log2(metric) against log2(axis value)."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if len(sweep) < 4:
        raise ValueError("scaling fit needs at least 4 points")
    for s in sweep:
        if s.kind != kind:
            raise ValueError(f"sweep mixes kinds ({s.kind} != {kind})")
    base = {a: getattr(sweep[0], a) for a in AXES if a != axis}
    for s in sweep:
        if any(getattr(s, a) != v for a, v in base.items()):
            raise ValueError(f"sweep varies more than axis {axis}")
    xs = [getattr(s, axis) for s in sweep]
    if len(set(xs)) != len(xs):
        raise ValueError("sweep repeats axis values")
    ys = [getattr(run_layer(s, measure_paths=False), metric) for s in sweep]
    return loglog_slope(xs, ys)


# report

DOUBLINGS = (64, 128, 256, 512)

# (kind, axis, base spec, sweep values, expected exponent); each sweep sits in
# the regime where the named term dominates
DEFAULT_SWEEPS = [
    ("self_attention", "n", LayerSpec("self_attention", 64, 4), DOUBLINGS, 2.0),
    ("self_attention", "d", LayerSpec("self_attention", 512, 4), (4, 8, 16, 32), 1.0),
    ("recurrent", "n", LayerSpec("recurrent", 64, 16), DOUBLINGS, 1.0),
    ("recurrent", "d", LayerSpec("recurrent", 16, 32), (32, 64, 128, 256), 2.0),
    ("convolutional", "n", LayerSpec("convolutional", 64, 8, k=3), DOUBLINGS, 1.0),
    ("convolutional", "d", LayerSpec("convolutional", 64, 8, k=3), (8, 16, 32, 64), 2.0),
    ("convolutional", "k", LayerSpec("convolutional", 64, 8, k=2), (2, 4, 8, 16), 1.0),
    ("restricted_self_attention", "n", LayerSpec("restricted_self_attention", 64, 4, r=64), DOUBLINGS, 1.0),
    ("restricted_self_attention", "r", LayerSpec("restricted_self_attention", 512, 4, r=64), DOUBLINGS, 1.0),
    ("restricted_self_attention", "d", LayerSpec("restricted_self_attention", 512, 2, r=512), (2, 4, 8, 16), 1.0),
    ("separable_convolutional", "n", LayerSpec("separable_convolutional", 64, 8, k=3), DOUBLINGS, 1.0),
    ("separable_convolutional", "k", LayerSpec("separable_convolutional", 512, 4, k=64), DOUBLINGS, 1.0),
    ("separable_convolutional", "d", LayerSpec("separable_convolutional", 64, 64, k=2), DOUBLINGS, 2.0),
]

ASYMPTOTIC = {
    "self_attention": ("O(n^2*d)", "O(1)", "O(1)"),
    "recurrent": ("O(n*d^2)", "O(n)", "O(n)"),
    "convolutional": ("O(k*n*d^2)", "O(1)", "O(log_k(n))"),
    "restricted_self_attention": ("O(r*n*d)", "O(1)", "O(n/r)"),
    "separable_convolutional": ("O(k*n*d+n*d^2)", "O(1)", "O(n/k)"),
}

EXPONENT_TOL = 0.1
MEMORY_TOL = 0.05
PATH_N = (8, 16, 32, 64)  # sequence lengths for the sequential-op and path checks
RESTRICTED_R = (17, 33, 65)
RESTRICTED_MULTIPLES = (2, 4, 8, 16)
RESTRICTED_SLOPE = 2.0  # symmetric window reaches about r/2 each way per layer
RESTRICTED_TOL = 0.10


@dataclass
class Row:
    kind: str
    axis: str
    measured_exponent: float | None
    expected_exponent: float | None
    sequential_ops: str
    max_path_length: str
    passed: bool
    asymptotic: str = ""

    def csv_row(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.4f}"
        return [self.kind, self.axis, fmt(self.measured_exponent), fmt(self.expected_exponent),
                self.sequential_ops, self.max_path_length, "pass" if self.passed else "FAIL"]


@dataclass
class Report:
    rows: list[Row]
    checks: list[tuple[str, str, bool]]  # (name, detail, pass)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows) and all(ok for _, _, ok in self.checks)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "axis", "measured_exponent", "expected_exponent",
                    "sequential_ops", "max_path_length", "pass"])
        for r in self.rows:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def render_text(self) -> str:
        header = ["kind", "axis", "measured", "expected", "seq_ops", "path", "asymptotic", "pass"]
        body = [[r.kind, r.axis, *r.csv_row()[2:6], r.asymptotic, "pass" if r.passed else "FAIL"]
                for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip()
                 for line in [header, *body]]
        lines.append("")
        for name, detail, ok in self.checks:
            lines.append(f"{'pass' if ok else 'FAIL'}  {name}: {detail}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _sequential_summary(kind: str) -> tuple[str, bool]:
    seq = {n: run_layer(LayerSpec(kind, n, 4, k=min(3, n), r=min(3, n)), measure_paths=False).sequential_ops
           for n in PATH_N}
    if kind == "recurrent":
        return "n", all(s == n for n, s in seq.items())
    vals = set(seq.values())
    return (str(vals.pop()) if len(vals) == 1 else "varies"), len(set(seq.values())) == 1 and 1 in seq.values()


def _path_summary(kind: str) -> tuple[str, bool]:
    """Measured path length next to its closed form, over ``PATH_N``."""
    if kind == "self_attention":
        got = [run_layer(LayerSpec(kind, n, 4)).max_path_length for n in PATH_N]
        return str(got[0]), all(g == 1 for g in got)
    if kind == "recurrent":
        got = [run_layer(LayerSpec(kind, n, 4)).max_path_length for n in PATH_N]
        return "n", got == list(PATH_N)
    if kind == "convolutional":
        ok = True
        for k in (2, 3, 4):
            for n in PATH_N:
                depth, path = connecting_depth(LayerSpec(kind, n, 4, k=k, dilated=True))
                want = math.ceil(round(math.log(n, k), 9))
                ok &= depth == path == want
        return "ceil(log_k n)", ok
    if kind == "separable_convolutional":
        ok = True
        for k in (2, 3, 5):
            for n in PATH_N:
                depth, path = connecting_depth(LayerSpec(kind, n, 4, k=k))
                ok &= path == math.ceil((n - 1) / (k - 1))
        return "ceil((n-1)/(k-1))", ok
    slopes = restricted_path_slopes()
    ok = all(abs(s - RESTRICTED_SLOPE) <= RESTRICTED_TOL * RESTRICTED_SLOPE and r2 >= 0.99
             for s, r2 in slopes.values())
    return "~" + "/".join(f"{s:.2f}" for s, _ in slopes.values()) + "*n/r", ok


def restricted_path_points(r: int) -> list[tuple[float, int]]:
    """(n/r, measured stack path length) for the restricted kind at fixed r."""
    pts = []
    for m in RESTRICTED_MULTIPLES:
        _, path = connecting_depth(LayerSpec("restricted_self_attention", m * r, 2, r=r))
        pts.append((float(m), path))
    return pts


def restricted_path_slopes() -> dict[int, tuple[float, float]]:
    """Per-r linear fit of path length on n/r: (slope, r^2)."""
    out = {}
    for r in RESTRICTED_R:
        xs, ys = map(np.asarray, zip(*restricted_path_points(r)))
        slope, icept = np.polyfit(xs, ys, 1)
        resid = ys - (slope * xs + icept)
        r2 = 1.0 - float((resid ** 2).sum() / ((ys - ys.mean()) ** 2).sum())
        out[r] = (float(slope), r2)
    return out


def separable_equivalence(n: int = 64, d: int = 16) -> tuple[int, int, float]:
    """MACs of a separable conv with k=n against attention core plus a d->d pointwise layer."""
    sep = run_layer(LayerSpec("separable_convolutional", n, d, k=n), measure_paths=False).mac_count
    core = run_layer(LayerSpec("self_attention", n, d), measure_paths=False).core_macs
    combo = core + n * d * d
    return sep, combo, sep / combo


def conv_recurrent_ratio(ks=(2, 4, 8, 16), n: int = 64, d: int = 8) -> list[float]:
    rec = run_layer(LayerSpec("recurrent", n, d), measure_paths=False).mac_count
    return [run_layer(LayerSpec("convolutional", n, d, k=k), measure_paths=False).mac_count / rec
            for k in ks]


def report_table(sweeps=None) -> Report:
    sweeps = DEFAULT_SWEEPS if sweeps is None else sweeps
    swept = {s[0] for s in sweeps}
    missing = [k for k in KINDS if k not in swept]
    if missing:
        raise ValueError(f"missing sweeps for: {', '.join(missing)}")
    seq = {k: _sequential_summary(k) for k in KINDS}
    path = {k: _path_summary(k) for k in KINDS}
    rows = []
    for kind, axis, base, values, expected in sweeps:
        measured = scaling_fit(kind, [base.with_axis(axis, v) for v in values], axis)
        ok = abs(measured - expected) <= EXPONENT_TOL and seq[kind][1] and path[kind][1]
        rows.append(Row(kind, axis, measured, expected, seq[kind][0], path[kind][0], ok,
                        " / ".join(ASYMPTOTIC[kind])))

    checks = []
    mem = scaling_fit("self_attention", [LayerSpec("self_attention", n, 4) for n in DOUBLINGS],
                      "n", metric="attention_memory")
    checks.append(("attention memory exponent in n", f"{mem:.4f} (expected 2.0)",
                   abs(mem - 2.0) <= MEMORY_TOL))
    sep, combo, ratio = separable_equivalence()
    checks.append(("separable conv k=n vs attention core + pointwise",
                   f"{sep} vs {combo} MACs, ratio {ratio:.3f}", 0.5 <= ratio <= 2.0))
    ks = (2, 4, 8, 16)
    ratios = conv_recurrent_ratio(ks)
    slope = loglog_slope(ks, ratios)
    checks.append(("conv/recurrent MAC ratio grows like k",
                   ", ".join(f"k={k}:{q:g}" for k, q in zip(ks, ratios)) + f"; exponent {slope:.4f}",
                   abs(slope - 1.0) <= EXPONENT_TOL))
    r_eq = run_layer(LayerSpec("restricted_self_attention", 32, 4, r=32), measure_paths=False).core_macs
    full = run_layer(LayerSpec("self_attention", 32, 4), measure_paths=False).core_macs
    checks.append(("restricted r=n core equals full attention core", f"{r_eq} vs {full}", r_eq == full))
    return Report(rows, checks)
