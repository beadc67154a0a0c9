"""Exact discrete laws: brute-force identification and integer-count datasets.

Random laws are Markov relative to an ADMG by construction: each bidirected edge
becomes a hidden binary cause of its two endpoints, and every conditional
probability is 1/3 or 2/3. The joint law of the observed vertices is then a
multiple of ``3 ** -F`` (``F`` = observed plus hidden vertices), so it can be
written as an integer-count dataset whose empirical law is exactly the target law.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset
from .graph import Admg, CausalPartition, primal_fixable

__all__ = [
    "OracleError",
    "JointTable",
    "brute_force_psi",
    "random_fixable_admg",
    "random_markov_law",
    "law_dataset",
    "load_joint_table",
]


class OracleError(ValueError):
    """Raised for malformed tables or zero-probability conditioning events."""


@dataclass(frozen=True)
class JointTable:
    """Joint probability table over discrete vertices.

    ``probs`` has one axis per vertex in ``names``; values of a vertex are the axis
    indices ``0 .. arity - 1``. ``counts`` optionally holds integer counts with
    ``probs = counts / counts.sum()``.
    """

    names: tuple[str, ...]
    probs: np.ndarray
    counts: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "probs", probs)
        if probs.ndim != len(self.names):
            raise OracleError("table needs one axis per vertex")
        if len(set(self.names)) != len(self.names):
            raise OracleError("duplicate vertex names")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise OracleError("table must be non-negative and sum to 1")

    @classmethod
    def from_counts(cls, names: Sequence[str], counts: np.ndarray) -> "JointTable":
        counts = np.asarray(counts, dtype=np.int64)
        return cls(tuple(names), counts / counts.sum(), counts)

    def axis(self, v: str) -> int:
        try:
            return self.names.index(v)
        except ValueError:
            raise OracleError(f"vertex {v!r} is not in the table") from None

    def marginal(self, assignment: Mapping[str, int]) -> float:
        """P(V = v for every (V, v) in ``assignment``)."""
        for v, value in assignment.items():
            if not 0 <= value < self.probs.shape[self.axis(v)]:
                return 0.0
        index = tuple(assignment.get(v, slice(None)) for v in self.names)
        return float(np.sum(self.probs[index]))

    def conditional(self, target: Mapping[str, int], given: Mapping[str, int]) -> float:
        """P(target | given); raises on a zero-probability conditioning event."""
        denom = self.marginal(given)
        if denom <= 0:
            raise OracleError(f"positivity violation: P({dict(given)}) = 0")
        return self.marginal({**given, **target}) / denom


def brute_force_psi(table: JointTable, partition: CausalPartition, a0: int) -> float:
    """E[Y(a0)] by full enumeration of the identifying formula.

    Sums over every configuration of the non-treatment vertices of
    ``y * P(x) * P(a1 | mp(A)) * prod_Z P(z | mp(z), A = a_Z)`` (the product running over
    mediators and outcome, with A set only where it is in the pillow), then adds
    ``E[I(A = a0) Y]``. Pre-treatment vertices enter through their joint marginal.
    """
    p = partition
    A, Y = p.treatment, p.outcome
    a1 = 1 - a0
    pre = [v for v in p.order if v in p.pre]
    post = [v for v in p.order[p.order.index(A) + 1:]]
    arity = {v: table.probs.shape[table.axis(v)] for v in table.names}
    others = pre + post
    total = 0.0
    for values in itertools.product(*(range(arity[v]) for v in others)):
        cfg = dict(zip(others, values))
        y = cfg[Y]
        if y == 0:
            continue
        weight = table.marginal({v: cfg[v] for v in pre})
        if weight == 0:
            continue
        weight *= table.conditional({A: a1}, {v: cfg[v] for v in p.pillow(A)})
        for z in post:
            if weight == 0:
                break
            given = {v: cfg[v] for v in p.pillow(z) if v != A}
            if A in p.pillows[z]:
                given[A] = p.level(z, a0)
            weight *= table.conditional({z: cfg[z]}, given)
        total += y * weight
    observed = 0.0
    for y in range(arity[Y]):
        observed += y * table.marginal({A: a0, Y: y})
    return total + observed


def random_fixable_admg(
    rng: np.random.Generator,
    max_vertices: int = 5,
    max_bidirected: int = 3,
    edge_prob: float = 0.5,
    bi_prob: float = 0.3,
) -> tuple[Admg, str, str]:
    """A random ADMG with a primal-fixable treatment; returns ``(graph, A, Y)``.

    Vertices ``V0 .. V{k-1}`` are topologically ordered by index and the outcome is
    the last one; the treatment is any earlier vertex.
    """
    if max_vertices < 2:
        raise OracleError("need at least two vertices")
    for _ in range(10_000):
        k = int(rng.integers(2, max_vertices + 1))
        names = [f"V{i}" for i in range(k)]
        pairs = [(names[i], names[j]) for i in range(k) for j in range(i + 1, k)]
        di = [e for e in pairs if rng.random() < edge_prob]
        bi = [e for e in pairs if rng.random() < bi_prob][:max_bidirected]
        g = Admg.build(names, di, bi)
        a = names[int(rng.integers(0, k - 1))]
        if primal_fixable(g, a):
            return g, a, names[-1]
    raise OracleError("failed to draw a primal-fixable graph")


def random_markov_law(admg: Admg, rng: np.random.Generator) -> JointTable:
    """Random binary law Markov relative to ``admg``, with exact integer counts.

    Every bidirected edge gets its own hidden binary parent. Each vertex (observed
    or hidden) has P(value = 1 | parents) drawn from {1/3, 2/3} per parent
    configuration. The returned counts sum to ``3 ** F``.
    """
    names = list(admg.names)
    hidden = [f"_U{i}" for i in range(len(admg.bi_edges))]
    parents: dict[str, list[str]] = {u: [] for u in hidden}
    for v in names:
        parents[v] = sorted(admg.parents(v))
    for u, (s, t) in zip(hidden, sorted(admg.bi_edges)):
        parents[s].append(u)
        parents[t].append(u)
    order = hidden + [v for v in _topo(admg)]
    # numerator of P(V = 1 | parents) over 3: either 1 or 2
    cpt = {v: rng.integers(1, 3, size=2 ** len(parents[v])) for v in order}
    all_vars = order
    F = len(all_vars)
    counts = np.zeros((2,) * len(names), dtype=np.int64)
    for values in itertools.product((0, 1), repeat=F):
        cfg = dict(zip(all_vars, values))
        c = 1
        for v in all_vars:
            idx = 0
            for u in parents[v]:
                idx = 2 * idx + cfg[u]
            one = int(cpt[v][idx])
            c *= one if cfg[v] == 1 else 3 - one
        counts[tuple(cfg[v] for v in names)] += c
    return JointTable.from_counts(names, counts)


def _topo(admg: Admg) -> list[str]:
    out, seen = [], set()

    def visit(v):
        if v in seen:
            return
        seen.add(v)
        for u in sorted(admg.parents(v)):
            visit(u)
        out.append(v)

    for v in admg.names:
        visit(v)
    return out


def law_dataset(table: JointTable) -> Dataset:
    """Dataset whose empirical law equals ``table`` exactly (requires integer counts)."""
    if table.counts is None:
        raise OracleError("table has no integer counts")
    cells = np.argwhere(table.counts > 0)
    reps = table.counts[tuple(cells.T)]
    rows = np.repeat(cells, reps, axis=0).astype(float)
    data = {v: rows[:, i] for i, v in enumerate(table.names)}
    binary = [v for v in table.names if table.probs.shape[table.axis(v)] == 2]
    return Dataset.from_vertices(data, binary=binary)


def load_joint_table(path: str | Path) -> JointTable:
    """Read a joint table from CSV: one column per vertex plus a ``prob`` column.

    Each row is one configuration with integer vertex values; configurations not
    listed have probability zero. The probabilities must sum to 1 within 1e-9.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OracleError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise OracleError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if "prob" not in header:
        raise OracleError("joint table needs a 'prob' column")
    pcol = header.index("prob")
    names = [h for i, h in enumerate(header) if i != pcol]
    configs, probs = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        try:
            cfg = [int(row[i]) for i in range(len(header)) if i != pcol]
            prob = float(row[pcol])
        except (ValueError, IndexError):
            raise OracleError(f"malformed joint-table row on line {line}") from None
        if min(cfg) < 0:
            raise OracleError(f"negative vertex value on line {line}")
        configs.append(cfg)
        probs.append(prob)
    if not configs:
        raise OracleError("joint table has no rows")
    shape = tuple(int(v) + 1 for v in np.max(np.array(configs), axis=0))
    table = np.zeros(shape)
    for cfg, prob in zip(configs, probs):
        table[tuple(cfg)] += prob
    return JointTable(tuple(names), table)
