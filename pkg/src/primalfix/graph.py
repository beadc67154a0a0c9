"""Mixed graphs over observed vertices and the structural queries used by the estimators.

A graph is an immutable value. Vertices are addressed by name and may span several
data columns (``arity``); the graph layer itself never looks at data.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

__all__ = [
    "GraphError",
    "NotPrimalFixableError",
    "Vertex",
    "Dag",
    "Admg",
    "CausalPartition",
    "validate",
    "latent_project",
    "topological_order",
    "districts",
    "district",
    "markov_blanket",
    "markov_pillow",
    "primal_fixable",
    "fixability_conflicts",
    "partition_mlx",
    "mb_shielded",
    "merge_vertices",
    "load_graph",
    "graph_from_dict",
    "graph_to_dict",
]


class GraphError(ValueError):
    """Raised for malformed graphs or unsatisfiable structural requests."""


class NotPrimalFixableError(GraphError):
    """Raised when the treatment has a child inside its own district."""

    def __init__(self, treatment: str, conflicts: Iterable[str]):
        self.treatment = treatment
        self.conflicts = tuple(sorted(conflicts))
        super().__init__(
            f"treatment {treatment!r} is not primal fixable; "
            f"children inside its district: {', '.join(self.conflicts)}"
        )


@dataclass(frozen=True)
class Vertex:
    """A named vertex spanning ``arity`` data columns."""

    name: str
    arity: int = 1

    def __post_init__(self):
        if not self.name:
            raise GraphError("vertex name must be non-empty")
        if int(self.arity) < 1:
            raise GraphError(f"vertex {self.name!r} has arity {self.arity} < 1")


def _as_vertices(vertices: Iterable[Vertex | str]) -> tuple[Vertex, ...]:
    out = []
    for v in vertices:
        out.append(v if isinstance(v, Vertex) else Vertex(str(v)))
    names = [v.name for v in out]
    if len(set(names)) != len(names):
        raise GraphError("vertex names must be unique")
    return tuple(out)


def _norm_bi(pair: Iterable[str]) -> tuple[str, str]:
    a, b = pair
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class _GraphBase:
    vertices: tuple[Vertex, ...]
    di_edges: frozenset[tuple[str, str]]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.vertices)

    def arity(self, name: str) -> int:
        return self._vertex(name).arity

    def _vertex(self, name: str) -> Vertex:
        for v in self.vertices:
            if v.name == name:
                return v
        raise GraphError(f"unknown vertex {name!r}")

    def has_vertex(self, name: str) -> bool:
        return any(v.name == name for v in self.vertices)

    def parents(self, name: str) -> frozenset[str]:
        return frozenset(u for u, w in self.di_edges if w == name)

    def children(self, name: str) -> frozenset[str]:
        return frozenset(w for u, w in self.di_edges if u == name)

    def descendants(self, name: str) -> frozenset[str]:
        """Vertices reachable by directed paths from ``name``, including itself."""
        seen = {name}
        stack = [name]
        while stack:
            u = stack.pop()
            for w in self.children(u):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return frozenset(seen)

    def ancestors(self, name: str) -> frozenset[str]:
        seen = {name}
        stack = [name]
        while stack:
            u = stack.pop()
            for w in self.parents(u):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return frozenset(seen)


@dataclass(frozen=True)
class Dag(_GraphBase):
    """Directed acyclic graph in which some vertices may be unmeasured."""

    hidden: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def build(
        cls,
        vertices: Iterable[Vertex | str],
        di_edges: Iterable[Sequence[str]] = (),
        hidden: Iterable[str] = (),
    ) -> "Dag":
        dag = cls(
            _as_vertices(vertices),
            frozenset((str(a), str(b)) for a, b in di_edges),
            frozenset(hidden),
        )
        problems = validate(dag)
        if problems:
            raise GraphError("; ".join(problems))
        return dag

    @property
    def observed(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n not in self.hidden)


@dataclass(frozen=True)
class Admg(_GraphBase):
    """Acyclic directed mixed graph over observed vertices.

    Bidirected edges are stored as name pairs sorted lexicographically.
    """

    bi_edges: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    @classmethod
    def build(
        cls,
        vertices: Iterable[Vertex | str],
        di_edges: Iterable[Sequence[str]] = (),
        bi_edges: Iterable[Sequence[str]] = (),
    ) -> "Admg":
        g = cls.unchecked(vertices, di_edges, bi_edges)
        problems = validate(g)
        if problems:
            raise GraphError("; ".join(problems))
        return g

    @classmethod
    def unchecked(
        cls,
        vertices: Iterable[Vertex | str],
        di_edges: Iterable[Sequence[str]] = (),
        bi_edges: Iterable[Sequence[str]] = (),
    ) -> "Admg":
        """Construct without validation, e.g. to report problems with :func:`validate`."""
        return cls(
            _as_vertices(vertices),
            frozenset((str(a), str(b)) for a, b in di_edges),
            frozenset(_norm_bi((str(a), str(b))) for a, b in bi_edges),
        )

    def siblings(self, name: str) -> frozenset[str]:
        out = set()
        for a, b in self.bi_edges:
            if a == name:
                out.add(b)
            elif b == name:
                out.add(a)
        return frozenset(out)

    def adjacent(self, u: str, v: str) -> bool:
        return (
            (u, v) in self.di_edges
            or (v, u) in self.di_edges
            or _norm_bi((u, v)) in self.bi_edges
        )

    def subgraph(self, keep: Iterable[str]) -> "Admg":
        keep = set(keep)
        return Admg(
            tuple(v for v in self.vertices if v.name in keep),
            frozenset(e for e in self.di_edges if e[0] in keep and e[1] in keep),
            frozenset(e for e in self.bi_edges if e[0] in keep and e[1] in keep),
        )

    def __str__(self) -> str:
        di = ", ".join(f"{a}->{b}" for a, b in sorted(self.di_edges))
        bi = ", ".join(f"{a}<->{b}" for a, b in sorted(self.bi_edges))
        return f"Admg(vertices={list(self.names)}, di=[{di}], bi=[{bi}])"


def _find_cycle(names: Sequence[str], di_edges: Iterable[tuple[str, str]]) -> list[str] | None:
    children: dict[str, list[str]] = {n: [] for n in names}
    for a, b in di_edges:
        if a in children:
            children[a].append(b)
    state: dict[str, int] = {}
    for root in names:
        if root in state:
            continue
        stack = [(root, iter(children[root]))]
        path = [root]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                path.pop()
                continue
            if nxt not in children:
                continue
            if state.get(nxt) == 1:
                return path[path.index(nxt):] + [nxt]
            if nxt not in state:
                state[nxt] = 1
                stack.append((nxt, iter(children[nxt])))
                path.append(nxt)
    return None


def validate(graph: _GraphBase) -> list[str]:
    """Return a list of structural problems; an empty list means the graph is valid.

    Checks for dangling edges, self-loops and directed cycles. For a :class:`Dag`
    it also checks that the hidden set is a subset of the vertices.
    """
    names = set(graph.names)
    problems = []
    edges = [("->", e) for e in graph.di_edges]
    edges += [("<->", e) for e in getattr(graph, "bi_edges", ())]
    for kind, (a, b) in sorted(edges):
        for end in (a, b):
            if end not in names:
                problems.append(f"dangling edge {a}{kind}{b}: unknown vertex {end!r}")
        if a == b:
            problems.append(f"self-loop {a}{kind}{b}")
    hidden = getattr(graph, "hidden", frozenset())
    for h in sorted(hidden - names):
        problems.append(f"hidden vertex {h!r} is not a vertex")
    cycle = _find_cycle(sorted(names), sorted(e for e in graph.di_edges if e[0] != e[1]))
    if cycle:
        problems.append("cycle " + " -> ".join(cycle))
    return problems


def latent_project(dag: Dag) -> Admg:
    """Project out the hidden vertices of ``dag``.

    An observed pair gets a directed edge when a directed path between them has only
    hidden interior vertices, and a bidirected edge when some hidden vertex reaches
    both through hidden-only directed paths.
    """
    problems = validate(dag)
    if problems:
        raise GraphError("; ".join(problems))
    hidden = dag.hidden

    def observed_reach(start: str) -> set[str]:
        found: set[str] = set()
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for w in dag.children(u):
                if w in seen:
                    continue
                seen.add(w)
                if w in hidden:
                    stack.append(w)
                else:
                    found.add(w)
        return found

    di = set()
    for o in dag.observed:
        for w in observed_reach(o):
            di.add((o, w))
    bi = set()
    for u in sorted(hidden):
        reach = sorted(observed_reach(u))
        for i, a in enumerate(reach):
            for b in reach[i + 1:]:
                bi.add((a, b))
    vertices = [v for v in dag.vertices if v.name not in hidden]
    return Admg.build(vertices, di, bi)


def _kahn(graph: _GraphBase, subset: set[str]) -> list[str]:
    indeg = {v: 0 for v in subset}
    for a, b in graph.di_edges:
        if a in subset and b in subset:
            indeg[b] += 1
    heap = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        u = heapq.heappop(heap)
        out.append(u)
        for w in sorted(graph.children(u)):
            if w in subset:
                indeg[w] -= 1
                if indeg[w] == 0:
                    heapq.heappush(heap, w)
    if len(out) != len(subset):
        raise GraphError("graph has a directed cycle")
    return out


def topological_order(admg: _GraphBase, treatment: str, outcome: str) -> tuple[str, ...]:
    """Deterministic topological order with the treatment after all its non-descendants.

    Non-descendants of the treatment come first, then the treatment, then its
    descendants, with the outcome last. Ties within each block are broken
    lexicographically by vertex name.
    """
    problems = validate(admg)
    if problems:
        raise GraphError("; ".join(problems))
    for v in (treatment, outcome):
        admg._vertex(v)
    if treatment == outcome:
        raise GraphError("treatment and outcome must differ")
    if admg.children(outcome):
        raise GraphError(f"outcome {outcome!r} has descendants: {sorted(admg.children(outcome))}")
    desc = set(admg.descendants(treatment))
    before = set(admg.names) - desc - {outcome}
    after = desc - {treatment, outcome}
    return tuple(_kahn(admg, before) + [treatment] + _kahn(admg, after) + [outcome])


def check_order(graph: _GraphBase, order: Sequence[str]) -> None:
    """Raise unless ``order`` lists every vertex once and respects every directed edge."""
    if sorted(order) != sorted(graph.names):
        raise GraphError("order must list every vertex exactly once")
    pos = {v: i for i, v in enumerate(order)}
    for a, b in graph.di_edges:
        if pos[a] > pos[b]:
            raise GraphError(f"order places {b!r} before its parent {a!r}")


def districts(admg: Admg) -> frozenset[frozenset[str]]:
    """Connected components of the bidirected part of ``admg``."""
    parent = {v: v for v in admg.names}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in admg.bi_edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, set[str]] = {}
    for v in admg.names:
        groups.setdefault(find(v), set()).add(v)
    return frozenset(frozenset(g) for g in groups.values())


def district(admg: Admg, v: str) -> frozenset[str]:
    admg._vertex(v)
    for d in districts(admg):
        if v in d:
            return d
    raise GraphError(f"unknown vertex {v!r}")  # pragma: no cover


def _blanket(admg: Admg, v: str) -> frozenset[str]:
    d = district(admg, v)
    pa = set()
    for u in d:
        pa |= admg.parents(u)
    return frozenset((set(d) | pa) - {v})


def markov_blanket(admg: Admg, v: str) -> frozenset[str]:
    """District of ``v`` plus the parents of that district, without ``v``."""
    return _blanket(admg, v)


def markov_pillow(admg: Admg, order: Sequence[str], v: str) -> frozenset[str]:
    """Markov blanket of ``v`` in the subgraph induced by ``v`` and its predecessors."""
    admg._vertex(v)
    check_order(admg, order)
    prefix = order[: list(order).index(v) + 1]
    return _blanket(admg.subgraph(prefix), v)


def fixability_conflicts(admg: Admg, treatment: str) -> frozenset[str]:
    """Children of the treatment that share its district."""
    return admg.children(treatment) & district(admg, treatment)


def primal_fixable(admg: Admg, treatment: str) -> bool:
    return not fixability_conflicts(admg, treatment)


@dataclass(frozen=True)
class CausalPartition:
    """Split of the vertices around a primal-fixable treatment.

    Attributes
    ----------
    treatment, outcome : str
    order : tuple of str
        Topological order used for all Markov pillows.
    pre : frozenset
        Vertices preceding the treatment.
    district_post : frozenset
        Post-treatment vertices in the treatment's district, plus the treatment.
    outside_post : frozenset
        Remaining post-treatment vertices.
    mediators : tuple of str
        Post-treatment vertices other than the outcome, in order.
    labels : mapping
        ``"a0"`` or ``"a1"`` for each mediator and the outcome.
    pillows : mapping
        Markov pillow of every vertex under ``order``.
    """

    treatment: str
    outcome: str
    order: tuple[str, ...]
    pre: frozenset[str]
    district_post: frozenset[str]
    outside_post: frozenset[str]
    mediators: tuple[str, ...]
    labels: Mapping[str, str]
    pillows: Mapping[str, frozenset[str]]

    @property
    def K(self) -> int:
        return len(self.mediators)

    def level(self, v: str, a0: int) -> int:
        """Treatment level assigned to ``v`` when the reference level is ``a0``."""
        return a0 if self.labels[v] == "a0" else 1 - a0

    def pillow(self, v: str) -> tuple[str, ...]:
        """Markov pillow of ``v`` listed in topological order."""
        mp = self.pillows[v]
        return tuple(u for u in self.order if u in mp)

    def pillow_without_treatment(self, v: str) -> tuple[str, ...]:
        return tuple(u for u in self.pillow(v) if u != self.treatment)

    def regression_inputs(self, v: str) -> tuple[str, ...]:
        """Conditioning set of the sequential regression attached to ``v``, in order.

        For the outcome this is its pillow. For a mediator it is its pillow together
        with every vertex before it that the next regression conditions on; the pillow
        alone would integrate those vertices against the wrong treatment arm.
        """
        if v == self.outcome:
            return self.pillow(v)
        k = self.mediators.index(v)
        nxt = self.mediators[k + 1] if k + 1 < self.K else self.outcome
        keep = (set(self.regression_inputs(nxt)) - {v}) | set(self.pillows[v])
        return tuple(u for u in self.order if u in keep)

    def ratio_terms(self, v: str) -> tuple[bool, tuple[str, ...]]:
        """Factors of the density-ratio product attached to ``v``.

        Returns ``(uses_treatment_odds, mediators)`` where the product is the
        treatment odds (when flagged) times the ratios of the listed mediators.
        A vertex in the treatment's district collects earlier mediators outside it;
        a vertex outside collects the treatment odds and earlier district mediators.
        """
        pos = self.order.index(v)
        earlier = [z for z in self.mediators if self.order.index(z) < pos]
        if v in self.district_post:
            return False, tuple(z for z in earlier if z in self.outside_post)
        return True, tuple(z for z in earlier if z in self.district_post)


def partition_mlx(
    admg: Admg, order: Sequence[str], treatment: str, outcome: str
) -> CausalPartition:
    """Partition the vertices around ``treatment`` and label every mediator."""
    check_order(admg, order)
    order = tuple(order)
    if order[-1] != outcome:
        raise GraphError("the outcome must be last in the order")
    conflicts = fixability_conflicts(admg, treatment)
    if conflicts:
        raise NotPrimalFixableError(treatment, conflicts)
    pos = order.index(treatment)
    desc = admg.descendants(treatment)
    if any(u in desc for u in order[:pos]):
        raise GraphError("the order places a descendant of the treatment before it")
    dis_a = district(admg, treatment)
    post = order[pos + 1:]
    district_post = frozenset({treatment} | {v for v in post if v in dis_a})
    outside_post = frozenset(v for v in post if v not in dis_a)
    mediators = tuple(v for v in post if v != outcome)
    labels = {v: ("a0" if v in outside_post else "a1") for v in post}
    pillows = {v: markov_pillow(admg, order, v) for v in order}
    return CausalPartition(
        treatment=treatment,
        outcome=outcome,
        order=order,
        pre=frozenset(order[:pos]),
        district_post=district_post,
        outside_post=outside_post,
        mediators=mediators,
        labels=labels,
        pillows=pillows,
    )


def mb_shielded(admg: Admg) -> bool:
    """True when every non-adjacent pair is mutually outside each other's Markov blanket."""
    names = admg.names
    blankets = {v: markov_blanket(admg, v) for v in names}
    for i, u in enumerate(names):
        for v in names[i + 1:]:
            if admg.adjacent(u, v):
                continue
            if u in blankets[v] or v in blankets[u]:
                return False
    return True


def merge_vertices(admg: Admg, group: Iterable[str], new_name: str) -> Admg:
    """Contract ``group`` into one vertex whose arity is the sum of the members' arities.

    The merged vertex takes the position of the earliest member in the vertex list.
    Edges inside the group are dropped and parallel edges collapse.
    """
    group = set(group)
    if not group:
        raise GraphError("cannot merge an empty group")
    for v in group:
        admg._vertex(v)
    if new_name in admg.names and new_name not in group:
        raise GraphError(f"vertex name {new_name!r} already in use")
    arity = sum(admg.arity(v) for v in group)
    vertices = []
    placed = False
    for v in admg.vertices:
        if v.name in group:
            if not placed:
                vertices.append(Vertex(new_name, arity))
                placed = True
        else:
            vertices.append(v)

    def rename(v):
        return new_name if v in group else v

    di = {(rename(a), rename(b)) for a, b in admg.di_edges}
    bi = {_norm_bi((rename(a), rename(b))) for a, b in admg.bi_edges}
    di = {e for e in di if e[0] != e[1]}
    bi = {e for e in bi if e[0] != e[1]}
    merged = Admg.unchecked(vertices, di, bi)
    cycle = _find_cycle(merged.names, merged.di_edges)
    if cycle:
        raise GraphError("merging creates a directed cycle " + " -> ".join(cycle))
    return merged


def graph_from_dict(spec: Mapping) -> Admg | Dag:
    """Build a graph from the JSON layout used on disk.

    A vertex is either ``{"name": ..., "arity": ...}`` or a bare name (arity 1).
    Returns a :class:`Dag` when ``hidden`` is non-empty and an :class:`Admg` otherwise.
    """
    try:
        vertices = [
            Vertex(v, 1) if isinstance(v, str) else Vertex(str(v["name"]), int(v.get("arity", 1)))
            for v in spec["vertices"]
        ]
        di = [tuple(e) for e in spec.get("di_edges", [])]
        bi = [tuple(e) for e in spec.get("bi_edges", [])]
        hidden = list(spec.get("hidden", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed graph description: {exc}") from exc
    if any(len(e) != 2 for e in di + bi):
        raise GraphError("edges must be pairs of vertex names")
    if hidden:
        if bi:
            raise GraphError("hidden vertices are only allowed in graphs without bidirected edges")
        return Dag.build(vertices, di, hidden)
    return Admg.build(vertices, di, bi)


def graph_to_dict(graph: Admg | Dag) -> dict:
    out = {
        "vertices": [{"name": v.name, "arity": v.arity} for v in graph.vertices],
        "di_edges": [list(e) for e in sorted(graph.di_edges)],
        "bi_edges": [list(e) for e in sorted(getattr(graph, "bi_edges", ()))],
    }
    if isinstance(graph, Dag):
        out["hidden"] = sorted(graph.hidden)
    return out


def load_graph(path: str | Path) -> Admg | Dag:
    """Read a graph JSON file; raises :class:`GraphError` on any parse problem."""
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphError(f"cannot read graph file {path}: {exc}") from exc
    return graph_from_dict(spec)
