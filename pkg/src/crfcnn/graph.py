"""Joint graphs, their factor graphs, and message-passing schedules.

Feature group ``h_i`` is tied to joint ``z_i`` and the feature-level edge set
mirrors the joint-level one, so a :class:`JointGraph` stores a single edge
list and exposes it under both names.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

# LSP ordering
LSP_JOINTS = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head",
)
LSP_TREE_EDGES = (
    ("head", "neck"),
    ("neck", "r_shoulder"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("neck", "l_shoulder"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("neck", "r_hip"), ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
    ("neck", "l_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
)
DEFAULT_ROOT = "neck"


class GraphError(ValueError):
    pass


Edge = tuple[int, int]


def _norm(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class JointGraph:
    """Body joints plus their (mirrored) feature-group edges.

    ``interpolated`` maps an inserted vertex to ``(parent_a, parent_b, fraction)``;
    its location is ``a + fraction * (b - a)``.
    """

    labels: tuple[str, ...]
    edges_z: tuple[Edge, ...]
    edges_h: tuple[Edge, ...]
    interpolated: Mapping[int, tuple[int, int, float]] = field(default_factory=dict)
    root: int = 0

    def __post_init__(self) -> None:
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise GraphError("duplicate joint labels")
        seen = set()
        for i, j in self.edges_z:
            if i == j:
                raise GraphError(f"self-loop at {self.labels[i]}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i},{j}) out of range")
            e = _norm(i, j)
            if e in seen:
                raise GraphError(f"duplicate edge {self.labels[i]}-{self.labels[j]}")
            seen.add(e)
        if {_norm(*e) for e in self.edges_h} != seen:
            raise GraphError("feature edges must mirror joint edges")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self.edges_z

    @property
    def edges_zh(self) -> tuple[Edge, ...]:
        return tuple((i, i) for i in range(self.n))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise GraphError(f"unknown joint {label!r}") from None

    def neighbors(self, i: int) -> list[int]:
        return sorted([b for a, b in self.edges if a == i] + [a for a, b in self.edges if b == i])

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def is_tree(self) -> bool:
        return len(self.edges) == self.n - 1 and _connected(self.n, self.edges)

    def distances(self) -> np.ndarray:
        """All-pairs hop distances (``inf`` between components)."""
        d = np.full((self.n, self.n), np.inf)
        for s in range(self.n):
            d[s, s] = 0
            q = deque([s])
            while q:
                u = q.popleft()
                for v in self.neighbors(u):
                    if d[s, v] == np.inf:
                        d[s, v] = d[s, u] + 1
                        q.append(v)
        return d

    def locate(self, base_xy: np.ndarray) -> np.ndarray:
        """Extend ``[n_base, 2]`` joint locations with interpolated vertices."""
        out = np.zeros((self.n, 2))
        n_base = self.n - len(self.interpolated)
        out[:n_base] = base_xy[:n_base]
        for k in sorted(self.interpolated):
            a, b, t = self.interpolated[k]
            out[k] = out[a] + t * (out[b] - out[a])
        return out

    def to_spec(self) -> dict:
        return {
            "joints": list(self.labels),
            "edges": [[self.labels[i], self.labels[j]] for i, j in self.edges],
            "interpolated": {
                self.labels[k]: [self.labels[a], self.labels[b], t]
                for k, (a, b, t) in sorted(self.interpolated.items())
            },
            "root": self.labels[self.root],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_spec(), sort_keys=True)


def _connected(n: int, edges: Iterable[Edge]) -> bool:
    if n == 0:
        return True
    adj = {i: [] for i in range(n)}
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def _find_cycle(n: int, edges: Iterable[Edge]) -> bool:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            return True
        parent[ri] = rj
    return False


def build_tree(
    n_joints: int | Sequence[str],
    edges: Sequence[tuple],
    interpolated: Sequence[tuple] = (),
    root: int | str | None = None,
) -> JointGraph:
    """Build a tree graph, splicing ``count`` interpolated vertices into each
    listed ``(parent_a, parent_b, count)`` edge.

    Joints may be given as a count or a label sequence; edge endpoints as
    indices or labels.
    """
    if isinstance(n_joints, int):
        labels = [str(i) for i in range(n_joints)]
    else:
        labels = list(n_joints)

    def idx(v) -> int:
        if isinstance(v, str):
            if v not in labels:
                raise GraphError(f"unknown joint {v!r}")
            return labels.index(v)
        if not 0 <= int(v) < len(labels):
            raise GraphError(f"joint index {v} out of range")
        return int(v)

    edge_list = [_norm(idx(a), idx(b)) for a, b in edges]
    interp: dict[int, tuple[int, int, float]] = {}
    for a, b, count in interpolated:
        ia, ib = idx(a), idx(b)
        e = _norm(ia, ib)
        if e in edge_list:
            edge_list.remove(e)
        chain = [ia]
        for t in range(1, int(count) + 1):
            k = len(labels)
            labels.append(f"{labels[ia]}~{labels[ib]}#{t}")
            interp[k] = (ia, ib, t / (int(count) + 1))
            chain.append(k)
        chain.append(ib)
        edge_list.extend(_norm(u, v) for u, v in zip(chain, chain[1:]))
    if _find_cycle(len(labels), edge_list):
        raise GraphError("cycle detected")
    if not _connected(len(labels), edge_list):
        raise GraphError("disconnected")
    edge_t = tuple(edge_list)
    r = 0 if root is None else idx(root)
    return JointGraph(tuple(labels), edge_t, edge_t, interp, r)


def skeleton_tree(interpolated: Sequence[tuple] = ()) -> JointGraph:
    """The 14-joint LSP-style skeleton rooted at the neck."""
    return build_tree(LSP_JOINTS, LSP_TREE_EDGES, interpolated, root=DEFAULT_ROOT)


def from_spec(spec: Mapping) -> JointGraph:
    """Build a graph from a JSON-style mapping.

    Input form: ``joints``, ``edges`` (label pairs forming a tree),
    optional ``interpolated`` as ``[[a, b, count], ...]``, optional
    ``loopy_edges`` added after tree validation, optional ``root``.
    The form emitted by :meth:`JointGraph.to_spec` (``interpolated`` as a
    mapping ``label -> [a, b, fraction]``) is accepted verbatim.
    """
    interp = spec.get("interpolated")
    if isinstance(interp, Mapping):
        labels = tuple(spec["joints"])
        pos = {lab: k for k, lab in enumerate(labels)}
        try:
            edges = tuple(_norm(pos[a], pos[b]) for a, b in spec["edges"])
            imap = {pos[k]: (pos[a], pos[b], float(t)) for k, (a, b, t) in interp.items()}
            root = pos[spec.get("root", labels[0])]
        except KeyError as exc:
            raise GraphError(f"unknown joint {exc.args[0]!r}") from None
        if not _connected(len(labels), edges):
            raise GraphError("disconnected")
        return JointGraph(labels, edges, edges, imap, root)
    g = build_tree(spec["joints"], spec["edges"], interp or [], root=spec.get("root"))
    extra = spec.get("loopy_edges") or []
    if extra:
        g = add_edges(g, [(g.index(a), g.index(b)) for a, b in extra])
    return g


def add_edges(base: JointGraph, extra: Iterable[Edge]) -> JointGraph:
    edges = list(base.edges)
    for i, j in extra:
        e = _norm(i, j)
        if e not in edges:
            edges.append(e)
    t = tuple(edges)
    return JointGraph(base.labels, t, t, dict(base.interpolated), base.root)


def nearest_rank_quantile(samples: np.ndarray, q: float) -> float:
    """Smallest sample value with at least ``q`` of the samples at or below it."""
    s = np.sort(np.asarray(samples, dtype=float))
    if s.size == 0:
        raise GraphError("empty sample")
    k = max(int(np.ceil(q * s.size - 1e-12)) - 1, 0)
    return float(s[k])


def build_loopy(
    base: JointGraph,
    pairwise_distances: Mapping[tuple[int, int], np.ndarray],
    fraction: float = 0.9,
    radius: float = 48.0,
) -> JointGraph:
    """Add edge (i, j) when ``fraction`` of sampled i-j distances are <= ``radius``."""
    if not base.is_tree():
        raise GraphError("base graph must be a tree")
    extra = []
    for i in range(base.n):
        for j in range(i + 1, base.n):
            d = pairwise_distances.get((i, j))
            if d is None:
                d = pairwise_distances.get((j, i))
            if d is None or len(d) == 0:
                raise GraphError(f"missing distances for pair ({base.labels[i]}, {base.labels[j]})")
            if (i, j) not in base.edges and nearest_rank_quantile(d, fraction) <= radius:
                extra.append((i, j))
    return add_edges(base, extra)


# ---------------------------------------------------------------- factor graph


@dataclass(frozen=True)
class FactorGraph:
    """Bipartite graph: one variable per feature group, one factor per edge.

    Factor ``f`` connects the two variables in ``factors[f]``.
    """

    n_variables: int
    factors: tuple[Edge, ...]

    def __post_init__(self) -> None:
        for a, b in self.factors:
            if a == b or not (0 <= a < self.n_variables and 0 <= b < self.n_variables):
                raise GraphError(f"bad factor ({a},{b})")

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    def ne_var(self, v: int) -> list[int]:
        """Factors adjacent to variable ``v``."""
        return [f for f, (a, b) in enumerate(self.factors) if v in (a, b)]

    def ne_factor(self, f: int) -> tuple[int, int]:
        return self.factors[f]

    def other(self, f: int, v: int) -> int:
        a, b = self.factors[f]
        if v == a:
            return b
        if v == b:
            return a
        raise GraphError(f"variable {v} not on factor {f}")

    def factor_between(self, a: int, b: int) -> int:
        e = _norm(a, b)
        for f, fe in enumerate(self.factors):
            if _norm(*fe) == e:
                return f
        raise GraphError(f"no factor between {a} and {b}")

    def var_neighbors(self, v: int) -> list[int]:
        return sorted(self.other(f, v) for f in self.ne_var(v))

    def degree(self, v: int) -> int:
        return len(self.ne_var(v))

    def has_cycle(self) -> bool:
        return _find_cycle(self.n_variables, self.factors)

    def directed_edges(self) -> list[Edge]:
        out = []
        for a, b in self.factors:
            out += [(a, b), (b, a)]
        return sorted(out)


def to_factor_graph(g: JointGraph) -> FactorGraph:
    return FactorGraph(g.n, tuple(g.edges_h))


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class Step:
    """One message update: ``v2f`` sends variable -> factor, ``f2v`` factor -> variable."""

    kind: str
    var: int
    factor: int


@dataclass(frozen=True)
class Schedule:
    kind: str  # "serial" | "flooding"
    steps: tuple[Step, ...] = ()
    iterations: int = 1
    rounds: tuple[tuple[Edge, ...], ...] = ()
    upward: tuple[Edge, ...] = ()
    downward: tuple[Edge, ...] = ()

    def variable_edges(self) -> list[Edge]:
        """Directed variable-to-variable traversals of one serial pass."""
        return list(self.upward) + list(self.downward)


def _serial_order(fg: FactorGraph, root: int) -> tuple[list[Edge], list[Edge]]:
    up: list[Edge] = []
    visited: set[int] = set()
    roots = [root] + [v for v in range(fg.n_variables) if v != root]
    for r in roots:
        if r in visited:
            continue
        visited.add(r)
        # iterative post-order: every child sends upward after its own subtree
        stack: list[tuple[int, int | None, bool]] = [(r, None, False)]
        while stack:
            v, parent, done = stack.pop()
            if done:
                if parent is not None:
                    up.append((v, parent))
                continue
            stack.append((v, parent, True))
            for c in reversed(fg.var_neighbors(v)):
                if c != parent and c not in visited:
                    visited.add(c)
                    stack.append((c, v, False))
    down = [(b, a) for a, b in reversed(up)]
    return up, down


def plan_serial_route(fg: FactorGraph, root: int = 0, iterations: int = 1) -> Schedule:
    """Leaves-to-root then root-to-leaves route; one message per directed edge.

    Forests are handled component by component; cycles are rejected.
    """
    if fg.has_cycle():
        raise GraphError("graph has a cycle; serial route needs a tree")
    if iterations < 1:
        raise GraphError("iterations must be >= 1")
    up, down = _serial_order(fg, root)
    steps = []
    for a, b in up + down:
        f = fg.factor_between(a, b)
        steps += [Step("v2f", a, f), Step("f2v", b, f)]
    return Schedule("serial", tuple(steps), iterations, upward=tuple(up), downward=tuple(down))


def plan_flooding(fg: FactorGraph, iterations: int) -> Schedule:
    if iterations < 1:
        raise GraphError("flooding needs at least one round")
    round_edges = tuple(fg.directed_edges())
    return Schedule("flooding", (), iterations, rounds=(round_edges,) * iterations)


def schedule_for(g: JointGraph, kind: str, iterations: int = 1) -> Schedule:
    fg = to_factor_graph(g)
    if kind == "serial":
        return plan_serial_route(fg, g.root, iterations)
    if kind == "flooding":
        return plan_flooding(fg, iterations)
    raise GraphError(f"unknown schedule kind {kind!r}")


def serial_dependency_reach(schedule: Schedule, n: int) -> np.ndarray:
    """``reach[a, b]`` is True when b's final belief depends on a's unary
    through the fired serial steps (one pass)."""
    # msg (u->v) carries info from u plus everything u had heard before firing
    heard = [{v} for v in range(n)]
    for _ in range(schedule.iterations):
        for u, v in schedule.variable_edges():
            heard[v] = heard[v] | heard[u]
    reach = np.zeros((n, n), dtype=bool)
    for b in range(n):
        for a in heard[b]:
            reach[a, b] = True
    return reach
