"""Small discrete CRFs with exact inference, used as ground truth.

Potentials are stored as energies; probabilities are ``exp(-E) / Z``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .graph import FactorGraph, GraphError, plan_serial_route

MAX_STATES = 10**7
MODEL_KINDS = ("model1", "model2", "full", "generic")


class OracleError(ValueError):
    pass


@dataclass
class DiscreteCRF:
    """Pairwise discrete CRF.

    ``pairwise`` maps ``(i, j)`` with ``i < j`` to an energy table of shape
    ``[states[i], states[j]]``; ``edge_kind`` tags each edge as ``"z"``,
    ``"h"`` or ``"zh"``. ``z_vars``/``h_vars`` list the output and latent
    variables (empty for a generic model).
    """

    states: list[int]
    unary: list[np.ndarray]
    pairwise: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    edge_kind: dict[tuple[int, int], str] = field(default_factory=dict)
    z_vars: list[int] = field(default_factory=list)
    h_vars: list[int] = field(default_factory=list)
    model: str = "generic"
    names: list[str] | None = None

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise OracleError(f"unknown model kind {self.model!r}")
        if len(self.unary) != len(self.states):
            raise OracleError("one unary table per variable")
        self.unary = [np.asarray(u, dtype=float) for u in self.unary]
        for i, (u, s) in enumerate(zip(self.unary, self.states)):
            if u.shape != (s,):
                raise OracleError(f"unary {i} has shape {u.shape}, expected ({s},)")
        fixed = {}
        for (i, j), t in self.pairwise.items():
            t = np.asarray(t, dtype=float)
            if i > j:
                i, j, t = j, i, t.T
                if (j, i) in self.edge_kind:
                    self.edge_kind[(i, j)] = self.edge_kind.pop((j, i))
            if i == j:
                raise OracleError("self-loop in pairwise terms")
            if t.shape != (self.states[i], self.states[j]):
                raise OracleError(f"pairwise ({i},{j}) has shape {t.shape}")
            fixed[(i, j)] = t
        self.pairwise = fixed
        tables = list(self.unary) + list(self.pairwise.values())
        if not all(np.all(np.isfinite(t)) for t in tables):
            raise OracleError("potential tables must be finite")
        kinds = {self.edge_kind.get(e, "generic") for e in self.pairwise}
        if self.model == "model1" and kinds & {"z", "h"}:
            raise OracleError("model1 has no joint-joint or feature-feature edges")
        if self.model == "model2" and "h" in kinds:
            raise OracleError("model2 has no feature-feature edges")

    @property
    def n(self) -> int:
        return len(self.states)

    def neighbors(self, i: int) -> list[int]:
        return sorted([b for a, b in self.pairwise if a == i] + [a for a, b in self.pairwise if b == i])

    def table(self, i: int, j: int) -> np.ndarray:
        """Energy table indexed ``[x_i, x_j]`` for either edge orientation."""
        if (i, j) in self.pairwise:
            return self.pairwise[(i, j)]
        return self.pairwise[(j, i)].T

    def without(self, *kinds: str) -> "DiscreteCRF":
        """Copy with all edges of the given kinds zeroed."""
        pw = {
            e: (np.zeros_like(t) if self.edge_kind.get(e) in kinds else t.copy())
            for e, t in self.pairwise.items()
        }
        return replace(self, pairwise=pw, edge_kind=dict(self.edge_kind), unary=[u.copy() for u in self.unary])

    def to_json(self) -> str:
        return json.dumps(
            {
                "states": self.states,
                "names": self.names,
                "model": self.model,
                "z_vars": self.z_vars,
                "h_vars": self.h_vars,
                "unary": [u.tolist() for u in self.unary],
                "pairwise": [
                    {"i": i, "j": j, "kind": self.edge_kind.get((i, j), "generic"), "table": t.tolist()}
                    for (i, j), t in sorted(self.pairwise.items())
                ],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DiscreteCRF":
        d = json.loads(text)
        pw = {(e["i"], e["j"]): np.asarray(e["table"], dtype=float) for e in d.get("pairwise", [])}
        kinds = {(e["i"], e["j"]): e.get("kind", "generic") for e in d.get("pairwise", [])}
        return cls(
            states=list(d["states"]),
            unary=[np.asarray(u, dtype=float) for u in d["unary"]],
            pairwise=pw,
            edge_kind=kinds,
            z_vars=list(d.get("z_vars", [])),
            h_vars=list(d.get("h_vars", [])),
            model=d.get("model", "generic"),
            names=d.get("names"),
        )


def pose_crf(
    n_joints: int,
    joint_edges: Sequence[tuple[int, int]],
    model: str,
    z_states: int = 2,
    h_states: int = 2,
    rng: np.random.Generator | None = None,
    scale: float = 1.0,
) -> DiscreteCRF:
    """Random instance of the three energy models over ``z_1..z_N`` and ``h_1..h_N``.

    Variables ``0..N-1`` are joints ``z_i``; ``N..2N-1`` the feature groups
    ``h_i``. Unaries act on ``h`` only; ``psi_zh`` ties ``z_i`` to ``h_i``;
    ``psi_z`` lives on ``joint_edges`` and ``psi_h`` on their mirror.
    """
    rng = rng or np.random.default_rng(0)
    states = [z_states] * n_joints + [h_states] * n_joints
    unary = [np.zeros(z_states) for _ in range(n_joints)]
    unary += [rng.normal(0, scale, h_states) for _ in range(n_joints)]
    pw: dict[tuple[int, int], np.ndarray] = {}
    kind: dict[tuple[int, int], str] = {}
    for i in range(n_joints):
        pw[(i, n_joints + i)] = rng.normal(0, scale, (z_states, h_states))
        kind[(i, n_joints + i)] = "zh"
    if model in ("model2", "full"):
        for i, j in joint_edges:
            a, b = min(i, j), max(i, j)
            pw[(a, b)] = rng.normal(0, scale, (z_states, z_states))
            kind[(a, b)] = "z"
    if model == "full":
        for i, j in joint_edges:
            a, b = min(i, j) + n_joints, max(i, j) + n_joints
            pw[(a, b)] = rng.normal(0, scale, (h_states, h_states))
            kind[(a, b)] = "h"
    names = [f"z{i}" for i in range(n_joints)] + [f"h{i}" for i in range(n_joints)]
    return DiscreteCRF(
        states, unary, pw, kind,
        z_vars=list(range(n_joints)), h_vars=list(range(n_joints, 2 * n_joints)),
        model=model, names=names,
    )


def random_tree_crf(n: int, n_states: int | Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> DiscreteCRF:
    """Generic pairwise CRF on a random labelled tree."""
    states = [n_states] * n if isinstance(n_states, int) else list(n_states)
    unary = [rng.normal(0, scale, s) for s in states]
    pw = {}
    for v in range(1, n):
        u = int(rng.integers(0, v))
        pw[(u, v)] = rng.normal(0, scale, (states[u], states[v]))
    return DiscreteCRF(states, unary, pw)


# ---------------------------------------------------------------- exact inference


@dataclass
class Distribution:
    """Normalized joint table (one axis per variable) with its log partition."""

    table: np.ndarray
    log_z: float

    @property
    def Z(self) -> float:
        return math.exp(self.log_z)

    def marginal(self, var: int) -> np.ndarray:
        axes = tuple(a for a in range(self.table.ndim) if a != var)
        return self.table.sum(axis=axes)


def _check_assignment(crf: DiscreteCRF, x: Sequence[int]) -> None:
    if len(x) != crf.n:
        raise OracleError(f"assignment has {len(x)} entries for {crf.n} variables")
    for i, (xi, s) in enumerate(zip(x, crf.states)):
        if not 0 <= int(xi) < s:
            raise OracleError(f"state {xi} out of range for variable {i}")


def energy(crf: DiscreteCRF, z: Sequence[int], h: Sequence[int] | None = None) -> float:
    """Total energy. With ``h`` given, ``z`` and ``h`` fill ``z_vars`` and
    ``h_vars``; otherwise ``z`` is a full assignment."""
    if h is None:
        x = list(z)
    else:
        if len(z) != len(crf.z_vars) or len(h) != len(crf.h_vars):
            raise OracleError("assignment sizes do not match z/h variables")
        x = [0] * crf.n
        for v, s in zip(crf.z_vars, z):
            x[v] = s
        for v, s in zip(crf.h_vars, h):
            x[v] = s
    _check_assignment(crf, x)
    e = sum(float(u[x[i]]) for i, u in enumerate(crf.unary))
    e += sum(float(t[x[i], x[j]]) for (i, j), t in crf.pairwise.items())
    return e


def energy_table(crf: DiscreteCRF) -> np.ndarray:
    size = int(np.prod(crf.states, dtype=np.int64))
    if size > MAX_STATES:
        raise OracleError(f"state space of {size} exceeds {MAX_STATES}")
    n = crf.n
    e = np.zeros(crf.states)
    for i, u in enumerate(crf.unary):
        shape = [1] * n
        shape[i] = crf.states[i]
        e = e + u.reshape(shape)
    for (i, j), t in crf.pairwise.items():
        shape = [1] * n
        shape[i], shape[j] = crf.states[i], crf.states[j]
        e = e + t.reshape(shape)
    return e


def brute_force_joint(crf: DiscreteCRF) -> Distribution:
    e = energy_table(crf)
    m = e.min()
    w = np.exp(-(e - m))
    s = w.sum()
    return Distribution(w / s, float(math.log(s) - m))


def brute_force_marginal(crf: DiscreteCRF, var: int) -> np.ndarray:
    return brute_force_joint(crf).marginal(var)


def _factor_graph(crf: DiscreteCRF) -> FactorGraph:
    return FactorGraph(crf.n, tuple(sorted(crf.pairwise)))


def tree_sum_product(
    crf: DiscreteCRF,
    root: int = 0,
    message_scale: Callable[[int, int], float] | None = None,
) -> list[np.ndarray]:
    """Exact marginals on a tree (or forest) by two-sweep sum-product.

    ``message_scale(u, v)`` multiplies message ``u -> v`` before use; the
    marginals must not depend on it.
    """
    fg = _factor_graph(crf)
    if fg.has_cycle():
        raise OracleError("cyclic graph; sum-product here needs a tree")
    schedule = plan_serial_route(fg, root)
    local = [np.exp(-(u - u.min())) for u in crf.unary]
    msgs: dict[tuple[int, int], np.ndarray] = {}
    for u, v in schedule.variable_edges():
        incoming = local[u].copy()
        for w in crf.neighbors(u):
            if w != v:
                incoming *= msgs[(w, u)]
        t = crf.table(u, v)
        kernel = np.exp(-(t - t.min()))
        m = incoming @ kernel
        m = m / m.sum()
        if message_scale is not None:
            m = m * message_scale(u, v)
        msgs[(u, v)] = m
    out = []
    for v in range(crf.n):
        b = local[v].copy()
        for w in crf.neighbors(v):
            b *= msgs[(w, v)]
        out.append(b / b.sum())
    return out


def mean_field_fixed_point(
    crf: DiscreteCRF,
    iterations: int,
    init: Sequence[np.ndarray] | None = None,
    callback: Callable[[list[np.ndarray]], None] | None = None,
) -> list[np.ndarray]:
    """Coordinate mean-field updates in ascending variable order.

    ``Q_i(x) ~ exp(-phi_i(x) - sum_j sum_y Q_j(y) psi_ij(x, y))``. Starts from
    the normalized unaries unless ``init`` is given; ``callback`` sees ``Q``
    after every sweep.
    """

    def normalize(e):
        w = np.exp(-(e - e.min()))
        return w / w.sum()

    q = [np.asarray(x, dtype=float).copy() for x in init] if init is not None else [normalize(u) for u in crf.unary]
    for _ in range(iterations):
        for i in range(crf.n):
            e = crf.unary[i].copy()
            for j in crf.neighbors(i):
                e += crf.table(i, j) @ q[j]
            q[i] = normalize(e)
        if callback is not None:
            callback([x.copy() for x in q])
    return q


def kl_product(q: Sequence[np.ndarray], joint: Distribution) -> float:
    """KL(prod_i q_i || p) against an exact joint."""
    prod = np.ones(())
    for qi in q:
        prod = np.multiply.outer(prod, qi)
    mask = prod > 0
    return float(np.sum(prod[mask] * (np.log(prod[mask]) - np.log(joint.table[mask]))))


def expected_h(crf: DiscreteCRF, encoding: str = "onehot") -> dict[int, np.ndarray | float]:
    """Exact ``E[h]`` for every latent variable.

    ``onehot``: the marginal vector (expectation of a 1-of-L indicator).
    ``binary``: ``sum_s s * p(s)``, i.e. ``p(h=1)`` for two states.
    """
    joint = brute_force_joint(crf)
    hv = crf.h_vars or list(range(crf.n))
    out: dict[int, np.ndarray | float] = {}
    for v in hv:
        m = joint.marginal(v)
        if encoding == "onehot":
            out[v] = m
        elif encoding == "binary":
            out[v] = float(np.dot(np.arange(m.size), m))
        else:
            raise OracleError(f"unknown encoding {encoding!r}")
    return out


def max_tree_deviation(n_trees: int = 100, max_n: int = 6, max_states: int = 4, seed: int = 0) -> float:
    """Largest |sum-product - brute force| over random trees."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trees):
        n = int(rng.integers(1, max_n + 1))
        states = [int(s) for s in rng.integers(2, max_states + 1, size=n)]
        crf = random_tree_crf(n, states, rng)
        joint = brute_force_joint(crf)
        sp = tree_sum_product(crf)
        for v in range(n):
            worst = max(worst, float(np.abs(sp[v] - joint.marginal(v)).max()))
    return worst


__all__ = [
    "DiscreteCRF",
    "Distribution",
    "GraphError",
    "OracleError",
    "brute_force_joint",
    "brute_force_marginal",
    "energy",
    "expected_h",
    "kl_product",
    "max_tree_deviation",
    "mean_field_fixed_point",
    "pose_crf",
    "random_tree_crf",
    "tree_sum_product",
]
