"""Convolutional message passing among grouped feature maps.

Unary maps ``U_k`` and factor-to-variable messages ``F`` are energies; the
variable-to-factor messages ``Q`` and the final beliefs are normalized by the
nonlinearity ``tau`` (scaled softmax over channels, or ReLU for the ablation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import Edge, FactorGraph, GraphError, Schedule
from .tensor import ConvKernel, Tensor, add_n, conv2d, neg, relu, scaled_softmax

__all__ = [
    "MessageState",
    "PairwiseKernels",
    "Tau",
    "factor_to_variable",
    "flooding_update",
    "init_unaries",
    "run_schedule",
    "variable_to_factor",
]


@dataclass(frozen=True)
class Tau:
    """Message nonlinearity."""

    kind: str = "softmax"
    alpha: float = 0.5
    beta: float | None = None  # None -> number of channels

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "softmax":
            beta = float(x.shape[-3]) if self.beta is None else self.beta
            return scaled_softmax(x, self.alpha, beta)
        if self.kind == "relu":
            return relu(x)
        raise ValueError(f"unknown nonlinearity {self.kind!r}")


@dataclass
class PairwiseKernels:
    """Directed kernels ``w^{j->k}``, shared across iterations or one set per iteration."""

    kernels: list[dict[Edge, ConvKernel]]
    shared: bool = True

    @classmethod
    def shared_set(cls, kernels: Mapping[Edge, ConvKernel]) -> "PairwiseKernels":
        return cls([dict(kernels)], shared=True)

    def for_iteration(self, m: int) -> dict[Edge, ConvKernel]:
        if self.shared:
            return self.kernels[0]
        if m >= len(self.kernels):
            raise ValueError(f"no kernel set for iteration {m}")
        return self.kernels[m]

    def get(self, src: int, dst: int, m: int = 0) -> ConvKernel:
        try:
            return self.for_iteration(m)[(src, dst)]
        except KeyError:
            raise KeyError(f"kernel missing for directed edge {src}->{dst}") from None


@dataclass
class MessageState:
    """Stored messages. Absent ``F`` entries read as zero."""

    f_var_to_factor: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    q_var_to_factor: dict[tuple[int, int], Tensor] = field(default_factory=dict)
    f_factor_to_var: dict[tuple[int, int], Tensor] = field(default_factory=dict)


def init_unaries(f: Tensor, unary_kernels: Sequence[ConvKernel], n_variables: int | None = None) -> list[Tensor]:
    """``U_k = f (*) w_k`` for every feature group."""
    if n_variables is not None and len(unary_kernels) != n_variables:
        raise ValueError(f"{len(unary_kernels)} unary kernels for {n_variables} variables")
    return [conv2d(f, k) for k in unary_kernels]


def _check_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"message shape mismatch: {a.shape} vs {b.shape}")


def variable_to_factor(
    state: MessageState, u_j: Tensor, j: int, fk: int, fg: FactorGraph, tau: Tau
) -> MessageState:
    """``F_{j->f_k} = U_j + sum_{f_p in ne(j)\\f_k} F_{f_p->j}``; ``Q_{j->f_k} = tau(-F)``."""
    terms = [u_j]
    for fp in fg.ne_var(j):
        if fp == fk:
            continue
        msg = state.f_factor_to_var.get((fp, j))
        if msg is not None:
            _check_shape(msg, u_j)
            terms.append(msg)
    energy = add_n(terms)
    state.f_var_to_factor[(j, fk)] = energy
    state.q_var_to_factor[(j, fk)] = tau(neg(energy))
    return state


def factor_to_variable(
    state: MessageState, fj: int, k: int, kernels: PairwiseKernels, fg: FactorGraph, iteration: int = 0
) -> MessageState:
    """``F_{f_j->k} = Q_{p->f_j} (*) w^{p->k}`` with ``p`` the factor's other endpoint."""
    p = fg.other(fj, k)
    q = state.q_var_to_factor.get((p, fj))
    if q is None:
        raise GraphError(f"factor {fj} has no incoming message from variable {p}")
    state.f_factor_to_var[(fj, k)] = conv2d(q, kernels.get(p, k, iteration))
    return state


def flooding_update(
    beliefs: Sequence[Tensor],
    unaries: Sequence[Tensor],
    kernels: PairwiseKernels,
    fg: FactorGraph,
    tau: Tau,
    iteration: int = 0,
) -> list[Tensor]:
    """Synchronous round: every belief is recomputed from the previous round's."""
    out = []
    for i in range(fg.n_variables):
        terms = [unaries[i]]
        for j in fg.var_neighbors(i):
            terms.append(conv2d(beliefs[j], kernels.get(j, i, iteration)))
        out.append(tau(add_n(terms)))
    return out


def _check_schedule(schedule: Schedule, fg: FactorGraph) -> None:
    if schedule.kind == "serial":
        for s in schedule.steps:
            if not 0 <= s.factor < fg.n_factors or s.var not in fg.ne_factor(s.factor):
                raise GraphError("schedule incompatible with graph")
    elif schedule.kind == "flooding":
        edges = set(fg.directed_edges())
        for rnd in schedule.rounds:
            if set(rnd) != edges or len(rnd) != len(edges):
                raise GraphError("schedule incompatible with graph")
    else:
        raise GraphError(f"unknown schedule kind {schedule.kind!r}")


def run_schedule(
    f: Tensor | None,
    fg: FactorGraph,
    schedule: Schedule,
    kernels: PairwiseKernels,
    unary_kernels: Sequence[ConvKernel] | None = None,
    tau: Tau | None = None,
    unaries: Sequence[Tensor] | None = None,
    trace: Callable[[str, Tensor], None] | None = None,
) -> list[Tensor]:
    """Run message passing and return per-variable beliefs ``Q(h_i)``.

    Either ``f`` with ``unary_kernels`` or precomputed ``unaries`` must be
    given. ``schedule.iterations`` sets the number of passes/rounds.
    ``trace(key, tensor)`` observes every emitted ``Q`` as ``Q/<var>/<step>``.
    """
    tau = tau or Tau()
    _check_schedule(schedule, fg)
    if unaries is None:
        if f is None or unary_kernels is None:
            raise ValueError("need f and unary_kernels, or unaries")
        unaries = init_unaries(f, unary_kernels, fg.n_variables)
    unaries = list(unaries)
    if len(unaries) != fg.n_variables:
        raise ValueError(f"{len(unaries)} unary maps for {fg.n_variables} variables")
    for u in unaries[1:]:
        _check_shape(u, unaries[0])

    if schedule.kind == "flooding":
        beliefs = [tau(u) for u in unaries]
        if trace:
            for i, q in enumerate(beliefs):
                trace(f"Q/{i}/0", q)
        for m in range(schedule.iterations):
            beliefs = flooding_update(beliefs, unaries, kernels, fg, tau, m)
            if trace:
                for i, q in enumerate(beliefs):
                    trace(f"Q/{i}/{m + 1}", q)
        return beliefs

    state = MessageState()
    step_no = 0
    for m in range(schedule.iterations):
        for s in schedule.steps:
            if s.kind == "v2f":
                variable_to_factor(state, unaries[s.var], s.var, s.factor, fg, tau)
                if trace:
                    trace(f"Q/{s.var}/{step_no}", state.q_var_to_factor[(s.var, s.factor)])
            else:
                factor_to_variable(state, s.factor, s.var, kernels, fg, m)
            step_no += 1
    beliefs = []
    for k in range(fg.n_variables):
        terms = [unaries[k]]
        for fp in fg.ne_var(k):
            msg = state.f_factor_to_var.get((fp, k))
            if msg is not None:
                terms.append(msg)
        beliefs.append(tau(add_n(terms)))
    if trace:
        for k, q in enumerate(beliefs):
            trace(f"Q/{k}/final", q)
    return beliefs


def channel_sums(beliefs: Sequence[Tensor]) -> np.ndarray:
    return np.stack([b.data.sum(axis=-3) for b in beliefs])
