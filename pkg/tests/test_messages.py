from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crfcnn.graph import GraphError, add_edges, build_tree, plan_flooding, plan_serial_route, schedule_for, skeleton_tree, to_factor_graph
from crfcnn.messages import (
    MessageState,
    PairwiseKernels,
    Tau,
    factor_to_variable,
    flooding_update,
    init_unaries,
    run_schedule,
    variable_to_factor,
)
from crfcnn.tensor import ConvKernel, Tape, Tensor, add_n, backward, scaled_softmax
from crfcnn.verify import central_difference, normalization_check, perturbation_sensitivity, random_engine, relative_error

from oracles import naive_conv, softmax_np, weighted


def zero_kernels(fg, latent: int, size: int = 3) -> PairwiseKernels:
    return PairwiseKernels.shared_set({e: ConvKernel.zeros(latent, latent, size) for e in fg.directed_edges()})


# ---------------------------------------------------------------- init_unaries


def test_unaries_zero_input():
    ks = [ConvKernel.from_arrays(np.random.default_rng(k).normal(size=(3, 2, 3, 3)), np.zeros(3)) for k in range(2)]
    us = init_unaries(Tensor(np.zeros((2, 5, 5))), ks, 2)
    assert all(np.all(u.data == 0) for u in us)


def test_unaries_identity():
    f = np.random.default_rng(0).normal(size=(3, 4, 4))
    us = init_unaries(Tensor(f), [ConvKernel.identity(3, 1)] * 2)
    for u in us:
        np.testing.assert_array_equal(u.data, f)


def test_unaries_match_direct_convolution():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(2, 5, 6))
    ks = [ConvKernel.from_arrays(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)) for _ in range(3)]
    for u, k in zip(init_unaries(Tensor(f), ks, 3), ks):
        np.testing.assert_allclose(u.data, naive_conv(f, k.weight.data, k.bias.data), atol=1e-12)


def test_unaries_count_mismatch():
    with pytest.raises(ValueError):
        init_unaries(Tensor(np.zeros((1, 3, 3))), [ConvKernel.identity(1)], 2)


# ---------------------------------------------------------------- single messages


def test_leaf_zero_unary_gives_uniform_q():
    fg = to_factor_graph(build_tree(2, [(0, 1)]))
    state = variable_to_factor(MessageState(), Tensor(np.zeros((4, 3, 3))), 0, 0, fg, Tau())
    np.testing.assert_allclose(state.q_var_to_factor[(0, 0)].data, 1.0)  # beta / L = 4 / 4
    q = variable_to_factor(MessageState(), Tensor(np.zeros((4, 3, 3))), 0, 0, fg, Tau(beta=2.0))
    np.testing.assert_allclose(q.q_var_to_factor[(0, 0)].data, 0.5)


def test_leaf_message_is_tau_of_negated_unary():
    fg = to_factor_graph(build_tree(2, [(0, 1)]))
    u = np.random.default_rng(2).normal(size=(3, 4, 4))
    state = variable_to_factor(MessageState(), Tensor(u), 0, 0, fg, Tau())
    np.testing.assert_array_equal(state.f_var_to_factor[(0, 0)].data, u)  # empty sum: F = U
    np.testing.assert_allclose(state.q_var_to_factor[(0, 0)].data, softmax_np(-u), atol=1e-14)


def test_variable_message_sums_other_incoming():
    # star centre 0 with leaves 1, 2, 3; message 0 -> factor(0,1) includes F from factors (0,2) and (0,3) only
    fg = to_factor_graph(build_tree(4, [(0, 1), (0, 2), (0, 3)]))
    rng = np.random.default_rng(3)
    state = MessageState()
    incoming = {}
    for leaf in (1, 2, 3):
        f = fg.factor_between(0, leaf)
        incoming[f] = rng.normal(size=(2, 3, 3))
        state.f_factor_to_var[(f, 0)] = Tensor(incoming[f])
    u = rng.normal(size=(2, 3, 3))
    target = fg.factor_between(0, 1)
    variable_to_factor(state, Tensor(u), 0, target, fg, Tau())
    expect = u + sum(v for f, v in incoming.items() if f != target)
    np.testing.assert_allclose(state.f_var_to_factor[(0, target)].data, expect, atol=1e-14)


def test_factor_message_examples():
    fg = to_factor_graph(build_tree(2, [(0, 1)]))
    rng = np.random.default_rng(4)
    q = rng.uniform(0, 1, size=(3, 5, 5))
    state = MessageState()
    state.q_var_to_factor[(0, 0)] = Tensor(q)
    zero = PairwiseKernels.shared_set({(0, 1): ConvKernel.zeros(3, 3, 3)})
    assert np.all(factor_to_variable(state, 0, 1, zero, fg).f_factor_to_var[(0, 1)].data == 0)
    ident = PairwiseKernels.shared_set({(0, 1): ConvKernel.identity(3, 1)})
    np.testing.assert_array_equal(factor_to_variable(state, 0, 1, ident, fg).f_factor_to_var[(0, 1)].data, q)
    k = ConvKernel.from_arrays(rng.normal(size=(3, 3, 3, 3)), np.zeros(3))
    out = factor_to_variable(state, 0, 1, PairwiseKernels.shared_set({(0, 1): k}), fg).f_factor_to_var[(0, 1)]
    np.testing.assert_allclose(out.data, naive_conv(q, k.weight.data, k.bias.data), atol=1e-12)


def test_factor_message_missing_kernel():
    fg = to_factor_graph(build_tree(2, [(0, 1)]))
    state = MessageState()
    state.q_var_to_factor[(0, 0)] = Tensor(np.ones((2, 3, 3)))
    with pytest.raises(KeyError, match="kernel missing"):
        factor_to_variable(state, 0, 1, PairwiseKernels.shared_set({(1, 0): ConvKernel.identity(2)}), fg)


# ---------------------------------------------------------------- full runs


@pytest.mark.parametrize("kind", ["serial", "flooding"])
def test_zero_coupling_decouples(kind):
    g = skeleton_tree()
    fg = to_factor_graph(g)
    rng = np.random.default_rng(5)
    us = [Tensor(rng.normal(size=(3, 4, 4))) for _ in range(g.n)]
    beliefs = run_schedule(None, fg, schedule_for(g, kind, 2), zero_kernels(fg, 3), unaries=us)
    for b, u in zip(beliefs, us):
        np.testing.assert_allclose(b.data, softmax_np(u.data), atol=1e-14)


def test_flooding_zero_kernels_fixed_point():
    g = build_tree(3, [(0, 1), (1, 2)])
    fg = to_factor_graph(g)
    us = [Tensor(np.random.default_rng(k).normal(size=(2, 3, 3))) for k in range(3)]
    q0 = [Tau()(u) for u in us]
    q1 = flooding_update(q0, us, zero_kernels(fg, 2), fg, Tau())
    for a, b in zip(q0, q1):
        np.testing.assert_allclose(a.data, b.data, atol=1e-15)


def test_flooding_symmetric_ring_stays_symmetric():
    ring = add_edges(build_tree(5, [(0, 1), (1, 2), (2, 3), (3, 4)]), [(0, 4)])
    fg = to_factor_graph(ring)
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 3, 3, 3))
    w = 0.5 * (w + w[:, :, ::-1, ::-1])
    k = ConvKernel.from_arrays(w, np.zeros(3))
    kernels = PairwiseKernels.shared_set({e: k for e in fg.directed_edges()})
    u = rng.normal(size=(3, 5, 5))
    beliefs = [Tau()(Tensor(u)) for _ in range(5)]
    for m in range(3):
        beliefs = flooding_update(beliefs, [Tensor(u)] * 5, kernels, fg, Tau(), m)
        for b in beliefs[1:]:
            np.testing.assert_allclose(b.data, beliefs[0].data, atol=1e-13)


def test_serial_two_node_closed_form():
    # U0, U1 and kernels w01, w10 by hand: belief_1 = tau(U1 + tau(-U0) * w01), belief_0 = tau(U0 + tau(-U1) * w10)
    g = build_tree(2, [(0, 1)])
    fg = to_factor_graph(g)
    rng = np.random.default_rng(7)
    u0, u1 = rng.normal(size=(2, 2, 4, 4))
    w01, w10 = rng.normal(size=(2, 2, 2, 3, 3))
    kernels = PairwiseKernels.shared_set({(0, 1): ConvKernel.from_arrays(w01, np.zeros(2)),
                                          (1, 0): ConvKernel.from_arrays(w10, np.zeros(2))})
    beliefs = run_schedule(None, fg, plan_serial_route(fg, 1), kernels, unaries=[Tensor(u0), Tensor(u1)])
    b1 = softmax_np(u1 + naive_conv(softmax_np(-u0), w01, np.zeros(2)))
    b0 = softmax_np(u0 + naive_conv(softmax_np(-u1), w10, np.zeros(2)))
    np.testing.assert_allclose(beliefs[1].data, b1, atol=1e-12)
    np.testing.assert_allclose(beliefs[0].data, b0, atol=1e-12)


def test_runs_from_image_features():
    g = build_tree(3, [(0, 1), (1, 2)])
    fg, kernels, _ = random_engine(g, latent=2)
    f = Tensor(np.random.default_rng(8).normal(size=(4, 6, 6)))
    uk = [ConvKernel.from_arrays(np.random.default_rng(k).normal(size=(2, 4, 3, 3)), np.zeros(2)) for k in range(3)]
    a = run_schedule(f, fg, plan_serial_route(fg), kernels, unary_kernels=uk)
    b = run_schedule(None, fg, plan_serial_route(fg), kernels, unaries=init_unaries(f, uk))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_incompatible_schedule_rejected():
    small = build_tree(3, [(0, 1), (1, 2)])
    big = skeleton_tree()
    fg, kernels, us = random_engine(small)
    with pytest.raises(GraphError, match="incompatible"):
        run_schedule(None, fg, schedule_for(big, "serial"), kernels, unaries=us)
    with pytest.raises(GraphError, match="incompatible"):
        run_schedule(None, fg, schedule_for(big, "flooding", 1), kernels, unaries=us)


def test_normalization_suite():
    res = normalization_check(20)
    assert res["passed"], res


def test_trace_keys():
    g = build_tree(3, [(0, 1), (1, 2)])
    fg, kernels, us = random_engine(g)
    keys = []
    run_schedule(None, fg, plan_serial_route(fg, 1), kernels, unaries=us, trace=lambda k, t: keys.append(k))
    assert keys[-3:] == ["Q/0/final", "Q/1/final", "Q/2/final"]
    assert all(k.startswith("Q/") for k in keys)
    keys.clear()
    run_schedule(None, fg, plan_flooding(fg, 2), kernels, unaries=us, trace=lambda k, t: keys.append(k))
    assert "Q/2/2" in keys and len(keys) == 9


# ---------------------------------------------------------------- reachability


def test_serial_path_ends_hear_each_other():
    g = build_tree(4, [(0, 1), (1, 2), (2, 3)], root=3)
    sens = perturbation_sensitivity(g, plan_serial_route(to_factor_graph(g), 3))
    assert sens[0, 3] > 1e-8 and sens[3, 0] > 1e-8
    assert np.all(sens > 1e-8)


def test_flooding_one_round_is_local():
    g = build_tree(4, [(0, 1), (1, 2), (2, 3)])
    sens = perturbation_sensitivity(g, plan_flooding(to_factor_graph(g), 1))
    assert sens[0, 2] == 0.0 and sens[2, 0] == 0.0
    assert sens[0, 1] > 1e-8


@pytest.mark.parametrize("m", [1, 2, 3])
def test_flooding_radius_on_skeleton(m):
    g = skeleton_tree()
    d = g.distances()
    sens = perturbation_sensitivity(g, plan_flooding(to_factor_graph(g), m))
    assert np.all(sens[d <= m] > 1e-8)
    assert np.all(sens[d > m] == 0.0)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(2, 7), seed=st.integers(0, 10_000))
def test_serial_full_reach_random_trees(n, seed):
    rng = np.random.default_rng(seed)
    g = build_tree(n, [(v, int(rng.integers(0, v))) for v in range(1, n)])
    sens = perturbation_sensitivity(g, plan_serial_route(to_factor_graph(g), int(rng.integers(0, n))), seed=seed)
    assert np.all(sens > 1e-8)


# ---------------------------------------------------------------- gradients


def _engine_loss(g, schedule, kernels, us, tau):
    out = run_schedule(None, to_factor_graph(g), schedule, kernels, tau=tau, unaries=us)
    return add_n([weighted(b, 99) for b in out])


@pytest.mark.parametrize("kind,m,tau", [("serial", 1, "softmax"), ("serial", 2, "softmax"),
                                        ("flooding", 2, "softmax"), ("serial", 1, "relu")])
def test_engine_gradients(kind, m, tau):
    g = build_tree(3, [(0, 1), (1, 2)])
    rng = np.random.default_rng(10)
    fg = to_factor_graph(g)
    kmap = {e: ConvKernel.from_arrays(rng.normal(0, 0.5, (2, 2, 3, 3)), rng.normal(0, 0.1, 2), requires_grad=True)
            for e in fg.directed_edges()}
    kernels = PairwiseKernels.shared_set(kmap)
    us = [Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True) for _ in range(3)]
    sched = schedule_for(g, kind, m)
    t = Tau(tau)
    with Tape() as tape:
        loss = _engine_loss(g, sched, kernels, us, t)
    backward(tape, loss)

    def value():
        return _engine_loss(g, sched, kernels, us, t).item()

    for p in [k.weight for k in kmap.values()] + [k.bias for k in kmap.values()] + us:
        numeric = central_difference(value, p.data)
        assert relative_error(p.grad, numeric) < 1e-4


def test_shared_kernel_gradient_is_sum_over_iterations():
    """Sharing one kernel across two rounds gives the sum of the untied per-round gradients."""
    g = build_tree(2, [(0, 1)])
    fg = to_factor_graph(g)
    rng = np.random.default_rng(11)
    w = {e: rng.normal(0, 0.5, (2, 2, 3, 3)) for e in fg.directed_edges()}
    us = [Tensor(rng.normal(size=(2, 4, 4))) for _ in range(2)]
    sched = plan_flooding(fg, 2)

    shared = {e: ConvKernel.from_arrays(w[e].copy(), np.zeros(2), requires_grad=True) for e in w}
    with Tape() as tape:
        loss = _engine_loss(g, sched, PairwiseKernels.shared_set(shared), us, Tau())
    backward(tape, loss)

    untied = [{e: ConvKernel.from_arrays(w[e].copy(), np.zeros(2), requires_grad=True) for e in w} for _ in range(2)]
    with Tape() as tape:
        loss2 = _engine_loss(g, sched, PairwiseKernels(untied, shared=False), us, Tau())
    backward(tape, loss2)
    assert loss.item() == pytest.approx(loss2.item(), abs=1e-14)
    for e in w:
        np.testing.assert_allclose(shared[e].weight.grad, untied[0][e].weight.grad + untied[1][e].weight.grad,
                                   atol=1e-12)
        # and the shared gradient itself agrees with finite differences
        numeric = central_difference(
            lambda: _engine_loss(g, sched, PairwiseKernels.shared_set(shared), us, Tau()).item(), shared[e].weight.data)
        assert relative_error(shared[e].weight.grad, numeric) < 1e-4


def test_channel_sum_property_holds_for_emitted_messages():
    g = skeleton_tree()
    fg, kernels, us = random_engine(g, latent=4, weight_scale=3.0)
    seen = []
    out = run_schedule(None, fg, plan_serial_route(fg, g.root, 2), kernels, tau=Tau(beta=2.5), unaries=us,
                       trace=lambda k, t: seen.append(t))
    for t in seen + out:
        np.testing.assert_allclose(t.data.sum(axis=0), 2.5, atol=1e-10)
    np.testing.assert_allclose(scaled_softmax(us[0], 0.5, 2.5).data.sum(axis=0), 2.5, atol=1e-12)
