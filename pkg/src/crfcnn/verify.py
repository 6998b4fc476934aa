"""Property suites shared by the ``verify`` command and the test-suite.

Each check returns a plain dict with the measured quantity, the tolerance
and a ``passed`` flag.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .graph import JointGraph, build_tree, plan_flooding, plan_serial_route, schedule_for, to_factor_graph
from .messages import PairwiseKernels, Tau, run_schedule
from .model import STRIDE, Model, TrainConfig, init_params, target_cells
from .oracle import max_tree_deviation
from .tensor import ConvKernel, Tape, Tensor, backward, spatial_softmax_nll


def central_difference(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of ``f`` w.r.t. every entry of ``arr`` (mutated and restored)."""
    grad = np.zeros_like(arr, dtype=float)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        up = f()
        flat[k] = old - eps
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero entries, whose central differences carry
    roughly 1e-11 of round-off, from dominating the ratio.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def toy_problem(seed: int = 0, n_joints: int = 3, map_size: int = 8, latent: int = 3, schedule: str = "serial",
                iterations: int = 1, tau: str = "softmax", channels: int = 4):
    """Tiny chain model with random image and targets, 64-bit throughout."""
    rng = np.random.default_rng(seed)
    graph = build_tree(n_joints, [(i, i + 1) for i in range(n_joints - 1)], root=n_joints // 2)
    cfg = TrainConfig(latent=latent, channels=channels, schedule=schedule, iterations=iterations, tau=tau,
                      pairwise_kernel=3, seed=seed, dtype="float64")
    params = init_params(graph, cfg, 1, rng)
    for name, p in params.items():
        if name.endswith(".bias"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    image = rng.normal(0.0, 1.0, (2, 1, map_size * STRIDE, map_size * STRIDE))
    joints = rng.uniform(0, map_size * STRIDE - 1, (2, n_joints, 2))
    cells = target_cells(joints, map_size, map_size)
    mask = np.ones((2, n_joints), bool)
    return Model(params, graph, cfg), image, cells, mask


def gradcheck_model(seed: int = 0, eps: float = 1e-5, **kw) -> dict:
    """Every parameter of the toy pipeline against central differences."""
    model, image, cells, mask = toy_problem(seed, **kw)

    def loss_value() -> float:
        return spatial_softmax_nll(model.forward(image).logits, cells, mask).item()

    model.params.zero_grad()
    with Tape() as tape:
        loss = spatial_softmax_nll(model.forward(image).logits, cells, mask)
    backward(tape, loss)
    worst, where = 0.0, ""
    count = 0
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = central_difference(loss_value, p.data, eps)
        err = relative_error(analytic, numeric)
        count += p.data.size
        if err > worst:
            worst, where = err, name
    return {"check": "gradcheck", "max_rel_error": worst, "worst_param": where, "n_params": count,
            "tolerance": 1e-4, "passed": worst < 1e-4}


def oracle_check(n_trees: int = 100, max_n: int = 6, max_states: int = 4, seed: int = 0) -> dict:
    dev = max_tree_deviation(n_trees, max_n, max_states, seed)
    return {"check": "oracle", "n_trees": n_trees, "max_deviation": dev, "tolerance": 1e-10, "passed": dev < 1e-10}


def random_engine(graph: JointGraph, latent: int = 3, size: int = 6, seed: int = 0, kernel: int = 3,
                  weight_scale: float = 1.0):
    rng = np.random.default_rng(seed)
    fg = to_factor_graph(graph)
    kernels = {
        e: ConvKernel.from_arrays(rng.normal(0, weight_scale, (latent, latent, kernel, kernel)),
                                  rng.normal(0, 0.1, latent))
        for e in fg.directed_edges()
    }
    unaries = [Tensor(rng.normal(0, 1.0, (latent, size, size))) for _ in range(graph.n)]
    return fg, PairwiseKernels.shared_set(kernels), unaries


def perturbation_sensitivity(graph: JointGraph, schedule, tau: Tau | None = None, delta: float = 1e-3,
                             seed: int = 0) -> np.ndarray:
    """``sens[b, a]`` = max |change of belief a| when unary b is shifted by ``delta``."""
    fg, kernels, unaries = random_engine(graph, seed=seed)
    base = run_schedule(None, fg, schedule, kernels, tau=tau, unaries=unaries)
    sens = np.zeros((graph.n, graph.n))
    rng = np.random.default_rng(seed + 1)
    for b in range(graph.n):
        bumped = list(unaries)
        bumped[b] = Tensor(unaries[b].data + delta * rng.normal(size=unaries[b].shape))
        out = run_schedule(None, fg, schedule, kernels, tau=tau, unaries=bumped)
        for a in range(graph.n):
            sens[b, a] = float(np.max(np.abs(out[a].data - base[a].data)))
    return sens


def reachability_check(threshold: float = 1e-8) -> dict:
    """Serial one pass reaches every node; flooding with M rounds reaches exactly radius M."""
    results = []
    path4 = build_tree(4, [(0, 1), (1, 2), (2, 3)], root=3)
    sk = _skeleton_for_probe()
    for name, g in (("path4", path4), ("skeleton", sk)):
        fg = to_factor_graph(g)
        sens = perturbation_sensitivity(g, plan_serial_route(fg, g.root))
        ok = bool(np.all(sens > threshold))
        results.append({"case": f"serial/{name}", "min_sensitivity": float(sens.min()), "passed": ok})
        dist = g.distances()
        for m in (1, 2, 3):
            sens = perturbation_sensitivity(g, plan_flooding(fg, m))
            near = dist <= m
            ok = bool(np.all(sens[near] > threshold) and np.all(sens[~near] == 0.0))
            results.append({
                "case": f"flooding{m}/{name}",
                "min_in_radius": float(sens[near].min()),
                "max_outside": float(sens[~near].max()) if np.any(~near) else 0.0,
                "passed": ok,
            })
    return {"check": "reachability", "cases": results, "passed": all(r["passed"] for r in results)}


def _skeleton_for_probe() -> JointGraph:
    from .graph import skeleton_tree

    return skeleton_tree()


def normalization_check(n_configs: int = 20, tol: float = 1e-10, seed: int = 0) -> dict:
    """Channel sums of every emitted Q and final belief equal beta."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_configs):
        n = int(rng.integers(2, 8))
        edges = [(v, int(rng.integers(0, v))) for v in range(1, n)]
        g = build_tree(n, edges)
        latent = int(rng.integers(2, 6))
        beta = float(rng.uniform(0.5, 5.0)) if k % 2 else None
        tau = Tau("softmax", float(rng.uniform(0.1, 2.0)), beta)
        kind = ("serial", "flooding")[k % 2]
        sched = schedule_for(g, kind, int(rng.integers(1, 4)))
        fg, kernels, unaries = random_engine(g, latent=latent, seed=int(rng.integers(1 << 30)), weight_scale=2.0)
        target = float(latent) if beta is None else beta
        seen: list[Tensor] = []
        beliefs = run_schedule(None, fg, sched, kernels, tau=tau, unaries=unaries,
                               trace=lambda key, t: seen.append(t))
        for t in seen + list(beliefs):
            worst = max(worst, float(np.max(np.abs(t.data.sum(axis=-3) - target))))
    return {"check": "normalization", "n_configs": n_configs, "max_deviation": worst, "tolerance": tol,
            "passed": worst < tol}


def step_count_check(sizes: Sequence[int] = (2, 3, 5, 8, 14), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        g = build_tree(n, [(v, int(rng.integers(0, v))) for v in range(1, n)])
        s = plan_serial_route(to_factor_graph(g), 0)
        rows.append({"n": n, "steps": len(s.variable_edges()), "expected": 2 * (n - 1)})
    return {"check": "step_count", "cases": rows, "passed": all(r["steps"] == r["expected"] for r in rows)}


SUITES = {
    "gradcheck": gradcheck_model,
    "oracle": oracle_check,
    "reachability": reachability_check,
    "normalization": normalization_check,
    "steps": step_count_check,
}
