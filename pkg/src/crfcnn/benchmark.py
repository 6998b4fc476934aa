"""Schedule and nonlinearity diagnostic study on a pinned synthetic dataset.

Five variants are trained per seed and scored by mean PCK@0.2 on a held-out
split: serial tree passing with the scaled softmax, the same with ReLU,
flooding with one and two rounds on the tree, and two flooding rounds on a
loopy graph built from training-set joint distances.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .graph import JointGraph, build_loopy, skeleton_tree
from .model import ConfigError, Model, TrainConfig, evaluate, train
from .synth import DatasetSpec, generate, pairwise_distance_stats

log = logging.getLogger(__name__)

# name -> (schedule, iterations, tau, loopy graph?)
VARIANTS: dict[str, tuple[str, int, str, bool]] = {
    "serial": ("serial", 1, "softmax", False),
    "serial_relu": ("serial", 1, "relu", False),
    "flood1": ("flooding", 1, "softmax", False),
    "flood2": ("flooding", 2, "softmax", False),
    "flood2_loopy": ("flooding", 2, "softmax", True),
}

LABELS = {
    "serial": "Serial tree, scaled softmax",
    "serial_relu": "Serial tree, ReLU",
    "flood1": "Flooding, 1 iteration, tree",
    "flood2": "Flooding, 2 iterations, tree",
    "flood2_loopy": "Flooding, 2 iterations, loopy",
}


def _default_dataset() -> dict:
    # Whole-circle body rotation: which limb is which can then only be read
    # off the head and torso, several graph hops away from the extremities.
    return {"angle_ranges": {"torso": [-180.0, 180.0]}}


def _default_train() -> dict:
    return {"epochs": 8, "batch_size": 16, "lr": 0.05, "momentum": 0.9, "dtype": "float32"}


@dataclass
class StudyConfig:
    train_count: int = 2000
    test_count: int = 500
    train_data_seed: int = 1
    test_data_seed: int = 2
    dataset: dict = field(default_factory=_default_dataset)
    train: dict = field(default_factory=_default_train)
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    loopy_fraction: float = 0.9
    loopy_radius: float = 20.0
    min_gap: float = 0.01

    def __post_init__(self) -> None:
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {sorted(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("train and test splits must be nonempty")
        for key in ("schedule", "iterations", "tau", "seed"):
            if key in self.train:
                raise ConfigError(f"train.{key} is set per variant and seed, not in the study config")
        TrainConfig.from_dict(self.train)

    @classmethod
    def from_dict(cls, d: Mapping) -> "StudyConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown study keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        schedule, iterations, tau, _ = VARIANTS[variant]
        return TrainConfig.from_dict({**self.train, "schedule": schedule, "iterations": iterations,
                                      "tau": tau, "seed": seed})


def study_data(study: StudyConfig):
    train_spec = DatasetSpec.from_dict({**study.dataset, "count": study.train_count, "seed": study.train_data_seed})
    test_spec = DatasetSpec.from_dict({**study.dataset, "count": study.test_count, "seed": study.test_data_seed})
    return generate(train_spec), generate(test_spec)


def study_graphs(study: StudyConfig, train_samples) -> dict[str, JointGraph]:
    tree = skeleton_tree()
    graphs = {"tree": tree}
    if any(VARIANTS[v][3] for v in study.variants):
        stats = pairwise_distance_stats(train_samples)
        graphs["loopy"] = build_loopy(tree, stats, study.loopy_fraction, study.loopy_radius)
    return graphs


def ordering_checks(means: Mapping[str, float], min_gap: float) -> list[dict]:
    """The expected orderings, each as ``{check, lhs, rhs, gap, passed}``."""
    rules = [
        ("serial", "flood2", min_gap),
        ("flood2", "flood1", min_gap),
        ("serial", "serial_relu", min_gap),
        ("flood2_loopy", "flood2", 0.0),
    ]
    out = []
    for lhs, rhs, need in rules:
        if lhs not in means or rhs not in means:
            continue
        gap = means[lhs] - means[rhs]
        op = ">=" if need == 0 else f"> by >= {100 * need:g}pp"
        out.append({"check": f"{lhs} {op} {rhs}", "lhs": lhs, "rhs": rhs, "gap": gap,
                    "required": need, "passed": bool(gap >= need)})
    return out


def run_study(study: StudyConfig, log_path: str | Path | None = None) -> dict:
    """Train and score every variant for every seed; one JSON line per run in ``log_path``."""
    start = time.time()
    train_samples, test_samples = study_data(study)
    graphs = study_graphs(study, train_samples)
    sink = Path(log_path).open("w") if log_path else None
    runs = []
    try:
        for seed in study.seeds:
            for variant in study.variants:
                cfg = study.train_config(variant, seed)
                graph = graphs["loopy" if VARIANTS[variant][3] else "tree"]
                t0 = time.time()
                params, history = train(train_samples, cfg, graph)
                report = evaluate(Model(params, graph, cfg), test_samples)
                rec = {
                    "variant": variant, "seed": seed, "pck": report["pck"], "pcp": report["pcp"]["Mean"],
                    "pcp_table": report["pcp"], "final_loss": history[-1]["loss"] if history else None,
                    "seconds": time.time() - t0,
                }
                runs.append(rec)
                log.info("%s seed %d: pck %.4f pcp %.4f (%.0fs)", variant, seed, rec["pck"], rec["pcp"], rec["seconds"])
                if sink:
                    sink.write(json.dumps(rec, sort_keys=True) + "\n")
                    sink.flush()
    finally:
        if sink:
            sink.close()
    summary = {}
    for v in study.variants:
        rs = [r for r in runs if r["variant"] == v]
        summary[v] = {
            "pck": float(np.mean([r["pck"] for r in rs])),
            "pck_std": float(np.std([r["pck"] for r in rs])),
            "pcp": float(np.mean([r["pcp"] for r in rs])),
            "pcp_table": {k: float(np.mean([r["pcp_table"][k] for r in rs])) for k in rs[0]["pcp_table"]},
        }
    checks = ordering_checks({v: s["pck"] for v, s in summary.items()}, study.min_gap)
    extra_edges = sorted(set(graphs["loopy"].edges) - set(graphs["tree"].edges)) if "loopy" in graphs else []
    return {
        "runs": runs,
        "summary": summary,
        "checks": checks,
        "loopy_extra_edges": [[graphs["tree"].labels[i], graphs["tree"].labels[j]] for i, j in extra_edges],
        "seconds": time.time() - start,
    }


def format_study(result: Mapping) -> str:
    cols = ("Torso", "Head", "U.arms", "L.arms", "U.legs", "L.legs", "Mean")
    width = max(len(LABELS[v]) for v in result["summary"])
    lines = [f"{'Method':<{width}}  " + "  ".join(f"{c:>6}" for c in cols) + "  PCK@0.2"]
    for v, s in result["summary"].items():
        row = "  ".join(f"{100 * s['pcp_table'][c]:6.1f}" for c in cols)
        lines.append(f"{LABELS[v]:<{width}}  {row}  {100 * s['pck']:5.1f} +- {100 * s['pck_std']:.1f}")
    lines.append("")
    for c in result["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        lines.append(f"{status} {c['check']}: gap {100 * c['gap']:+.2f}pp")
    if result.get("loopy_extra_edges") is not None:
        lines.append(f"loopy extra edges: {len(result['loopy_extra_edges'])}")
    lines.append(f"total time {result['seconds']:.0f}s")
    return "\n".join(lines)
