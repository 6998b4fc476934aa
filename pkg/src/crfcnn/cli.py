"""Command-line entry point: ``crfcnn gen|train|eval|verify|dump|bench``.

Exit codes: 0 success, 2 input or config error, 3 numerical divergence,
4 checkpoint/graph incompatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import container
from .graph import GraphError, JointGraph, build_loopy, from_spec, skeleton_tree
from .model import (
    ConfigError,
    Model,
    ModelParams,
    TrainConfig,
    TrainingDiverged,
    _batch,
    evaluate,
    init_params,
    predict_joints,
    train,
)
from .synth import DatasetError, DatasetSpec, generate, load_dataset, pairwise_distance_stats, pck, pcp_table, save_dataset, torso_length

log = logging.getLogger("crfcnn")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_COMPAT = 0, 2, 3, 4
SEED_ENV = "CRFCNN_SEED"
PCP_COLUMNS = ("Torso", "Head", "U.arms", "L.arms", "U.legs", "L.legs", "Mean")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config plumbing


def parse_value(text: str) -> Any:
    """JSON literal when it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(extra: Sequence[str]) -> list[tuple[str, Any]]:
    """``--a.b value`` or ``--a.b=value`` pairs from leftover argv."""
    out = []
    k = 0
    while k < len(extra):
        tok = extra[k]
        if not tok.startswith("--") or len(tok) == 2:
            raise CliError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if k + 1 >= len(extra):
                raise CliError(f"missing value for --{key}")
            k += 1
            raw = extra[k]
        out.append((key, parse_value(raw)))
        k += 1
    return out


def apply_overrides(cfg: dict, overrides: Sequence[tuple[str, Any]]) -> dict:
    for key, value in overrides:
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise CliError(f"cannot override {key}: {p} is not a section")
            node = nxt
        node[parts[-1]] = value
    return cfg


def read_json(path: str | Path, what: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise CliError(f"{what} {path}: expected a JSON object")
    return data


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def prepare_output(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def resolve_graph(value: Any, base: Path | None = None) -> JointGraph:
    """``None`` for the default skeleton, a path to a JSON spec, or an inline spec."""
    if value is None:
        return skeleton_tree()
    if isinstance(value, str):
        p = Path(value)
        if base is not None and not p.is_absolute() and not p.exists():
            p = base / p
        value = read_json(p, "graph spec")
    if not isinstance(value, dict):
        raise CliError("graph must be a path or an object")
    return from_spec(value)


# ---------------------------------------------------------------- checkpoints


def checkpoint_sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(path: Path, params: ModelParams, graph: JointGraph, config: TrainConfig) -> None:
    params.save(path)
    write_json(checkpoint_sidecar(path), {"graph": graph.to_spec(), "train": config.to_dict()})


def load_checkpoint(path: str | Path) -> tuple[ModelParams, JointGraph, TrainConfig]:
    path = Path(path)
    try:
        params = ModelParams.load(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    except container.ContainerError as exc:
        raise CliError(f"checkpoint {path}: {exc}") from exc
    side = read_json(checkpoint_sidecar(path), "checkpoint metadata")
    graph = from_spec(side["graph"])
    config = TrainConfig.from_dict(side["train"])
    check_compatible(params, graph, config)
    return params, graph, config


def check_compatible(params: ModelParams, graph: JointGraph, config: TrainConfig) -> None:
    """Parameter names and shapes must be exactly those the graph and config call for."""
    expected = init_params(graph, config, params["extractor.conv0.weight"].shape[1]
                           if "extractor.conv0.weight" in params else 1, np.random.default_rng(0))
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CliError(f"checkpoint does not match graph: missing {missing[:4]}, unexpected {extra[:4]}", EXIT_COMPAT)
    for name, p in expected.items():
        if params[name].shape != p.shape:
            raise CliError(f"checkpoint tensor {name} has shape {params[name].shape}, graph needs {p.shape}",
                           EXIT_COMPAT)


def same_graph(a: JointGraph, b: JointGraph) -> bool:
    return a.to_spec() == b.to_spec()


# ---------------------------------------------------------------- commands


def cmd_gen(args, overrides) -> int:
    spec_dict = read_json(args.spec, "dataset spec")
    apply_overrides(spec_dict, overrides)
    if "seed" not in spec_dict and env_seed() is not None:
        spec_dict["seed"] = env_seed()
    spec = DatasetSpec.from_dict(spec_dict)
    samples = generate(spec)
    out = prepare_output(args.out)
    save_dataset(out, spec, samples, pgm=args.pgm)
    write_json(out / "effective_config.json", {"command": "gen", "spec": spec.to_dict()})
    print(f"wrote {len(samples)} samples to {out}")
    print(json.dumps({"command": "gen", "count": len(samples), "output": str(out)}))
    return EXIT_OK


TRAIN_DEFAULTS = {"dataset": None, "output": None, "graph": None, "loopy": None, "train": {}}


def effective_train_config(args, overrides) -> dict:
    cfg = {**TRAIN_DEFAULTS, "train": {}}
    if args.config:
        user = read_json(args.config, "config")
        unknown = set(user) - set(TRAIN_DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    apply_overrides(cfg, overrides)
    if args.dataset:
        cfg["dataset"] = args.dataset
    if args.out:
        cfg["output"] = args.out
    if "seed" not in cfg["train"] and env_seed() is not None:
        cfg["train"]["seed"] = env_seed()
    cfg["train"] = TrainConfig.from_dict(cfg["train"]).to_dict()
    for key in ("dataset", "output"):
        if not cfg[key]:
            raise CliError(f"config needs {key!r}")
    return cfg


def build_graph(cfg: dict, samples, base: Path | None) -> JointGraph:
    graph = resolve_graph(cfg.get("graph"), base)
    loopy = cfg.get("loopy")
    if loopy:
        if not isinstance(loopy, dict):
            raise CliError("loopy must be an object with fraction and radius")
        graph = build_loopy(graph, pairwise_distance_stats(samples), float(loopy.get("fraction", 0.9)),
                            float(loopy.get("radius", 20.0)))
    return graph


def cmd_train(args, overrides) -> int:
    cfg = effective_train_config(args, overrides)
    base = Path(args.config).parent if args.config else None
    _, samples = load_dataset(cfg["dataset"])
    if not samples:
        raise CliError(f"dataset {cfg['dataset']} is empty")
    graph = build_graph(cfg, samples, base)
    config = TrainConfig.from_dict(cfg["train"])
    out = prepare_output(cfg["output"])
    write_json(out / "effective_config.json", {"command": "train", **cfg, "graph_spec": graph.to_spec()})
    ckpt = out / "checkpoint.crft"
    metrics = (out / "metrics.jsonl").open("w")

    def on_epoch(rec: dict, params: ModelParams) -> None:
        metrics.write(json.dumps(rec, sort_keys=True) + "\n")
        metrics.flush()
        save_checkpoint(ckpt, params, graph, config)
        print(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.4f}  pck {rec['pck']:.3f}  pcp {rec['pcp']:.3f}")

    try:
        params, history = train(samples, config, graph, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        save_checkpoint(ckpt, exc.params, graph, config)
        print(f"training diverged: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        metrics.close()
    save_checkpoint(ckpt, params, graph, config)
    print(json.dumps({"command": "train", "checkpoint": str(ckpt), "epochs": len(history),
                      "final": history[-1] if history else None}))
    return EXIT_OK


def format_report(report: dict) -> str:
    pcp = report["pcp"]
    head = "  ".join(f"{c:>7}" for c in PCP_COLUMNS)
    row = "  ".join(f"{100 * pcp[c]:7.1f}" for c in PCP_COLUMNS)
    return f"strict PCP (%)\n{head}\n{row}\nPCK@0.2: {100 * report['pck']:.1f}%  ({report['count']} samples)"


def ground_truth_report(graph: JointGraph, samples) -> dict:
    gt = np.stack([s.joints for s in samples])
    per_joint = pck(gt, gt, torso_length(gt), 0.2)
    return {
        "pck": float(np.nanmean(per_joint)),
        "pck_per_joint": {lab: float(v) for lab, v in zip(graph.labels, per_joint)},
        "pcp": pcp_table(gt, gt),
    }


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise CliError("eval takes no config overrides")
    _, samples = load_dataset(args.dataset)
    if not samples:
        raise CliError(f"dataset {args.dataset} is empty")
    if args.ground_truth:
        graph = resolve_graph(args.graph)
        report = ground_truth_report(graph, samples)
        source = "ground-truth"
    else:
        if not args.checkpoint:
            raise CliError("eval needs a checkpoint (or --ground-truth)")
        params, graph, config = load_checkpoint(args.checkpoint)
        if args.graph is not None and not same_graph(resolve_graph(args.graph), graph):
            raise CliError("graph spec differs from the checkpoint's graph", EXIT_COMPAT)
        if args.config is not None:
            user = read_json(args.config, "config")
            if user.get("graph") is not None or user.get("loopy"):
                base = Path(args.config).parent
                if not same_graph(build_graph(user, samples, base), graph):
                    raise CliError("config graph differs from the checkpoint's graph", EXIT_COMPAT)
        report = evaluate(Model(params, graph, config), samples)
        source = str(args.checkpoint)
    report = {"command": "eval", "source": source, "dataset": str(args.dataset), "count": len(samples), **report}
    print(format_report(report))
    if args.out:
        out = prepare_output(args.out)
        write_json(out / "report.json", report)
        write_json(out / "effective_config.json", {"command": "eval", "checkpoint": args.checkpoint,
                                                    "dataset": args.dataset, "graph": args.graph,
                                                    "ground_truth": args.ground_truth})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_verify(args, overrides) -> int:
    from .verify import SUITES

    if overrides:
        raise CliError("verify takes no config overrides")
    modes = list(SUITES) if args.mode == "all" else [args.mode]
    ok = True
    results = []
    for mode in modes:
        res = SUITES[mode]()
        results.append(res)
        ok &= bool(res["passed"])
        for case in res.get("cases", [res]):
            line = {k: v for k, v in case.items() if k != "cases"}
            status = "PASS" if case.get("passed", res["passed"]) else "FAIL"
            print(f"{status} {mode} " + " ".join(f"{k}={v}" for k, v in line.items() if k not in ("passed", "check")))
    print(json.dumps({"command": "verify", "passed": ok, "results": results}, default=float))
    return EXIT_OK if ok else 1


def cmd_dump(args, overrides) -> int:
    if overrides:
        raise CliError("dump takes no config overrides")
    params, graph, config = load_checkpoint(args.checkpoint)
    _, samples = load_dataset(args.dataset)
    if not 0 <= args.index < len(samples):
        raise CliError(f"sample index {args.index} out of range for {len(samples)} samples")
    tensors: dict[str, np.ndarray] = {}

    def trace(key: str, t) -> None:
        tensors[key] = np.array(t.data[0] if t.data.ndim == 4 else t.data)

    res = Model(params, graph, config).forward(_batch([samples[args.index]], config.np_dtype), trace=trace)
    tensors["logits"] = res.logits.data[0]
    tensors["pred"] = predict_joints(res.logits)[0]
    container.save(args.out, tensors)
    print(f"wrote {len(tensors)} tensors to {args.out}")
    print(json.dumps({"command": "dump", "output": str(args.out), "keys": sorted(tensors)}))
    return EXIT_OK


def cmd_bench(args, overrides) -> int:
    from .benchmark import StudyConfig, format_study, run_study

    cfg = StudyConfig().to_dict()
    if args.config:
        cfg.update(read_json(args.config, "benchmark config"))
    apply_overrides(cfg, overrides)
    study = StudyConfig.from_dict(cfg)
    out = prepare_output(args.out)
    write_json(out / "effective_config.json", {"command": "bench", **study.to_dict()})
    result = run_study(study, log_path=out / "runs.jsonl")
    write_json(out / "study.json", result)
    print(format_study(result))
    print(json.dumps({"command": "bench", "summary": result["summary"], "checks": result["checks"]}))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crfcnn", description="CRF-CNN pose engine on synthetic figures.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("spec", help="dataset spec JSON")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--pgm", action="store_true", help="also write PGM previews")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", nargs="?", help="run config JSON")
    t.add_argument("--dataset")
    t.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("--dataset", required=True)
    e.add_argument("--graph", help="graph spec JSON that must match the checkpoint")
    e.add_argument("--config", help="run config whose graph must match the checkpoint")
    e.add_argument("--ground-truth", action="store_true", help="score ground truth as the prediction")
    e.add_argument("--out", help="directory for report.json")

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("mode", choices=["gradcheck", "oracle", "reachability", "normalization", "steps", "all"])

    d = sub.add_parser("dump", help="write beliefs and messages of one sample")
    d.add_argument("checkpoint")
    d.add_argument("--dataset", required=True)
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="schedule and nonlinearity diagnostic study")
    b.add_argument("config", nargs="?")
    b.add_argument("--out", required=True)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "dump": cmd_dump,
            "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = parse_overrides(extra)
        return COMMANDS[args.command](args, overrides)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DatasetError, GraphError, container.ContainerError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
