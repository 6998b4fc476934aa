"""Image -> features -> unaries -> message passing -> per-joint score maps.

The extractor is a small conv/ReLU/avg-pool stack (total stride 4). Each
joint owns an ``L``-channel feature group; the score head is a per-location
linear classifier ``w_i^T h_i + b_i`` whose sigmoid is the score map and
whose spatial softmax is trained against the ground-truth cell.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import container
from .graph import JointGraph, Schedule, schedule_for, skeleton_tree, to_factor_graph
from .messages import PairwiseKernels, Tau, run_schedule
from .synth import FigureSample, pcp_table, pck, torso_length
from .tensor import (
    ConvKernel,
    NonFiniteError,
    Tape,
    Tensor,
    avg_pool2,
    backward,
    concat,
    conv2d,
    relu,
    sgd_step,
    sigmoid,
    spatial_softmax_nll,
)

log = logging.getLogger(__name__)

STRIDE = 4


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: "ModelParams", history: list[dict]):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 16
    schedule: str = "serial"
    iterations: int = 1
    tau: str = "softmax"
    alpha: float = 0.5
    beta: float | None = None  # None -> L
    channels: int = 16
    latent: int = 8
    unary_kernel: int = 3
    pairwise_kernel: int = 5
    extractor_kernel: int = 3
    share_weights: bool = True
    momentum: float = 0.0
    mask_occluded: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("epochs", "iterations", "batch_size", "channels", "latent"):
            v = getattr(self, name)
            if v < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        if self.schedule not in ("serial", "flooding"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.tau not in ("softmax", "relu"):
            raise ConfigError(f"unknown tau {self.tau!r}")
        if self.beta is not None and self.beta <= 0:
            raise ConfigError("beta must be positive")
        for name in ("unary_kernel", "pairwise_kernel", "extractor_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd size, got {k}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def make_tau(self) -> Tau:
        return Tau(self.tau, self.alpha, self.beta)


class ModelParams(dict):
    """Ordered ``name -> Tensor`` mapping of every trainable array."""

    def kernel(self, prefix: str) -> ConvKernel:
        return ConvKernel(self[f"{prefix}.weight"], self[f"{prefix}.bias"])

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.items()})

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def save(self, path: str | Path) -> None:
        container.save(path, self.arrays())

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return cls({k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in arrays.items()})

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return cls.from_arrays(container.load(path))


def _pairwise_name(j: int, k: int, m: int | None) -> str:
    return f"pairwise.{j}->{k}" + ("" if m is None else f".m{m}")


def init_params(
    graph: JointGraph,
    config: TrainConfig,
    in_channels: int = 1,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Weights uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases zero."""
    rng = rng or np.random.default_rng(config.seed)
    dt = config.np_dtype
    params = ModelParams()

    def conv(name: str, cout: int, cin: int, k: int) -> None:
        s = 1.0 / math.sqrt(cin * k * k)
        params[f"{name}.weight"] = Tensor(rng.uniform(-s, s, (cout, cin, k, k)).astype(dt), True, f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dt), True, f"{name}.bias")

    c, ke = config.channels, config.extractor_kernel
    conv("extractor.conv0", c, in_channels, ke)
    conv("extractor.conv1", c, c, ke)
    conv("extractor.conv2", c, c, ke)
    L = config.latent
    for i in range(graph.n):
        conv(f"unary.{i}", L, c, config.unary_kernel)
    fg = to_factor_graph(graph)
    n_sets = 1 if config.share_weights else config.iterations
    for m in range(n_sets):
        for j, k in fg.directed_edges():
            conv(_pairwise_name(j, k, None if config.share_weights else m), L, L, config.pairwise_kernel)
    for i in range(graph.n):
        conv(f"head.{i}", 1, L, 1)
    return params


def pairwise_kernels(params: ModelParams, graph: JointGraph, config: TrainConfig) -> PairwiseKernels:
    edges = to_factor_graph(graph).directed_edges()
    if config.share_weights:
        return PairwiseKernels.shared_set({e: params.kernel(_pairwise_name(*e, None)) for e in edges})
    sets = [{e: params.kernel(_pairwise_name(*e, m)) for e in edges} for m in range(config.iterations)]
    return PairwiseKernels(sets, shared=False)


def extract_features(image: Tensor, params: ModelParams) -> Tensor:
    x = relu(conv2d(image, params.kernel("extractor.conv0")))
    x = avg_pool2(x)
    x = relu(conv2d(x, params.kernel("extractor.conv1")))
    x = avg_pool2(x)
    return relu(conv2d(x, params.kernel("extractor.conv2")))


@dataclass
class ForwardResult:
    logits: Tensor  # [B, N, h, w]
    beliefs: list[Tensor]
    unaries: list[Tensor]

    @property
    def scores(self) -> Tensor:
        return sigmoid(self.logits)


def forward(
    image: Tensor | np.ndarray,
    params: ModelParams,
    graph: JointGraph,
    schedule: Schedule,
    config: TrainConfig,
    trace: Callable[[str, Tensor], None] | None = None,
) -> ForwardResult:
    """Score-map logits for a ``[C,H,W]`` image or ``[B,C,H,W]`` batch.

    The returned logits always carry a leading batch axis.
    """
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=config.np_dtype))
    batched = image.data.ndim == 4
    if not batched:
        image = Tensor(image.data[None])
    h, w = image.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ConfigError(f"image {h}x{w} not divisible by stride {STRIDE}")
    if image.shape[1] != params["extractor.conv0.weight"].shape[1]:
        raise ConfigError("image channels do not match the extractor")
    f = extract_features(image, params)
    fg = to_factor_graph(graph)
    unary = [conv2d(f, params.kernel(f"unary.{i}")) for i in range(graph.n)]
    beliefs = run_schedule(
        None, fg, schedule, pairwise_kernels(params, graph, config),
        tau=config.make_tau(), unaries=unary, trace=trace,
    )
    maps = [conv2d(b, params.kernel(f"head.{i}")) for i, b in enumerate(beliefs)]
    logits = concat(maps, axis=1)
    return ForwardResult(logits, beliefs, unary)


def target_cells(joints: np.ndarray, map_h: int, map_w: int) -> np.ndarray:
    """Nearest feature-grid cell (flat row-major index) for ``[..., N, 2]`` joints."""
    col = np.clip(np.rint(joints[..., 0] / STRIDE), 0, map_w - 1).astype(np.int64)
    row = np.clip(np.rint(joints[..., 1] / STRIDE), 0, map_h - 1).astype(np.int64)
    return row * map_w + col


def joint_mask(samples: Sequence[FigureSample], image_size: int, mask_occluded: bool) -> np.ndarray:
    joints = np.stack([s.joints for s in samples])
    inside = np.all((joints >= 0) & (joints <= image_size - 1), axis=-1)
    if mask_occluded:
        inside &= np.stack([s.visible for s in samples])
    return inside


def spatial_softmax_loss(score_logits: Tensor, gt, mask=None) -> Tensor:
    """Softmax over each joint's map; mean NLL of the ground-truth cells.

    ``gt`` is ``[B, N, 2]`` of ``(row, col)`` cells, with rows of ``-1`` (or a
    false ``mask``) marking absent joints.
    """
    b, n, h, w = score_logits.shape
    gt = np.asarray(gt).reshape(b, n, 2)
    absent = np.any(gt < 0, axis=-1)
    m = ~absent if mask is None else (np.asarray(mask, bool).reshape(b, n) & ~absent)
    rows, cols = gt[..., 0], gt[..., 1]
    bad = m & ((rows >= h) | (cols >= w))
    if np.any(bad):
        raise ValueError("ground-truth cell outside the score map")
    flat = np.where(m, rows * w + cols, 0)
    return spatial_softmax_nll(score_logits, flat, m)


def predict_joints(score_maps: np.ndarray | Tensor, stride: int = STRIDE) -> np.ndarray:
    """``[..., N, h, w]`` logit maps -> ``[..., N, 3]`` of ``(x, y, confidence)``.

    Location is the first maximum in row-major order; confidence is the
    spatial softmax probability there.
    """
    s = score_maps.data if isinstance(score_maps, Tensor) else np.asarray(score_maps, float)
    *lead, h, w = s.shape
    flat = s.reshape(*lead, h * w)
    idx = flat.argmax(axis=-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    conf = np.take_along_axis(p, idx[..., None], -1)[..., 0]
    row, col = np.divmod(idx, w)
    return np.stack([col * stride, row * stride, conf], axis=-1).astype(float)


# ---------------------------------------------------------------- training


def _batch(samples: Sequence[FigureSample], dtype) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(dtype)


def _metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    pk = pck(pred[..., :2], gt, torso_length(gt), 0.2)
    return float(np.nanmean(pk)), pcp_table(pred[..., :2], gt)["Mean"]


@dataclass
class Model:
    """Parameters bound to a graph, schedule and config."""

    params: ModelParams
    graph: JointGraph
    config: TrainConfig
    schedule: Schedule = field(init=False)

    def __post_init__(self) -> None:
        self.schedule = schedule_for(self.graph, self.config.schedule, self.config.iterations)

    def forward(self, images, trace=None) -> ForwardResult:
        return forward(images, self.params, self.graph, self.schedule, self.config, trace)

    def predict(self, samples: Sequence[FigureSample], batch_size: int = 64) -> np.ndarray:
        out = []
        for k in range(0, len(samples), batch_size):
            res = self.forward(_batch(samples[k : k + batch_size], self.config.np_dtype))
            out.append(predict_joints(res.logits))
        return np.concatenate(out) if out else np.zeros((0, self.graph.n, 3))


def evaluate(model: Model, samples: Sequence[FigureSample]) -> dict:
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = model.predict(samples)
    gt = np.stack([model.graph.locate(s.joints) for s in samples])
    per_joint = pck(pred[..., :2], gt, torso_length(gt), 0.2)
    return {
        "pck": float(np.nanmean(per_joint)),
        "pck_per_joint": {lab: float(v) for lab, v in zip(model.graph.labels, per_joint)},
        "pcp": pcp_table(pred[..., :2], gt),
    }


def train(
    samples: Sequence[FigureSample],
    config: TrainConfig,
    graph: JointGraph | None = None,
    params: ModelParams | None = None,
    on_epoch: Callable[[dict, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Minibatch SGD on the spatial softmax loss.

    Per-epoch records carry the mean training loss and the PCK/PCP of the
    predictions made during that epoch's forward passes.
    """
    if not samples:
        raise ValueError("training set is empty")
    graph = graph or skeleton_tree()
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(graph, config, samples[0].image.shape[0], rng)
    model = Model(params, graph, config)
    dt = config.np_dtype
    size = samples[0].image.shape[-1]
    gt_all = np.stack([graph.locate(s.joints) for s in samples])
    mask_all = joint_mask(samples, size, config.mask_occluded)
    if gt_all.shape[1] != mask_all.shape[1]:
        mask_all = np.concatenate([mask_all, np.ones((len(samples), gt_all.shape[1] - mask_all.shape[1]), bool)], 1)
    hmap = size // STRIDE
    velocity: dict[str, np.ndarray] = {}
    history: list[dict] = []
    last_good = params.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses, weights = [], []
        preds = np.zeros((len(samples), graph.n, 3))
        for k in range(0, len(order), config.batch_size):
            idx = order[k : k + config.batch_size]
            images = Tensor(_batch([samples[i] for i in idx], dt))
            cells = target_cells(gt_all[idx], hmap, hmap)
            m = mask_all[idx]
            params.zero_grad()
            try:
                with Tape() as tape:
                    res = model.forward(images)
                    loss = spatial_softmax_nll(res.logits, cells, m)
                backward(tape, loss)
                if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values()):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, history) from exc
            preds[idx] = predict_joints(res.logits)
            losses.append(loss.item())
            weights.append(max(int(m.sum()), 1))
            sgd_step(params, None, config.lr, config.momentum, velocity)
        mean_loss = float(np.average(losses, weights=weights))
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"epoch {epoch}: loss is {mean_loss}", last_good, history)
        pk, pc = _metrics(preds, gt_all)
        rec = {"epoch": epoch, "loss": mean_loss, "pck": pk, "pcp": pc}
        history.append(rec)
        log.info("epoch %d loss %.4f pck %.3f pcp %.3f", epoch, mean_loss, pk, pc)
        last_good = params.copy()
        if on_epoch is not None:
            on_epoch(rec, params)
    return params, history


def dataset_loss(model: Model, samples: Sequence[FigureSample]) -> float:
    size = samples[0].image.shape[-1]
    gt = np.stack([model.graph.locate(s.joints) for s in samples])
    m = joint_mask(samples, size, model.config.mask_occluded)
    res = model.forward(_batch(samples, model.config.np_dtype))
    hmap = size // STRIDE
    return spatial_softmax_nll(res.logits, target_cells(gt, hmap, hmap), m).item()


def config_json(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
