"""Synthetic stick-figure images with known joints, plus PCP/PCK.

Figures use the 14-joint LSP layout (see :data:`crfcnn.graph.LSP_JOINTS`).
All limbs share one appearance, so left/right and wrist/ankle are locally
ambiguous; occluder patches and distractor segments add further ambiguity.
Coordinates are ``(x, y)`` pixels with ``y`` pointing down.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import container
from .graph import LSP_JOINTS

J = {name: k for k, name in enumerate(LSP_JOINTS)}

# (name, a, b) segments drawn for every figure
_SEGMENTS = (
    ("head", "head", "neck"),
    ("r_clavicle", "neck", "r_shoulder"), ("l_clavicle", "neck", "l_shoulder"),
    ("r_uarm", "r_shoulder", "r_elbow"), ("r_larm", "r_elbow", "r_wrist"),
    ("l_uarm", "l_shoulder", "l_elbow"), ("l_larm", "l_elbow", "l_wrist"),
    ("r_torso", "neck", "r_hip"), ("l_torso", "neck", "l_hip"), ("pelvis", "r_hip", "l_hip"),
    ("r_uleg", "r_hip", "r_knee"), ("r_lleg", "r_knee", "r_ankle"),
    ("l_uleg", "l_hip", "l_knee"), ("l_lleg", "l_knee", "l_ankle"),
)

# limbs scored by PCP, grouped like the usual LSP report columns
PCP_LIMBS = {
    "Torso": (("neck", "r_hip"), ("neck", "l_hip")),
    "Head": (("head", "neck"),),
    "U.arms": (("r_shoulder", "r_elbow"), ("l_shoulder", "l_elbow")),
    "L.arms": (("r_elbow", "r_wrist"), ("l_elbow", "l_wrist")),
    "U.legs": (("r_hip", "r_knee"), ("l_hip", "l_knee")),
    "L.legs": (("r_knee", "r_ankle"), ("l_knee", "l_ankle")),
}


def pcp_limb_indices() -> tuple[list[tuple[int, int]], list[str]]:
    limbs, groups = [], []
    for group, pairs in PCP_LIMBS.items():
        for a, b in pairs:
            limbs.append((J[a], J[b]))
            groups.append(group)
    return limbs, groups


class DatasetError(ValueError):
    pass


DEFAULT_ANGLES = {
    # degrees; 0 = along the torso (pointing down), positive = towards image right
    "torso": (-15.0, 15.0),
    "head": (-20.0, 20.0),
    "r_uarm": (-170.0, 30.0),
    "l_uarm": (-30.0, 170.0),
    "r_larm": (-150.0, 150.0),
    "l_larm": (-150.0, 150.0),
    "r_uleg": (-45.0, 15.0),
    "l_uleg": (-15.0, 45.0),
    "r_lleg": (-20.0, 60.0),
    "l_lleg": (-60.0, 20.0),
}

DEFAULT_LENGTHS = {
    "head": 7.0, "clavicle": 5.0, "torso": 17.0, "hip": 4.0,
    "uarm": 10.0, "larm": 9.0, "uleg": 12.0, "lleg": 12.0,
}


@dataclass
class DatasetSpec:
    count: int = 100
    image_size: int = 64
    angle_ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_ANGLES))
    limb_lengths: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LENGTHS))
    scale_range: tuple[float, float] = (0.9, 1.1)
    occlusion: float = 0.1
    distractors: float = 0.3
    noise: float = 0.1
    line_width: float = 2.0
    occluder_size: int = 7
    margin: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("occlusion", "distractors"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DatasetError(f"{name} must be a probability, got {p}")
        if self.count < 0:
            raise DatasetError("count must be non-negative")
        if self.noise < 0:
            raise DatasetError("noise must be non-negative")
        self.angle_ranges = {**DEFAULT_ANGLES, **{k: tuple(v) for k, v in self.angle_ranges.items()}}
        self.limb_lengths = {**DEFAULT_LENGTHS, **self.limb_lengths}
        self.scale_range = tuple(self.scale_range)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angle_ranges"] = {k: list(v) for k, v in self.angle_ranges.items()}
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class FigureSample:
    image: np.ndarray  # [1, H, W] float64 in roughly [0, 1]
    joints: np.ndarray  # [14, 2] (x, y)
    visible: np.ndarray  # [14] bool
    pose: dict

    def record(self) -> dict:
        return {
            "joints": self.joints.tolist(),
            "visible": [bool(v) for v in self.visible],
            "pose": self.pose,
        }


def _unit(deg: float) -> np.ndarray:
    # 0 deg points down (+y); positive rotates towards +x
    r = math.radians(deg)
    return np.array([math.sin(r), math.cos(r)])


def pose_joints(pose: Mapping, lengths: Mapping[str, float]) -> np.ndarray:
    """Joint locations for a pose, relative to the neck at the origin."""
    s = pose["scale"]
    a = pose["angles"]
    L = {k: v * s for k, v in lengths.items()}
    t = a["torso"]
    down = _unit(t)
    right = _unit(t + 90.0)
    p = np.zeros((len(LSP_JOINTS), 2))
    p[J["neck"]] = 0.0
    p[J["head"]] = -L["head"] * _unit(t + a["head"])
    p[J["r_shoulder"]] = -L["clavicle"] * right
    p[J["l_shoulder"]] = L["clavicle"] * right
    p[J["r_hip"]] = L["torso"] * down - L["hip"] * right
    p[J["l_hip"]] = L["torso"] * down + L["hip"] * right
    for side in ("r", "l"):
        ua = t + a[f"{side}_uarm"]
        p[J[f"{side}_elbow"]] = p[J[f"{side}_shoulder"]] + L["uarm"] * _unit(ua)
        p[J[f"{side}_wrist"]] = p[J[f"{side}_elbow"]] + L["larm"] * _unit(ua + a[f"{side}_larm"])
        ul = t + a[f"{side}_uleg"]
        p[J[f"{side}_knee"]] = p[J[f"{side}_hip"]] + L["uleg"] * _unit(ul)
        p[J[f"{side}_ankle"]] = p[J[f"{side}_knee"]] + L["lleg"] * _unit(ul + a[f"{side}_lleg"])
    return p


def _segment_distance(xx, yy, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.hypot(xx - a[0], yy - a[1])
    t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(xx - (a[0] + t * d[0]), yy - (a[1] + t * d[1]))


def render_segments(size: int, segments: Sequence[tuple[np.ndarray, np.ndarray]], width: float) -> np.ndarray:
    """Anti-aliased lines: coverage falls off linearly over one pixel at the stroke edge."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    img = np.zeros((size, size))
    for a, b in segments:
        d = _segment_distance(xx, yy, np.asarray(a, float), np.asarray(b, float))
        img = np.maximum(img, np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0))
    return img


def _neutral_extent(spec: DatasetSpec) -> float:
    neutral = {"scale": spec.scale_range[0], "angles": {k: 0.0 for k in DEFAULT_ANGLES}}
    p = pose_joints(neutral, spec.limb_lengths)
    return float(max(np.ptp(p[:, 0]), np.ptp(p[:, 1])))


def _sample_pose(rng: np.random.Generator, spec: DatasetSpec) -> dict:
    angles = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in sorted(spec.angle_ranges.items())}
    return {"scale": float(rng.uniform(*spec.scale_range)), "angles": angles}


def generate_one(spec: DatasetSpec, seed: np.random.SeedSequence | int) -> FigureSample:
    rng = np.random.default_rng(seed)
    size, margin = spec.image_size, spec.margin
    for _ in range(200):
        pose = _sample_pose(rng, spec)
        rel = pose_joints(pose, spec.limb_lengths)
        lo, hi = rel.min(axis=0), rel.max(axis=0)
        room = (size - 1 - 2 * margin) - (hi - lo)
        if np.all(room >= 0):
            break
    else:
        raise DatasetError(f"image size {size} too small for the sampled poses")
    origin = margin - lo + rng.uniform(0.0, 1.0, size=2) * room
    joints = rel + origin
    pose["neck"] = [float(origin[0]), float(origin[1])]

    segs = [(joints[J[a]], joints[J[b]]) for _, a, b in _SEGMENTS]
    img = render_segments(size, segs, spec.line_width)
    # head blob
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    hx, hy = joints[J["head"]]
    img = np.maximum(img, np.clip(2.5 * pose["scale"] + 0.5 - np.hypot(xx - hx, yy - hy), 0.0, 1.0))

    if rng.random() < spec.distractors:
        n_extra = int(rng.integers(1, 3))
        extra = []
        lengths = spec.limb_lengths
        for _ in range(n_extra):
            a = rng.uniform(margin, size - 1 - margin, size=2)
            ln = pose["scale"] * rng.uniform(lengths["larm"], lengths["uleg"])
            b = np.clip(a + ln * _unit(rng.uniform(0, 360)), 0, size - 1)
            extra.append((a, b))
        img = np.maximum(img, render_segments(size, extra, spec.line_width))

    visible = rng.random(len(LSP_JOINTS)) >= spec.occlusion
    half = spec.occluder_size / 2.0
    for k in np.flatnonzero(~visible):
        x, y = joints[k]
        patch = (np.abs(xx - x) <= half) & (np.abs(yy - y) <= half)
        img[patch] = 0.0

    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return FigureSample(img[None].astype(np.float64), joints, visible, pose)


def generate(spec: DatasetSpec) -> list[FigureSample]:
    """Deterministic dataset; sample ``k`` uses the k-th child of ``spec.seed``."""
    if spec.count and spec.image_size < _neutral_extent(spec) + 2 * spec.margin + 1:
        raise DatasetError(f"image size {spec.image_size} too small for skeleton scale")
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.count)
    return [generate_one(spec, s) for s in seeds]


# ---------------------------------------------------------------- persistence


def save_dataset(path: str | Path, spec: DatasetSpec, samples: Sequence[FigureSample], pgm: bool = False) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for k, s in enumerate(samples):
        name = f"images/{k:06d}.crft"
        container.save(root / name, {"image": s.image})
        if pgm:
            write_pgm(root / f"images/{k:06d}.pgm", s.image[0])
        records.append({"file": name, **s.record()})
    manifest = {"format": "crfcnn-dataset-1", "joints": list(LSP_JOINTS), "spec": spec.to_dict(), "samples": records}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path: str | Path) -> tuple[DatasetSpec, list[FigureSample]]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset manifest in {root}: {exc}") from exc
    spec = DatasetSpec.from_dict(manifest["spec"])
    samples = []
    for rec in manifest["samples"]:
        image = container.load(root / rec["file"])["image"]
        samples.append(
            FigureSample(image, np.asarray(rec["joints"], float), np.asarray(rec["visible"], bool), rec["pose"])
        )
    return spec, samples


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    data = (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


# ---------------------------------------------------------------- metrics


def torso_length(gt: np.ndarray) -> np.ndarray:
    """Neck to hip-midpoint distance per sample; ``gt`` is ``[S, 14, 2]``."""
    gt = np.asarray(gt, float)
    mid_hip = 0.5 * (gt[:, J["r_hip"]] + gt[:, J["l_hip"]])
    return np.linalg.norm(gt[:, J["neck"]] - mid_hip, axis=-1)


def pck(pred, gt, normalizer, threshold: float = 0.2, mask=None) -> np.ndarray:
    """Per-joint fraction with ``||pred - gt|| <= threshold * normalizer``.

    ``mask`` ``[S, N]`` excludes entries from both numerator and denominator.
    """
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    norm = np.broadcast_to(np.asarray(normalizer, float), gt.shape[:1])
    if np.any(norm <= 0):
        raise ValueError("PCK normalizer must be positive")
    err = np.linalg.norm(pred - gt, axis=-1)
    ok = err <= threshold * norm[:, None]
    m = np.ones_like(ok, dtype=bool) if mask is None else np.asarray(mask, bool)
    counts = m.sum(axis=0)
    return np.where(counts > 0, (ok & m).sum(axis=0) / np.maximum(counts, 1), np.nan)


def pcp(pred, gt, limbs: Sequence[tuple[int, int]], threshold: float = 0.5) -> tuple[np.ndarray, float]:
    """Strict PCP: a limb counts when both endpoint errors are within
    ``threshold`` times its ground-truth length. Returns per-limb rates and
    their mean (per-limb first, then averaged over limbs)."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    rates = []
    for a, b in limbs:
        length = np.linalg.norm(gt[:, a] - gt[:, b], axis=-1)
        if np.any(length <= 0):
            raise ValueError(f"zero-length ground-truth limb ({a}, {b})")
        ea = np.linalg.norm(pred[:, a] - gt[:, a], axis=-1)
        eb = np.linalg.norm(pred[:, b] - gt[:, b], axis=-1)
        rates.append(np.mean((ea <= threshold * length) & (eb <= threshold * length)))
    rates = np.asarray(rates)
    return rates, float(rates.mean()) if rates.size else float("nan")


def pcp_table(pred, gt, threshold: float = 0.5) -> dict[str, float]:
    """PCP per report column plus ``Mean`` over all scored limbs."""
    limbs, groups = pcp_limb_indices()
    rates, mean = pcp(pred, gt, limbs, threshold)
    out = {g: float(np.mean([r for r, gg in zip(rates, groups) if gg == g])) for g in PCP_LIMBS}
    out["Mean"] = mean
    return out


def pairwise_distance_stats(samples: Sequence[FigureSample] | np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Euclidean distance samples for every unordered joint pair ``(i < j)``."""
    if isinstance(samples, np.ndarray):
        joints = samples
    else:
        joints = np.stack([s.joints for s in samples])
    if joints.shape[0] == 0:
        raise DatasetError("empty dataset")
    n = joints.shape[1]
    return {
        (i, j): np.linalg.norm(joints[:, i] - joints[:, j], axis=-1)
        for i in range(n)
        for j in range(i + 1, n)
    }
