from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crfcnn.graph import LSP_JOINTS, nearest_rank_quantile
from crfcnn.synth import (
    J,
    DatasetError,
    DatasetSpec,
    generate,
    generate_one,
    load_dataset,
    pairwise_distance_stats,
    pck,
    pcp,
    pcp_table,
    pose_joints,
    save_dataset,
    torso_length,
)


def clean_spec(**kw) -> DatasetSpec:
    return DatasetSpec(**{"occlusion": 0.0, "distractors": 0.0, "noise": 0.0, **kw})


# ---------------------------------------------------------------- generation


def test_clean_samples_have_joints_on_rendered_limbs():
    for s in generate(clean_spec(count=20, seed=5)):
        assert s.visible.all()
        size = s.image.shape[-1]
        assert np.all((s.joints >= 0) & (s.joints <= size - 1))
        for x, y in s.joints:
            # the stroke covers the exact endpoint: nearest pixel is fully or mostly inked
            assert s.image[0, int(round(y)), int(round(x))] >= 0.5


def test_limb_lengths_follow_proportions():
    s = generate_one(clean_spec(), 3)
    scale = s.pose["scale"]
    lengths = clean_spec().limb_lengths
    d = lambda a, b: np.linalg.norm(s.joints[J[a]] - s.joints[J[b]])  # noqa: E731
    assert d("r_shoulder", "r_elbow") == pytest.approx(lengths["uarm"] * scale)
    assert d("l_knee", "l_ankle") == pytest.approx(lengths["lleg"] * scale)
    assert d("head", "neck") == pytest.approx(lengths["head"] * scale)


def test_same_seed_identical_bytes(tmp_path):
    spec = DatasetSpec(count=8, seed=11)
    save_dataset(tmp_path / "a", spec, generate(spec))
    save_dataset(tmp_path / "b", spec, generate(spec))
    for name in ["manifest.json"] + [f"images/{k:06d}.crft" for k in range(8)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = generate(DatasetSpec(count=8, seed=12))
    assert not np.array_equal(other[0].image, generate(spec)[0].image)


def test_occlusion_rate_binomial():
    samples = generate(DatasetSpec(count=1000, occlusion=0.3, distractors=0.0, noise=0.0, seed=2))
    frac = 1.0 - np.mean([s.visible.mean() for s in samples])
    assert abs(frac - 0.3) <= 0.03


def test_occluded_joint_is_blanked():
    s = next(s for s in generate(clean_spec(count=50, occlusion=0.3, seed=9)) if not s.visible.all())
    k = int(np.flatnonzero(~s.visible)[0])
    x, y = np.rint(s.joints[k]).astype(int)
    assert s.image[0, y, x] == 0.0


def test_dataset_round_trip(tmp_path):
    spec = DatasetSpec(count=5, seed=4)
    samples = generate(spec)
    save_dataset(tmp_path, spec, samples, pgm=True)
    spec2, back = load_dataset(tmp_path)
    assert spec2 == spec
    assert (tmp_path / "images" / "000000.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.joints, b.joints)
        np.testing.assert_array_equal(a.visible, b.visible)


def test_empty_dataset_is_valid(tmp_path):
    spec = DatasetSpec(count=0)
    save_dataset(tmp_path, spec, generate(spec))
    assert load_dataset(tmp_path)[1] == []


def test_spec_errors():
    with pytest.raises(DatasetError):
        DatasetSpec(occlusion=1.5)
    with pytest.raises(DatasetError):
        DatasetSpec.from_dict({"count": 3, "colour": "red"})
    with pytest.raises(DatasetError, match="too small"):
        generate(DatasetSpec(count=1, image_size=24))


# ---------------------------------------------------------------- metrics


def _figure() -> np.ndarray:
    return pose_joints({"scale": 1.0, "angles": {k: 0.0 for k in clean_spec().angle_ranges}}, clean_spec().limb_lengths)


def test_pcp_exact_is_one():
    gt = np.stack([_figure() + 30.0] * 3)
    table = pcp_table(gt, gt)
    assert all(v == 1.0 for v in table.values())


def test_pcp_inclusive_boundary():
    gt = np.array([[[0.0, 0.0], [10.0, 0.0]]])
    both_half = gt + np.array([[[0.0, 5.0], [0.0, -5.0]]])
    rates, mean = pcp(both_half, gt, [(0, 1)])
    assert rates[0] == 1.0 and mean == 1.0
    over = gt + np.array([[[6.0, 0.0], [0.0, 0.0]]])
    assert pcp(over, gt, [(0, 1)])[1] == 0.0


def test_pcp_zero_length_limb():
    gt = np.zeros((1, 2, 2))
    with pytest.raises(ValueError, match="zero-length"):
        pcp(gt, gt, [(0, 1)])


def test_pcp_averages_per_limb_then_over_limbs():
    gt = np.array([[[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]] * 2)
    pred = gt.copy()
    pred[0, 2] += [0.0, 9.0]  # breaks limb (1, 2) in sample 0 only
    rates, mean = pcp(pred, gt, [(0, 1), (1, 2)])
    np.testing.assert_allclose(rates, [1.0, 0.5])
    assert mean == pytest.approx(0.75)


def test_pck_boundaries():
    gt = np.zeros((1, 1, 2))
    assert pck(gt, gt, 10.0)[0] == 1.0
    assert pck(gt + [[[2.0, 0.0]]], gt, 10.0)[0] == 1.0  # exactly 0.2 x 10
    assert pck(gt + [[[2.5, 0.0]]], gt, 10.0)[0] == 0.0
    with pytest.raises(ValueError):
        pck(gt, gt, 0.0)


def test_torso_length():
    gt = np.zeros((1, 14, 2))
    gt[0, J["neck"]] = [10, 0]
    gt[0, J["r_hip"]] = [6, 20]
    gt[0, J["l_hip"]] = [14, 20]
    assert torso_length(gt)[0] == pytest.approx(20.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(0.05, 1.0), t2=st.floats(0.05, 1.0))
def test_metrics_bounded_and_monotone(seed, t1, t2):
    rng = np.random.default_rng(seed)
    gt = np.stack([_figure() + rng.uniform(20, 40, 2) for _ in range(6)])
    pred = gt + rng.normal(0, 4, gt.shape)
    lo, hi = sorted((t1, t2))
    for metric in (lambda t: pck(pred, gt, torso_length(gt), t), lambda t: pcp(pred, gt, [(J["neck"], J["head"]), (J["r_knee"], J["r_ankle"])], t)[0]):
        a, b = metric(lo), metric(hi)
        assert np.all((a >= 0) & (a <= 1)) and np.all(b >= a)


def test_pairwise_distance_stats():
    fig = _figure()
    stats = pairwise_distance_stats(np.stack([fig] * 5))
    assert len(stats) == 14 * 13 // 2
    d = np.linalg.norm(fig[J["head"]] - fig[J["neck"]])
    q = nearest_rank_quantile(stats[tuple(sorted((J["head"], J["neck"])))], 0.9)
    assert q == pytest.approx(d)
    pinned = np.zeros((4, 14, 2))
    assert all(np.all(v == 0) for v in pairwise_distance_stats(pinned).values())


def test_quantile_matches_sort_and_index():
    samples = generate(DatasetSpec(count=100, seed=7))
    stats = pairwise_distance_stats(samples)
    d = stats[(J["r_wrist"], J["l_wrist"])]
    assert nearest_rank_quantile(d, 0.9) == np.sort(d)[89]


def test_joint_names_follow_lsp_order():
    assert list(J) == list(LSP_JOINTS)
