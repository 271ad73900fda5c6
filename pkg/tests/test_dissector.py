import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dissectprune.dissector import (
    IoUAccumulator,
    best_concepts,
    compute_thresholds,
    dataset_iou,
    dissect_activations,
    dissect_network,
    upper_quantile,
    upsample_activation,
    segment,
)
from dissectprune.concept_data import MicroBrodenSpec, generate_micro_broden, load_concept_dataset
from dissectprune.model import ModelSpec, build_model


def sorted_quantile(values, q=0.995):
    """k-th order statistic with k = ceil(q n), by a plain sort."""
    v = sorted(float(x) for x in np.ravel(values))
    k = -(-int(round(q * 1000)) * len(v) // 1000)  # exact ceil for q with three decimals
    return v[max(k, 1) - 1]


def test_constant_unit_threshold_and_empty_segmentation():
    acts = np.full((3, 1, 4, 4), 2.5)
    (t,) = compute_thresholds(acts)
    assert t.threshold == 2.5 and t.sample_size == 48
    assert not segment(acts[0, 0], t).any()


def test_integers_1_to_1000():
    values = np.random.default_rng(0).permutation(np.arange(1, 1001)).astype(np.float64)
    (t,) = compute_thresholds(values.reshape(10, 1, 10, 10))
    assert t.threshold == sorted_quantile(values) == 995.0


def test_scale_equivariance():
    acts = np.random.default_rng(1).normal(size=(5, 3, 6, 6))
    a = compute_thresholds(acts)
    b = compute_thresholds(2 * acts)
    assert [2 * u.threshold for u in a] == [u.threshold for u in b]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3000), st.integers(0, 2**32 - 1), st.booleans())
def test_quantile_bracket(n, seed, ties):
    rng = np.random.default_rng(seed)
    v = rng.integers(0, 5, n).astype(float) if ties else rng.normal(size=n)
    t = upper_quantile(v)
    assert t == sorted_quantile(v)
    assert np.mean(v > t) <= 0.005
    assert np.mean(v >= t) >= 0.005


def test_non_finite_activations():
    acts = np.zeros((2, 1, 2, 2))
    acts[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        compute_thresholds(acts)
    with pytest.raises(ValueError):
        compute_thresholds(np.zeros((0, 2, 2, 2)))


def test_reservoir_cap():
    acts = np.random.default_rng(2).normal(size=(10, 2, 10, 10))
    ts = compute_thresholds(acts, max_samples=300, seed=4)
    assert all(t.sample_size == 300 for t in ts)
    assert ts == compute_thresholds(acts, max_samples=300, seed=4)


def test_upsample_constant_identity_and_bounds():
    np.testing.assert_array_equal(upsample_activation(np.full((3, 3), 1.5), (9, 7)), np.full((9, 7), 1.5))
    m = np.random.default_rng(3).normal(size=(4, 5))
    np.testing.assert_array_equal(upsample_activation(m, (4, 5)), m)
    up = upsample_activation(m, (13, 17))
    assert up.min() >= m.min() - 1e-12 and up.max() <= m.max() + 1e-12
    np.testing.assert_allclose(up[[0, 0, -1, -1], [0, -1, 0, -1]], m[[0, 0, -1, -1], [0, -1, 0, -1]])
    with pytest.raises(ValueError):
        upsample_activation(np.zeros((0, 3)), (4, 4))
    with pytest.raises(ValueError):
        upsample_activation(np.zeros((4, 4)), (2, 2))


def test_upsample_2x2_closed_form():
    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = upsample_activation(m, (4, 4))
    # corner-aligned: output pixel i samples source coordinate i / 3
    expected = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            y, x = i / 3, j / 3
            expected[i, j] = (1 - y) * x + y * (1 - x)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_upsample_matches_torch_align_corners():
    m = np.random.default_rng(5).normal(size=(3, 5, 4))
    ref = torch.nn.functional.interpolate(torch.from_numpy(m)[None], size=(11, 9), mode="bilinear",
                                          align_corners=True)[0].numpy()
    np.testing.assert_allclose(upsample_activation(m, (11, 9)), ref, atol=1e-12)


def test_segment_strict():
    t = 0.5
    m = np.array([[0.1, 0.5], [0.6, 2.0]])
    assert segment(np.zeros((3, 3)), t).sum() == 0
    assert segment(np.ones((3, 3)), t).all()
    assert segment(m, t).sum() == np.count_nonzero(m > t) == 2


def test_iou_identical_and_disjoint():
    rng = np.random.default_rng(6)
    masks = [rng.random((5, 5)) > 0.5 for _ in range(3)]
    assert dataset_iou(masks, masks) == 1.0
    assert dataset_iou(masks, [~m for m in masks]) == 0.0
    assert dataset_iou([np.zeros((2, 2), bool)], [np.zeros((2, 2), bool)]) == 0.0


def test_boundary_005_not_interpretable():
    # image 1: |seg & label| = 5, |seg | label| = 50; image 2: 0 and 50
    seg1 = np.zeros(100, bool)
    lab1 = np.zeros(100, bool)
    seg1[:30] = True
    lab1[25:50] = True
    seg2 = np.zeros(100, bool)
    lab2 = np.zeros(100, bool)
    seg2[:20] = True
    lab2[50:80] = True
    assert (np.sum(seg1 & lab1), np.sum(seg1 | lab1)) == (5, 50)
    assert (np.sum(seg2 & lab2), np.sum(seg2 | lab2)) == (0, 50)
    iou = dataset_iou([seg1, seg2], [lab1, lab2])
    assert iou == 0.05
    ((best, value, interpretable),) = best_concepts(np.array([[iou]]))
    assert best == 1 and value == 0.05 and interpretable is False


def brute_force_iou(segs, labels, concept_id):
    inter = union = 0
    for seg, lab in zip(segs, labels):
        for p in np.ndindex(seg.shape):
            s = bool(seg[p])
            l = any(m[p] == concept_id for m in lab.values())
            inter += s and l
            union += s or l
    return inter / union if union else 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_accumulator_matches_pixel_counting(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 9, 2)
    n_img, n_units = rng.integers(1, 4), rng.integers(1, 4)
    # concepts 1..3 in category a, 4..5 in category b
    segs = rng.random((n_img, n_units, h, w)) > rng.uniform(0.2, 0.9)
    labels = [{"a": rng.integers(0, 4, (h, w)), "b": rng.choice([0, 4, 5], (h, w))} for _ in range(n_img)]
    acc = IoUAccumulator(n_units, 5)
    for s, lab in zip(segs, labels):
        acc.add(s, lab)
    ious = acc.iou()
    for k in range(n_units):
        for c in range(1, 6):
            assert ious[k, c - 1] == brute_force_iou(segs[:, k], labels, c)
    # order invariance and additive merge
    rev = IoUAccumulator(n_units, 5)
    for s, lab in reversed(list(zip(segs, labels))):
        rev.add(s, lab)
    np.testing.assert_array_equal(rev.iou(), ious)
    if n_img > 1:
        a, b = IoUAccumulator(n_units, 5), IoUAccumulator(n_units, 5)
        a.add(segs[0], labels[0])
        for s, lab in zip(segs[1:], labels[1:]):
            b.add(s, lab)
        np.testing.assert_array_equal(a.merge(b).iou(), ious)


def test_best_concept_ties_and_empty():
    res = best_concepts(np.array([[0.1, 0.3, 0.3], [0.0, 0.0, 0.0], [0.06, 0.0, 0.0]]))
    assert res[0] == (2, 0.3, True)
    assert res[1] == (None, 0.0, False)
    assert res[2] == (1, 0.06, True)


def test_monotone_transform_invariance():
    rng = np.random.default_rng(8)
    acts = rng.normal(size=(6, 3, 8, 8))
    labels = [{"color": rng.integers(0, 4, (8, 8))} for _ in range(6)]
    base = dissect_activations({"L": acts}, labels, 3, (8, 8), keep_ious=True)
    # any strictly increasing map at native resolution
    warped = dissect_activations({"L": np.exp(3 * acts) + np.tanh(acts)}, labels, 3, (8, 8), keep_ious=True)
    # positive affine maps also commute with upsampling
    small = acts[:, :, ::2, ::2]
    up = dissect_activations({"L": small}, labels, 3, (8, 8), keep_ious=True)
    up_affine = dissect_activations({"L": 4 * small + 1}, labels, 3, (8, 8), keep_ious=True)
    for a, b in [(base, warped), (up, up_affine)]:
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u.ious, v.ious)
            assert (u.best_concept, u.interpretable) == (v.best_concept, v.interpretable)


def _red_detector(spec):
    """Network whose stage3.block0 unit 0 outputs the image's redness."""
    model = build_model(spec, 0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        for mod in model.modules():
            if isinstance(mod, torch.nn.BatchNorm2d):
                mod.eps = 0.0
                mod.running_mean.zero_()
                mod.running_var.fill_(1.0)
                mod.weight.fill_(1.0)
        # redness = R - G - B in model input units; positive only on red pixels
        stem = model.stem[0]
        stem.weight[0, :, 1, 1] = torch.tensor([1.0, -1.0, -1.0])
        model.stem[1].bias[0] = -1.0
        for stage in model.stages():
            block = stage[0]
            if len(block.shortcut):
                conv = block.shortcut[0]
                conv.weight[0, 0, 0, 0] = 1.0
            else:
                block.conv1.weight[0, 0, 1, 1] = 0.0
    return model


@pytest.fixture(scope="module")
def broden32(tmp_path_factory):
    root = tmp_path_factory.mktemp("mb32")
    generate_micro_broden(MicroBrodenSpec(), root)
    return load_concept_dataset(root)


PLANT_SPEC = ModelSpec(input_size=(32, 32), widths=(4, 4, 8), blocks=(1, 1, 1), num_classes=2)


def test_planted_red_detector(broden32):
    report = dissect_network(_red_detector(PLANT_SPEC), None, broden32)
    unit = report.units[0]
    red = broden32.index.by_name("red").concept_id
    assert unit.best_concept == red and unit.best_iou > 0.05 and unit.interpretable
    assert report.interpretable_units() == {("stage3.block0", 0)}


def test_zero_layer_has_no_interpretable_units(broden32):
    model = build_model(PLANT_SPEC, 0)
    with torch.no_grad():
        block = model.block("stage3.block0")
        for conv in (block.conv1, block.conv2, block.shortcut[0]):
            conv.weight.zero_()
    report = dissect_network(model, None, broden32)
    assert len(report.units) == 8
    assert not any(u.interpretable for u in report.units)
