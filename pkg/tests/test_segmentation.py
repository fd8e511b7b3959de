import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dawmr.segmentation import (MetricsReport, ThresholdSweep, auc_edge, balanced_accuracy,
                                evaluate, rand_curve, rand_index, rand_point, read_metrics,
                                segment_components, watershed_grow)
from dawmr.volume import affinities_from_segmentation, edge_validity, generate_synthetic

from oracles import (brute_watershed, confusion_bal_acc, pair_auc, pair_rand, same_partition,
                     union_find_components)


def random_shape(rng, hi=5):
    return tuple(int(v) for v in rng.integers(1, hi + 1, 3))


def random_labels(rng, shape):
    """Ternary labels with both classes present in every direction."""
    valid = edge_validity(shape)
    while True:
        lab = rng.choice([-1, 1], size=shape + (3,)).astype(np.int8)
        lab[~valid] = 0
        if all((lab[..., d] > 0).any() and (lab[..., d] < 0).any() for d in range(3)):
            return lab


# -- components and watershed --------------------------------------------


def test_components_trivial_cases():
    assert np.all(segment_components(np.ones((3, 3, 3, 3)), 0.5) == 1)
    assert not segment_components(np.zeros((3, 3, 3, 3)), 0.5).any()
    assert not segment_components(np.ones((3, 3, 3, 3)), 1.0).any()


def test_components_match_union_find():
    rng = np.random.default_rng(0)
    for _ in range(100):
        shape = random_shape(rng, 6)
        aff = (rng.random(shape + (3,)) < 0.4).astype(np.float32)
        ours = segment_components(aff, 0.5)
        ref = union_find_components(aff, 0.5)
        assert np.array_equal(ours, ref)  # identical scan-order numbering


def test_watershed_line_example():
    aff = np.zeros((1, 1, 5, 3), np.float32)
    aff[0, 0, :4, 0] = [0.9, 0.2, 0.8, 0.9]
    seeds = np.array([[[1, 0, 0, 0, 2]]], np.uint32)
    assert watershed_grow(seeds, aff).ravel().tolist() == [1, 1, 2, 2, 2]


def test_watershed_single_seed_and_no_seed():
    rng = np.random.default_rng(1)
    aff = rng.random((4, 4, 4, 3)).astype(np.float32)
    seeds = np.zeros((4, 4, 4), np.uint32)
    assert np.array_equal(watershed_grow(seeds, aff), seeds)
    seeds[2, 1, 3] = 7
    assert np.all(watershed_grow(seeds, aff) == 7)


def test_watershed_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        shape = random_shape(rng, 4)
        # coarse values force ties, exercising the tie-break rule
        aff = rng.integers(0, 4, size=shape + (3,)).astype(np.float32) / 4
        seeds = np.zeros(shape, np.uint32)
        n = int(np.prod(shape))
        picks = rng.choice(n, size=min(n, int(rng.integers(1, 4))), replace=False)
        seeds.ravel()[picks] = rng.permutation(np.arange(1, len(picks) + 1))
        ours = watershed_grow(seeds, aff)
        assert np.array_equal(ours, brute_watershed(seeds, aff))
        assert ours.all() and np.array_equal(ours[seeds > 0], seeds[seeds > 0])
        assert len(np.unique(ours)) == len(picks)


def test_watershed_idempotent():
    rng = np.random.default_rng(3)
    aff = rng.random((5, 5, 5, 3)).astype(np.float32)
    grown = watershed_grow(segment_components(aff, 0.8), aff)
    assert np.array_equal(watershed_grow(grown, aff), grown)


def test_roundtrip_recovers_partition():
    for seed in range(100):
        syn = generate_synthetic(16, 4 + seed % 6, seed=seed)
        aff, _ = affinities_from_segmentation(syn.seg)
        seg = segment_components(aff, 0.5)
        # single-voxel objects have no internal edge; everything else is exact
        fg = syn.seg.copy()
        ids, counts = np.unique(fg, return_counts=True)
        fg[np.isin(fg, ids[counts == 1])] = 0
        assert same_partition(seg, fg)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_partitions_refine_with_threshold(seed):
    rng = np.random.default_rng(seed)
    aff = rng.random((4, 5, 3, 3)).astype(np.float32)
    valid = edge_validity(aff.shape[:3])
    ts = np.linspace(0, 1, 11)
    supra = [(aff[valid] > t).sum() for t in ts]
    assert all(a >= b for a, b in zip(supra, supra[1:]))
    segs = [segment_components(aff, t) for t in ts]
    for lo, hi in zip(segs, segs[1:]):
        fg = hi > 0
        assert np.all(lo[fg] > 0)
        # every component at the higher threshold sits inside one lower-threshold component
        for c in np.unique(hi[fg]):
            assert len(np.unique(lo[hi == c])) == 1
    assert segs[-1].max() == 0


def test_segment_count_not_monotone_counterexample():
    # a single uniform object: one cluster below 0.6, none above
    aff = np.full((2, 2, 2, 3), 0.6, np.float32)
    assert segment_components(aff, 0.5).max() == 1
    assert segment_components(aff, 0.7).max() == 0


# -- edge metrics ---------------------------------------------------------


def test_balanced_accuracy_cases():
    rng = np.random.default_rng(4)
    lab = random_labels(rng, (4, 4, 4))
    perfect = (lab > 0).astype(np.float32)
    assert balanced_accuracy(perfect, lab).mean == 1.0
    assert balanced_accuracy(np.ones_like(perfect), lab).mean == 0.5


def test_balanced_accuracy_matches_confusion_counts():
    rng = np.random.default_rng(5)
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers(2, 6, 3))
        lab = random_labels(rng, shape)
        pred = rng.random(shape + (3,)).astype(np.float32)
        pred[rng.random(pred.shape) < 0.1] = 0.5  # exact threshold hits
        score = balanced_accuracy(pred, lab)
        ref = confusion_bal_acc(pred, lab)
        assert list(score.per_direction) == pytest.approx(ref, abs=0)
        assert score.mean == pytest.approx(np.mean(ref), abs=1e-15)


def test_auc_matches_all_pairs():
    rng = np.random.default_rng(6)
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers(2, 5, 3))
        lab = random_labels(rng, shape)
        pred = rng.integers(0, 5, size=shape + (3,)).astype(np.float32) / 4  # ties
        score = auc_edge(pred, lab)
        for d in range(3):
            p, t = pred[..., d], lab[..., d]
            assert abs(score.per_direction[d] - pair_auc(p[t > 0], p[t < 0])) <= 1e-12


def test_auc_cases():
    lab = random_labels(np.random.default_rng(7), (3, 3, 3))
    assert auc_edge((lab > 0).astype(float), lab).mean == 1.0
    assert auc_edge(np.full(lab.shape, 0.3), lab).mean == 0.5


def test_missing_class_is_undefined():
    lab = np.ones((2, 2, 2, 3), np.int8)
    lab[..., 1] = -1
    lab[0, 0, 0, 1] = 1
    with pytest.warns(RuntimeWarning):
        s = balanced_accuracy(np.ones(lab.shape), lab)
    assert set(s.undefined) == {"x", "z"}
    assert s.mean == 0.5


# -- Rand index -----------------------------------------------------------


def test_rand_cases():
    a = np.arange(1, 5).reshape(1, 1, 4)
    assert rand_index(a, np.ones_like(a)) == 0.0
    assert rand_index(a, a) == 1.0
    with pytest.raises(ValueError):
        rand_index(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)))


@pytest.mark.parametrize("mode", ["foreground_restricted", "all_pairs"])
def test_rand_matches_pair_enumeration(mode):
    rng = np.random.default_rng(8)
    for _ in range(100):
        a = rng.integers(0, 4, size=(4, 4, 4))
        b = rng.integers(0, 5, size=(4, 4, 4))
        if (a != 0).sum() < 2:
            continue
        assert rand_index(a, b, mode) == pair_rand(a, b, mode)


def test_rand_symmetry_and_relabelling():
    rng = np.random.default_rng(9)
    a = rng.integers(0, 4, size=(3, 4, 5))
    b = rng.integers(0, 4, size=(3, 4, 5))
    assert rand_index(a, b, "all_pairs") == rand_index(b, a, "all_pairs")
    perm = np.array([0, 7, 3, 9])
    perm_b = np.array([5, 2, 8, 1])
    for mode in ("all_pairs", "foreground_restricted"):
        assert rand_index(perm[a], perm_b[b], mode) == rand_index(a, b, mode)


# -- sweeps and curves ----------------------------------------------------


def test_sweep_deduplicates():
    rng = np.random.default_rng(10)
    aff = rng.integers(0, 10, size=(6, 6, 6, 3)).astype(np.float32) / 10
    sweep = ThresholdSweep.from_affinities(aff, 1000)
    assert len(sweep) <= 10
    assert np.all(np.diff(sweep.thresholds) > 0)


def test_curve_on_truth_is_perfect():
    syn = generate_synthetic(16, 6, seed=3)
    aff, _ = affinities_from_segmentation(syn.seg)
    curve = rand_curve(aff, syn.seg, ThresholdSweep(np.array([0.1, 0.5, 0.9])))
    assert np.all(curve.rand == 1.0) and curve.max_ri == 1.0 and curve.auc_ri == 1.0


def test_constant_prediction_curve_matches_pointwise():
    syn = generate_synthetic(12, 4, seed=4)
    aff = np.full(syn.seg.shape + (3,), 0.5, np.float32)
    ts = np.array([0.2, 0.49, 0.5, 0.7])
    curve = rand_curve(aff, syn.seg, ThresholdSweep(ts), workers=2)
    for t, r, c in zip(ts, curve.rand, curve.clusters):
        assert (r, c) == rand_point(aff, syn.seg, t)
    assert curve.clusters.tolist() == [1, 1, 0, 0]
    assert curve.rand[0] == curve.rand[1] and curve.rand[2] == curve.rand[3]


def test_evaluate_perfect_and_report(tmp_path):
    syn = generate_synthetic(16, 5, seed=5)
    aff, _ = affinities_from_segmentation(syn.seg)
    pred = np.clip(aff, 0.05, 0.95)
    report = evaluate(pred, syn.seg, region=tuple(slice(0, 16) for _ in range(3)), sweep_size=20)
    assert report.bal_acc.mean == 1.0 and report.auc_edge.mean == 1.0
    assert report.max_ri == 1.0
    report.write(tmp_path / "m.txt", tmp_path / "c.tsv")
    back = read_metrics(tmp_path / "m.txt")
    assert back["bal_acc"] == 1.0 and back["max_ri"] == 1.0
    assert all(0 <= v <= 1 for v in back.values())
    assert (tmp_path / "c.tsv").read_text().startswith("threshold\tclusters\trand_index")
    assert isinstance(report, MetricsReport)
