import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from biaslab.synthdata import (
    ARTIFACTS,
    Dataset,
    GeneratorSpec,
    artifact_ratio,
    class_ratio,
    cohens_kappa,
    frame_detected,
    generate,
    pearson,
    phi_from_counts,
    stats_report,
)


def table_fixture(ben, mal, n_ben=2001, n_mal=2000):
    """(flags, labels) reproducing per-class artifact counts."""
    labels = np.r_[np.zeros(n_ben, int), np.ones(n_mal, int)]
    flags = np.r_[np.arange(n_ben) < ben, np.arange(n_mal) < mal]
    return flags, labels


@pytest.fixture(scope="module")
def planted():
    return generate(GeneratorSpec(n_per_class=1000, seed=1))


class TestGenerate:
    def test_shapes_and_ids(self):
        d = generate(GeneratorSpec(n_per_class=5, seed=0))
        assert d.images.shape == (10, 32, 32)
        assert len(set(d.ids)) == 10
        assert sorted(np.bincount(d.labels)) == [5, 5]
        assert d.images.min() >= 0 and d.images.max() <= 1

    def test_reproducible(self):
        spec = GeneratorSpec(n_per_class=8, seed=4)
        a, b = generate(spec), generate(spec)
        assert np.array_equal(a.images, b.images)
        assert a.ids == b.ids and a.splits == b.splits

    def test_seed_changes_images(self):
        a = generate(GeneratorSpec(n_per_class=4, seed=0))
        b = generate(GeneratorSpec(n_per_class=4, seed=1))
        assert not np.array_equal(a.images, b.images)

    def test_zero_plan_no_annotations(self):
        d = generate(GeneratorSpec(n_per_class=20, seed=0).with_artifacts())
        for art in ARTIFACTS:
            assert not d.annotations[art].any()

    def test_degenerate_frame_plan(self):
        d = generate(GeneratorSpec(n_per_class=50, seed=0).with_artifacts(frame=(0.0, 1.0)))
        assert artifact_ratio(d, "frame", 1) == 1.0
        assert artifact_ratio(d, "frame", 0) == 0.0

    def test_planted_frequencies(self, planted):
        assert abs(artifact_ratio(planted, "frame", 1) - 0.9) <= 0.03
        assert abs(artifact_ratio(planted, "frame", 0) - 0.1) <= 0.03

    def test_frame_annotation_sound(self, planted):
        detected = np.array([frame_detected(img) for img in planted.images])
        assert np.array_equal(detected, planted.annotations["frame"])

    def test_all_artifacts_recorded(self):
        plan = {"frame": (0.5, 0.5), "ruler": (0.5, 0.5), "hair": (0.5, 0.5), "circle": (0.5, 0.5)}
        d = generate(GeneratorSpec(n_per_class=40, seed=2).with_artifacts(**plan))
        clean = generate(GeneratorSpec(n_per_class=40, seed=2).with_artifacts())
        touched = np.any(d.images != clean.images, axis=(1, 2))
        flagged = np.any([d.annotations[a] for a in ARTIFACTS], axis=0)
        assert np.array_equal(touched, flagged)

    def test_splits(self):
        d = generate(GeneratorSpec(n_per_class=50, seed=0))
        sizes = {s: len(d.split(s)) for s in ("train", "val", "test")}
        assert sizes == {"train": 60, "val": 10, "test": 30}
        assert sum(sizes.values()) == len(d)
        for s in ("train", "val", "test"):
            assert sorted(np.bincount(d.split(s).labels)) == [sizes[s] // 2] * 2

    def test_object_annotation_inside_image(self, planted):
        cx, cy, r = planted.objects.T
        assert np.all((cx > 0) & (cx < 32) & (cy > 0) & (cy < 32) & (r > 0))

    def test_pixels_on_8bit_grid(self):
        d = generate(GeneratorSpec(n_per_class=3, seed=0))
        np.testing.assert_array_equal(np.round(d.images * 255) / 255, d.images)

    def test_empty(self):
        d = generate(GeneratorSpec(n_per_class=0))
        assert len(d) == 0 and d.images.shape == (0, 32, 32)

    def test_class_signal_separable(self, planted):
        # a pixel-level texture statistic already separates the classes without artifacts
        clean = generate(GeneratorSpec(n_per_class=300, seed=1).with_artifacts())
        grad = np.abs(np.diff(clean.images, axis=2)).mean(axis=(1, 2))
        auc = stats.mannwhitneyu(grad[clean.labels == 1], grad[clean.labels == 0]).statistic / 300**2
        assert auc > 0.8

    @pytest.mark.parametrize("kwargs", [
        {"n_per_class": -1}, {"side": 30}, {"artifacts": {"frame": (0.1, 1.5)}},
        {"artifacts": {"sticker": (0.1, 0.1)}}, {"split_fractions": (0.5, 0.5, 0.5)},
    ])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            GeneratorSpec(**kwargs)


class TestRatios:
    def test_reference_frame_row(self):
        fx = table_fixture(104, 521)
        assert round(100 * artifact_ratio(fx, "frame", 0), 2) == 5.20
        assert round(100 * artifact_ratio(fx, "frame", 1), 2) == 26.05
        assert round(class_ratio(fx, "frame"), 2) == 5.01

    def test_reference_hair_row(self):
        fx = table_fixture(958, 868)
        assert round(100 * artifact_ratio(fx, "hair", 0), 2) == 47.88
        assert round(100 * artifact_ratio(fx, "hair", 1), 2) == 43.40
        assert round(class_ratio(fx, "hair"), 2) == 0.91

    def test_none_and_all(self):
        labels = np.array([0, 0, 1, 1])
        assert artifact_ratio((np.zeros(4, bool), labels), "x", 0) == 0.0
        assert artifact_ratio((np.ones(4, bool), labels), "x", 1) == 1.0

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            artifact_ratio((np.ones(3, bool), np.zeros(3, int)), "x", 1)

    def test_class_ratio_cases(self):
        labels = np.r_[np.zeros(10, int), np.ones(10, int)]
        equal = np.r_[np.arange(10) < 3, np.arange(10) < 3]
        assert class_ratio((equal, labels), "x") == 1.0
        hand = np.r_[np.arange(10) < 2, np.arange(10) < 4]
        assert class_ratio((hand, labels), "x") == pytest.approx(2.0)

    def test_zero_denominator_is_inf(self, caplog):
        labels = np.r_[np.zeros(4, int), np.ones(4, int)]
        flags = np.r_[np.zeros(4, bool), np.ones(4, bool)]
        assert class_ratio((flags, labels), "x") == math.inf
        assert "never occurs" in caplog.text

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.integers(0, 1)), min_size=2, max_size=60))
    def test_ratio_bounds(self, rows):
        flags = np.array([f for f, _ in rows])
        labels = np.array([y for _, y in rows])
        for k in (0, 1):
            if (labels == k).any():
                assert 0.0 <= artifact_ratio((flags, labels), "x", k) <= 1.0


class TestCorrelation:
    def test_phi_fixture(self):
        r, p = phi_from_counts(45, 5, 5, 45)
        assert abs(r - 0.8) <= 1e-12
        assert p < 1e-10

    def test_identical_vectors(self):
        x = np.array([0, 1, 1, 0, 1])
        assert pearson((x, x))[0] == pytest.approx(1.0)

    def test_independent_artifact(self):
        d = generate(GeneratorSpec(n_per_class=200, seed=0).with_artifacts(circle=(0.3, 0.3)))
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, 10000)
        flags = rng.random(10000) < 0.3
        assert abs(pearson((flags, labels))[0]) < 0.05
        assert abs(pearson(d, "circle")[0]) < 0.2

    def test_constant_rejected(self):
        with pytest.raises(ValueError):
            pearson((np.zeros(5, bool), np.array([0, 1, 0, 1, 1])))

    def test_too_few(self):
        with pytest.raises(ValueError):
            pearson((np.array([0, 1]), np.array([1, 0])))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=5, max_size=80))
    def test_matches_scipy(self, rows):
        x = np.array([a for a, _ in rows])
        y = np.array([b for _, b in rows])
        if x.std() == 0 or y.std() == 0:
            return
        r, p = pearson((x, y))
        ref = stats.pearsonr(x, y)
        assert r == pytest.approx(ref[0], abs=1e-12)
        assert p == pytest.approx(ref[1], rel=1e-8, abs=1e-14)


class TestKappa:
    def test_fixture(self):
        a = [1] * 4 + [1] + [0] + [0] * 4
        b = [1] * 4 + [0] + [1] + [0] * 4
        assert cohens_kappa(a, b) == 0.6

    def test_perfect(self):
        assert cohens_kappa([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0

    def test_chance(self):
        assert cohens_kappa([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0

    def test_degenerate(self):
        with pytest.raises(ValueError):
            cohens_kappa([1, 1, 1], [1, 1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cohens_kappa([0, 1], [0])


class TestStatsReport:
    def test_counts_bounded(self, planted):
        rep = stats_report(planted)
        for art in ARTIFACTS:
            assert all(c <= s for c, s in zip(rep.counts[art], rep.class_sizes))
            assert all(0 <= q <= 1 for q in rep.artifact_ratios[art])
        assert rep.correlations["frame"]["r"] > 0.7
        assert rep.correlations["ruler"]["r"] is None

    def test_empty_dataset(self):
        rep = stats_report(Dataset.empty(32)).to_dict()
        assert rep["class_sizes"] == [0, 0]
        assert all(v is None for v in rep["class_ratios"].values())

    def test_kappa_against(self, planted):
        assert stats_report(planted, kappa_against=planted.labels).kappa == 1.0
