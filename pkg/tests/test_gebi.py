import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biaslab.clustering import same_partition
from biaslab.gebi import (
    GebiConfig,
    build_embeddings,
    contrast_stretch,
    equalize_histogram,
    preprocess,
    run_gebi,
)
from biaslab.model import TinyCnn
from biaslab.synthdata import GeneratorSpec, generate


@pytest.fixture(scope="module")
def planted():
    """Half of each class framed; frames are the only visually distinct group."""
    spec = GeneratorSpec(n_per_class=40, seed=3, frame_shapes=("round",))
    return generate(spec.with_artifacts(frame=(0.5, 0.5)))


@pytest.fixture(scope="module")
def net():
    return TinyCnn(seed=0)


def frame_index(report):
    return {m: c["cluster"] for c in report.clusters for m in c["members"]}


class TestPreprocess:
    def test_constant_unchanged(self):
        img = np.full((6, 6), 0.3)
        assert np.array_equal(equalize_histogram(img), img)
        assert np.array_equal(preprocess(img, 6), img)

    def test_two_valued_cdf(self):
        img = np.array([[0.2, 0.8], [0.8, 0.2]])
        assert sorted(np.unique(equalize_histogram(img))) == [0.5, 1.0]

    def test_cdf_then_stretch(self):
        img = np.array([[0.2, 0.8], [0.8, 0.2]])
        assert sorted(np.unique(preprocess(img, 2))) == [0.0, 1.0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(3, 40))
    def test_stretch_range(self, seed, side):
        img = np.random.default_rng(seed).uniform(size=(16, 16))
        out = preprocess(img, side)
        assert out.shape == (side, side)
        assert out.min() == 0.0 and out.max() == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_equalize_monotone(self, seed):
        img = np.random.default_rng(seed).uniform(size=(10, 10))
        eq = equalize_histogram(img)
        order = np.argsort(img.ravel())
        assert np.all(np.diff(eq.ravel()[order]) >= 0)

    def test_contrast_stretch_affine(self):
        out = contrast_stretch(np.array([0.25, 0.5, 0.75]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


class TestEmbeddings:
    def test_gebi_length(self, planted, net):
        vec = build_embeddings(planted.images, net, GebiConfig())
        assert vec.shape == (len(planted), 30)

    def test_spray_length(self, planted, net):
        vec = build_embeddings(planted.images, net, GebiConfig(mode="spray", spray_side=8))
        assert vec.shape == (len(planted), 64)

    def test_iso_spray_length(self, planted, net):
        vec = build_embeddings(planted.images, net, GebiConfig(mode="iso_spray"))
        assert vec.shape == (len(planted), 20)

    def test_duplicates_identical(self, planted, net):
        images = planted.images.copy()
        images[5] = images[0]
        vec = build_embeddings(images, net, GebiConfig())
        np.testing.assert_array_equal(vec[5], vec[0])

    def test_too_few_samples(self, net):
        with pytest.raises(ValueError):
            build_embeddings(np.zeros((5, 32, 32)), net, GebiConfig(knn_k=10))

    def test_precomputed_maps_match(self, planted, net):
        from biaslab.gebi import attribution_maps

        maps = attribution_maps(net, planted.images, 1)
        a = build_embeddings(planted.images, net, GebiConfig())
        b = build_embeddings(planted.images, net, GebiConfig(), maps=maps)
        np.testing.assert_array_equal(a, b)


class TestRunGebi:
    def test_planted_frame_cluster(self, planted, net):
        rep = run_gebi(planted, net, GebiConfig(cluster_k=2))
        assert rep.best_purity["frame"] >= 0.8
        assert rep.remaining_frequency("frame") <= 0.2

    def test_gebi_purity_at_least_spray(self, planted, net):
        gebi = run_gebi(planted, net, GebiConfig(cluster_k=2))
        spray = run_gebi(planted, net, GebiConfig(mode="spray", cluster_k=2))
        assert gebi.best_purity["frame"] >= spray.best_purity["frame"]

    def test_single_cluster_marginals(self, planted, net):
        rep = run_gebi(planted, net, GebiConfig(cluster_k=1))
        assert rep.sizes == [len(planted)]
        assert rep.clusters[0]["artifact_frequency"]["frame"] == pytest.approx(planted.annotations["frame"].mean())

    def test_report_invariants(self, planted, net):
        rep = run_gebi(planted, net, GebiConfig(cluster_k=3))
        assert sum(rep.sizes) == len(planted)
        members = [m for c in rep.clusters for m in c["members"]]
        assert sorted(members) == sorted(planted.ids)
        for c in rep.clusters:
            assert all(0.0 <= f <= 1.0 for f in c["artifact_frequency"].values())
            assert sum(c["class_composition"].values()) == c["size"]

    def test_deterministic(self, planted, net):
        a = run_gebi(planted, net, GebiConfig(cluster_k=3, seed=2)).to_json()
        b = run_gebi(planted, net, GebiConfig(cluster_k=3, seed=2)).to_json()
        assert a == b

    def test_shuffle_invariant(self, planted, net):
        perm = np.random.default_rng(0).permutation(len(planted))
        a = frame_index(run_gebi(planted, net, GebiConfig(cluster_k=2)))
        b = frame_index(run_gebi(planted.subset(perm), net, GebiConfig(cluster_k=2)))
        assert same_partition([a[i] for i in planted.ids], [b[i] for i in planted.ids])

    def test_auto_k_in_range(self, planted, net):
        rep = run_gebi(planted, net, GebiConfig(cluster_k=None, select_method="eigengap", k_range=(2, 3, 4)))
        assert rep.config["selected_k"] in (2, 3, 4)
        assert len(rep.clusters) == rep.config["selected_k"]

    def test_json_roundtrip(self, planted, net):
        rep = run_gebi(planted, net, GebiConfig(cluster_k=2))
        doc = json.loads(rep.to_json())
        assert doc["mode"] == "gebi"
        assert doc["config"]["image_dims"] == 10
        assert [c["size"] for c in doc["clusters"]] == rep.sizes


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"mode": "tsne"}, {"explainer": "gradcam"}, {"image_dims": 0}, {"cluster_k": 0}, {"knn_k": 0},
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            GebiConfig(**kwargs)

    def test_ratio_warning(self, caplog):
        GebiConfig(image_dims=10, attribution_dims=10)
        assert "twice" in caplog.text

    def test_spray_ignores_ratio(self, caplog):
        GebiConfig(mode="spray", image_dims=10, attribution_dims=10)
        assert "twice" not in caplog.text
