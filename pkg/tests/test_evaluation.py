import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cloven.autodiff import ContractError, Rng
from cloven.data import read_matrix, synth_gaussian_multiview
from cloven.evaluation import (
    MetricsReport,
    ari,
    classification_metrics,
    contingency,
    evaluate_clustering,
    export_embeddings,
    hungarian_acc,
    kmeans,
    linear_probe,
    nmi,
    split_indices,
)
from cloven.model import CloVenModel, ModelConfig

# (y, c) pairs with hand-checkable structure; the oracles supply the expected values
FIXTURES = [
    ([0, 0, 1, 1, 2, 2], [1, 1, 0, 2, 2, 2]),
    ([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2]),
    ([0, 1, 0, 1, 0, 1, 0, 1], [0, 0, 1, 1, 0, 0, 1, 1]),
    ([0, 0, 1, 1, 2, 2, 3, 3], [0, 1, 1, 2, 2, 3, 3, 0]),
    ([2, 2, 2, 0, 0, 1, 1, 1, 1], [0, 0, 1, 1, 1, 2, 2, 2, 0]),
    ([0, 0, 0, 0, 1, 1], [0, 0, 0, 1, 1, 1]),
]


class TestKMeans:
    def test_separated_groups(self):
        rng = Rng(0)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        y = np.repeat(np.arange(3), 30)
        x = centers[y] + 0.1 * rng.normal((90, 2))
        res = kmeans(x, 3, seed=1)
        assert hungarian_acc(y, res.labels) == 1.0

    def test_inertia_non_increasing(self):
        x = Rng(1).normal((200, 4))
        res = kmeans(x, 5, seed=0, restarts=1)
        hist = np.array(res.inertia_history)
        assert np.all(np.diff(hist) <= 1e-9 * hist[0])

    def test_k_one(self):
        x = Rng(2).normal((20, 3))
        res = kmeans(x, 1)
        np.testing.assert_allclose(res.centroids[0], x.mean(0), rtol=1e-12)
        assert res.inertia == pytest.approx(((x - x.mean(0)) ** 2).sum())

    def test_seeded(self):
        x = Rng(3).normal((50, 2))
        np.testing.assert_array_equal(kmeans(x, 4, seed=7).labels, kmeans(x, 4, seed=7).labels)

    def test_too_few_points(self):
        with pytest.raises(ContractError):
            kmeans(np.ones((2, 2)), 3)


class TestHungarian:
    def test_fixture(self):
        assert hungarian_acc([0, 0, 1, 1, 2, 2], [1, 1, 0, 2, 2, 2]) == pytest.approx(5 / 6)

    def test_relabeling_invariant(self):
        assert hungarian_acc([0, 0, 1, 2], [5, 5, 9, 7]) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda k: st.tuples(
        st.lists(st.integers(0, k - 1), min_size=6, max_size=20),
        st.lists(st.integers(0, k), min_size=20, max_size=20))))
    def test_matches_brute_force(self, pair):
        y, c = pair
        c = c[:len(y)]
        assert hungarian_acc(y, c) == pytest.approx(oracles.brute_force_acc(y, c), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            contingency([0, 1], [0])


class TestNMI:
    @pytest.mark.parametrize("y, c", FIXTURES)
    def test_fixtures(self, y, c):
        assert nmi(y, c) == pytest.approx(oracles.plogp_nmi(y, c), abs=1e-12)

    def test_frozen_value(self):
        # MI = log(3)/2 + log(2)/3; cluster sizes 1, 2, 3 out of 6
        mi = np.log(3) / 2 + np.log(2) / 3
        hc = -sum(p * np.log(p) for p in (1 / 6, 1 / 3, 1 / 2))
        assert nmi([0, 0, 1, 1, 2, 2], [1, 1, 0, 2, 2, 2]) == pytest.approx(mi / ((np.log(3) + hc) / 2), abs=1e-12)

    def test_identical(self):
        assert nmi([0, 1, 1, 2], [3, 4, 4, 5]) == 1.0
        assert nmi([0, 0, 0], [1, 1, 1]) == 1.0

    def test_independent_is_zero(self):
        assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-15)

    def test_symmetric(self):
        y, c = FIXTURES[4]
        assert nmi(y, c) == pytest.approx(nmi(c, y), abs=1e-15)


class TestARI:
    @pytest.mark.parametrize("y, c", FIXTURES)
    def test_fixtures(self, y, c):
        assert ari(y, c) == pytest.approx(oracles.pair_ari(y, c), abs=1e-12)

    def test_frozen_value(self):
        # pairs: same_y 6, same_c 3, both 2, total 15 -> (2 - 1.2) / (4.5 - 1.2)
        assert ari([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2]) == pytest.approx(0.8 / 3.3, abs=1e-12)

    def test_identical(self):
        assert ari([2, 2, 0, 1], [0, 0, 1, 2]) == 1.0

    def test_random_partitions_near_zero(self):
        rng = Rng(4)
        y, c = rng.integers(0, 5, 5000), rng.integers(0, 5, 5000)
        assert abs(ari(y, c)) < 0.01

    def test_sklearn_agreement(self):
        metrics = pytest.importorskip("sklearn.metrics")
        rng = Rng(5)
        for _ in range(20):
            y, c = rng.integers(0, 4, 60), rng.integers(0, 6, 60)
            assert ari(y, c) == pytest.approx(metrics.adjusted_rand_score(y, c), abs=1e-12)
            assert nmi(y, c) == pytest.approx(metrics.normalized_mutual_info_score(y, c), abs=1e-12)


class TestClassification:
    def test_perfect(self):
        rep = classification_metrics([0, 1, 2, 1], [0, 1, 2, 1])
        assert rep.acc == rep.precision == rep.fscore == 1.0

    def test_single_predicted_class(self):
        with pytest.warns(RuntimeWarning, match="never predicted"):
            rep = classification_metrics([0, 0, 1, 1], [0, 0, 0, 0])
        assert rep.acc == 0.5 and rep.precision == 0.25
        assert rep.fscore == pytest.approx((2 * 0.5 * 1.0 / 1.5) / 2)

    def test_fscore_recombines(self):
        rep = classification_metrics([0, 0, 1, 1, 2, 2, 2], [0, 1, 1, 1, 2, 0, 2])
        p, r = np.array(rep.per_class_precision), np.array(rep.per_class_recall)
        np.testing.assert_allclose(rep.per_class_fscore, 2 * p * r / (p + r), rtol=1e-14)
        assert rep.fscore == pytest.approx(np.mean(rep.per_class_fscore))

    def test_skip(self):
        rep = classification_metrics([0, 1, 2, 2], [0, 1, 2, 1], skip=[1])
        assert rep.precision == pytest.approx(1.0)

    def test_confusion(self):
        rep = classification_metrics([0, 1, 1], [1, 1, 0], n_classes=3)
        assert rep.confusion == [[0, 1, 0], [1, 1, 0], [0, 0, 0]]


class TestProbe:
    def test_separable(self):
        rng = Rng(6)
        y = np.arange(150) % 3
        x = 4.0 * np.eye(3)[y] + 0.2 * rng.normal((150, 3))
        tr, te = split_indices(150, 0.8, 0)
        rep = linear_probe(x[tr], y[tr], x[te], y[te])
        assert rep.acc == 1.0

    def test_split(self):
        tr, te = split_indices(10, 0.8, 3)
        assert len(tr) == 8 and len(te) == 2
        np.testing.assert_array_equal(np.sort(np.concatenate([tr, te])), np.arange(10))

    def test_missing_train_class_warns(self):
        x = np.array([[0.0], [1.0], [0.1], [1.1], [5.0]])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rep = linear_probe(x[:4], [0, 1, 0, 1], x[4:], [2])
        assert any("absent" in str(w.message) for w in caught)
        assert rep.acc == 0.0 and rep.precision == 0.0


@pytest.fixture(scope="module")
def untrained():
    ds = synth_gaussian_multiview(k=3, n=120, views=2, dims=(5, 4), noise=3.0, separation=0.5, seed=2)
    cfg = ModelConfig(encoder_widths=[[5, 8], [4, 8]], common_dim=8, clusters=3, clustering_hidden_width=6)
    return ds, CloVenModel(cfg, seed=0).eval()


class TestEvaluate:
    def test_report(self, untrained):
        ds, model = untrained
        rep = evaluate_clustering(model, ds, seed=0, probe=True)
        assert 1 / 3 <= rep.acc <= 0.7
        assert rep.acc_cls is not None and rep.precision is not None
        assert "acc" in rep.to_json() and "nmi" in rep.to_table()

    def test_row_permutation_invariant(self, untrained):
        ds, model = untrained
        perm = Rng(9).permutation(ds.n)
        a = evaluate_clustering(model, ds, seed=0)
        b = evaluate_clustering(model, ds.subset(perm), seed=0)
        assert a.head_acc == b.head_acc and a.head_nmi == pytest.approx(b.head_nmi, abs=1e-12)

    def test_needs_labels(self, untrained):
        ds, model = untrained
        ds = ds.subset(np.arange(ds.n))
        ds.labels = None
        with pytest.raises(ContractError):
            evaluate_clustering(model, ds)

    def test_export(self, untrained, tmp_path):
        ds, model = untrained
        paths = export_embeddings(model, ds, tmp_path)
        assert [p.name for p in paths] == ["Z.bin", "H0.bin", "H1.bin", "labels.bin"]
        z, _ = model.embed(ds.views)
        np.testing.assert_allclose(read_matrix(paths[0]), z, rtol=1e-6, atol=1e-6)

    def test_table_format(self):
        rep = MetricsReport(0.5, 0.25, 0.1, 0.4, 0.2, 0.0, seed=3)
        assert rep.to_table().splitlines()[0] == "acc       0.5000"
        assert "seed      3" in rep.to_table()
