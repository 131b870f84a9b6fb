import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloven.autodiff import ContractError
from cloven.data import (
    BatchIterator,
    CorruptionSpec,
    DatasetError,
    MultiViewDataset,
    batches,
    corrupt,
    corrupt_views,
    load_dataset,
    read_matrix,
    save_dataset,
    synth_gaussian_multiview,
    write_matrix,
)


@pytest.fixture
def synth():
    return synth_gaussian_multiview(k=3, n=90, views=2, dims=(5, 4), seed=1)


class TestDataset:
    def test_view_row_mismatch(self):
        with pytest.raises(DatasetError):
            MultiViewDataset([np.ones((3, 2)), np.ones((4, 2))])

    def test_label_shape(self):
        with pytest.raises(DatasetError):
            MultiViewDataset([np.ones((3, 2))], labels=[0, 1])

    def test_negative_label(self):
        with pytest.raises(DatasetError):
            MultiViewDataset([np.ones((2, 2))], labels=[0, -1])

    def test_properties(self, synth):
        assert synth.n == 90 and synth.n_views == 2 and synth.dims == [5, 4] and synth.n_classes == 3

    def test_subset(self, synth):
        sub = synth.subset([3, 1])
        np.testing.assert_array_equal(sub.views[1], synth.views[1][[3, 1]])
        np.testing.assert_array_equal(sub.labels, synth.labels[[3, 1]])


class TestFiles:
    def test_matrix_round_trip(self, tmp_path):
        x = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
        write_matrix(tmp_path / "m.bin", x)
        got = read_matrix(tmp_path / "m.bin")
        assert got.dtype == np.float64
        np.testing.assert_array_equal(got, x.astype(np.float64))
        assert (tmp_path / "m.bin").stat().st_size == 8 + 4 * 12

    def test_matrix_truncated(self, tmp_path):
        write_matrix(tmp_path / "m.bin", np.ones((2, 2)))
        (tmp_path / "m.bin").write_bytes((tmp_path / "m.bin").read_bytes()[:-1])
        with pytest.raises(DatasetError):
            read_matrix(tmp_path / "m.bin")

    def test_dataset_round_trip_bit_exact(self, synth, tmp_path):
        loaded = load_dataset(save_dataset(synth, tmp_path))
        for a, b in zip(synth.views, loaded.views):
            assert a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(loaded.labels, synth.labels)
        assert loaded.name == synth.name

    def test_dims_mismatch(self, synth, tmp_path):
        path = save_dataset(synth, tmp_path)
        manifest = json.loads(path.read_text())
        manifest["dims"][0] = [90, 6]
        path.write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="view 0"):
            load_dataset(path)

    def test_view_sample_count_mismatch(self, tmp_path):
        write_matrix(tmp_path / "a.bin", np.ones((4, 2)))
        write_matrix(tmp_path / "b.bin", np.ones((5, 2)))
        (tmp_path / "manifest.json").write_text(json.dumps({"views": ["a.bin", "b.bin"]}))
        with pytest.raises(DatasetError, match="sample count"):
            load_dataset(tmp_path / "manifest.json")

    def test_csv_views(self, tmp_path):
        (tmp_path / "a.csv").write_text("1,2\n3,4\n")
        (tmp_path / "b.csv").write_text("5\n6\n")
        (tmp_path / "y.csv").write_text("0\n1\n")
        (tmp_path / "manifest.json").write_text(json.dumps({"views": ["a.csv", "b.csv"], "labels": "y.csv"}))
        ds = load_dataset(tmp_path / "manifest.json")
        np.testing.assert_array_equal(ds.views[0], [[1, 2], [3, 4]])
        np.testing.assert_array_equal(ds.labels, [0, 1])

    def test_fractional_labels(self, tmp_path):
        (tmp_path / "a.csv").write_text("1\n2\n")
        (tmp_path / "y.csv").write_text("0.5\n1\n")
        (tmp_path / "manifest.json").write_text(json.dumps({"views": ["a.csv"], "labels": "y.csv"}))
        with pytest.raises(DatasetError, match="integer"):
            load_dataset(tmp_path / "manifest.json")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nope.json")


class TestSynth:
    def test_deterministic(self):
        a = synth_gaussian_multiview(seed=4, n=50)
        b = synth_gaussian_multiview(seed=4, n=50)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.views, b.views))

    def test_balanced_labels(self):
        ds = synth_gaussian_multiview(k=4, n=102, views=3, dims=(3, 3, 3))
        np.testing.assert_array_equal(np.bincount(ds.labels), [26, 26, 25, 25])

    def test_clusters_separate(self):
        ds = synth_gaussian_multiview(k=3, n=300, noise=0.1, separation=5.0)
        means = np.array([ds.views[0][ds.labels == c].mean(0) for c in range(3)])
        spread = max(ds.views[0][ds.labels == c].std(0).max() for c in range(3))
        gaps = [np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)]
        assert min(gaps) > 10 * spread

    def test_invalid(self):
        with pytest.raises(ContractError):
            synth_gaussian_multiview(k=1)
        with pytest.raises(ContractError):
            synth_gaussian_multiview(views=3, dims=(2, 2))


class TestBatches:
    def test_epoch_covers_dataset(self, synth):
        it = BatchIterator(synth, 32, seed=0, drop_last=False)
        seen = np.concatenate([b.index for b in it.epoch(0)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(90))
        assert it.num_batches() == 3

    def test_drop_last(self, synth):
        sizes = [len(b.index) for b in batches(synth, 32)]
        assert sizes == [32, 32]

    def test_rows_aligned_across_views(self, synth):
        b = next(iter(batches(synth, 8, seed=2)))
        np.testing.assert_array_equal(b.views[0], synth.views[0][b.index])
        np.testing.assert_array_equal(b.views[1], synth.views[1][b.index])
        np.testing.assert_array_equal(b.labels, synth.labels[b.index])

    def test_epochs_differ_seeds_repeat(self, synth):
        it = BatchIterator(synth, 8, seed=3)
        assert not np.array_equal(it.order(0), it.order(1))
        np.testing.assert_array_equal(it.order(1), BatchIterator(synth, 8, seed=3).order(1))

    def test_small_batch(self, synth):
        with pytest.raises(ContractError):
            BatchIterator(synth, 1)


class TestCorruption:
    def test_rate_zero_is_identity(self, synth):
        out = corrupt_views(synth, CorruptionSpec(missing_rate=0.0))
        assert not out.mask.any()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(out.views, synth.views))

    @settings(max_examples=25, deadline=None)
    @given(rate=st.floats(0.0, 0.95), seed=st.integers(0, 1000), fill=st.sampled_from(["zero", "gaussian_noise"]))
    def test_one_view_per_selected_sample(self, rate, seed, fill):
        ds = synth_gaussian_multiview(k=3, n=60, views=3, dims=(3, 2, 4), seed=0)
        out = corrupt_views(ds, CorruptionSpec(missing_rate=rate, fill=fill, rng_seed=seed))
        assert out.mask.sum(axis=1).max() <= 1
        for v in range(3):
            keep = ~out.mask[:, v]
            assert out.views[v][keep].tobytes() == ds.views[v][keep].tobytes()
            if fill == "zero":
                np.testing.assert_array_equal(out.views[v][~keep], 0.0)

    def test_rate_tracks_fraction(self):
        ds = synth_gaussian_multiview(n=4000, seed=0)
        out = corrupt_views(ds, CorruptionSpec(missing_rate=0.3, rng_seed=1))
        assert abs(out.mask.any(axis=1).mean() - 0.3) < 0.03

    def test_source_untouched(self, synth):
        before = [v.copy() for v in synth.views]
        corrupt_views(synth, CorruptionSpec(missing_rate=0.5))
        assert all(np.array_equal(a, b) for a, b in zip(before, synth.views))
        assert synth.mask is None

    def test_tcti_trains_clean(self, synth):
        train, test = corrupt(synth, CorruptionSpec("TCTI", 0.4, rng_seed=2))
        assert not train.mask.any() and test.mask.any()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(train.views, synth.views))

    def test_titi_trains_corrupted(self, synth):
        train, test = corrupt(synth, CorruptionSpec("TITI", 0.4, rng_seed=2))
        assert train is test and train.mask.any()

    @pytest.mark.parametrize("spec", [
        CorruptionSpec(scenario="XX"), CorruptionSpec(missing_rate=1.0), CorruptionSpec(fill="mean"),
    ])
    def test_invalid(self, synth, spec):
        with pytest.raises(ContractError):
            corrupt_views(synth, spec)
