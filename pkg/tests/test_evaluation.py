import numpy as np
import numpy.testing as npt
import pytest

from dsrm import evaluation as ev
from dsrm.errors import ContractViolation


def loop_mae(gt, pred):
    total = 0.0
    for z, zh in zip(gt, pred):
        total += abs(z - zh)
    return total / len(gt)


def loop_mse(gt, pred):
    total = 0.0
    for z, zh in zip(gt, pred):
        total += (z - zh) ** 2
    return (total / len(gt)) ** 0.5


def loop_mnae(gt, pred):
    total = 0.0
    for z, zh in zip(gt, pred):
        total += abs(z - zh) / z
    return total / len(gt)


class TestMetrics:
    def test_identical_vectors_zero(self):
        z = np.array([3.0, 8.0, 1.0])
        assert ev.mae(z, z) == 0.0
        assert ev.mse(z, z) == 0.0
        assert ev.mnae(z, z) == 0.0

    def test_fixture_values(self):
        gt = [100.0, 200.0]
        pred = [90.0, 220.0]
        assert ev.mae(gt, pred) == 15.0
        npt.assert_allclose(ev.mse(gt, pred), np.sqrt(250.0), rtol=1e-15)
        npt.assert_allclose(ev.mnae(gt, pred), 0.1, rtol=1e-15)

    def test_single_element(self):
        assert ev.mse([100.0], [90.0]) == 10.0
        assert ev.mnae([100.0], [90.0]) == pytest.approx(0.1)

    def test_match_loop_oracles(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = int(rng.integers(1, 100))
            gt = rng.uniform(1, 500, m)
            pred = rng.uniform(0, 500, m)
            npt.assert_allclose(ev.mae(gt, pred), loop_mae(gt, pred), rtol=1e-12)
            npt.assert_allclose(ev.mse(gt, pred), loop_mse(gt, pred), rtol=1e-12)
            npt.assert_allclose(ev.mnae(gt, pred), loop_mnae(gt, pred), rtol=1e-12)

    def test_mae_never_exceeds_mse(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            m = int(rng.integers(1, 40))
            gt = rng.uniform(1, 100, m)
            pred = rng.uniform(0, 100, m)
            assert ev.mae(gt, pred) <= ev.mse(gt, pred) + 1e-12

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(1, 50, 10)
        pred = gt.copy()
        pred[3] += 0.5
        assert ev.mae(gt, pred) > 0
        assert ev.mse(gt, pred) > 0
        assert ev.mnae(gt, pred) > 0

    def test_scaling_property(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(1, 100, 25)
        pred = rng.uniform(1, 100, 25)
        for lam in (0.5, 2.0, 10.0):
            npt.assert_allclose(ev.mae(lam * gt, lam * pred), lam * ev.mae(gt, pred),
                                rtol=1e-12)
            npt.assert_allclose(ev.mse(lam * gt, lam * pred), lam * ev.mse(gt, pred),
                                rtol=1e-12)
            npt.assert_allclose(ev.mnae(lam * gt, lam * pred), ev.mnae(gt, pred),
                                rtol=1e-12)

    def test_mnae_zero_ground_truth_rejected(self):
        with pytest.raises(ContractViolation):
            ev.mnae([0.0, 5.0], [1.0, 5.0])

    def test_empty_rejected(self):
        for fn in (ev.mae, ev.mse, ev.mnae):
            with pytest.raises(ContractViolation):
                fn([], [])


class TestGroupComparison:
    def test_singleton_groups(self):
        gt = np.array([5.0, 1.0, 3.0, 9.0, 7.0, 2.0, 8.0, 4.0, 6.0, 10.0])
        pred = gt + 1.0
        rep = ev.group_comparison(gt, pred, k=10)
        npt.assert_array_equal(rep.mean_gt, np.arange(1.0, 11.0))
        npt.assert_array_equal(rep.mean_pred, np.arange(2.0, 12.0))
        npt.assert_array_equal(rep.sizes, np.ones(10, dtype=np.int64))

    def test_perfect_predictions_coincide(self):
        rng = np.random.default_rng(4)
        gt = rng.uniform(1, 100, 30)
        rep = ev.group_comparison(gt, gt.copy(), k=10)
        npt.assert_allclose(rep.mean_gt, rep.mean_pred, rtol=1e-15)

    def test_partition_sizes_m37_k10(self):
        def partition_oracle(m, k):
            base, extra = divmod(m, k)
            return [base + 1] * extra + [base] * (k - extra)

        rng = np.random.default_rng(5)
        gt = rng.uniform(1, 100, 37)
        pred = rng.uniform(1, 100, 37)
        rep = ev.group_comparison(gt, pred, k=10)
        assert rep.sizes.tolist() == partition_oracle(37, 10)
        assert sorted(rep.sizes.tolist(), reverse=True) == [4] * 7 + [3] * 3
        assert rep.sizes.sum() == 37

    def test_group_means_recover_global_mean_when_k_divides(self):
        rng = np.random.default_rng(6)
        gt = rng.uniform(1, 100, 40)
        pred = rng.uniform(1, 100, 40)
        rep = ev.group_comparison(gt, pred, k=10)
        npt.assert_allclose(rep.mean_gt.mean(), gt.mean(), rtol=1e-12)
        npt.assert_allclose(rep.mean_pred.mean(), pred.mean(), rtol=1e-12)

    def test_sorted_ascending(self):
        rng = np.random.default_rng(7)
        gt = rng.uniform(1, 100, 23)
        rep = ev.group_comparison(gt, gt, k=5)
        assert (np.diff(rep.mean_gt) >= 0).all()

    def test_too_few_images(self):
        with pytest.raises(ContractViolation):
            ev.group_comparison([1.0, 2.0], [1.0, 2.0], k=10)


class TestDatasetStats:
    def test_basic(self):
        s = ev.dataset_stats([5, 10, 15])
        assert (s.max_count, s.min_count, s.avg_count) == (15.0, 5.0, 10.0)

    def test_constant(self):
        s = ev.dataset_stats([7, 7, 7])
        assert s.max_count == s.min_count == s.avg_count == 7.0

    def test_average_rendered_at_tenth(self):
        s = ev.dataset_stats([94, 4543, 1279, 1279, 1279.5, 1203.5])
        assert s.rows()["average"] == f"{np.mean([94, 4543, 1279, 1279, 1279.5, 1203.5]):.1f}"

    def test_resolution_summary(self):
        uniform = ev.dataset_stats([1, 2], resolutions=[(768, 1024), (768, 1024)])
        assert uniform.resolution == "768x1024"
        varied = ev.dataset_stats([1, 2], resolutions=[(768, 1024), (576, 720)])
        assert varied.resolution == "different"

    def test_split_must_cover(self):
        with pytest.raises(ContractViolation):
            ev.dataset_stats([1, 2, 3], n_train=1, n_test=1)

    def test_empty(self):
        with pytest.raises(ContractViolation):
            ev.dataset_stats([])


class TestHistogram:
    def test_basic(self):
        npt.assert_array_equal(ev.count_histogram([1, 2, 3], [0, 2, 4]), [1, 2])

    def test_empty_bin(self):
        npt.assert_array_equal(ev.count_histogram([1, 9], [0, 2, 4, 10]), [1, 0, 1])

    def test_last_bin_closed(self):
        npt.assert_array_equal(ev.count_histogram([4.0], [0, 2, 4]), [0, 1])

    def test_occupancy_sums_to_m(self):
        rng = np.random.default_rng(8)
        counts = rng.uniform(0, 100, 500)
        edges = np.linspace(0, 100, 11)
        assert ev.count_histogram(counts, edges).sum() == 500

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            ev.count_histogram([5.0], [0, 2, 4])

    def test_non_increasing_edges_rejected(self):
        with pytest.raises(ContractViolation):
            ev.count_histogram([1.0], [0, 2, 2])


class TestKfold:
    def test_even_split(self):
        folds = ev.kfold_split(list(range(10)), k=5, seed=0)
        assert [len(f) for f in folds] == [2] * 5

    def test_remainder_distribution(self):
        folds = ev.kfold_split(list(range(11)), k=5, seed=0)
        assert [len(f) for f in folds] == [3, 2, 2, 2, 2]

    def test_deterministic(self):
        a = ev.kfold_split(list(range(23)), k=5, seed=42)
        b = ev.kfold_split(list(range(23)), k=5, seed=42)
        assert a == b

    def test_partition(self):
        items = [f"img{i}" for i in range(17)]
        folds = ev.kfold_split(items, k=4, seed=3)
        flat = [x for f in folds for x in f]
        assert sorted(flat) == sorted(items)
        assert len(set(flat)) == len(items)
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_k_too_large(self):
        with pytest.raises(ContractViolation):
            ev.kfold_split([1, 2], k=5, seed=0)

    def test_k_one_rejected(self):
        with pytest.raises(ContractViolation):
            ev.kfold_split([1, 2, 3], k=1, seed=0)
