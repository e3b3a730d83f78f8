"""Accuracy, class separation, linear CKA (vs. the HSIC oracle), the
metrics table, and representation dumps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualfed.errors import (
    DataError,
    DegenerateGeometryError,
    DegenerateVectorError,
    UndefinedMetricError,
)
from dualfed.metrics import (
    MetricsRow,
    MetricsTable,
    accuracy,
    class_separation,
    cross_client_cka,
    dump_representations,
    linear_cka,
    load_representations,
    read_metrics_csv,
)
from dualfed.model import ArchConfig, init_params
from dualfed.tensor import Tensor

from oracles import linear_cka_hsic


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_none_correct(self):
        assert accuracy([0, 0, 0], [1, 2, 3]) == 0.0

    def test_three_of_four(self):
        assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(UndefinedMetricError):
            accuracy([], [])


class TestClassSeparation:
    def test_single_class_is_zero(self):
        rng = np.random.default_rng(3)
        reps = rng.normal(size=(6, 4))
        assert class_separation(reps, np.zeros(6)) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_rays_full_separation(self):
        reps = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
        labels = np.array([0, 0, 1, 1])
        assert class_separation(reps, labels) == pytest.approx(1.0, abs=1e-12)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(5)
        reps = rng.normal(size=(6, 3))
        labels = np.array([0, 1, 0, 1, 0, 1])

        def cos_dist(a, b):
            return 1.0 - float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        within, total = [], []
        for i in range(6):
            for j in range(i + 1, 6):
                d = cos_dist(reps[i], reps[j])
                total.append(d)
                if labels[i] == labels[j]:
                    within.append(d)
        expected = 1.0 - np.mean(within) / np.mean(total)
        assert class_separation(reps, labels) == pytest.approx(expected, abs=1e-12)

    def test_identical_points_degenerate(self):
        reps = np.ones((4, 3))
        with pytest.raises(DegenerateGeometryError):
            class_separation(reps, np.array([0, 0, 1, 1]))

    def test_no_same_class_pair(self):
        reps = np.random.default_rng(7).normal(size=(3, 2))
        with pytest.raises(UndefinedMetricError):
            class_separation(reps, np.array([0, 1, 2]))

    def test_zero_norm_row(self):
        reps = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(DegenerateVectorError):
            class_separation(reps, np.array([0, 0]))

    def test_positive_rescaling_invariance(self):
        rng = np.random.default_rng(11)
        reps = rng.normal(size=(8, 4))
        labels = rng.integers(0, 2, size=8)
        base = class_separation(reps, labels)
        scales = rng.uniform(0.2, 5.0, size=(8, 1))
        assert class_separation(reps * scales, labels) == pytest.approx(base,
                                                                        abs=1e-12)


class TestLinearCKA:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(13).normal(size=(10, 4))
        assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_and_scaling_invariance(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(9, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)
        assert linear_cka(x, -2.5 * x) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            x = rng.normal(size=(8, 3))
            y = rng.normal(size=(8, 5))
            a = linear_cka(x, y)
            assert a == pytest.approx(linear_cka(y, x), abs=1e-12)
            assert -1e-9 <= a <= 1.0 + 1e-9

    def test_matches_hsic_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = int(rng.integers(4, 12))
            x = rng.normal(size=(n, int(rng.integers(2, 6))))
            y = rng.normal(size=(n, int(rng.integers(2, 6))))
            assert abs(linear_cka(x, y) - linear_cka_hsic(x, y)) < 1e-9

    def test_zero_variance_rejected(self):
        x = np.ones((5, 3))
        y = np.random.default_rng(29).normal(size=(5, 3))
        with pytest.raises(DegenerateGeometryError):
            linear_cka(x, y)

    def test_unpaired_rejected(self):
        with pytest.raises(UndefinedMetricError):
            linear_cka(np.ones((4, 2)), np.ones((5, 2)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 32 - 1))
    def test_accepts_tensor_and_array(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 3))
        y = rng.normal(size=(6, 2))
        assert linear_cka(Tensor(x), Tensor(y)) == linear_cka(x, y)


class TestCrossClientCKA:
    def _models(self, n=3):
        arch = ArchConfig(input_dim=6, encoder_layers=(6, 4), projector_depth=2,
                          projector_hidden=4, projector_out=3, num_classes=3)
        return arch, [init_params(arch, seed=s) for s in range(n)]

    def test_identical_models_give_one(self):
        arch, _ = self._models()
        models = [init_params(arch, seed=9) for _ in range(3)]
        probe = Tensor(np.random.default_rng(1).normal(size=(12, 6)))
        assert cross_client_cka(models, probe, "pre") == pytest.approx(1.0,
                                                                       abs=1e-9)

    def test_two_clients_equals_pairwise(self):
        arch, models = self._models(2)
        probe = Tensor(np.random.default_rng(2).normal(size=(10, 6)))
        from dualfed.metrics import client_representations

        z0, _ = client_representations(models[0], probe)
        z1, _ = client_representations(models[1], probe)
        expected = linear_cka(z0, z1)
        assert cross_client_cka(models, probe, "pre") == pytest.approx(expected,
                                                                       abs=1e-12)

    def test_needs_two_clients(self):
        arch, models = self._models(1)
        probe = Tensor(np.ones((4, 6)))
        with pytest.raises(UndefinedMetricError):
            cross_client_cka(models, probe, "pre")

    def test_stage_validated(self):
        arch, models = self._models(2)
        with pytest.raises(ValueError):
            cross_client_cka(models, Tensor(np.ones((4, 6))), "mid")


def _row(round_no, m=2, acc=0.5, bytes_=0):
    return MetricsRow(round=round_no, acc_global=(acc,) * m,
                      acc_personal=(acc,) * m, acc_ensemble=(acc,) * m,
                      sep_z=(0.1,) * m, sep_u=(0.2,) * m,
                      mean_cka_z=0.9, mean_cka_u=0.5, comm_bytes=bytes_)


class TestMetricsTable:
    def test_append_and_best(self):
        table = MetricsTable(num_clients=2)
        table.append(_row(1, acc=0.4, bytes_=100))
        table.append(_row(2, acc=0.7, bytes_=200))
        table.append(_row(3, acc=0.6, bytes_=300))
        assert table.best_mean_ensemble() == pytest.approx(0.7)

    def test_validation(self):
        table = MetricsTable(num_clients=2)
        with pytest.raises(DataError):
            table.append(_row(1, m=3))
        with pytest.raises(DataError):
            table.append(_row(1, acc=1.5))
        table.append(_row(1, bytes_=100))
        with pytest.raises(DataError):
            table.append(_row(2, bytes_=50))  # bytes must not decrease

    def test_csv_round_trip(self, tmp_path):
        table = MetricsTable(num_clients=2)
        table.append(_row(1, acc=1.0 / 3.0, bytes_=100))
        table.append(_row(2, acc=2.0 / 3.0, bytes_=200))
        path = str(tmp_path / "metrics.csv")
        table.write_csv(path)
        header, rows = read_metrics_csv(path)
        assert header == table.header()
        assert len(rows) == 2
        col = header.index("acc_global_c0")
        assert rows[0][col] == 1.0 / 3.0  # repr round-trips exactly


class TestRepresentationDump:
    def test_dump_and_reload(self, tmp_path):
        arch = ArchConfig(input_dim=5, encoder_layers=(5, 4), projector_depth=1,
                          projector_hidden=4, projector_out=3, num_classes=3)
        params = init_params(arch, seed=0)
        rng = np.random.default_rng(0)
        feats = Tensor(rng.normal(size=(7, 5)))
        labels = rng.integers(0, 3, size=7)
        path = str(tmp_path / "reps.csv")
        dump_representations(params, feats, labels, path)

        with open(path) as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 8  # header + N rows

        got_labels, z, u, meta = load_representations(path)
        assert meta == {"N": 7, "k": 4, "d": 3, "C": 3}
        assert np.array_equal(got_labels, labels)
        assert np.all((got_labels >= 0) & (got_labels < 3))

        from dualfed.metrics import client_representations

        z_ref, u_ref = client_representations(params, feats)
        assert np.array_equal(z, z_ref.data)
        assert np.array_equal(u, u_ref.data)
