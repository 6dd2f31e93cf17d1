import logging

import numpy as np
import numpy.testing as npt
import pytest

from dsrm import features as F
from dsrm.errors import ContractViolation, ExtractionError, FormatError
from dsrm.patches import build_grid


class TestGrayToRgb:
    def test_zeros(self):
        out = F.gray_to_rgb(np.zeros((2, 2)))
        npt.assert_array_equal(out, np.zeros((2, 2, 3)))

    def test_copies_value_to_all_channels(self):
        out = F.gray_to_rgb(np.array([[0.7]]))
        npt.assert_array_equal(out[0, 0], [0.7, 0.7, 0.7])

    def test_each_channel_equals_input(self):
        rng = np.random.default_rng(0)
        g = rng.random((5, 7))
        out = F.gray_to_rgb(g)
        for c in range(3):
            npt.assert_array_equal(out[:, :, c], g)

    def test_rejects_3d(self):
        with pytest.raises(ContractViolation):
            F.gray_to_rgb(np.zeros((2, 2, 3)))


class TestTinyCnn:
    def test_output_dim(self):
        cnn = F.init_tiny_cnn(64, seed=0)
        x = np.random.default_rng(1).random((2, 100, 100, 3))
        assert F.cnn_forward(cnn, x).shape == (2, 64)

    def test_init_deterministic(self):
        a = F.init_tiny_cnn(16, seed=5)
        b = F.init_tiny_cnn(16, seed=5)
        for name in a.tensors():
            npt.assert_array_equal(a.tensors()[name], b.tensors()[name])

    def test_glorot_bounds(self):
        cnn = F.init_tiny_cnn(32, seed=2)
        limit = np.sqrt(6.0 / (9 * 3 + 9 * 8))
        assert np.abs(cnn.conv1_w).max() <= limit
        assert np.abs(cnn.conv1_b).max() == 0.0


class TestExtractFeatures:
    def test_constant_image_gives_equal_features(self):
        cnn = F.init_tiny_cnn(8, seed=0)
        grid = build_grid(150, 150)
        image = np.zeros((150, 150, 3))
        fm = F.extract_features(image, grid, cnn)
        assert fm.backend_tag == "tiny_cnn"
        for i in range(2):
            for j in range(2):
                npt.assert_array_equal(fm.values[i, j], fm.values[0, 0])

    def test_locality(self):
        # identical window pixels -> identical feature cell
        rng = np.random.default_rng(3)
        cnn = F.init_tiny_cnn(8, seed=1)
        grid = build_grid(150, 150)
        a = rng.random((150, 150, 3))
        b = a.copy()
        b[100:, 100:, :] = rng.random((50, 50, 3))  # outside window (0, 0)
        fa = F.extract_features(a, grid, cnn)
        fb = F.extract_features(b, grid, cnn)
        npt.assert_array_equal(fa.values[0, 0], fb.values[0, 0])
        assert not np.array_equal(fa.values[1, 1], fb.values[1, 1])

    def test_matches_naive_convolution_oracle(self):
        # single window, hand-rolled conv/pool/gap pipeline
        rng = np.random.default_rng(4)
        cnn = F.init_tiny_cnn(5, seed=2)
        grid = build_grid(100, 100)
        image = rng.random((100, 100, 3))

        def conv(x, w, b):
            h, wd, ci = x.shape
            co = w.shape[3]
            y = np.zeros((h - 2, wd - 2, co))
            for i in range(h - 2):
                for j in range(wd - 2):
                    for q in range(co):
                        s = b[q]
                        for di in range(3):
                            for dj in range(3):
                                for k in range(ci):
                                    s += x[i + di, j + dj, k] * w[di, dj, k, q]
                        y[i, j, q] = s
            return np.maximum(y, 0.0)

        def pool(x):
            h, wd, c = x.shape
            y = np.zeros((h // 2, wd // 2, c))
            for i in range(h // 2):
                for j in range(wd // 2):
                    y[i, j] = x[2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(4, c).max(axis=0)
            return y

        cur = image
        for w, b in ((cnn.conv1_w, cnn.conv1_b), (cnn.conv2_w, cnn.conv2_b),
                     (cnn.conv3_w, cnn.conv3_b)):
            cur = pool(conv(cur, w, b))
        expected = cur.mean(axis=(0, 1)) @ cnn.head_w + cnn.head_b

        fm = F.extract_features(image, grid, cnn)
        npt.assert_allclose(fm.values[0, 0], expected, rtol=1e-9, atol=1e-9)

    def test_non_finite_names_patch(self):
        cnn = F.init_tiny_cnn(4, seed=3)
        cnn.head_b[:] = np.inf
        grid = build_grid(100, 150)
        with pytest.raises(ExtractionError, match=r"\(0, 0\)"):
            F.extract_features(np.zeros((100, 150, 3)), grid, cnn)

    def test_grid_image_mismatch(self):
        cnn = F.init_tiny_cnn(4, seed=4)
        with pytest.raises(ContractViolation):
            F.extract_features(np.zeros((120, 120, 3)), build_grid(100, 100), cnn)


class TestStats:
    def test_constant_dimension_standardizes_to_zero(self):
        fm = F.FeatureMatrix(values=np.full((2, 2, 3), 4.0), backend_tag="tiny_cnn")
        stats = F.fit_stats([fm])
        out = F.apply_stats(fm, stats)
        npt.assert_array_equal(out.values, np.zeros_like(fm.values))
        assert (stats.std >= F.STD_FLOOR).all()

    def test_training_set_mean_near_zero(self):
        rng = np.random.default_rng(5)
        mats = [F.FeatureMatrix(values=rng.random((3, 4, 6)) * 10, backend_tag="tiny_cnn")
                for _ in range(4)]
        stats = F.fit_stats(mats)
        standardized = np.concatenate(
            [F.apply_stats(fm, stats).values.reshape(-1, 6) for fm in mats])
        npt.assert_allclose(standardized.mean(axis=0), 0.0, atol=1e-9)
        npt.assert_allclose(standardized.std(axis=0), 1.0, atol=1e-9)

    def test_double_standardization_differs(self):
        rng = np.random.default_rng(6)
        fm = F.FeatureMatrix(values=rng.random((2, 2, 4)) + 3.0, backend_tag="tiny_cnn")
        stats = F.fit_stats([fm])
        once = F.apply_stats(fm, stats)
        twice = F.apply_stats(once, stats)
        assert not np.allclose(once.values, twice.values)

    def test_dimension_mismatch(self):
        fm4 = F.FeatureMatrix(values=np.zeros((1, 1, 4)), backend_tag="tiny_cnn")
        fm5 = F.FeatureMatrix(values=np.zeros((1, 1, 5)), backend_tag="tiny_cnn")
        with pytest.raises(ContractViolation):
            F.fit_stats([fm4, fm5])
        with pytest.raises(ContractViolation):
            F.apply_stats(fm5, F.fit_stats([fm4]))

    def test_empty(self):
        with pytest.raises(ContractViolation):
            F.fit_stats([])


class TestDsrfFormat:
    def test_round_trip_exact_at_f32(self, tmp_path):
        rng = np.random.default_rng(7)
        values = rng.standard_normal((3, 4, 16))
        fm = F.FeatureMatrix(values=values, backend_tag="tiny_cnn")
        path = tmp_path / "f.dsrf"
        F.save_features(path, fm)
        loaded = F.load_precomputed(path)
        assert loaded.backend_tag == "precomputed"
        npt.assert_array_equal(loaded.values,
                               values.astype("<f4").astype(np.float64))

    def test_header_layout(self, tmp_path):
        fm = F.FeatureMatrix(values=np.zeros((2, 3, 5)), backend_tag="tiny_cnn")
        path = tmp_path / "f.dsrf"
        F.save_features(path, fm)
        blob = path.read_bytes()
        assert blob[:4] == b"DSRF"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:16], "little") == 3
        assert int.from_bytes(blob[16:20], "little") == 5
        assert len(blob) == 20 + 2 * 3 * 5 * 4

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.dsrf"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            F.load_precomputed(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dsrf"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError):
            F.load_precomputed(path)

    def test_bad_version(self, tmp_path):
        fm = F.FeatureMatrix(values=np.zeros((1, 1, 2)), backend_tag="tiny_cnn")
        path = tmp_path / "v9.dsrf"
        F.save_features(path, fm)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            F.load_precomputed(path)

    def test_truncated_payload(self, tmp_path):
        fm = F.FeatureMatrix(values=np.zeros((2, 2, 4)), backend_tag="tiny_cnn")
        path = tmp_path / "t.dsrf"
        F.save_features(path, fm)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            F.load_precomputed(path)

    def test_trailing_bytes(self, tmp_path):
        fm = F.FeatureMatrix(values=np.zeros((2, 2, 4)), backend_tag="tiny_cnn")
        path = tmp_path / "x.dsrf"
        F.save_features(path, fm)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            F.load_precomputed(path)

    def test_non_backbone_dim_warns_but_loads(self, tmp_path, caplog):
        fm = F.FeatureMatrix(values=np.ones((1, 1, 7)), backend_tag="tiny_cnn")
        path = tmp_path / "w.dsrf"
        F.save_features(path, fm)
        with caplog.at_level(logging.WARNING):
            loaded = F.load_precomputed(path)
        assert loaded.dim == 7
        assert any("dimension 7" in rec.message for rec in caplog.records)
