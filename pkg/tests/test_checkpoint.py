import numpy as np
import numpy.testing as npt
import pytest

from dsrm import checkpoint as cp
from dsrm import features as F
from dsrm import regressor as reg
from dsrm.errors import FormatError


def build_model(seed=0, with_cnn=True):
    params = reg.init_regressor(8, hidden=(6, 6), seed=seed)
    stats = F.FeatureStats(mean=np.random.default_rng(seed).standard_normal(8),
                           std=np.abs(np.random.default_rng(seed + 1).standard_normal(8)) + 0.1)
    cnn = F.init_tiny_cnn(8, seed=seed) if with_cnn else None
    return params, stats, cnn


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params, stats, cnn = build_model()
        ckpt = cp.Checkpoint(extractor_tag="tiny_cnn", feature_dim=8,
                             blocks=cp.blocks_from_model(params, stats, cnn))
        path = tmp_path / "m.dsrm"
        cp.save_checkpoint(path, ckpt)
        loaded = cp.load_checkpoint(path)
        assert loaded.extractor_tag == "tiny_cnn"
        assert loaded.feature_dim == 8
        assert set(loaded.blocks) == set(ckpt.blocks)
        for name, arr in ckpt.blocks.items():
            npt.assert_array_equal(loaded.blocks[name], arr)
        # a second save produces identical bytes
        path2 = tmp_path / "m2.dsrm"
        cp.save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_magic(self, tmp_path):
        params, stats, cnn = build_model()
        path = tmp_path / "m.dsrm"
        cp.save_checkpoint(path, cp.Checkpoint("tiny_cnn", 8,
                                               cp.blocks_from_model(params, stats, cnn)))
        assert path.read_bytes()[:4] == b"DSRM"

    def test_model_reconstruction(self, tmp_path):
        params, stats, cnn = build_model(seed=3)
        path = tmp_path / "m.dsrm"
        cp.save_checkpoint(path, cp.Checkpoint("tiny_cnn", 8,
                                               cp.blocks_from_model(params, stats, cnn)))
        p2, s2, c2 = cp.model_from_checkpoint(cp.load_checkpoint(path))
        npt.assert_array_equal(p2.layer1.w, params.layer1.w)
        npt.assert_array_equal(p2.head_w, params.head_w)
        assert p2.readout == params.readout
        npt.assert_array_equal(s2.mean, stats.mean)
        npt.assert_array_equal(c2.conv3_w, cnn.conv3_w)
        rng = np.random.default_rng(9)
        seqs = rng.standard_normal((4, 3, 8))
        a, _ = reg.forward_batch(seqs, params)
        b, _ = reg.forward_batch(seqs, p2)
        npt.assert_array_equal(a, b)

    def test_precomputed_tag_has_no_cnn(self, tmp_path):
        params, stats, _ = build_model(with_cnn=False)
        path = tmp_path / "m.dsrm"
        cp.save_checkpoint(path, cp.Checkpoint("precomputed", 8,
                                               cp.blocks_from_model(params, stats)))
        _, _, cnn = cp.model_from_checkpoint(cp.load_checkpoint(path))
        assert cnn is None

    def test_truncated_rejected(self, tmp_path):
        params, stats, cnn = build_model()
        path = tmp_path / "m.dsrm"
        cp.save_checkpoint(path, cp.Checkpoint("tiny_cnn", 8,
                                               cp.blocks_from_model(params, stats, cnn)))
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError):
            cp.load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.dsrm"
        path.write_bytes(b"XXXX" + bytes(32))
        with pytest.raises(FormatError):
            cp.load_checkpoint(path)

    def test_missing_block_rejected(self, tmp_path):
        params, stats, cnn = build_model()
        blocks = cp.blocks_from_model(params, stats, cnn)
        del blocks["head.w"]
        path = tmp_path / "m.dsrm"
        cp.save_checkpoint(path, cp.Checkpoint("tiny_cnn", 8, blocks))
        with pytest.raises(FormatError):
            cp.model_from_checkpoint(cp.load_checkpoint(path))
