import numpy as np
import numpy.testing as npt
import pytest

from dsrm.errors import ContractViolation
from dsrm.features import FeatureMatrix
from dsrm.spatial import make_sequences, neighbor_triples, sequence_array


def sequences_oracle(values):
    """Literal branch-by-branch transcription of the three edge rules."""
    m, n, d = values.shape
    out = []
    for i in range(m):
        for j in range(n):
            if n == 1:
                steps = (values[i, 0], values[i, 0], values[i, 0])
            elif j == 0:
                steps = (values[i, 0], values[i, 0], values[i, 1])
            elif j == n - 1:
                steps = (values[i, n - 2], values[i, n - 1], values[i, n - 1])
            else:
                steps = (values[i, j - 1], values[i, j], values[i, j + 1])
            out.append(np.stack(steps))
    return np.stack(out)


def random_matrix(m, n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureMatrix(values=rng.standard_normal((m, n, d)), backend_tag="tiny_cnn")


class TestMakeSequences:
    def test_interior_cell(self):
        fm = random_matrix(1, 3)
        seqs = make_sequences(fm)
        npt.assert_array_equal(seqs[1].steps[0], fm.values[0, 0])
        npt.assert_array_equal(seqs[1].steps[1], fm.values[0, 1])
        npt.assert_array_equal(seqs[1].steps[2], fm.values[0, 2])

    def test_left_edge(self):
        fm = random_matrix(2, 4, seed=1)
        seqs = make_sequences(fm)
        first = seqs[0]
        npt.assert_array_equal(first.steps[0], fm.values[0, 0])
        npt.assert_array_equal(first.steps[1], fm.values[0, 0])
        npt.assert_array_equal(first.steps[2], fm.values[0, 1])

    def test_right_edge(self):
        fm = random_matrix(2, 4, seed=2)
        seqs = make_sequences(fm)
        last = seqs[3]
        npt.assert_array_equal(last.steps[0], fm.values[0, 2])
        npt.assert_array_equal(last.steps[1], fm.values[0, 3])
        npt.assert_array_equal(last.steps[2], fm.values[0, 3])

    def test_single_column_self_replicates(self):
        fm = random_matrix(3, 1, seed=3)
        for seq in make_sequences(fm):
            npt.assert_array_equal(seq.steps[0], seq.steps[1])
            npt.assert_array_equal(seq.steps[1], seq.steps[2])

    def test_count_and_row_major_order(self):
        fm = random_matrix(4, 5, seed=4)
        seqs = make_sequences(fm)
        assert len(seqs) == 20
        assert [(s.i, s.j) for s in seqs[:6]] == [(0, 0), (0, 1), (0, 2), (0, 3),
                                                  (0, 4), (1, 0)]

    def test_center_fidelity(self):
        fm = random_matrix(5, 7, seed=5)
        for seq in make_sequences(fm):
            npt.assert_array_equal(seq.steps[1], fm.values[seq.i, seq.j])

    def test_matches_transcription_oracle_all_small_shapes(self):
        seed = 0
        for m in range(1, 9):
            for n in range(1, 9):
                fm = random_matrix(m, n, seed=seed)
                seed += 1
                got = sequence_array(fm.values)
                npt.assert_array_equal(got, sequences_oracle(fm.values))

    def test_row_independence(self):
        fm = random_matrix(4, 6, seed=6)
        base = sequence_array(fm.values)
        perturbed = fm.values.copy()
        perturbed[2] += 100.0
        changed = sequence_array(perturbed)
        n = 6
        for i in (0, 1, 3):
            npt.assert_array_equal(changed[i * n:(i + 1) * n], base[i * n:(i + 1) * n])
        assert not np.array_equal(changed[2 * n:3 * n], base[2 * n:3 * n])

    def test_constant_matrix_identical_sequences(self):
        fm = FeatureMatrix(values=np.full((3, 4, 2), 1.7), backend_tag="tiny_cnn")
        seqs = sequence_array(fm.values)
        for k in range(1, seqs.shape[0]):
            npt.assert_array_equal(seqs[k], seqs[0])

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            neighbor_triples(0, 3)
