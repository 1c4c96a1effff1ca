"""Matrix helpers, activation batches, and the binary dump format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modquant.mocd import ChannelPartition
from modquant.tensor import (
    ActivationBatch,
    ModalityTag,
    TensorFormatError,
    as_matrix,
    load_tensor,
    matmul,
    save_tensor,
    scatter_columns,
    split_columns,
)


class TestAsMatrix:
    def test_accepts_lists(self):
        m = as_matrix([[1, 2], [3, 4]])
        assert m.dtype == np.float64
        assert m.shape == (2, 2)

    def test_rejects_1d(self):
        with pytest.raises(ValueError, match="2-D"):
            as_matrix([1.0, 2.0])

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_matrix([[np.nan]])

    def test_rejects_inf(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_matrix([[np.inf, 0.0]])

    def test_shape_check(self):
        with pytest.raises(ValueError, match="rows"):
            as_matrix(np.zeros((2, 3)), rows=4)
        with pytest.raises(ValueError, match="cols"):
            as_matrix(np.zeros((2, 3)), cols=4)


class TestActivationBatch:
    def test_text_and_vision_rows(self):
        b = ActivationBatch(np.zeros((3, 2)), [0, 1, 0])
        assert b.text_rows.tolist() == [0, 2]
        assert b.vision_rows.tolist() == [1]

    def test_rejects_tag_length_mismatch(self):
        with pytest.raises(ValueError, match="tag-length mismatch"):
            ActivationBatch(np.zeros((3, 2)), [0, 1])

    def test_rejects_bad_tag_values(self):
        with pytest.raises(ValueError, match="tags"):
            ActivationBatch(np.zeros((2, 2)), [0, 7])

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            ActivationBatch(np.zeros((0, 2)), [])

    def test_single_modality_is_fine(self):
        b = ActivationBatch(np.ones((2, 3)), [1, 1])
        assert b.text_rows.size == 0
        assert b.vision_rows.size == 2


class TestSplitScatter:
    def test_hand_example(self):
        # C_m={0,2}, C_t={1}, C_v={} on a 2x3 matrix.
        part = ChannelPartition([0, 2], [1], [], 3)
        x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        m, t, v = split_columns(x, part)
        assert m.tolist() == [[1, 3], [4, 6]]
        assert t.tolist() == [[2], [5]]
        assert v.shape == (2, 0)

    def test_identity_partition(self):
        part = ChannelPartition([0, 1, 2], [], [], 3)
        x = np.arange(6.0).reshape(2, 3)
        m, t, v = split_columns(x, part)
        np.testing.assert_array_equal(m, x)
        assert t.shape == (2, 0) and v.shape == (2, 0)

    def test_dim_mismatch(self):
        part = ChannelPartition([0, 1], [], [], 2)
        with pytest.raises(ValueError, match="partition covers"):
            split_columns(np.zeros((2, 3)), part)

    @given(
        arrays(np.float64, (4, 6), elements=st.floats(-1e6, 1e6)),
        st.randoms(use_true_random=False),
    )
    @settings(max_examples=50, deadline=None)
    def test_round_trip_is_exact(self, x, rnd):
        idx = list(range(6))
        rnd.shuffle(idx)
        part = ChannelPartition(sorted(idx[:4]), sorted(idx[4:5]), sorted(idx[5:]), 6)
        m, t, v = split_columns(x, part)
        back = scatter_columns(m, t, v, part)
        np.testing.assert_array_equal(back, x)


class TestMatmul:
    def test_identity(self):
        b = np.array([[3.0], [4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), b), b)

    def test_hand_product(self):
        assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]

    def test_zero_annihilates(self):
        out = matmul(np.ones((2, 3)), np.zeros((3, 4)))
        assert not out.any()

    def test_dimension_check(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestDumpFormat:
    def test_matrix_round_trip(self, tmp_path):
        w = np.random.default_rng(0).standard_normal((5, 3))
        path = tmp_path / "w.spqt"
        save_tensor(path, w)
        np.testing.assert_array_equal(load_tensor(path), w)

    def test_batch_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        b = ActivationBatch(rng.standard_normal((4, 7)), [0, 1, 1, 0])
        path = tmp_path / "b.spqt"
        save_tensor(path, b)
        back = load_tensor(path)
        assert isinstance(back, ActivationBatch)
        np.testing.assert_array_equal(back.data, b.data)
        np.testing.assert_array_equal(back.tags, b.tags)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.spqt"
        path.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(TensorFormatError, match="bad magic"):
            load_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.spqt"
        save_tensor(path, np.ones((3, 3)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(TensorFormatError, match="truncated payload"):
            load_tensor(path)

    def test_tag_length_mismatch(self, tmp_path):
        path = tmp_path / "x.spqt"
        save_tensor(path, ActivationBatch(np.ones((2, 2)), [0, 1]))
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])  # drop one tag byte
        with pytest.raises(TensorFormatError, match="tag-length mismatch"):
            load_tensor(path)

    def test_non_finite_payload(self, tmp_path):
        path = tmp_path / "x.spqt"
        save_tensor(path, np.ones((2, 2)))
        raw = bytearray(path.read_bytes())
        import struct

        header = 4 + struct.calcsize("<IBQQ")
        raw[header : header + 8] = struct.pack("<d", np.nan)
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="non-finite value"):
            load_tensor(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "x.spqt"
        save_tensor(path, np.ones((1, 1)))
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="version"):
            load_tensor(path)

    @given(
        data=arrays(np.float64, (3, 4), elements=st.floats(-1e12, 1e12)),
        tags=st.lists(st.integers(0, 1), min_size=3, max_size=3),
    )
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, data, tags):
        path = tmp_path_factory.mktemp("rt") / "b.spqt"
        b = ActivationBatch(data, tags)
        save_tensor(path, b)
        back = load_tensor(path)
        np.testing.assert_array_equal(back.data, data)
        np.testing.assert_array_equal(back.tags, np.asarray(tags, dtype=np.uint8))

    def test_modality_tag_values(self):
        assert int(ModalityTag.TEXT) == 0
        assert int(ModalityTag.VISION) == 1
