import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegnet3d import tensor


class TestCreation:
    def test_zeros(self):
        t = tensor.zeros([2, 3])
        assert t.shape == (2, 3) and t.dtype == np.float32
        assert np.all(t == 0.0) and t.size == 6

    def test_full_singleton(self):
        assert tensor.full([1], 7.5).tolist() == [7.5]

    def test_ones_element_count(self):
        assert tensor.ones([6, 32, 128]).size == 24576

    @pytest.mark.parametrize("bad", [[], [0], [2, -1], [1] * 6])
    def test_invalid_shapes(self, bad):
        with pytest.raises(ValueError):
            tensor.check_shape(bad)


class TestElementwise:
    def test_add(self):
        assert tensor.add(tensor.astensor([1, 2]), tensor.astensor([3, 4])).tolist() == [4, 6]

    def test_mul(self):
        assert tensor.mul(tensor.astensor([2, 2]), tensor.astensor([0.5, 0.5])).tolist() == [1, 1]

    def test_sub(self):
        assert tensor.sub(tensor.astensor([3, 1]), tensor.astensor([1, 1])).tolist() == [2, 0]

    def test_max_with_scalar_is_relu_block(self):
        assert tensor.max_with_scalar(tensor.astensor([-1, 2]), 0).tolist() == [0, 2]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            tensor.add(tensor.zeros([2]), tensor.zeros([3]))

    def test_repeated_runs_bit_identical(self, rng):
        a = rng.standard_normal((4, 5)).astype(np.float32)
        b = rng.standard_normal((4, 5)).astype(np.float32)
        assert np.array_equal(tensor.add(a, b), tensor.add(a, b))
        assert np.array_equal(tensor.mul(a, b), tensor.mul(a, b))


class TestRowMajorIndexing:
    @given(
        st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=5)
    )
    @settings(max_examples=40, deadline=None)
    def test_flat_index_matches_nested_loop_order(self, dims):
        # enumerate every multi-index in nested-loop order; the running counter
        # must equal the computed flat index
        counter = 0
        for idx in itertools.product(*(range(d) for d in dims)):
            assert tensor.flat_index(dims, idx) == counter
            counter += 1
        assert counter == int(np.prod(dims))

    def test_five_dim_formula(self):
        dims = (2, 3, 4, 5, 6)
        n, c, d, h, w = 1, 2, 3, 4, 5
        expected = ((((n * 3 + c) * 4 + d) * 5 + h) * 6 + w)
        assert tensor.flat_index(dims, (n, c, d, h, w)) == expected

    def test_out_of_bounds(self):
        with pytest.raises(IndexError):
            tensor.flat_index((2, 2), (0, 2))


class TestRng:
    def test_same_seed_same_stream(self):
        a = tensor.seeded_rng(42).uniform([1000])
        b = tensor.seeded_rng(42).uniform([1000])
        assert np.array_equal(a, b)

    def test_children_are_independent_and_reproducible(self):
        r = tensor.Rng(7)
        a1 = r.child(1).normal([100])
        a2 = tensor.Rng(7).child(1).normal([100])
        b = tensor.Rng(7).child(2).normal([100])
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_uniform_range(self):
        t = tensor.fill_uniform(tensor.seeded_rng(3), [10000])
        assert t.min() >= 0.0 and t.max() < 1.0

    def test_normal_sample_mean_clt_bound(self):
        t = tensor.fill_normal(tensor.seeded_rng(11), [100000])
        assert abs(float(t.mean())) <= 0.02
        assert abs(float(t.std()) - 1.0) <= 0.02


class TestFinite:
    def test_assert_finite_passes(self):
        tensor.assert_finite(tensor.ones([3]))

    def test_assert_finite_raises(self):
        bad = tensor.ones([3])
        bad[1] = np.nan
        with pytest.raises(FloatingPointError):
            tensor.assert_finite(bad)


class TestNtf:
    def test_round_trip_bit_exact(self, rng):
        t = rng.standard_normal((3, 4, 5)).astype(np.float32)
        t[0, 0, 0] = -0.0
        buf = io.BytesIO()
        tensor.write_ntf(buf, t)
        buf.seek(0)
        back = tensor.read_ntf(buf)
        assert back.shape == t.shape
        assert t.tobytes() == back.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        t = rng.standard_normal((6, 32, 128)).astype(np.float32)
        path = str(tmp_path / "t.ntf")
        tensor.write_ntf(path, t)
        assert np.array_equal(tensor.read_ntf(path), t)

    def test_header_contents(self):
        buf = io.BytesIO()
        tensor.write_ntf(buf, tensor.zeros([2, 2]))
        raw = buf.getvalue()
        assert raw[:4] == b"NTF1"
        assert b'"dtype": "f32"' in raw and b'"byte_order": "little"' in raw

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            tensor.read_ntf(io.BytesIO(b"BOGUS000"))

    def test_truncated_payload(self):
        buf = io.BytesIO()
        tensor.write_ntf(buf, tensor.zeros([4]))
        clipped = io.BytesIO(buf.getvalue()[:-4])
        with pytest.raises(ValueError, match="truncated"):
            tensor.read_ntf(clipped)
