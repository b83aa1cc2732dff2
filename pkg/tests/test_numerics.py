import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sparsemae.numerics import (
    ConformanceError,
    Parameter,
    Precision,
    Tape,
    aft1,
    grad_check,
    grad_check_params,
    ops,
    relative_error,
    round_b16,
)
from sparsemae.numerics.ops import _record


def _half_bits_oracle(x: float) -> float:
    """Round-to-nearest-even binary16 via the struct 'e' codec."""
    try:
        return struct.unpack("<e", struct.pack("<e", x))[0]
    except OverflowError:
        return float(np.copysign(np.inf, x))


class TestRoundB16:
    def test_exact_values_pass_through(self):
        assert round_b16(np.float32(1.0)) == 1.0
        assert round_b16(np.array([0.5, -2.0, 65504.0])).tolist() == [0.5, -2.0, 65504.0]

    def test_overflow_goes_to_infinity(self):
        out = round_b16(np.array([1e5, -1e5]))
        assert np.isposinf(out[0]) and np.isneginf(out[1])

    def test_tenth(self):
        assert float(round_b16(np.array(0.1))) == 0.0999755859375

    def test_matches_struct_codec(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.standard_normal(2000) * 10.0 ** rng.integers(-8, 5, 2000), [6e-8, 3e-8, 65519.0, 65520.0]])
        expected = np.array([_half_bits_oracle(float(v)) for v in x])
        np.testing.assert_array_equal(round_b16(x), expected)

    def test_non_finite_pass_through(self):
        out = round_b16(np.array([np.nan, np.inf, -np.inf]))
        assert np.isnan(out[0]) and np.isposinf(out[1]) and np.isneginf(out[2])

    def test_storage_stays_b32(self):
        assert round_b16(np.ones(3, dtype=np.float32)).dtype == np.float32
        assert Precision.B16EMU.dtype == np.float32

    @given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(allow_nan=False, width=64)))
    def test_idempotent(self, x):
        once = round_b16(x)
        np.testing.assert_array_equal(round_b16(once), once)


class TestTapeOps:
    def test_reduce_sum_backward_is_ones(self):
        t = Tape()
        x = t.leaf(np.arange(24.0).reshape(2, 3, 4))
        y = ops.reduce_sum(x)
        t.backward(y)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_softmax_uniform(self):
        t = Tape()
        np.testing.assert_allclose(ops.softmax(t.leaf(np.zeros(3))).value, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_softmax_large_logits_stable(self):
        t = Tape()
        out = ops.softmax(t.leaf(np.array([1000.0, 1000.0, -1000.0]))).value
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0])

    def test_softmax_fully_masked_row_is_zero(self):
        t = Tape()
        out = ops.softmax(t.leaf(np.ones((2, 3))), mask=np.array([[True, False, True], [False, False, False]])).value
        np.testing.assert_allclose(out, [[0.5, 0, 0.5], [0, 0, 0]])

    def test_layer_norm_forward(self):
        x = np.random.default_rng(0).standard_normal((5, 8))
        t = Tape()
        out = ops.layer_norm(t.leaf(x)).value
        ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gelu_forward_tanh_form(self):
        x = np.linspace(-4, 4, 17)
        t = Tape()
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(ops.gelu(t.leaf(x)).value, ref, atol=1e-15)

    def test_matmul_dim_mismatch_names_dims(self):
        t = Tape()
        with pytest.raises(ConformanceError, match=r"\(2, 3\).*\(4, 5\)"):
            ops.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((4, 5))))

    def test_add_dim_mismatch(self):
        t = Tape()
        with pytest.raises(ConformanceError):
            ops.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones((4,))))

    def test_gather_out_of_range(self):
        t = Tape()
        with pytest.raises(ConformanceError):
            ops.gather(t.leaf(np.ones((3, 2))), np.array([0, 3]))

    def test_scatter_add_forward(self):
        t = Tape()
        out = ops.scatter_add(t.leaf(np.array([[1.0], [2.0], [4.0]])), np.array([2, 0, 2]), 3).value
        np.testing.assert_array_equal(out, [[2.0], [0.0], [5.0]])

    def test_segment_sum_matches_add_at(self):
        rng = np.random.default_rng(1)
        idx = rng.integers(0, 7, (20, 3))
        vals = rng.standard_normal((20, 3, 4))
        ref = np.zeros((7, 4))
        np.add.at(ref, idx, vals)
        np.testing.assert_allclose(ops.segment_sum(idx, vals, 7), ref, atol=1e-14)

    def test_parameter_grads_accumulate_into_parameter(self):
        p = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), "w")
        t = Tape()
        loss = ops.reduce_sum(ops.matmul(t.leaf(np.ones((1, 2))), t.param(p)))
        t.backward(loss)
        np.testing.assert_array_equal(p.grad, np.ones((2, 2)))
        assert p.grad.shape == p.value.shape

    def test_shared_parameter_sums_paths(self):
        p = Parameter(np.array([3.0]), "a")
        t = Tape()
        a = t.param(p)
        t.backward(ops.reduce_sum(ops.mul(a, a)))
        np.testing.assert_allclose(p.grad, [6.0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            t = Tape()
            x = t.leaf(rng.standard_normal((6, 4)))
            w = t.leaf(rng.standard_normal((4, 3)))
            y = ops.reduce_mean(ops.gelu(ops.layer_norm(ops.matmul(x, w))))
            t.backward(y)
            return y.value, x.grad, w.grad
        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)


class TestGradCheck:
    def test_identity_sum_zero_error(self):
        # integer inputs and a power-of-two step make both slopes exact
        x = np.arange(6.0).reshape(2, 3)
        rep = grad_check(lambda t, a: ops.reduce_sum(a), [x], step=2.0**-16)
        assert rep.passed and rep.max_error == 0.0

    def test_two_layer_mlp(self):
        rng = np.random.default_rng(0)
        x, w1, w2 = rng.standard_normal((5, 4)), rng.standard_normal((4, 6)), rng.standard_normal((6, 1))
        rep = grad_check(lambda t, a, b, c: ops.reduce_sum(ops.matmul(ops.gelu(ops.matmul(a, b)), c)), [x, w1, w2], step=1e-5)
        assert rep.passed, str(rep)
        assert rep.max_error <= 1e-6

    def test_matmul_finite_differences(self):
        rng = np.random.default_rng(1)
        rep = grad_check(lambda t, a, b: ops.reduce_sum(ops.mul(ops.matmul(a, b), 0.3)),
                         [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], step=1e-5)
        assert rep.max_error <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_catches_wrong_backward(self, seed):
        rng = np.random.default_rng(seed)

        def bad_square(a):
            # derivative off by a factor 1.5
            return _record(a.value**2, (a,), lambda g: (g * 3.0 * a.value,), "bad_square")

        rep = grad_check(lambda t, a: ops.reduce_sum(bad_square(a)), [rng.uniform(0.5, 2.0, 5)])
        assert not rep.passed
        assert rep.max_error >= 1e-1

    def test_non_finite_analytic_gradient_reported(self):
        def nan_grad(a):
            return _record(a.value * 1.0, (a,), lambda g: (g * np.nan,), "nan_grad")

        rep = grad_check(lambda t, a: ops.reduce_sum(nan_grad(a)), [np.ones(3)])
        assert not rep.passed
        assert "non-finite" in rep.message

    def test_param_check_subset(self):
        rng = np.random.default_rng(2)
        w = Parameter(rng.standard_normal((8, 8)), "w")
        x = rng.standard_normal((3, 8))
        rep = grad_check_params(lambda t: ops.reduce_sum(ops.tanh(ops.matmul(t.leaf(x), t.param(w)))), [w], max_entries=10)
        assert rep.passed, str(rep)

    def test_round_off_zero_gradient(self):
        # an exactly-zero slope whose tape value carries round-off is not a 100% error
        assert relative_error(np.array([-1.7e-18]), np.array([0.0])) <= 1e-6

    def test_relative_error_scale(self):
        assert relative_error(np.array([2.0, 1.0]), np.array([2.0, 1.1])) == pytest.approx(0.05)
        assert relative_error(np.array([1e-9]), np.array([2e-9])) == pytest.approx(0.5)


class TestAFT1:
    def test_header_layout(self):
        buf = aft1.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert buf[:4] == b"AFT1"
        code, ndim = struct.unpack_from("<BI", buf, 4)
        assert (code, ndim) == (0, 2)
        assert struct.unpack_from("<2Q", buf, 9) == (2, 3)
        assert len(buf) == 9 + 16 + 6 * 4

    @pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.uint8, 2), (np.float64, 3)])
    def test_round_trip(self, dtype, code):
        a = (np.arange(24) % 7).astype(dtype).reshape(2, 3, 4)
        back, got = aft1.decode(aft1.encode(a))
        assert got == code
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, a)

    def test_half_payload(self):
        a = np.array([0.1, 1.0, 1e5], dtype=np.float32)
        buf = aft1.encode(a, 1)
        assert len(buf) == 9 + 8 + 3 * 2
        back, code = aft1.decode(buf)
        assert code == 1 and back.dtype == np.float32
        np.testing.assert_array_equal(back, round_b16(a))

    def test_scalar(self):
        back, _ = aft1.decode(aft1.encode(np.float32(2.5)))
        assert back.shape == () and back == 2.5

    def test_bad_magic(self):
        with pytest.raises(aft1.AFT1Error):
            aft1.decode(b"XXXX" + bytes(20))

    def test_truncated(self):
        with pytest.raises(aft1.AFT1Error):
            aft1.decode(aft1.encode(np.ones((4, 4), dtype=np.float32))[:-3])

    def test_file_round_trip(self, tmp_path):
        a = np.random.default_rng(0).standard_normal((3, 2)).astype(np.float32)
        aft1.save(tmp_path / "t.aft1", a)
        back = aft1.load(tmp_path / "t.aft1")
        np.testing.assert_array_equal(back, a)
