import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsemae.geometry import NeighborIndex
from sparsemae.gradsuite import CASES
from sparsemae.interpolation import (
    InterpQuery,
    interp_backward,
    interp_invpow,
    interp_softmax,
    interpolate,
    stability_probe,
)
from sparsemae.numerics import ConformanceError, Tape, grad_check, ops


def two_point(p, d_near=0.1, d_far=5.0):
    x = np.array([[d_near, 0.0], [0.0, d_far]])
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    return InterpQuery(np.zeros(2), x, f, p=p)


def random_query(seed, nq=5, k=6, dim=3, p=1.0):
    rng = np.random.default_rng(seed)
    return InterpQuery(rng.uniform(-2, 2, (nq, 2)), rng.uniform(-2, 2, (nq, k, 2)), rng.standard_normal((nq, k, dim)), p=p)


class TestSoftmaxKernel:
    def test_p_zero_is_mean(self):
        iq = random_query(0, p=0.0)
        np.testing.assert_allclose(interp_softmax(iq).out, iq.f.mean(axis=1), atol=1e-12)

    def test_single_neighbour(self):
        iq = InterpQuery(np.array([1.0, 2.0]), np.array([[5.0, 5.0]]), np.array([[0.3, -0.7, 2.0]]), p=3.0)
        np.testing.assert_array_equal(interp_softmax(iq).out, [[0.3, -0.7, 2.0]])

    def test_two_point_sharp(self):
        w = interp_softmax(two_point(50.0)).weights[0]
        assert w[0] >= 1 - 1e-6
        # closed form: 1 / (1 + exp(-p (d_far - d_near)))
        np.testing.assert_allclose(w[0], 1 / (1 + np.exp(-50 * 4.9)), atol=1e-15)

    @pytest.mark.parametrize("precision", [None, "b32", "b64", "b16emu"])
    def test_simplex(self, precision):
        res = interp_softmax(random_query(1, p=2.0), precision)
        assert np.all(res.weights >= 0)
        np.testing.assert_allclose(res.weights.sum(1), 1.0, atol=1e-3 if precision == "b16emu" else 1e-6)

    def test_masked_slots_ignored(self):
        iq = random_query(2, k=4)
        iq.valid[:, 2:] = False
        ref = InterpQuery(iq.q, iq.x[:, :2], iq.f[:, :2], p=iq.p)
        np.testing.assert_allclose(interp_softmax(iq).out, interp_softmax(ref).out, atol=1e-14)

    def test_b16emu_never_fails_at_large_p(self):
        iq = InterpQuery(np.zeros(2), np.array([[0.01, 0.0], [10.0, 0.0]]), np.eye(2), p=100.0)
        assert not interp_softmax(iq, "b16emu").failed.any()

    def test_negative_p_inverts_locality(self):
        w = interp_softmax(two_point(-5.0)).weights[0]
        assert w[1] > w[0]

    @given(st.floats(0.0, 30.0), st.floats(0.0, 30.0), st.integers(0, 500))
    @settings(max_examples=80)
    def test_monotone_locality(self, p1, p2, seed):
        lo, hi = sorted((p1, p2))
        rng = np.random.default_rng(seed)
        x = rng.uniform(-3, 3, (1, 5, 2))
        f = rng.standard_normal((1, 5, 2))
        d = np.linalg.norm(x[0], axis=1)
        near = int(np.argmin(d))
        if np.sort(d)[1] - d[near] < 1e-6:
            return
        w_lo = interp_softmax(InterpQuery(np.zeros(2), x, f, p=lo), "b64").weights[0, near]
        w_hi = interp_softmax(InterpQuery(np.zeros(2), x, f, p=hi), "b64").weights[0, near]
        assert w_hi >= w_lo - 1e-15


class TestInvPowKernel:
    def test_p_zero_is_mean(self):
        iq = random_query(3, p=0.0)
        np.testing.assert_allclose(interp_invpow(iq).out, iq.f.mean(axis=1), atol=1e-12)

    def test_single_neighbour(self):
        iq = InterpQuery(np.zeros(2), np.array([[1.0, 1.0]]), np.array([[4.0, 5.0]]), p=2.0)
        np.testing.assert_allclose(interp_invpow(iq).out, [[4.0, 5.0]], atol=1e-15)

    def test_matches_literal_formula(self):
        iq = random_query(4, p=1.7)
        d = np.linalg.norm(iq.q[:, None] - iq.x, axis=-1) + iq.eps
        w = d**-1.7
        w /= w.sum(1, keepdims=True)
        np.testing.assert_allclose(interp_invpow(iq, "b64").out, np.einsum("qk,qkd->qd", w, iq.f), atol=1e-12)

    def test_b16emu_overflow_reported(self):
        iq = InterpQuery(np.zeros(2), np.array([[0.01, 0.0], [10.0, 0.0]]), np.eye(2), p=20.0)
        res = interp_invpow(iq, "b16emu")
        assert res.failed.all()

    def test_zero_normaliser_reported_not_raised(self):
        iq = InterpQuery(np.zeros(2), np.array([[1e3, 0.0], [0.0, 1e3]]), np.eye(2), p=400.0)
        assert interp_invpow(iq, "b64").failed.all()


class TestBackward:
    def test_zero_cotangent(self):
        iq = random_query(5)
        w = interp_softmax(iq).weights
        df, dp, dq = interp_backward(iq, w, np.zeros((5, 3)))
        assert not df.any() and dp == 0 and not dq.any()

    def test_dims_mismatch(self):
        iq = random_query(5)
        with pytest.raises(ConformanceError):
            interp_backward(iq, interp_softmax(iq).weights, np.zeros((5, 4)))

    @pytest.mark.parametrize("case", ["interp_softmax", "interp_invpow"])
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, case, seed):
        rep = CASES[case](seed)
        assert rep.passed, str(rep)

    def test_p_gradient_sign(self):
        # loss = weight on the near point's feature channel; raising p must increase it
        iq = two_point(0.5)
        w = interp_softmax(iq, "b64").weights
        _, dp, _ = interp_backward(iq, w, np.array([[1.0, 0.0]]))
        assert dp > 0
        step = 1e-6
        up = interp_softmax(two_point(0.5 + step), "b64").out[0, 0]
        down = interp_softmax(two_point(0.5 - step), "b64").out[0, 0]
        assert np.sign(up - down) == np.sign(dp)

    def test_coincident_query_has_zero_distance_gradient(self):
        iq = InterpQuery(np.zeros(2), np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2), p=1.0)
        w = interp_softmax(iq).weights
        _, _, dq = interp_backward(iq, w, np.array([[1.0, 0.0]]))
        assert np.all(np.isfinite(dq))

    def test_tape_op_gathers_and_scatters(self):
        rng = np.random.default_rng(6)
        keys = rng.uniform(0, 8, (9, 2))
        feats = rng.standard_normal((9, 3))
        q = rng.uniform(0, 8, (4, 2))
        nbr = NeighborIndex(rng.integers(0, 9, (4, 3)), np.ones((4, 3), bool))

        def fn(t, qq, ff, pp):
            return ops.reduce_sum(ops.tanh(interpolate(qq, keys, ff, nbr, pp)))

        rep = grad_check(fn, [q, feats, np.array([0.7])], step=1e-6)
        assert rep.passed, str(rep)

    def test_unknown_kernel(self):
        t = Tape()
        with pytest.raises(ValueError):
            interpolate(np.zeros((1, 2)), np.zeros((1, 2)), t.leaf(np.ones((1, 1))), NeighborIndex([[0]], [[True]]), 1.0, kernel="cubic")


class TestProbe:
    def test_softmax_never_fails_where_invpow_does(self):
        rows = stability_probe([1.0, 20.0, 100.0], [(0.01, 10.0)], "b16emu", trials=1000)
        by = {(r["kernel"], r["p"]): r["failure_rate"] for r in rows}
        assert by[("invpow", 20.0)] > 0
        for p in (1.0, 20.0, 100.0):
            assert by[("softmax", p)] == 0.0

    def test_b64_no_failures(self):
        rows = stability_probe([1.0, 20.0], [(0.01, 10.0)], "b64", trials=200)
        assert all(r["failure_rate"] == 0.0 for r in rows)

    def test_deterministic(self):
        a = stability_probe([5.0], [(0.1, 1.0)], trials=50, seed=3)
        b = stability_probe([5.0], [(0.1, 1.0)], trials=50, seed=3)
        assert a == b
