import math

import numpy as np
import pytest

import dipolegnn.autodiff as ad
from dipolegnn.autodiff import (
    IndexRangeError,
    Parameter,
    ShapeMismatchError,
    Tape,
    backward,
    grad_check,
)


def const(tape, x):
    return tape.constant(np.asarray(x, dtype=np.float64))


class TestElementwise:
    def test_sub_self_is_zero(self):
        tape = Tape()
        a = const(tape, [1.5, -2.25, 3.0])
        assert np.array_equal(ad.sub(a, a).data, np.zeros(3))

    def test_double_negation_bit_exact(self):
        tape = Tape()
        x = const(tape, [0.1, -7.3, 1e-300])
        assert np.array_equal(ad.neg(ad.neg(x)).data, x.data)

    def test_mul(self):
        tape = Tape()
        out = ad.mul_elementwise(const(tape, [2.0, 3.0]), const(tape, [4.0, 5.0]))
        assert np.array_equal(out.data, [8.0, 15.0])

    def test_sub_antisymmetry_bit_exact(self):
        rng = np.random.default_rng(0)
        tape = Tape()
        a = const(tape, rng.standard_normal(50))
        b = const(tape, rng.standard_normal(50))
        assert np.array_equal(ad.sub(a, b).data, ad.neg(ad.sub(b, a)).data)

    def test_shape_mismatch_names_both_shapes(self):
        tape = Tape()
        with pytest.raises(ShapeMismatchError) as exc:
            ad.add(const(tape, np.zeros((2, 3))), const(tape, np.zeros((3, 2))))
        assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        x = const(tape, np.arange(9.0).reshape(3, 3))
        out = ad.matmul(const(tape, np.eye(3)), x)
        assert np.array_equal(out.data, x.data)

    def test_small_product(self):
        tape = Tape()
        out = ad.matmul(const(tape, [[1.0, 2.0], [3.0, 4.0]]), const(tape, [[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_dimension_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeMismatchError):
            ad.matmul(const(tape, np.zeros((2, 3))), const(tape, np.zeros((2, 3))))

    def test_gradcheck_random_4x5_5x3(self):
        rng = np.random.default_rng(7)
        a = Parameter("a", rng.standard_normal((4, 5)))
        b = Parameter("b", rng.standard_normal((5, 3)))
        c = rng.standard_normal((4, 3))

        def f(tape):
            out = ad.matmul(tape.leaf(a), tape.leaf(b))
            return ad.sum_all(ad.mul_elementwise(out, tape.constant(c)))

        assert grad_check(f, [a, b]) <= 1e-6


class TestGatherScatter:
    def test_identity_permutation(self):
        tape = Tape()
        a = const(tape, np.arange(12.0).reshape(4, 3))
        assert np.array_equal(ad.gather_rows(a, [0, 1, 2, 3]).data, a.data)

    def test_duplicate_index_adjoint_sums(self):
        p = Parameter("p", [[1.0], [2.0], [3.0]])
        tape = Tape()
        out = ad.gather_rows(tape.leaf(p), [2, 2])
        assert np.array_equal(out.data, [[3.0], [3.0]])
        backward(ad.sum_all(out))
        assert np.array_equal(p.grad, [[0.0], [0.0], [2.0]])

    def test_index_out_of_range(self):
        tape = Tape()
        with pytest.raises(IndexRangeError):
            ad.gather_rows(const(tape, np.zeros((3, 2))), [0, 3])

    def test_gradcheck_gather(self):
        rng = np.random.default_rng(3)
        p = Parameter("p", rng.standard_normal((6, 2)))
        idx = np.array([5, 0, 0, 2, 4])
        c = rng.standard_normal((5, 2))

        def f(tape):
            return ad.sum_all(ad.mul_elementwise(ad.gather_rows(tape.leaf(p), idx), tape.constant(c)))

        assert grad_check(f, [p]) <= 1e-6


class TestSegmentSum:
    def test_one_segment_per_row(self):
        tape = Tape()
        a = const(tape, np.arange(8.0).reshape(4, 2))
        assert np.array_equal(ad.segment_sum(a, [0, 1, 2, 3], 4).data, a.data)

    def test_all_rows_one_segment(self):
        tape = Tape()
        out = ad.segment_sum(const(tape, [[1.0], [2.0], [3.0]]), [0, 0, 0], 1)
        assert np.array_equal(out.data, [[6.0]])

    def test_unsorted_segments_match_sorted(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((10, 3))
        seg = np.array([3, 0, 3, 1, 0, 2, 1, 3, 2, 0])
        tape = Tape()
        got = ad.segment_sum(const(tape, a), seg, 4).data
        want = np.zeros((4, 3))
        for row, s in zip(a, seg):
            want[s] += row
        assert np.allclose(got, want, atol=1e-15)

    def test_empty_input(self):
        tape = Tape()
        out = ad.segment_sum(const(tape, np.zeros((0, 3))), np.zeros(0, dtype=int), 2)
        assert np.array_equal(out.data, np.zeros((2, 3)))

    def test_segment_id_out_of_range(self):
        tape = Tape()
        with pytest.raises(IndexRangeError):
            ad.segment_sum(const(tape, np.zeros((2, 2))), [0, 2], 2)

    def test_segment_gather_adjoint_pair(self):
        """Gradient of segment_sum is a gather; checked by finite differences."""
        rng = np.random.default_rng(5)
        p = Parameter("p", rng.standard_normal((7, 2)))
        seg = rng.integers(0, 3, size=7)
        c = rng.standard_normal((3, 2))

        def f(tape):
            return ad.sum_all(ad.mul_elementwise(ad.segment_sum(tape.leaf(p), seg, 3), tape.constant(c)))

        assert grad_check(f, [p]) <= 1e-6
        p.zero_grad()
        backward(f(Tape()))
        assert np.allclose(p.grad, c[seg], atol=1e-15)


class TestNorms:
    def test_l2_zero(self):
        tape = Tape()
        assert ad.l2_norm(const(tape, [0.0, 0.0, 0.0])).item() == 0.0

    def test_l2_pythagorean(self):
        tape = Tape()
        assert ad.l2_norm(const(tape, [3.0, 4.0, 0.0])).item() == 5.0

    def test_l2_zero_adjoint_is_zero(self):
        p = Parameter("p", [0.0, 0.0, 0.0])
        backward(ad.l2_norm(Tape().leaf(p)))
        assert np.array_equal(p.grad, np.zeros(3))

    def test_l2_gradcheck_nonzero(self):
        rng = np.random.default_rng(9)
        p = Parameter("p", rng.standard_normal(3) + 2.0)
        assert grad_check(lambda tape: ad.l2_norm(tape.leaf(p)), [p]) <= 1e-6

    def test_rows_l2(self):
        tape = Tape()
        out = ad.rows_l2_norm(const(tape, [[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]]))
        assert np.array_equal(out.data, [5.0, 0.0])


class TestActivationKernels:
    def test_against_naive_formulas(self):
        xs = np.linspace(-20, 20, 201)
        naive = {
            "silu": lambda x: x / (1 + math.exp(-x)),
            "mish": lambda x: x * math.tanh(math.log1p(math.exp(x))),
            "shifted_softplus": lambda x: math.log(0.5 * math.exp(x) + 0.5),
            "bent_identity": lambda x: (math.sqrt(x * x + 1) - 1) / 2 + x,
        }
        for kind, fn in naive.items():
            got = ad.activation_value(kind, xs)
            want = np.array([fn(float(x)) for x in xs])
            assert np.allclose(got, want, atol=1e-12), kind

    def test_overflow_safe_at_700(self):
        for kind in ad.ACTIVATION_KINDS:
            vals = ad.activation_value(kind, np.array([-700.0, 700.0]))
            assert np.all(np.isfinite(vals)), kind
        assert ad.activation_value("silu", np.array([700.0]))[0] == pytest.approx(700.0)
        assert ad.activation_value("shifted_softplus", np.array([-700.0]))[0] == pytest.approx(-math.log(2))

    def test_unary_matches_activation_value(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 3)) * 5
        for kind in ad.ACTIVATION_KINDS:
            tape = Tape()
            assert np.array_equal(ad.unary(kind, const(tape, x)).data, ad.activation_value(kind, x))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="relu"):
            ad.unary("relu", const(Tape(), [1.0]))


class TestBackward:
    def test_requires_scalar_output(self):
        tape = Tape()
        with pytest.raises(ShapeMismatchError):
            backward(const(tape, [1.0, 2.0]))

    def test_accumulates_across_calls(self):
        p = Parameter("p", [2.0])
        p.zero_grad()
        for _ in range(2):
            tape = Tape()
            x = tape.leaf(p)
            backward(ad.sum_all(ad.mul_elementwise(x, x)))
        # two backward calls of d(x^2)/dx = 4 each, no zeroing in between
        assert np.allclose(p.grad, [8.0])

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ValueError, match="different tapes"):
            ad.add(const(t1, [1.0]), const(t2, [1.0]))

    def test_linearity_of_gradients(self):
        rng = np.random.default_rng(21)
        p = Parameter("p", rng.standard_normal(4))
        ca, cb = rng.standard_normal(4), rng.standard_normal(4)
        alpha, beta = 0.7, -1.3

        def grad_of(build):
            p.zero_grad()
            backward(build(Tape()))
            return p.grad.copy()

        f = lambda t: ad.sum_all(ad.mul_elementwise(t.leaf(p), t.constant(ca)))
        g = lambda t: ad.sum_all(ad.mul_elementwise(ad.unary("silu", t.leaf(p)), t.constant(cb)))
        combo = lambda t: ad.add(ad.scale(f(t), alpha), ad.scale(g(t), beta))
        lhs = grad_of(combo)
        rhs = alpha * grad_of(f) + beta * grad_of(g)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(123)
            p = Parameter("p", rng.standard_normal((5, 4)))
            seg = rng.integers(0, 3, size=5)
            tape = Tape()
            x = ad.unary("mish", tape.leaf(p))
            out = ad.segment_sum(x, seg, 3)
            loss = ad.sum_all(ad.mul_elementwise(out, tape.constant(rng.standard_normal((3, 4)))))
            backward(loss)
            return loss.item(), p.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)


class TestTapeReplay:
    def test_replay_is_bit_exact(self):
        rng = np.random.default_rng(31)
        p = Parameter("p", rng.standard_normal((4, 4)))
        tape = Tape()
        x = tape.leaf(p)
        out = ad.matmul(ad.unary("bent_identity", x), x)
        ad.segment_sum(out, [0, 1, 0, 1], 2)
        assert tape.replay() == 0.0


class TestGradCheck:
    def test_square_at_three(self):
        p = Parameter("p", 3.0)

        def f(tape):
            x = tape.leaf(p)
            return ad.mul_elementwise(x, x)

        assert grad_check(f, [p]) <= 1e-10
        p.zero_grad()
        backward(f(Tape()))
        assert p.grad == pytest.approx(6.0, abs=1e-12)

    def test_constant_function_zero_gradient(self):
        p = Parameter("p", [1.0, 2.0])

        def f(tape):
            tape.leaf(p)
            return tape.constant(4.2)

        assert grad_check(f, [p]) == 0.0
        p.zero_grad()
        backward(f(Tape()))
        assert np.array_equal(p.grad, np.zeros(2))

    def test_primitive_sweep_small(self):
        from dipolegnn.checks import check_gradients_primitives

        res = check_gradients_primitives(n_instances=10, seed=4)
        assert res.passed, res.line()
