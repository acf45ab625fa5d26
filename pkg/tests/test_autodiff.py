"""Tensor engine tests: op semantics against independent oracles, gradients
against central finite differences, Adam against a hand-stepped recurrence."""

import math

import numpy as np
import pytest

import fakevid.autodiff as ad
from fakevid.autodiff import (
    AdamState,
    GraphError,
    NumericsError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    grad_check,
    zero_grad,
)


def numeric_grad(fragment, tensor, h=1e-5):
    """Central finite differences of a scalar fragment wrt one tensor."""
    flat = tensor.values.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        f_plus = fragment().item()
        flat[i] = keep - h
        f_minus = fragment().item()
        flat[i] = keep
        out[i] = (f_plus - f_minus) / (2 * h)
    return out.reshape(tensor.values.shape)


def assert_grad_matches(fragment, tensors, tol=1e-4):
    zero_grad(tensors)
    backward(fragment())
    for t in tensors:
        numeric = numeric_grad(fragment, t)
        denom = np.maximum(np.maximum(np.abs(t.grad), np.abs(numeric)), 1e-3)
        rel = np.abs(t.grad - numeric) / denom
        assert rel.max() < tol, f"rel err {rel.max():.2e}"


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, b).values, b.values)

    def test_selector_row(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0], [7.0]])
        assert ad.matmul(a, b).values.tolist() == [[5.0], [0.0]]

    def test_against_triple_loop_oracle(self, rng):
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        got = ad.matmul(Tensor(a), Tensor(b)).values
        assert np.abs(got - expected).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform_input(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0])).values
        assert np.abs(out - 1 / 3).max() < 1e-15

    def test_shift_invariance(self):
        for c in (-50.0, 0.0, 3.7, 1e4):
            out = ad.softmax(Tensor([c, c + math.log(2)])).values
            assert np.abs(out - [1 / 3, 2 / 3]).max() < 1e-12

    def test_against_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        assert np.abs(ad.softmax(Tensor(x)).values - expected).max() < 1e-12

    def test_rows_form_simplex(self, rng):
        x = Tensor(rng.uniform(-5, 5, (4, 7)))
        s = ad.softmax(x).values
        assert (s >= 0).all()
        assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-12


class TestCrossEntropy:
    @pytest.mark.parametrize("vocab", [2, 8, 100])
    def test_uniform_logits_equal_log_vocab(self, vocab):
        logits = Tensor(np.zeros((3, vocab)))
        loss = ad.cross_entropy_logits(logits, [0, 1, vocab - 1])
        assert abs(loss.item() - math.log(vocab)) < 1e-9

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((2, 8))
        logits[0, 3] = 1e6
        logits[1, 5] = 1e6
        assert ad.cross_entropy_logits(Tensor(logits), [3, 5]).item() < 1e-9

    def test_against_per_position_oracle(self, rng):
        logits = rng.uniform(-2, 2, (4, 10))
        targets = [3, 0, 9, 2]
        per_pos = []
        for i, t in enumerate(targets):
            row = logits[i]
            per_pos.append(-(row[t] - math.log(np.exp(row).sum())))
        expected = sum(per_pos) / len(per_pos)
        got = ad.cross_entropy_logits(Tensor(logits), targets).item()
        assert abs(got - expected) < 1e-10

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ad.cross_entropy_logits(Tensor(np.zeros((2, 4))), [0, 4])


class TestBinaryCrossEntropy:
    def test_half_probability(self):
        assert abs(ad.binary_cross_entropy(Tensor(0.5), 1).item() - math.log(2)) < 1e-12
        assert abs(ad.binary_cross_entropy(Tensor(0.5), 0).item() - math.log(2)) < 1e-12

    def test_saturated_correct_clamps(self):
        loss = ad.binary_cross_entropy(Tensor(1.0), 1).item()
        assert abs(loss + math.log(1.0 - 1e-7)) < 1e-15
        assert loss < 1e-6

    def test_direct_formula(self):
        assert abs(ad.binary_cross_entropy(Tensor(0.2), 0).item() + math.log(0.8)) < 1e-12


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares_analytic(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(ad.sum_all(ad.mul(x, x)))
        assert np.allclose(x.grad, [2.0, -4.0, 6.0], atol=1e-14)

    def test_composite_graph_matches_finite_differences(self, rng):
        w = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        x = Tensor(rng.uniform(-1, 1, (2, 4)))

        def fragment():
            h = ad.relu(ad.add(ad.matmul(x, w), b))
            return ad.mean_all(ad.mul(ad.softmax(h), h))

        assert_grad_matches(fragment, [w, b])

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(GraphError):
            backward(x)

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.sum_all(x)
        backward(loss)
        backward(loss)
        assert np.array_equal(x.grad, [2.0, 2.0])
        zero_grad([x])
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_shared_node_gradient(self):
        # y = x + x should give gradient 2 for each component.
        x = Tensor([1.0, 1.0], requires_grad=True)
        backward(ad.sum_all(ad.add(x, x)))
        assert np.array_equal(x.grad, [2.0, 2.0])


class TestNumericsPolicy:
    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflow_names_producing_op(self):
        big = Tensor([1e308])
        with pytest.raises(NumericsError, match="mul"):
            ad.mul(big, 10.0)

    def test_nan_input_rejected_at_leaf(self):
        with pytest.raises(NumericsError):
            Tensor([np.nan])


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = Tensor([0.0], requires_grad=True)
        state = AdamState.for_params([p], lr=0.1)
        adam_step([p], [np.array([1.0])], state)
        assert abs(p.values[0] + 0.1 / (1 + 1e-8)) < 1e-12
        assert state.t == 1

    def test_zero_grad_leaves_parameter_unchanged(self):
        p = Tensor([3.0, -4.0], requires_grad=True)
        state = AdamState.for_params([p], lr=0.5)
        adam_step([p], [np.zeros(2)], state)
        assert np.array_equal(p.values, [3.0, -4.0])
        assert state.t == 1

    def test_three_steps_match_reference_recurrence(self):
        grads = [np.array([0.3, -1.2]), np.array([0.05, 0.4]), np.array([-0.7, 0.9])]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8

        # Hand-rolled reference recurrence.
        theta = np.array([0.5, -0.25])
        m = np.zeros(2)
        v = np.zeros(2)
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

        p = Tensor([0.5, -0.25], requires_grad=True)
        state = AdamState.for_params([p], lr=lr)
        for g in grads:
            adam_step([p], [g], state)
        assert np.abs(p.values - theta).max() < 1e-12
        assert state.t == 3

    def test_shape_mismatch(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        state = AdamState.for_params([p])
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(3)], state)

    def test_bit_reproducible(self, rng):
        grads = [rng.uniform(-1, 1, 5) for _ in range(4)]

        def run():
            p = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
            state = AdamState.for_params([p], lr=0.02)
            for g in grads:
                adam_step([p], [g.copy()], state)
            return p.values.copy()

        a, b = run(), run()
        assert np.array_equal(a, b)


class TestGradCheck:
    def test_linear_layer_passes(self, rng):
        w = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 2), requires_grad=True)
        x = Tensor(rng.uniform(-1, 1, (4, 3)))
        report = grad_check(
            lambda: ad.mean_all(ad.relu(ad.add(ad.matmul(x, w), b))),
            [("weight", w), ("bias", b)],
        )
        assert report.passed
        assert report.max_rel_err < 1e-4

    def test_corrupted_backward_rule_fails(self, rng):
        # Negative control: a node whose recorded gradient rule is wrong by 2x
        # must be flagged by the checker.
        x = Tensor(rng.uniform(0.5, 1.5, (3,)), requires_grad=True)

        def bad_double():
            return ad._make(x.values * 2.0, (x,), lambda g: (g * 4.0,), "bad_double")

        report = grad_check(lambda: ad.sum_all(bad_double()), [("x", x)])
        assert not report.passed


OP_CASES = {}


def op_case(name):
    def deco(fn):
        OP_CASES[name] = fn
        return fn

    return deco


@op_case("add")
def _(x, y):
    return ad.add(x, y)


@op_case("sub")
def _(x, y):
    return ad.sub(x, y)


@op_case("mul")
def _(x, y):
    return ad.mul(x, y)


@op_case("matmul")
def _(x, y):
    return ad.matmul(x, ad.transpose(y))


@op_case("softmax")
def _(x, y):
    return ad.mul(ad.softmax(x), y)


@op_case("masked_softmax")
def _(x, y):
    valid = np.ones(x.shape, dtype=bool)
    valid[:, -1] = False
    return ad.mul(ad.masked_softmax(x, valid), y)


@op_case("layer_norm")
def _(x, y):
    gain = Tensor(np.ones(x.shape[1]))
    bias = Tensor(np.zeros(x.shape[1]))
    return ad.mul(ad.layer_norm(x, gain, bias), y)


@op_case("relu")
def _(x, y):
    return ad.mul(ad.relu(x), y)


@op_case("clamp")
def _(x, y):
    return ad.mul(ad.clamp(x, -0.5, 0.5), y)


@op_case("concat_slice")
def _(x, y):
    joined = ad.concat_cols([ad.slice_cols(x, 0, 2), ad.slice_cols(x, 2, x.shape[1])])
    return ad.mul(joined, y)


@op_case("gather_rows")
def _(x, y):
    return ad.mul(ad.gather_rows(x, [1, 0, 1]), ad.gather_rows(y, [0, 1, 2]))


@op_case("mean_rows")
def _(x, y):
    valid = np.array([True, False, True])
    return ad.mul(ad.mean_rows(x, valid), ad.mean_rows(y))


class TestEveryOpAgainstFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(OP_CASES))
    def test_op(self, name, rng):
        x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        y = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        build = OP_CASES[name]
        assert_grad_matches(lambda: ad.mean_all(build(x, y)), [x, y])

    def test_bias_broadcast_add(self, rng):
        x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        assert_grad_matches(lambda: ad.mean_all(ad.add(x, b)), [x, b])

    def test_cross_entropy_gradient(self, rng):
        logits = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
        assert_grad_matches(lambda: ad.cross_entropy_logits(logits, [0, 4, 2]), [logits])

    def test_bce_gradient(self):
        p = Tensor(0.3, requires_grad=True)
        assert_grad_matches(lambda: ad.binary_cross_entropy(p, 1), [p])
        assert_grad_matches(lambda: ad.binary_cross_entropy(p, 0), [p])

    def test_element_and_reshape(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 6)), requires_grad=True)
        assert_grad_matches(
            lambda: ad.element(ad.reshape(x, (3, 4)), (2, 1)), [x]
        )
