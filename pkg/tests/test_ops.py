import numpy as np
import pytest

from reid_forge import ops
from reid_forge.errors import (
    ContractError,
    DegenerateWeightsError,
    NumericError,
    ShapeError,
)
from reid_forge.gradcheck import finite_difference_check
from reid_forge.tensor import Tape, Tensor, backpropagate, check_finite, parameter


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestElementwise:
    def test_relu_definition(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rand(rng, 4, 7)
            out = ops.relu(None, Tensor(x)).data
            np.testing.assert_array_equal(out[x > 0], x[x > 0])
            assert (out[x <= 0] == 0).all()

    def test_maximum_first_argument_wins_ties(self):
        a = parameter(np.array([1.0, 2.0, 5.0]))
        b = parameter(np.array([1.0, 3.0, 4.0]))
        tape = Tape()
        out = ops.maximum(tape, a, b)
        loss = ops.sum_all(tape, out)
        backpropagate(tape, loss, params=(a, b))
        np.testing.assert_array_equal(a.grad, [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0, 0.0])

    def test_add_broadcast(self):
        rng = np.random.default_rng(1)
        a = parameter(rand(rng, 3, 4))
        b = parameter(rand(rng, 4))
        tape = Tape()
        out = ops.add(tape, a, b)
        loss = ops.sum_all(tape, out)
        backpropagate(tape, loss, params=(a, b))
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


class TestBackpropagate:
    def test_sum_gives_ones(self):
        p = parameter(np.arange(6.0).reshape(2, 3))
        tape = Tape()
        loss = ops.sum_all(tape, p)
        backpropagate(tape, loss, params=(p,))
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_dead_branch_zero_gradient(self):
        p = parameter(np.arange(4.0))
        tape = Tape()
        scaled = ops.scale(tape, p, 0.0)
        loss = ops.sum_all(tape, scaled)
        backpropagate(tape, loss, params=(p,))
        np.testing.assert_array_equal(p.grad, np.zeros(4))

    def test_unreached_parameter_zero_filled(self):
        used = parameter(np.ones(3))
        unused = parameter(np.ones(5))
        tape = Tape()
        loss = ops.sum_all(tape, used)
        backpropagate(tape, loss, params=(used, unused))
        np.testing.assert_array_equal(unused.grad, np.zeros(5))

    def test_non_scalar_loss_rejected(self):
        p = parameter(np.ones(3))
        tape = Tape()
        out = ops.relu(tape, p)
        with pytest.raises(ContractError):
            backpropagate(tape, out, params=(p,))

    def test_gradient_accumulates_across_calls(self):
        p = parameter(np.ones(2))
        for _ in range(2):
            tape = Tape()
            loss = ops.sum_all(tape, p)
            backpropagate(tape, loss, params=(p,))
        np.testing.assert_array_equal(p.grad, np.full(2, 2.0))

    def test_reused_tensor_accumulates(self):
        p = parameter(np.array([3.0]))
        tape = Tape()
        doubled = ops.add(tape, p, p)
        loss = ops.sum_all(tape, doubled)
        backpropagate(tape, loss, params=(p,))
        np.testing.assert_array_equal(p.grad, [2.0])

    def test_nan_trapped(self):
        with pytest.raises(NumericError):
            check_finite("probe", np.array([1.0, np.nan]))
        with pytest.raises(NumericError):
            check_finite("probe", np.array([np.inf]))


class TestGradcheckPrimitives:
    """Spot finite-difference checks; the wide shape sweep runs in acceptance."""

    def test_add_mul_maximum(self):
        rng = np.random.default_rng(2)
        for shape in [(3,), (2, 4), (2, 3, 2)]:
            a0, b0 = rand(rng, *shape), rand(rng, *shape)
            b0 += 0.2 * np.sign(b0 - a0 + 1e-9)  # keep max ties away
            for op in (ops.add, ops.mul, ops.maximum):
                err = finite_difference_check(
                    lambda tape, t: ops.sum_all(tape, op(tape, t[0], t[1])),
                    [a0, b0],
                )
                assert err < 1e-4

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 4, 5)
        x += 0.3 * np.sign(x)
        err = finite_difference_check(
            lambda tape, t: ops.sum_all(tape, ops.relu(tape, t[0])), [x]
        )
        assert err < 1e-4

    def test_linear(self):
        rng = np.random.default_rng(4)
        err = finite_difference_check(
            lambda tape, t: ops.sum_all(tape, ops.linear(tape, t[0], t[1], t[2])),
            [rand(rng, 5, 3), rand(rng, 3, 4), rand(rng, 4)],
        )
        assert err < 1e-4

    def test_conv2d(self):
        rng = np.random.default_rng(5)
        err = finite_difference_check(
            lambda tape, t: ops.sum_all(
                tape, ops.conv2d(tape, t[0], t[1], t[2], stride=2, padding=1)
            ),
            [rand(rng, 2, 3, 6, 6), rand(rng, 4, 3, 3, 3), rand(rng, 4)],
        )
        assert err < 1e-4

    def test_pools(self):
        rng = np.random.default_rng(6)
        x = rand(rng, 2, 3, 4, 4)
        w = rng.uniform(0.5, 2.0, size=(2, 4, 4))
        err = finite_difference_check(
            lambda tape, t: ops.sum_all(tape, ops.global_avg_pool(tape, t[0])), [x]
        )
        assert err < 1e-4
        err = finite_difference_check(
            lambda tape, t: ops.sum_all(tape, ops.weighted_pool(tape, t[0], t[1])),
            [x, w],
        )
        assert err < 1e-4

    def test_losses(self):
        rng = np.random.default_rng(7)
        logits = rand(rng, 6, 5)
        labels = rng.integers(0, 5, size=6)
        err = finite_difference_check(
            lambda tape, t: ops.softmax_cross_entropy(tape, t[0], labels), [logits]
        )
        assert err < 1e-4
        targets = rng.integers(0, 2, size=(6, 4)).astype(np.float64)
        err = finite_difference_check(
            lambda tape, t: ops.sigmoid_bce(tape, t[0], targets), [rand(rng, 6, 4)]
        )
        assert err < 1e-4

    def test_pairwise_sq_distances(self):
        rng = np.random.default_rng(8)
        err = finite_difference_check(
            lambda tape, t: ops.sum_all(tape, ops.pairwise_sq_distances(tape, t[0])),
            [rand(rng, 5, 3)],
        )
        assert err < 1e-4

    def test_fault_injection_detected(self):
        # A gradient corrupted by one percent must show up near 1e-2.
        def bad_square(tape, tensors):
            (x,) = tensors
            out = ops.mul(tape, x, x)
            if tape is not None:
                node = tape.nodes[-1]
                original = node.backward

                def corrupted(grad):
                    return tuple(g * 1.01 for g in original(grad))

                node.backward = corrupted
            return ops.sum_all(tape, out)

        rng = np.random.default_rng(9)
        err = finite_difference_check(bad_square, [rng.uniform(1.0, 2.0, size=6)])
        assert 3e-3 < err < 3e-2

    def test_quadratic_near_exact(self):
        err = finite_difference_check(
            lambda tape, t: ops.sum_all(tape, ops.mul(tape, t[0], t[0])),
            [np.array([3.0])],
        )
        assert err < 1e-9


class TestPoolCollapse:
    def test_all_ones_equals_average_bitwise(self):
        rng = np.random.default_rng(10)
        x = rand(rng, 3, 5, 8, 8)
        avg = ops.global_avg_pool(None, Tensor(x)).data
        pooled = ops.weighted_pool(None, Tensor(x), Tensor(np.ones((3, 8, 8)))).data
        assert (pooled == avg).all()

    @pytest.mark.parametrize("c", [0.25, 1.0, 1.3, 64.0])
    def test_any_constant_collapses(self, c):
        rng = np.random.default_rng(11)
        x = rand(rng, 2, 4, 6, 6)
        avg = ops.global_avg_pool(None, Tensor(x)).data
        pooled = ops.weighted_pool(None, Tensor(x), Tensor(np.full((2, 6, 6), c))).data
        assert (pooled == avg).all()

    def test_mixed_batch_collapses_per_image(self):
        rng = np.random.default_rng(12)
        x = rand(rng, 2, 3, 4, 4)
        w = np.ones((2, 4, 4))
        w[1] = rng.uniform(1.0, 2.0, size=(4, 4))
        pooled = ops.weighted_pool(None, Tensor(x), Tensor(w)).data
        avg = ops.global_avg_pool(None, Tensor(x)).data
        assert (pooled[0] == avg[0]).all()
        assert not (pooled[1] == avg[1]).all()

    def test_nonuniform_weights_shift_output(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0] = [[0.0, 0.0], [0.0, 4.0]]
        w = np.array([[[1.0, 1.0], [1.0, 3.0]]])
        out = ops.weighted_pool(None, Tensor(x), Tensor(w)).data
        assert out[0, 0] == pytest.approx(12.0 / 6.0)

    def test_zero_weight_sum_rejected(self):
        x = np.ones((2, 1, 2, 2))
        w = np.ones((2, 2, 2))
        w[1] = 0.0
        with pytest.raises(DegenerateWeightsError, match="1"):
            ops.weighted_pool(None, Tensor(x), Tensor(w))

    def test_negative_weights_rejected(self):
        x = np.ones((1, 1, 2, 2))
        w = -np.ones((1, 2, 2))
        with pytest.raises(ContractError):
            ops.weighted_pool(None, Tensor(x), Tensor(w))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.weighted_pool(None, Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 4, 4))))


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(13)
        x = rng.normal(5.0, 3.0, size=(32, 6))
        state = ops.BatchNormState.create(6)
        gamma = Tensor(np.ones(6))
        beta = Tensor(np.zeros(6))
        out = ops.batchnorm_vec(None, Tensor(x), gamma, beta, state, training=True).data
        assert np.abs(out.mean(axis=0)).max() < 1e-6
        # normalized with the biased variance and the 1e-5 epsilon floor
        assert np.abs(out.var(axis=0) - 1.0).max() < 1e-4

    def test_eval_mode_is_affine(self):
        rng = np.random.default_rng(14)
        state = ops.BatchNormState.create(4)
        gamma = Tensor(rng.uniform(0.5, 2.0, 4))
        beta = Tensor(rand(rng, 4))
        for _ in range(5):
            ops.batchnorm_vec(
                None, Tensor(rng.normal(2.0, 1.5, (16, 4))), gamma, beta, state, training=True
            )
        x = rand(rng, 8, 4)
        y = ops.batchnorm_vec(None, Tensor(x), gamma, beta, state, training=False).data
        scale = gamma.data / np.sqrt(state.running_var + state.eps)
        shift = beta.data - state.running_mean * scale
        np.testing.assert_allclose(y, x * scale + shift, rtol=1e-12)
        # eval mode must not move the running statistics
        before = state.running_mean.copy()
        ops.batchnorm_vec(None, Tensor(x), gamma, beta, state, training=False)
        np.testing.assert_array_equal(state.running_mean, before)

    def test_running_stats_converge(self):
        rng = np.random.default_rng(15)
        state = ops.BatchNormState.create(3)
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        for _ in range(200):
            x = rng.normal(loc=[1.0, -2.0, 0.5], scale=[0.5, 1.0, 2.0], size=(64, 3))
            ops.batchnorm_vec(None, Tensor(x), gamma, beta, state, training=True)
        np.testing.assert_allclose(state.running_mean, [1.0, -2.0, 0.5], atol=0.15)
        np.testing.assert_allclose(state.running_var, [0.25, 1.0, 4.0], rtol=0.25)

    def test_single_row_batch_rejected_in_training(self):
        state = ops.BatchNormState.create(3)
        with pytest.raises(ContractError):
            ops.batchnorm_vec(
                None, Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                state, training=True,
            )

    def test_train_gradcheck(self):
        rng = np.random.default_rng(16)

        def fn(tape, tensors):
            state = ops.BatchNormState.create(3)
            out = ops.batchnorm_vec(
                tape, tensors[0], tensors[1], tensors[2], state, training=True
            )
            return ops.sum_all(tape, ops.mul(tape, out, out))

        err = finite_difference_check(
            fn, [rand(rng, 6, 3), rng.uniform(0.5, 1.5, 3), rand(rng, 3)]
        )
        assert err < 1e-4


class TestClosedFormLosses:
    def test_uniform_logits_cross_entropy(self):
        for n in (2, 5, 9):
            logits = np.zeros((4, n))
            loss = ops.softmax_cross_entropy(None, Tensor(logits), np.zeros(4, dtype=int))
            assert abs(loss.data - np.log(n)) < 1e-12
            shifted = ops.softmax_cross_entropy(
                None, Tensor(np.full((4, n), 3.7)), np.zeros(4, dtype=int)
            )
            assert abs(shifted.data - np.log(n)) < 1e-12

    def test_zero_logits_bce(self):
        targets = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss = ops.sigmoid_bce(None, Tensor(np.zeros((2, 2))), targets)
        assert abs(loss.data - np.log(2)) < 1e-12

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ContractError):
            ops.softmax_cross_entropy(None, Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_bce_extreme_logits_stable(self):
        logits = np.array([[800.0, -800.0]])
        targets = np.array([[1.0, 0.0]])
        loss = ops.sigmoid_bce(None, Tensor(logits), targets)
        assert loss.data == 0.0

    def test_pairwise_sq_distances_values(self):
        x = np.array([[0.0, 0.0], [3.0, 4.0]])
        d2 = ops.pairwise_sq_distances(None, Tensor(x)).data
        np.testing.assert_allclose(d2, [[0.0, 25.0], [25.0, 0.0]], atol=1e-15)
