"""Tensor engine tests: forward semantics against naive oracles, backward
rules against central finite differences, and tape/state invariants."""
import numpy as np
import pytest

from gestfactor.tensor import (
    BatchNormState,
    NumericError,
    ShapeError,
    StateError,
    Tape,
    TapeError,
    Tensor,
    absolute,
    batchnorm1d,
    conv1d,
    div,
    exp,
    finite_difference_check,
    log,
    log_softmax,
    mul,
    narrow,
    relu,
    reshape,
    same_padding,
    sqrt,
    transpose,
    tsum,
    tmean,
)


def naive_conv1d(x, kernel, bias=None, pad_left=None, pad_right=None, dilation=1):
    """Scalar quadruple-loop transcription of the conv1d contract."""
    batch, c_in, length = x.shape
    k, _, c_out = kernel.shape
    span = (k - 1) * dilation + 1
    pl = (span - 1) // 2 if pad_left is None else pad_left
    pr = (span - 1 - (span - 1) // 2) if pad_right is None else pad_right
    padded = np.zeros((batch, c_in, length + pl + pr))
    padded[:, :, pl:pl + length] = x
    l_out = length + pl + pr - span + 1
    out = np.zeros((batch, c_out, l_out))
    for b in range(batch):
        for co in range(c_out):
            for t in range(l_out):
                acc = 0.0 if bias is None else bias[co]
                for ci in range(c_in):
                    for tap in range(k):
                        acc += kernel[tap, ci, co] * padded[b, ci, t + tap * dilation]
                out[b, co, t] = acc
    return out


class TestTensorBasics:
    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan])
        with pytest.raises(NumericError):
            Tensor([np.inf])

    def test_division_by_zero_is_an_error(self):
        with pytest.raises(NumericError):
            div(Tensor([1.0]), Tensor([0.0]))

    def test_log_of_zero_is_an_error(self):
        with pytest.raises(NumericError):
            log(Tensor([0.0]))

    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 3.0

    def test_item_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()


class TestTape:
    def test_second_backward_is_an_error(self):
        x = Tensor([2.0])
        with Tape() as tape:
            y = tsum(mul(x, x))
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_nested_tape_is_an_error(self):
        with Tape():
            with pytest.raises(TapeError):
                with Tape():
                    pass

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor([3.0])
        with Tape() as tape:
            y = tsum(mul(x, x) + x)  # d/dx (x^2 + x) = 2x + 1
        grads = tape.backward(y)
        assert grads[x] == pytest.approx([7.0])

    def test_untouched_tensor_has_no_gradient(self):
        x, z = Tensor([1.0]), Tensor([1.0])
        with Tape() as tape:
            y = tsum(x)
        grads = tape.backward(y)
        assert grads.get(z) is None
        with pytest.raises(KeyError):
            grads[z]


class TestConv1d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 7)))
        kernel = Tensor(np.eye(3)[None, :, :])
        assert np.array_equal(conv1d(x, kernel).data, x.data)

    def test_even_kernel_against_oracle(self):
        # pad split is floor((K-1)/2) left = 0, ceil = 1 right for K=2
        x = np.array([[[1.0, 0.0, 1.0]]])
        kernel = np.array([1.0, 2.0]).reshape(2, 1, 1)
        out = conv1d(Tensor(x), Tensor(kernel)).data
        expected = naive_conv1d(x, kernel)
        assert np.array_equal(out, expected)
        assert np.array_equal(out.ravel(), [1.0, 2.0, 1.0])

    def test_zero_input_broadcasts_bias(self):
        x = Tensor(np.zeros((2, 3, 5)))
        kernel = Tensor(np.random.default_rng(1).standard_normal((3, 3, 4)))
        bias = Tensor([1.0, -2.0, 0.5, 3.0])
        out = conv1d(x, kernel, bias).data
        assert np.allclose(out, bias.data[None, :, None])

    @pytest.mark.parametrize("k", [1, 2, 3, 5, 15, 41, 64])
    def test_same_padding_preserves_length(self, k):
        rng = np.random.default_rng(k)
        x = Tensor(rng.standard_normal((1, 2, 9)))
        kernel = Tensor(rng.standard_normal((k, 2, 3)))
        assert conv1d(x, kernel).shape == (1, 3, 9)

    @pytest.mark.parametrize("k,dilation", [(3, 1), (4, 1), (5, 2), (3, 4)])
    def test_random_instances_match_oracle(self, k, dilation):
        rng = np.random.default_rng(10 * k + dilation)
        x = rng.standard_normal((2, 3, 11))
        kernel = rng.standard_normal((k, 3, 2))
        bias = rng.standard_normal(2)
        out = conv1d(Tensor(x), Tensor(kernel), Tensor(bias), dilation=dilation).data
        assert np.allclose(out, naive_conv1d(x, kernel, bias, dilation=dilation),
                           atol=1e-12)

    def test_explicit_causal_padding_matches_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 9))
        kernel = rng.standard_normal((4, 2, 2))
        out = conv1d(Tensor(x), Tensor(kernel), pad_left=3, pad_right=0).data
        assert np.allclose(out, naive_conv1d(x, kernel, pad_left=3, pad_right=0),
                           atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        kernel = Tensor(rng.standard_normal((5, 2, 3)))
        x, y = rng.standard_normal((1, 2, 8)), rng.standard_normal((1, 2, 8))
        a, b = 0.7, -1.3
        combined = conv1d(Tensor(a * x + b * y), kernel).data
        separate = a * conv1d(Tensor(x), kernel).data + b * conv1d(Tensor(y), kernel).data
        assert np.allclose(combined, separate, atol=1e-12)

    def test_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 4)))
        with pytest.raises(ShapeError):
            conv1d(x, Tensor(np.zeros((3, 5, 2))))  # channel mismatch
        with pytest.raises(ShapeError):
            conv1d(Tensor(np.zeros((1, 2, 0))), Tensor(np.zeros((3, 2, 2))))

    def test_zero_grad_out_gives_zero_grads(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 2, 6)))
        kernel = Tensor(rng.standard_normal((3, 2, 2)))
        bias = Tensor(rng.standard_normal(2))
        with Tape() as tape:
            out = conv1d(x, kernel, bias)
            loss = tsum(mul(out, Tensor(np.zeros(out.shape))))
        grads = tape.backward(loss)
        assert np.allclose(grads[x], 0) and np.allclose(grads[kernel], 0)
        assert np.allclose(grads[bias], 0)

    def test_scalar_chain_rule(self):
        # K=1, C=1, L=1: y = w*x + b
        x, w, b = Tensor([[[3.0]]]), Tensor([[[2.0]]]), Tensor([5.0])
        with Tape() as tape:
            y = tsum(conv1d(x, w, b))
        grads = tape.backward(y)
        assert grads[x].ravel() == pytest.approx([2.0])
        assert grads[w].ravel() == pytest.approx([3.0])
        assert grads[b].ravel() == pytest.approx([1.0])


class TestRelu:
    def test_examples(self):
        assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_output_and_gradient(self):
        x = Tensor([-3.0, -0.5])
        with Tape() as tape:
            y = tsum(relu(x))
        assert y.item() == 0.0
        assert np.array_equal(tape.backward(y)[x], [0.0, 0.0])

    def test_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0])
        with Tape() as tape:
            y = tsum(relu(x))
        assert tape.backward(y)[x] == pytest.approx([0.0])


class TestBatchNorm:
    def test_normalized_input_passes_through(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3, 50))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        out = batchnorm1d(Tensor(x), BatchNormState(3)).data
        assert np.allclose(out, x, atol=1e-4)  # epsilon-induced shrink only

    def test_constant_channel_maps_to_beta(self):
        state = BatchNormState(2)
        state.beta = Tensor([3.0, -1.0])
        x = Tensor(np.ones((2, 2, 5)) * np.array([4.0, 7.0])[None, :, None])
        out = batchnorm1d(x, state).data
        assert np.allclose(out, state.beta.data[None, :, None], atol=1e-12)

    def test_training_output_statistics(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((8, 4, 30)) * 5.0 + 2.0)
        out = batchnorm1d(x, BatchNormState(4)).data
        mean = out.mean(axis=(0, 2))
        var = out.var(axis=(0, 2))
        assert np.all(np.abs(mean) < 1e-10 * 4)
        assert np.allclose(var, 1.0, atol=1e-4)

    def test_running_stat_update_rule(self):
        state = BatchNormState(1, momentum=0.1)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 1, 10))
        batchnorm1d(Tensor(x), state)
        assert state.running_mean == pytest.approx(0.9 * 0.0 + 0.1 * x.mean())
        assert state.running_var == pytest.approx(0.9 * 1.0 + 0.1 * x.var())

    def test_inference_requires_update_or_seed(self):
        state = BatchNormState(1).eval()
        x = Tensor(np.ones((1, 1, 4)))
        with pytest.raises(StateError):
            batchnorm1d(x, state)
        state.seed_identity()
        out = batchnorm1d(x, state).data
        expected = 1.0 / np.sqrt(1.0 + state.epsilon)
        assert np.allclose(out, expected)

    def test_inference_is_affine(self):
        state = BatchNormState(2)
        rng = np.random.default_rng(3)
        batchnorm1d(Tensor(rng.standard_normal((4, 2, 9))), state)
        state.eval()
        x1, x2 = rng.standard_normal((1, 2, 5)), rng.standard_normal((1, 2, 5))
        y1 = batchnorm1d(Tensor(x1), state).data
        y2 = batchnorm1d(Tensor(x2), state).data
        mid = batchnorm1d(Tensor(0.5 * x1 + 0.5 * x2), state).data
        assert np.allclose(mid, 0.5 * y1 + 0.5 * y2, atol=1e-12)

    def test_needs_two_positions(self):
        with pytest.raises(ShapeError):
            batchnorm1d(Tensor(np.ones((1, 2, 1))), BatchNormState(2))

    def test_masked_stats_match_unpadded(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 3, 6))
        padded = np.zeros((1, 3, 10))
        padded[:, :, :6] = x
        mask = np.zeros((1, 10))
        mask[0, :6] = 1.0
        out_full = batchnorm1d(Tensor(x), BatchNormState(3)).data
        out_masked = batchnorm1d(Tensor(padded), BatchNormState(3), mask=mask).data
        assert np.allclose(out_masked[:, :, :6], out_full, atol=1e-14)


class TestFiniteDifferences:
    def test_epsilon_bounds(self):
        x = Tensor([1.0])
        with pytest.raises(ValueError):
            finite_difference_check(lambda t: tsum(t), [x], epsilon=1e-8)
        with pytest.raises(ValueError):
            finite_difference_check(lambda t: tsum(t), [x], epsilon=1e-3)

    def test_linear_map_is_exact(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(6)
        err = finite_difference_check(
            lambda t: tsum(mul(t, Tensor(w))), [Tensor(rng.standard_normal(6))])
        assert err < 1e-9

    def test_quadratic_scalar(self):
        err = finite_difference_check(lambda t: tsum(mul(t, t)), [Tensor([3.0])])
        assert err < 1e-9  # numeric derivative of x^2 at 3 is 6 to fd accuracy

    @pytest.mark.parametrize("seed", range(8))
    def test_conv1d_gradients(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 6))
        dil = int(rng.integers(1, 3))
        x = Tensor(rng.standard_normal((2, 2, 7)))
        kernel = Tensor(rng.standard_normal((k, 2, 3)))
        bias = Tensor(rng.standard_normal(3))
        probe = Tensor(rng.standard_normal((2, 3, 7)))

        def f(a, b, c):
            return tsum(mul(conv1d(a, b, c, dilation=dil), probe))

        assert finite_difference_check(f, [x, kernel, bias]) < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_relu_gradients_away_from_kink(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal(20)
        x = x[np.abs(x) > 1e-3][:10]
        probe = Tensor(rng.standard_normal(x.size))
        err = finite_difference_check(
            lambda t: tsum(mul(relu(t), probe)), [Tensor(x)])
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_batchnorm_gradients(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = Tensor(rng.standard_normal((2, 3, 5)))
        gamma = Tensor(rng.standard_normal(3) + 1.5)
        beta = Tensor(rng.standard_normal(3))
        probe = Tensor(rng.standard_normal((2, 3, 5)))

        def f(a, g, b):
            state = BatchNormState(3)
            state.gamma, state.beta = g, b
            return tsum(mul(batchnorm1d(a, state), probe))

        assert finite_difference_check(f, [x, gamma, beta]) < 1e-4

    def test_batchnorm_inference_gradients(self):
        rng = np.random.default_rng(300)
        state = BatchNormState(3)
        batchnorm1d(Tensor(rng.standard_normal((4, 3, 6))), state)
        state.eval()
        probe = Tensor(rng.standard_normal((1, 3, 4)))

        def f(a, g, b):
            state.gamma, state.beta = g, b
            return tsum(mul(batchnorm1d(a, state), probe))

        points = [Tensor(rng.standard_normal((1, 3, 4))),
                  Tensor(rng.standard_normal(3) + 1.0),
                  Tensor(rng.standard_normal(3))]
        assert finite_difference_check(f, points) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_masked_batchnorm_gradients(self, seed):
        rng = np.random.default_rng(400 + seed)
        mask = np.ones((2, 6))
        mask[0, 4:] = 0.0
        mask[1, 5:] = 0.0
        mask_t = mask[:, None, :]
        probe = Tensor(rng.standard_normal((2, 3, 6)) * mask_t)

        def f(a, g, b):
            state = BatchNormState(3)
            state.gamma, state.beta = g, b
            return tsum(mul(batchnorm1d(a, state, mask=mask), probe))

        points = [Tensor(rng.standard_normal((2, 3, 6)) * mask_t),
                  Tensor(rng.standard_normal(3) + 1.5),
                  Tensor(rng.standard_normal(3))]
        assert finite_difference_check(f, points) < 1e-4

    def test_elementwise_op_gradients(self):
        rng = np.random.default_rng(500)
        x = Tensor(np.abs(rng.standard_normal(8)) + 0.5)
        probe = Tensor(rng.standard_normal(8))
        for op in (sqrt, log, exp, absolute):
            err = finite_difference_check(lambda t: tsum(mul(op(t), probe)), [x])
            assert err < 1e-4, op.__name__

    def test_shape_op_gradients(self):
        rng = np.random.default_rng(600)
        x = Tensor(rng.standard_normal((2, 3, 4)))
        probe = Tensor(rng.standard_normal((3, 8)))

        def f(t):
            moved = transpose(t, (1, 0, 2))
            flat = reshape(moved, (3, 8))
            return tsum(mul(flat, probe))

        assert finite_difference_check(f, [x]) < 1e-9

    def test_narrow_gradients(self):
        rng = np.random.default_rng(700)
        x = Tensor(rng.standard_normal((3, 6)))
        probe = Tensor(rng.standard_normal((3, 2)))
        err = finite_difference_check(
            lambda t: tsum(mul(narrow(t, 1, 2, 2), probe)), [x])
        assert err < 1e-9

    def test_log_softmax_gradients(self):
        rng = np.random.default_rng(800)
        x = Tensor(rng.standard_normal((4, 5)))
        probe = Tensor(rng.standard_normal((4, 5)))
        err = finite_difference_check(
            lambda t: tsum(mul(log_softmax(t, axis=1), probe)), [x])
        assert err < 1e-4

    def test_mean_matches_sum_over_n(self):
        rng = np.random.default_rng(900)
        x = rng.standard_normal((3, 4))
        assert tmean(Tensor(x)).item() == pytest.approx(x.mean(), abs=1e-14)
        assert np.allclose(tmean(Tensor(x), axis=1).data, x.mean(axis=1))


class TestSamePaddingContract:
    @pytest.mark.parametrize("k", list(range(1, 65)))
    def test_output_length_equals_input_length(self, k):
        pl, pr = same_padding(k)
        assert pl + pr == k - 1
        assert pl == (k - 1) // 2
