import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonbench import tensor as T
from poisonbench.errors import ShapeError
from poisonbench.gradcheck import check_op, finite_difference, relative_error, run_suite


def test_matmul_identity():
    eye = T.Tensor(np.eye(2, dtype=np.float64))
    v = T.Tensor(np.array([[3.0], [4.0]]))
    out = T.matmul(eye, v)
    assert np.array_equal(out.data, np.array([[3.0], [4.0]]))


def test_add_zeros_bitwise():
    x = np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32)
    out = T.add(T.Tensor(x), T.Tensor(np.zeros_like(x)))
    assert np.array_equal(out.data, x)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as ei:
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)


def test_grad_of_sum_a_times_b_equals_b():
    rng = np.random.default_rng(1)
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    bdata = rng.standard_normal((3, 4))
    loss = T.tensor_sum(T.mul(a, T.Tensor(bdata)))
    T.backward(loss)
    np.testing.assert_allclose(a.grad, bdata, rtol=0, atol=0)

    # against central finite differences at float64, h=1e-6
    def f(arrs):
        return float((arrs[0] * bdata).sum())

    fd = finite_difference(f, [a.data.copy()], 0, h=1e-6)
    assert relative_error(a.grad, fd) < 1e-4


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(2)
    x = rng.random((1, 3, 5, 5))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c, 0, 0] = 1.0
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, padding=0)
    np.testing.assert_allclose(out.data, x)


def test_conv2d_one_hot_oracle():
    # 3x3 all-ones kernel over a one-hot 5x5 input, pad 1: direct hand convolution
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 3] = 1.0
    k = np.ones((1, 1, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, padding=1).data[0, 0]

    expected = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            # brute-force cross-correlation with zero padding
            acc = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < 5 and 0 <= jj < 5:
                        acc += x[0, 0, ii, jj]
            expected[i, j] = acc
    np.testing.assert_allclose(out, expected)
    assert out[1:4, 2:5].sum() == 9.0  # 3x3 block of ones centered at the hot pixel


def test_conv2d_kernel_grad_finite_differences():
    rng = np.random.default_rng(3)
    err = check_op(
        lambda ts: T.tensor_sum(T.mul(T.conv2d(ts[0], ts[1], 1, 1), ts[2])),
        [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((1, 2, 4, 4))],
    )
    assert err < 1e-4


def test_conv2d_nonpositive_output_errors():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 5, 5))), 1, 0)


def test_relu_values():
    out = T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_max_pool_constant_tie_break():
    x = T.Tensor(np.full((1, 1, 4, 4), 7.0), requires_grad=True)
    out = T.max_pool2d(x, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))
    T.backward(T.tensor_sum(out))
    # gradient goes to the first (lowest flat index) element of each window
    expected = np.zeros((1, 1, 4, 4))
    expected[0, 0, 0::2, 0::2] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_max_pool_floor_semantics():
    x = T.Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5), requires_grad=True)
    out = T.max_pool2d(x, 2)
    assert out.shape == (1, 1, 2, 2)
    T.backward(T.tensor_sum(out))
    assert x.grad[0, 0, 4, :].sum() == 0  # cropped row gets no gradient


def test_batchnorm_identity_on_standardized_batch():
    # channels hold exactly +-1: zero mean, unit variance
    x = np.zeros((2, 3, 2, 2))
    x[0] = 1.0
    x[1] = -1.0
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batch_norm2d(
        T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), rm, rv, training=True
    )
    assert np.abs(out.data - x).max() < 1e-5


def test_batchnorm_running_stats_update():
    x = np.full((4, 1, 2, 2), 10.0)
    rm, rv = np.zeros(1), np.ones(1)
    T.batch_norm2d(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), rm, rv, training=True)
    np.testing.assert_allclose(rm, [1.0])  # 0.9*0 + 0.1*10
    np.testing.assert_allclose(rv, [0.9])  # 0.9*1 + 0.1*0


def test_cross_entropy_uniform_logits():
    logits = T.Tensor(np.zeros((4, 10)))
    loss = T.softmax_cross_entropy(logits, [0, 3, 5, 9])
    assert abs(loss.item() - np.log(10.0)) < 1e-6


def test_cross_entropy_closed_form():
    # logits [10, 0], label 0 -> ln(1 + e^-10)
    loss = T.softmax_cross_entropy(T.Tensor(np.array([[10.0, 0.0]])), [0])
    expected = np.log1p(np.exp(-10.0))
    assert abs(loss.item() - expected) < 1e-9
    assert abs(loss.item() - 4.54e-5) < 1e-6


def test_cross_entropy_gradient_analytic_and_fd():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((6, 5))
    labels = [0, 1, 2, 3, 4, 0]
    t = T.Tensor(logits.copy(), requires_grad=True)
    loss = T.softmax_cross_entropy(t, labels)
    T.backward(loss)

    z = logits - logits.max(axis=1, keepdims=True)
    sm = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.eye(5)[labels]
    np.testing.assert_allclose(t.grad, (sm - onehot) / 6.0, rtol=1e-10, atol=1e-12)

    err = check_op(lambda ts: T.softmax_cross_entropy(ts[0], labels), [logits])
    assert err < 1e-4


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((1, 3))), [3])


def test_backward_sum_gives_ones():
    x = T.Tensor(np.zeros((3, 2)), requires_grad=True)
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_non_scalar_errors():
    x = T.Tensor(np.zeros((3,)), requires_grad=True)
    y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        T.backward(y)
    T.clear_tape()


def test_two_paths_accumulate():
    x = T.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    loss = T.tensor_sum(T.add(x, x))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_tape_cleared_after_backward():
    x = T.Tensor(np.ones(3), requires_grad=True)
    T.backward(T.tensor_sum(x))
    assert T.tape_length() == 0


def test_no_grad_suppresses_recording():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad
    assert T.tape_length() == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_accumulation_linearity(seed):
    # grad of (a + a) is exactly twice grad of a
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((4,))
    a1 = T.Tensor(data.copy(), requires_grad=True)
    T.backward(T.tensor_sum(T.mul(T.add(a1, a1), T.Tensor(data.copy()))))
    a2 = T.Tensor(data.copy(), requires_grad=True)
    T.backward(T.tensor_sum(T.mul(a2, T.Tensor(data.copy()))))
    np.testing.assert_array_equal(a1.grad, 2.0 * a2.grad)


def test_full_op_suite_under_tolerance():
    results = run_suite(seed=0)
    worst = max(results.values())
    assert worst < 1e-4, results
