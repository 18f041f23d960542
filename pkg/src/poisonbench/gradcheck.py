"""Central finite-difference verification of every differentiable op.

The checker only ever evaluates forward passes, so it is independent of the
reverse-mode machinery it validates.  Run via the `gradcheck` CLI subcommand
or the test suite.
"""

import numpy as np

from . import tensor as T


def finite_difference(f, arrays, which, h=1e-6):
    """d f / d arrays[which] by central differences, elementwise.

    f: callable taking the list of float64 arrays and returning a float.
    """
    base = [a.copy() for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(base)
        flat[i] = orig - h
        fm = f(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b):
    """max_i |a_i - b_i| / max(1, |a|_inf, |b|_inf)."""
    num = np.abs(a - b).max() if a.size else 0.0
    den = max(1.0, np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return float(num / den)


def check_op(make_loss, arrays, h=1e-6):
    """Compare reverse-mode and finite-difference gradients for one op.

    make_loss: callable mapping a list of Tensors to a scalar Tensor. Returns
    the worst relative error over all inputs.
    """
    tensors = [T.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = make_loss(tensors)
    T.backward(loss)
    worst = 0.0
    for k, t in enumerate(tensors):
        def feval(arrs, _k=k):
            with T.no_grad():
                ts = [T.Tensor(a) for a in arrs]
                return float(make_loss(ts).data)
        fd = finite_difference(feval, [a.astype(np.float64) for a in arrays], k, h=h)
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ad, fd))
    return worst


def _weighted(x, rng):
    # random positive-free weights give a non-trivial scalar reduction
    w = T.Tensor(rng.standard_normal(x.shape).astype(np.float64))
    return T.tensor_sum(T.mul(x, w))


def run_suite(seed=0):
    """Finite-difference sweep over every differentiable op.

    Returns {op_name: max relative error}.
    """
    rng = np.random.default_rng(seed)
    results = {}

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    row = rng.standard_normal((4,))
    results["add"] = check_op(lambda ts: _weighted(T.add(ts[0], ts[1]), np.random.default_rng(1)), [a, b])
    results["add_broadcast"] = check_op(lambda ts: _weighted(T.add(ts[0], ts[1]), np.random.default_rng(2)), [a, row])
    results["sub"] = check_op(lambda ts: _weighted(T.sub(ts[0], ts[1]), np.random.default_rng(3)), [a, b])
    results["mul"] = check_op(lambda ts: _weighted(T.mul(ts[0], ts[1]), np.random.default_rng(4)), [a, b])
    results["scale"] = check_op(lambda ts: _weighted(T.scale(ts[0], -1.7), np.random.default_rng(5)), [a])
    results["matmul"] = check_op(
        lambda ts: _weighted(T.matmul(ts[0], ts[1]), np.random.default_rng(6)),
        [rng.standard_normal((3, 5)), rng.standard_normal((5, 2))],
    )
    results["reshape"] = check_op(lambda ts: _weighted(T.reshape(ts[0], (4, 3)), np.random.default_rng(7)), [a])
    results["transpose2d"] = check_op(lambda ts: _weighted(T.transpose2d(ts[0]), np.random.default_rng(18)), [a])
    results["concat"] = check_op(
        lambda ts: _weighted(T.concat(ts, axis=1), np.random.default_rng(8)), [a, b]
    )
    results["sum"] = check_op(lambda ts: T.tensor_sum(ts[0]), [a])
    results["relu"] = check_op(
        lambda ts: _weighted(T.relu(ts[0]), np.random.default_rng(9)),
        [rng.standard_normal((3, 4)) + 0.05],  # keep clear of the kink
    )

    img = rng.standard_normal((2, 2, 4, 4))
    ker = rng.standard_normal((3, 2, 3, 3))
    results["conv2d"] = check_op(
        lambda ts: _weighted(T.conv2d(ts[0], ts[1], stride=1, padding=1), np.random.default_rng(10)),
        [img, ker],
    )
    results["conv2d_stride2"] = check_op(
        lambda ts: _weighted(T.conv2d(ts[0], ts[1], stride=2, padding=1), np.random.default_rng(11)),
        [img, ker],
    )
    results["bias_add_nchw"] = check_op(
        lambda ts: _weighted(T.bias_add_nchw(ts[0], ts[1]), np.random.default_rng(12)),
        [img, rng.standard_normal((2,))],
    )
    results["normalize_nchw"] = check_op(
        lambda ts: _weighted(T.normalize_nchw(ts[0], [0.3, 0.6], [0.5, 0.25]), np.random.default_rng(13)),
        [img],
    )
    # pooling: jitter guarantees a unique max per window, away from ties
    pool_in = rng.standard_normal((2, 2, 4, 4)) + np.linspace(0, 1, 64).reshape(2, 2, 4, 4)
    results["max_pool2d"] = check_op(
        lambda ts: _weighted(T.max_pool2d(ts[0], 2), np.random.default_rng(14)), [pool_in]
    )
    results["global_avg_pool"] = check_op(
        lambda ts: _weighted(T.global_avg_pool(ts[0]), np.random.default_rng(15)), [img]
    )

    def bn_loss(ts):
        rm = np.zeros(2)
        rv = np.ones(2)
        return _weighted(
            T.batch_norm2d(ts[0], ts[1], ts[2], rm, rv, training=True), np.random.default_rng(16)
        )

    results["batch_norm2d_train"] = check_op(
        bn_loss, [img, rng.standard_normal((2,)) + 1.0, rng.standard_normal((2,))]
    )

    def bn_eval_loss(ts):
        rm = np.asarray([0.1, -0.2])
        rv = np.asarray([1.3, 0.6])
        return _weighted(
            T.batch_norm2d(ts[0], ts[1], ts[2], rm, rv, training=False), np.random.default_rng(17)
        )

    results["batch_norm2d_eval"] = check_op(
        bn_eval_loss, [img, rng.standard_normal((2,)) + 1.0, rng.standard_normal((2,))]
    )

    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, size=5)
    results["softmax_cross_entropy"] = check_op(
        lambda ts: T.softmax_cross_entropy(ts[0], labels), [logits]
    )
    results["softmax_cross_entropy_sum"] = check_op(
        lambda ts: T.softmax_cross_entropy(ts[0], labels, reduction="sum"), [logits]
    )
    return results


def run_model_sweep(model, batch, labels):
    """Finite-difference check of every parameter of a model end to end.

    The model is evaluated at float64 on a cross-entropy loss; returns the
    max relative error over all parameters.
    """
    params = model.trainable_parameters()
    arrays = [p.data.astype(np.float64) for p in params]

    def loss_value(arrs):
        with T.no_grad():
            for p, a in zip(params, arrs):
                p.data = a
            out = T.softmax_cross_entropy(model.logits(T.Tensor(batch.astype(np.float64))), labels)
            return float(out.data)

    for p, a in zip(params, arrays):
        p.data = a.copy()
    loss = T.softmax_cross_entropy(model.logits(T.Tensor(batch.astype(np.float64), requires_grad=False)), labels)
    T.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for k in range(len(params)):
        fd = finite_difference(loss_value, [a.copy() for a in arrays], k, h=1e-6)
        worst = max(worst, relative_error(grads[k], fd))
    # restore the original float64 weights
    for p, a in zip(params, arrays):
        p.data = a
    return worst
