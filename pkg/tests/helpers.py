"""Shared test utilities."""

import numpy as np

from minprof.tensor import Tensor


def numeric_grad(fn, arrays, index, h=1e-5):
    """Central-difference gradient of scalar ``fn(*arrays)`` with respect to ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        hi = fn(*arrays)
        x[i] = orig - h
        lo = fn(*arrays)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * h)
    return grad


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gradcheck(op, arrays, h=1e-5):
    """Max relative error between autodiff and central differences over every input.

    ``op`` maps Tensors to a Tensor; the scalar objective is a fixed random
    projection of its output, so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = op(*tensors)
    proj = np.random.default_rng(123).normal(size=out.shape)
    (out * Tensor(proj, dtype=np.float64)).sum().backward()

    def scalar(*arrs):
        res = op(*[Tensor(a, dtype=np.float64) for a in arrs])
        return float(np.sum(res.data * proj))

    return max(rel_error(t.grad, numeric_grad(scalar, arrays, i, h)) for i, t in enumerate(tensors))


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _case_matmul(rng):
    batch = rng.integers(0, 2)
    a_shape = (2, 3, 4) if batch else (3, 4)
    return (lambda a, b: a @ b), [rng.normal(size=a_shape), rng.normal(size=(4, 5))]


def _case_conv(rng):
    from minprof.tensor import conv2d_3x3_valid
    c_in, c_out, size = rng.integers(1, 3), rng.integers(1, 4), rng.integers(3, 6)
    arrays = [rng.normal(size=(2, c_in, size, size)), rng.normal(size=(c_out, c_in, 3, 3)),
              rng.normal(size=(c_out,))]
    return conv2d_3x3_valid, arrays


def _case_relu(rng):
    from minprof.tensor import relu
    return relu, [_away_from_zero(rng, (4, 5))]


def _case_layer_norm(rng):
    from minprof.tensor import layer_norm
    d = rng.integers(2, 7)
    return layer_norm, [rng.normal(size=(3, d)), rng.normal(size=(d,)), rng.normal(size=(d,))]


def _case_attention(rng):
    from minprof.tensor import multi_head_attention
    d, t = 4, rng.integers(2, 6)
    heads = int(rng.choice([1, 2]))
    arrays = [rng.normal(size=(t, d))] + [rng.normal(size=(d, d)) * 0.5 for _ in range(4)]
    return (lambda x, q, k, v, o: multi_head_attention(x, q, k, v, o, heads=heads)), arrays


def _case_softmax_ce(rng):
    from minprof.tensor import softmax_cross_entropy
    b, k = rng.integers(1, 6), rng.integers(2, 8)
    labels = rng.integers(0, k, size=b)
    return (lambda z: softmax_cross_entropy(z, labels)), [rng.normal(size=(b, k)) * 2]


GRAD_CASES = {
    "matmul": _case_matmul,
    "conv": _case_conv,
    "relu": _case_relu,
    "layer_norm": _case_layer_norm,
    "attention": _case_attention,
    "softmax_ce": _case_softmax_ce,
}


def worst_gradcheck(name, trials=100, seed=0):
    """Largest relative gradient error of ``GRAD_CASES[name]`` over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        op, arrays = GRAD_CASES[name](rng)
        worst = max(worst, gradcheck(op, arrays))
    return worst
