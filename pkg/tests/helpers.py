"""Shared test utilities."""

import numpy as np

from actnet import tensor as T


def leaf(arr) -> T.Tensor:
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def randn(rng, *shape) -> T.Tensor:
    return leaf(rng.standard_normal(shape))


def _weighted(out: T.Tensor, seed: int) -> T.Tensor:
    """Reduce to a scalar with fixed random weights so every output coordinate matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(T.mul(out, T.Tensor(w)))


def _drop(x):
    from actnet.rng import stream

    return T.dropout(x, 0.3, [(stream(1, "a"), 2), (stream(1, "b"), 1)], train=True)


def _mha_input(rng):
    return [rng.standard_normal((2, 3, 12))]


# name -> (function of tensors returning a tensor, sampler of input arrays)
PRIMITIVES = {
    "add": (T.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
    "sub": (T.sub, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": (T.mul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
    "div": (T.div, lambda r: [r.standard_normal((3, 4)), r.uniform(0.5, 2.0, (3, 4))]),
    "neg": (T.neg, lambda r: [r.standard_normal((5,))]),
    "exp": (T.exp, lambda r: [r.standard_normal((2, 3))]),
    "log": (T.log, lambda r: [r.uniform(0.2, 3.0, (2, 3))]),
    "relu": (T.relu, lambda r: [r.standard_normal((4, 5))]),
    "gelu_erf": (T.gelu, lambda r: [r.standard_normal((4, 5))]),
    "gelu_tanh": (lambda x: T.gelu(x, approximate=True), lambda r: [r.standard_normal((4, 5))]),
    "sum_axis": (lambda x: T.sum(x, axis=1, keepdims=True), lambda r: [r.standard_normal((3, 4, 2))]),
    "mean_axes": (lambda x: T.mean(x, axis=(0, 2)), lambda r: [r.standard_normal((3, 4, 2))]),
    "reshape": (lambda x: T.reshape(x, (4, 6)), lambda r: [r.standard_normal((2, 3, 4))]),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "slice": (lambda x: T.getitem(x, (slice(1, 3), slice(None, None, 2))), lambda r: [r.standard_normal((4, 5))]),
    "gather": (lambda x: T.getitem(x, (np.array([0, 2, 2]), np.array([1, 0, 1]))), lambda r: [r.standard_normal((3, 2))]),
    "matmul": (T.matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]),
    "linear": (T.linear, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal((2,))]),
    "conv3d": (
        lambda x, w, b: T.conv3d(x, w, b, stride=(1, 2, 1), padding=(1, 0, 1)),
        lambda r: [r.standard_normal((2, 2, 3, 5, 4)), r.standard_normal((3, 2, 3, 3, 2)), r.standard_normal((3,))],
    ),
    "max_pool3d": (lambda x: T.max_pool3d(x, (1, 2, 2), (1, 2, 2)), lambda r: [r.standard_normal((1, 2, 2, 4, 4))]),
    "max_pool3d_padded": (lambda x: T.max_pool3d(x, 3, 2, padding=1), lambda r: [r.standard_normal((1, 1, 3, 5, 5))]),
    "avg_pool3d": (lambda x: T.avg_pool3d(x, (2, 2, 2)), lambda r: [r.standard_normal((1, 2, 4, 4, 4))]),
    "global_avg_pool": (T.global_avg_pool, lambda r: [r.standard_normal((2, 3, 2, 2, 2))]),
    "layer_norm": (
        lambda x, g, b: T.layer_norm(x, g, b, 1e-6),
        lambda r: [r.standard_normal((3, 5)), r.standard_normal((5,)), r.standard_normal((5,))],
    ),
    "softmax": (T.softmax, lambda r: [r.standard_normal((3, 4))]),
    "log_softmax": (T.log_softmax, lambda r: [r.standard_normal((3, 4))]),
    "l2_normalize": (T.l2_normalize, lambda r: [r.standard_normal((3, 4))]),
    "dropout": (_drop, lambda r: [r.standard_normal((3, 4))]),
    "attention": (T.attention, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 5, 4)), r.standard_normal((2, 5, 2))]),
    "multi_head_attention": (lambda x: T.multi_head_attention(x, 2), _mha_input),
    "cross_entropy": (lambda z: T.cross_entropy(z, np.array([0, 3, 1])), lambda r: [r.standard_normal((3, 4))]),
}


def primitive_error(name: str, seed: int) -> float:
    fn, sample = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    xs = [leaf(a) for a in sample(rng)]
    with T.precision(np.float64):
        return T.grad_check(lambda *a: _weighted(fn(*a), seed + 1), xs, step=1e-5)
