"""Gradient-check cases: one small scalar-valued probe per autodiff op."""

import numpy as np

from framediff import numcore as nc


def _weights(rng, shape):
    return nc.Tensor(rng.normal(size=shape))


def op_cases():
    def attention(rng):
        ws = [rng.normal(size=(4, 4)) for _ in range(4)]
        w = _weights(rng, (5, 4))
        return (5, 4), lambda t: nc.sum(nc.mul(nc.self_attention(t, *ws, heads=2), w))

    def matmul(rng):
        b = rng.normal(size=(4, 3))
        return (2, 5, 4), lambda t: nc.sum(nc.tanh(nc.matmul(t, b)))

    def matmul_rhs(rng):
        a = rng.normal(size=(2, 5, 4))
        return (4, 3), lambda t: nc.sum(nc.tanh(nc.matmul(a, t)))

    def linear(rng):
        w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        return (2, 3, 4), lambda t: nc.sum(nc.tanh(nc.linear(t, w, b)))

    def linear_weight(rng):
        x = rng.normal(size=(6, 4))
        return (4, 3), lambda t: nc.sum(nc.tanh(nc.linear(x, t)))

    def softmax(rng):
        w = _weights(rng, (3, 5))
        return (3, 5), lambda t: nc.sum(nc.mul(nc.softmax(t), w))

    def layer_norm(rng):
        w = _weights(rng, (2, 3, 6))
        return (2, 3, 6), lambda t: nc.sum(nc.mul(nc.layer_norm(t), w))

    def layer_norm_affine(rng):
        x, w = rng.normal(size=(4, 6)), _weights(rng, (4, 6))
        beta = rng.normal(size=6)
        return (6,), lambda t: nc.sum(nc.mul(nc.layer_norm(x, t, beta), w))

    def pool(rng):
        w = _weights(rng, (2, 2, 2, 3))
        return (2, 4, 4, 3), lambda t: nc.sum(nc.mul(nc.avg_pool2d(t, 2), w))

    def upsample(rng):
        w = _weights(rng, (2, 4, 4, 3))
        return (2, 2, 2, 3), lambda t: nc.sum(nc.mul(nc.upsample2d(t, 2), w))

    def channel_conv(rng):
        k, w = rng.normal(size=3), _weights(rng, (2, 2, 2, 5))
        return (2, 2, 2, 5), lambda t: nc.sum(nc.mul(nc.channel_conv1d(t, k), w))

    def channel_conv_kernel(rng):
        x, w = rng.normal(size=(2, 2, 2, 5)), _weights(rng, (2, 2, 2, 5))
        return (5,), lambda t: nc.sum(nc.mul(nc.channel_conv1d(x, t), w))

    def conv3d(rng):
        k, w = rng.normal(size=(3, 3, 3, 2, 2)), _weights(rng, (3, 3, 3, 2))
        return (3, 3, 3, 2), lambda t: nc.sum(nc.mul(nc.conv3d(t, k), w))

    def conv3d_kernel(rng):
        x, w = rng.normal(size=(2, 3, 3, 2)), _weights(rng, (2, 3, 3, 2))
        return (3, 3, 3, 2, 2), lambda t: nc.sum(nc.mul(nc.conv3d(x, t), w))

    def elementwise(rng):
        b, c = rng.normal(size=(3, 1)), rng.normal(size=(4,))
        return (3, 4), lambda t: nc.sum(nc.tanh(nc.sub(nc.mul(nc.add(t, b), c), nc.scale(t, 0.3))))

    def embedding(rng):
        ids = np.array([0, 2, 2, 1])
        w = _weights(rng, (4, 3))
        return (3, 3), lambda t: nc.sum(nc.mul(nc.embedding(t, ids), w))

    def shaping(rng):
        w = _weights(rng, (3, 8))
        return (2, 3, 4), lambda t: nc.sum(nc.mul(nc.reshape(nc.transpose(t, (1, 0, 2)), (3, 8)), w))

    def concat_neg(rng):
        w = _weights(rng, (3, 9))
        parts = lambda t: [nc.neg(t), nc.tanh(nc.sum(t, axis=1, keepdims=True)), nc.scale(t, 0.5)]
        return (3, 4), lambda t: nc.sum(nc.mul(nc.concat(parts(t), axis=1), w))

    def reductions(rng):
        return (3, 4), lambda t: nc.sum(nc.tanh(nc.mean(t, axis=0)))

    return {f.__name__: f for f in (attention, matmul, matmul_rhs, linear, linear_weight, softmax, layer_norm, concat_neg,
                                    layer_norm_affine, pool, upsample, channel_conv, channel_conv_kernel,
                                    conv3d, conv3d_kernel, elementwise, embedding, shaping, reductions)}


OP_CASES = op_cases()
