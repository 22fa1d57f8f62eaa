"""Minimal dense tensor engine with manual forward/backward passes.

Layers are plain objects holding their parameters; a Network is an ordered
list of layers.  Convolutions are lowered to matrix multiplication via
im2col with a fixed reduction order (kernel index innermost, then channel),
so repeated runs on the same machine produce bitwise-identical results.

Gradients respect the layer's sparsity mask: entries outside the mask are
exactly zero.  ``fd_check`` provides a central finite-difference oracle for
the analytic gradients (64-bit mode only).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


def im2col(x, k, stride, pad):
    """Unfold (B, C, H, W) into (B, C*k*k, P) patch columns.

    Column ordering is channel-major then kernel row/col, matching the
    row-major flattening of a (F, C, k, k) weight tensor.
    """
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    sb, sc, sh, sw = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return cols.reshape(b, c * k * k, ho * wo).copy(), ho, wo


def col2im(dcols, x_shape, k, stride, pad):
    """Scatter-add patch-column gradients back onto the input tensor."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    dx = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    dcols = dcols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += dcols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


class Layer:
    """Base class; stateless layers only implement forward/backward."""

    sublayers = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, delta, cache):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, k, stride=1, pad=0, bias=True, dtype=np.float64):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k
        self.stride = stride
        self.pad = pad
        self.dtype = np.dtype(dtype)
        self.W = np.zeros((out_ch, in_ch, k, k), dtype=dtype)
        self.b = np.zeros(out_ch, dtype=dtype) if bias else None
        self.mask = None  # None means dense
        self.grad_W = None
        self.grad_b = None

    @property
    def weight_count(self):
        return self.W.size

    @property
    def matrix_shape(self):
        """GEMM view: one row per filter."""
        return (self.out_ch, self.in_ch * self.k * self.k)

    def init_weights(self, rng):
        fan_in = self.in_ch * self.k * self.k
        self.W[...] = (rng.standard_normal(self.W.shape) * np.sqrt(2.0 / fan_in)).astype(self.dtype)

    def apply_mask(self):
        if self.mask is not None:
            self.W *= self.mask

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {x.shape[1]}")
        cols, ho, wo = im2col(x, self.k, self.stride, self.pad)
        wmat = self.W.reshape(self.matrix_shape)
        z = np.matmul(wmat, cols)
        if self.b is not None:
            z = z + self.b[:, None]
        z = z.reshape(x.shape[0], self.out_ch, ho, wo)
        return z, (x.shape, cols)

    def backward(self, delta, cache):
        x_shape, cols = cache
        b = delta.shape[0]
        dflat = delta.reshape(b, self.out_ch, -1)
        wmat = self.W.reshape(self.matrix_shape)
        # G = a_prev * delta, restricted to the mask support.
        gw = np.einsum("bfp,bcp->fc", dflat, cols).reshape(self.W.shape)
        if self.mask is not None:
            gw = gw * self.mask
        self.grad_W = gw.astype(self.dtype, copy=False)
        if self.b is not None:
            self.grad_b = dflat.sum(axis=(0, 2)).astype(self.dtype, copy=False)
        dcols = np.matmul(wmat.T, dflat)
        return col2im(dcols, x_shape, self.k, self.stride, self.pad)


class Linear(Layer):
    def __init__(self, in_dim, out_dim, bias=True, dtype=np.float64):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.dtype = np.dtype(dtype)
        self.W = np.zeros((out_dim, in_dim), dtype=dtype)
        self.b = np.zeros(out_dim, dtype=dtype) if bias else None
        self.mask = None
        self.grad_W = None
        self.grad_b = None

    @property
    def weight_count(self):
        return self.W.size

    @property
    def matrix_shape(self):
        return self.W.shape

    def init_weights(self, rng):
        self.W[...] = (rng.standard_normal(self.W.shape) * np.sqrt(2.0 / self.in_dim)).astype(self.dtype)

    def apply_mask(self):
        if self.mask is not None:
            self.W *= self.mask

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"linear expects (B, {self.in_dim}), got {x.shape}")
        z = x @ self.W.T
        if self.b is not None:
            z = z + self.b
        return z, x

    def backward(self, delta, cache):
        x = cache
        gw = delta.T @ x
        if self.mask is not None:
            gw = gw * self.mask
        self.grad_W = gw.astype(self.dtype, copy=False)
        if self.b is not None:
            self.grad_b = delta.sum(axis=0).astype(self.dtype, copy=False)
        return delta @ self.W


class ReLU(Layer):
    # Derivative at exactly 0 is defined as 0.
    def forward(self, x):
        return np.maximum(x, 0), x > 0

    def backward(self, delta, cache):
        return delta * cache


class MaxPool2d(Layer):
    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ShapeError(f"maxpool {k} does not divide {(h, w)}")
        win = x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // k, w // k, k * k)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, delta, cache):
        x_shape, idx = cache
        b, c, h, w = x_shape
        k = self.k
        dwin = np.zeros((b, c, h // k, w // k, k * k), dtype=delta.dtype)
        np.put_along_axis(dwin, idx[..., None], delta[..., None], axis=-1)
        dwin = dwin.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(x_shape)


class AvgPool2d(Layer):
    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ShapeError(f"avgpool {k} does not divide {(h, w)}")
        out = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return out, x.shape

    def backward(self, delta, cache):
        k = self.k
        d = np.repeat(np.repeat(delta, k, axis=2), k, axis=3)
        return d / (k * k)


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, delta, cache):
        return delta.reshape(cache)


class ResidualBlock(Layer):
    """Two 3x3 same-padded convolutions with an identity shortcut."""

    def __init__(self, channels, dtype=np.float64):
        self.conv1 = Conv2d(channels, channels, 3, pad=1, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, pad=1, dtype=dtype)
        self.sublayers = (self.conv1, self.conv2)

    def forward(self, x):
        z1, c1 = self.conv1.forward(x)
        a1 = np.maximum(z1, 0)
        z2, c2 = self.conv2.forward(a1)
        pre = z2 + x
        return np.maximum(pre, 0), (c1, z1 > 0, c2, pre > 0)

    def backward(self, delta, cache):
        c1, m1, c2, m2 = cache
        dpre = delta * m2
        da1 = self.conv2.backward(dpre, c2)
        dz1 = da1 * m1
        dx = self.conv1.backward(dz1, c1)
        return dx + dpre


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dlogits, correct)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.log(p[np.arange(n), labels] + 1e-300).mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    correct = logits.argmax(axis=1) == labels
    return loss, d.astype(logits.dtype, copy=False), correct


def iter_weighted(layers):
    """Yield every parameterized layer, recursing into composite blocks."""
    for layer in layers:
        if layer.sublayers:
            yield from iter_weighted(layer.sublayers)
        elif hasattr(layer, "W"):
            yield layer


class Network:
    def __init__(self, layers, dtype=np.float64):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)

    def weighted_layers(self):
        return list(iter_weighted(self.layers))

    def init_weights(self, rng):
        for layer in self.weighted_layers():
            layer.init_weights(rng)
            layer.apply_mask()

    def forward(self, x):
        x = x.astype(self.dtype, copy=False)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def predict(self, x):
        logits, _ = self.forward(x)
        return logits.argmax(axis=1)

    def loss_and_grads(self, x, y):
        """Forward + backward; leaves masked gradients on each layer."""
        logits, caches = self.forward(x)
        loss, delta, correct = softmax_xent(logits, y)
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            delta = layer.backward(delta, cache)
        return loss, correct

    def loss_only(self, x, y):
        logits, _ = self.forward(x)
        loss, _, _ = softmax_xent(logits, y)
        return loss


def fd_check(net, x, y, eps=1e-5):
    """Max relative error between analytic and central-FD gradients.

    Only entries on the mask support are checked (masked-out gradients are
    zero by construction).  Requires the network to run in float64.
    """
    if net.dtype != np.float64:
        raise NumericError("fd_check requires 64-bit mode")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps out of supported range")
    net.loss_and_grads(x, y)
    worst = 0.0
    for layer in net.weighted_layers():
        analytic = layer.grad_W
        active = np.flatnonzero(layer.mask if layer.mask is not None
                                else np.ones(layer.W.shape, bool))
        flat = layer.W.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in active:
            orig = flat[i]
            flat[i] = orig + eps
            lp = net.loss_only(x, y)
            flat[i] = orig - eps
            lm = net.loss_only(x, y)
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(fd), abs(aflat[i]), 1e-8)
            worst = max(worst, abs(fd - aflat[i]) / denom)
    return worst
