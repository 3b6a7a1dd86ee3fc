"""Sparse layers with hand-written adjoints.

Each layer keeps what it needs from its last ``forward`` call, so one
forward/backward pair may be in flight per layer instance.
"""

from __future__ import annotations

import numpy as np

from ..sparse import KernelMap, SparseTensor
from .module import Module, Parameter


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def conv_forward(x: np.ndarray, weight: np.ndarray, kmap: KernelMap) -> np.ndarray:
    """``out[j] = sum_k sum_{(i, j) in kmap[k]} x[i] @ weight[k]``."""
    volume, cin, cout = weight.shape
    if x.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {cin}")
    if len(x) != kmap.n_in or kmap.volume != volume:
        raise ValueError("kernel map does not match input/weight")
    padded = np.concatenate([x, np.zeros((1, cin), dtype=x.dtype)])
    cols = padded[kmap.neighbor_table()].reshape(kmap.n_out, volume * cin)
    return cols @ weight.reshape(volume * cin, cout)


def conv_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, kmap: KernelMap):
    """Returns ``(grad_x, grad_weight)`` for :func:`conv_forward`."""
    volume, cin, cout = weight.shape
    if grad_out.shape != (kmap.n_out, cout):
        raise ValueError(f"grad shape {grad_out.shape} != ({kmap.n_out}, {cout})")
    padded = np.concatenate([x, np.zeros((1, cin), dtype=x.dtype)])
    cols = padded[kmap.neighbor_table()].reshape(kmap.n_out, volume * cin)
    grad_w = (cols.T @ grad_out).reshape(weight.shape)
    grad_cols = (grad_out @ weight.reshape(volume * cin, cout).T).reshape(kmap.n_out, volume, cin)
    grad_x = np.zeros_like(x)
    for k in range(volume):
        # in_rows are unique within one offset, so buffered += is exact
        grad_x[kmap.in_rows[k]] += grad_cols[kmap.out_rows[k], k]
    return grad_x, grad_w


class SparseConv(Module):
    """Generalized sparse convolution; output coordinates are the input's strided map."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, bias=False, dim=3, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.dim = kernel_size, stride, dim
        volume = kernel_size**dim
        self.weight = Parameter(_he_normal(rng, (volume, in_channels, out_channels), volume * in_channels))
        self.bias = Parameter(np.zeros(out_channels, np.float32)) if bias else None
        self._saved = None

    transposed = False

    def _out_stride(self, in_stride: int) -> int:
        return in_stride * self.stride

    def forward(self, x: SparseTensor) -> SparseTensor:
        out_stride = self._out_stride(x.stride)
        kmap = x.manager.kernel_map(x.stride, out_stride, self.kernel_size, self.transposed)
        out = conv_forward(x.features, self.weight.values, kmap)
        if self.bias is not None:
            out = out + self.bias.values
        self._saved = (x.features, kmap)
        return SparseTensor(out, x.manager.coords_at(out_stride), x.manager)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, kmap = self._saved
        grad_x, grad_w = conv_backward(grad_out, x, self.weight.values, kmap)
        self.weight.accumulate(grad_w)
        if self.bias is not None:
            self.bias.accumulate(grad_out.sum(axis=0))
        return grad_x

    __call__ = forward


class SparseConvTranspose(SparseConv):
    """Transposed convolution onto the finer map already held by the manager."""

    transposed = True

    def _out_stride(self, in_stride: int) -> int:
        if in_stride % self.stride:
            raise ValueError(f"cannot upsample stride {in_stride} by {self.stride}")
        return in_stride // self.stride


class BatchNorm(Module):
    """Per-channel normalization over the active sites of the batch."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.track_running_stats = True
        self._saved = None

    def forward(self, x: SparseTensor) -> SparseTensor:
        f = x.features
        if len(f) == 0:
            raise ValueError("batch norm on an empty tensor")
        if self.training:
            mean = f.mean(axis=0)
            var = f.var(axis=0)
            if self.track_running_stats:
                n = len(f)
                unbiased = var * n / (n - 1) if n > 1 else var
                m = self.momentum
                self.running_mean[...] = (1 - m) * self.running_mean + m * mean
                self.running_var[...] = (1 - m) * self.running_var + m * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (f - mean) * inv_std
        self._saved = (xhat, inv_std, self.training)
        return x.replace(xhat * self.weight.values + self.bias.values)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._saved
        self.weight.accumulate((grad_out * xhat).sum(axis=0))
        self.bias.accumulate(grad_out.sum(axis=0))
        dxhat = grad_out * self.weight.values
        if not training:
            return dxhat * inv_std
        n = len(xhat)
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))

    __call__ = forward


class ReLU(Module):
    def forward(self, x: SparseTensor) -> SparseTensor:
        self._mask = x.features > 0
        return x.replace(x.features * self._mask)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask

    __call__ = forward


class Linear(Module):
    """Per-site affine map ``x @ W + b``."""

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_he_normal(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features, np.float32)) if bias else None

    def forward(self, x: SparseTensor) -> SparseTensor:
        self._x = x.features
        out = x.features @ self.weight.values
        if self.bias is not None:
            out = out + self.bias.values
        return x.replace(out)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.weight.accumulate(self._x.T @ grad_out)
        if self.bias is not None:
            self.bias.accumulate(grad_out.sum(axis=0))
        return grad_out @ self.weight.values.T

    __call__ = forward


def _check_same_map(a: SparseTensor, b: SparseTensor) -> None:
    if a.cmap is not b.cmap and a.cmap != b.cmap:
        raise ValueError("coordinate map mismatch")


def residual_add(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Sum of two tensors on one coordinate map; the adjoint copies the gradient to both."""
    _check_same_map(a, b)
    return a.replace(a.features + b.features)


def concat(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Channel concatenation; split the gradient with ``grad[:, :a.C]`` / ``grad[:, a.C:]``."""
    _check_same_map(a, b)
    return a.replace(np.concatenate([a.features, b.features], axis=1))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)
