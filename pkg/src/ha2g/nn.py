"""Layers built on the autodiff engine: linear, conv, batch-norm (affine
inference form), GRU, and embeddings.  Parameters are registered by
attribute assignment so checkpoints can address them by dotted name.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_arrays(self):
        """name -> array map of params plus non-trainable buffers."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, mod, buf in self._buffers():
            out[name] = buf
        return out

    def load_state_arrays(self, arrays):
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"missing tensor {name!r} in checkpoint")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{arrays[name].shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(arrays[name], dtype=p.data.dtype)
        for name, mod, buf in self._buffers():
            if name in arrays:
                mod.set_buffer(name.rsplit(".", 1)[-1], arrays[name])

    def _buffers(self, prefix=""):
        for name, val in vars(self).items():
            if name.startswith("_buf_"):
                yield (f"{prefix}{name}", self, val)
        for name, mod in self._modules.items():
            yield from mod._buffers(prefix=f"{prefix}{name}.")

    def set_buffer(self, name, value):
        object.__setattr__(self, name, np.asarray(value, dtype=np.float64))


def glorot(rng, shape, dtype):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        super().__init__()
        self.w = glorot(rng, (in_dim, out_dim), dtype)
        self.b = zeros_param((out_dim,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class Conv1d(Module):
    """Valid (unpadded) 1-D convolution over (B, C, T)."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, dtype=np.float32):
        super().__init__()
        limit = np.sqrt(6.0 / (in_ch * kernel + out_ch * kernel))
        self.w = Tensor(rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel)).astype(dtype),
                        requires_grad=True)
        self.b = zeros_param((out_ch,), dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b, stride=self.stride)

    @staticmethod
    def out_len(t, kernel, stride):
        return (t - kernel) // stride + 1


class ConvTranspose1d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, dtype=np.float32):
        super().__init__()
        limit = np.sqrt(6.0 / (in_ch * kernel + out_ch * kernel))
        self.w = Tensor(rng.uniform(-limit, limit, size=(in_ch, out_ch, kernel)).astype(dtype),
                        requires_grad=True)
        self.b = zeros_param((out_ch,), dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose1d(x, self.w, self.b, stride=self.stride)


class BatchNorm(Module):
    """Affine inference-form batch norm.

    Normalisation always uses the running statistics as constants, so the
    op is a plain affine map and never diverges between train and eval.
    The running statistics warm up from the first `warmup` training
    forwards and are frozen afterwards.
    """

    def __init__(self, channels, rng, dtype=np.float32, mode="channel", warmup=10):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((channels,), dtype)
        self.mode = mode  # "channel": (B, C, T); "feature": (B, D)
        self.warmup = warmup
        self._buf_mean = np.zeros(channels, dtype=np.float64)
        self._buf_var = np.ones(channels, dtype=np.float64)
        self._buf_count = np.zeros(1, dtype=np.float64)

    def __call__(self, x: Tensor, training=False) -> Tensor:
        if training and self._buf_count[0] < self.warmup:
            axes = (0, 2) if self.mode == "channel" else (0,)
            bm = x.data.mean(axis=axes)
            # variance floor keeps degenerate batches (identical rows) sane
            bv = np.maximum(x.data.var(axis=axes), 1e-4)
            k = self._buf_count[0]
            self._buf_mean = (self._buf_mean * k + bm) / (k + 1)
            self._buf_var = (self._buf_var * k + bv) / (k + 1)
            self._buf_count[0] = k + 1
        if self.mode == "channel":
            view = (1, -1, 1)
        else:
            view = (1, -1)
        dt = x.data.dtype
        return ad.batchnorm(
            x,
            ad.reshape(self.gamma, view),
            ad.reshape(self.beta, view),
            self._buf_mean.reshape(view).astype(dt),
            self._buf_var.reshape(view).astype(dt),
        )


class Embedding(Module):
    def __init__(self, vocab, dim, rng, dtype=np.float32, scale=0.1):
        super().__init__()
        self.table = Tensor(rng.normal(scale=scale, size=(vocab, dim)).astype(dtype),
                            requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return ad.gather_rows(self.table, np.asarray(ids, dtype=np.int64))


class GRU(Module):
    """Unidirectional GRU; the input-side matmul is batched over time."""

    def __init__(self, in_dim, hidden, rng, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        self.wx = glorot(rng, (in_dim, 3 * hidden), dtype)
        self.wh = glorot(rng, (hidden, 3 * hidden), dtype)
        self.bx = zeros_param((3 * hidden,), dtype)
        self.bh = zeros_param((3 * hidden,), dtype)

    def __call__(self, xs: Tensor, reverse=False) -> Tensor:
        gx = ad.add(ad.matmul(xs, self.wx), self.bx)  # (B, N, 3H)
        return ad.gru_sequence(gx, self.wh, self.bh, reverse=reverse)


class BiGRU(Module):
    """Two independent passes, outputs concatenated per frame."""

    def __init__(self, in_dim, hidden, rng, dtype=np.float32):
        super().__init__()
        self.fwd = GRU(in_dim, hidden, rng, dtype)
        self.bwd = GRU(in_dim, hidden, rng, dtype)

    def __call__(self, xs: Tensor) -> Tensor:
        return ad.concat([self.fwd(xs), self.bwd(xs, reverse=True)], axis=2)
