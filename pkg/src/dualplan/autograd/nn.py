"""Parameters, modules and the transformer building blocks used by the planners."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A named, trainable leaf tensor. Freezing disables gradient flow."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


class Module:
    """Minimal module container: parameters and submodules are attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k in sorted(val):
                    item = val[k]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.data.shape != tuple(arr.shape):
                raise ShapeError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    def name_parameters(self, prefix: str = "") -> None:
        """Stamp every parameter with its dotted path (used in error messages)."""
        for n, p in self.named_parameters(prefix):
            p.name = n

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, init: str = "xavier", dtype=np.float64):
        if init == "xavier":
            w = xavier_uniform(rng, d_in, d_out, dtype)
        elif init == "zeros":
            w = np.zeros((d_in, d_out), dtype=dtype)
        elif init == "identity":
            if d_in != d_out:
                raise ShapeError("identity init needs a square layer")
            w = np.eye(d_in, dtype=dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x, self.weight.dtype)
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self._eps = eps

    def forward(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class MLP(Module):
    """Linear layers with GELU between them; optional zero-initialised output."""

    def __init__(self, dims, rng, dtype=np.float64, zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, init="zeros" if (zero_last and i == len(dims) - 2) else "xavier", dtype=dtype)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def forward(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


def multi_head_attention(q, k, v, heads: int, wq: Linear, wk: Linear, wv: Linear, wo: Linear, mask=None) -> Tensor:
    """Project, split into heads, attend, merge heads and project back.

    Shapes: q (..., Nq, d), k and v (..., Nk, d). ``mask`` broadcasts to
    (..., heads, Nq, Nk) with ``True`` meaning "may attend".
    """
    d = wq.weight.shape[1]
    if d % heads:
        raise ShapeError(f"model dim {d} not divisible by {heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value length mismatch {k.shape} vs {v.shape}")
    dh = d // heads

    def split(x):
        lead = x.shape[:-1]
        x = x.reshape(lead + (heads, dh))
        return T.swapaxes(x, -2, -3)

    qh, kh, vh = split(wq(q)), split(wk(k)), split(wv(v))
    out = T.attention(qh, kh, vh, mask)
    out = T.swapaxes(out, -2, -3)
    out = out.reshape(out.shape[:-2] + (d,))
    return wo(out)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng, dtype=np.float64):
        if d % heads:
            raise ShapeError(f"model dim {d} not divisible by {heads} heads")
        self.wq = Linear(d, d, rng, dtype=dtype)
        self.wk = Linear(d, d, rng, dtype=dtype)
        self.wv = Linear(d, d, rng, dtype=dtype)
        self.wo = Linear(d, d, rng, dtype=dtype)
        self._heads = heads

    @property
    def heads(self) -> int:
        return self._heads

    def forward(self, q, k, v, mask=None) -> Tensor:
        return multi_head_attention(q, k, v, self._heads, self.wq, self.wk, self.wv, self.wo, mask)


class DecoderLayer(Module):
    """Pre-norm decoder block: self-attention, cross-attention, feed-forward."""

    def __init__(self, d: int, heads: int, rng, ffn: int | None = None, self_attn: bool = True, dtype=np.float64):
        ffn = ffn or 2 * d
        self.self_attn = MultiHeadAttention(d, heads, rng, dtype) if self_attn else None
        self.norm_sa = LayerNorm(d, dtype) if self_attn else None
        self.cross_attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_ca = LayerNorm(d, dtype)
        self.norm_mem = LayerNorm(d, dtype)
        self.ffn = MLP([d, ffn, d], rng, dtype)
        self.norm_ffn = LayerNorm(d, dtype)

    def forward(self, x, memory, mem_mask=None, self_mask=None) -> Tensor:
        if self.self_attn is not None:
            h = self.norm_sa(x)
            x = x + self.self_attn(h, h, h, self_mask)
        h = self.norm_ca(x)
        m = self.norm_mem(memory)
        x = x + self.cross_attn(h, m, m, mem_mask)
        return x + self.ffn(self.norm_ffn(x))


def sinusoidal(x: np.ndarray, n_freq: int, scale: float = 1.0) -> np.ndarray:
    """Fixed sin/cos features of each input coordinate: (..., k) -> (..., 2*k*n_freq)."""
    x = np.asarray(x, dtype=np.float64)[..., None] / scale
    freqs = (2.0 ** np.arange(n_freq)) * math.pi
    ang = x * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(x.shape[:-2] + (-1,))
