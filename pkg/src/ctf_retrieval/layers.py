"""Neural building blocks on top of :mod:`ctf_retrieval.tensor`.

All blocks accept inputs with arbitrary leading batch axes: a block applied to
``[T, d]`` and to ``[P, T, d]`` computes the same per-item function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import InvalidInputError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class AttentionSpec:
    model_dim: int
    num_heads: int

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ShapeError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ShapeError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, std: float = INIT_STD):
        self.weight = param(rng.normal(0.0, std, size=(in_dim, out_dim)))
        self.bias = param(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        if x.ndim == 1:
            return (x.reshape(1, -1) @ self.weight + self.bias).reshape(-1)
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``num_heads`` heads and an output projection.

    ``pad_mask`` is a boolean array over key positions (broadcastable to
    ``[..., Tk]``); True marks keys that must not be attended to.
    """

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator, std: float = INIT_STD):
        self.spec = spec
        d = spec.model_dim
        self.query = Linear(d, d, rng, std)
        self.key = Linear(d, d, rng, std)
        self.value = Linear(d, d, rng, std)
        self.out = Linear(d, d, rng, std)

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        h = self.spec.num_heads
        x = x.reshape(*lead, t, h, d // h)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(*axes)

    def __call__(self, queries: Tensor, keys_values: Tensor, pad_mask=None) -> Tensor:
        d = self.spec.model_dim
        if queries.shape[-1] != d or keys_values.shape[-1] != d:
            raise ShapeError(
                f"attention expects model_dim {d}, got {queries.shape} and {keys_values.shape}"
            )
        q = self._split(self.query(queries))
        k = self._split(self.key(keys_values))
        v = self._split(self.value(keys_values))
        scores = (q @ k.mT) * (1.0 / np.sqrt(self.spec.head_dim))
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask, dtype=bool)
            if pad_mask.shape[-1] != keys_values.shape[-2]:
                raise ShapeError("pad_mask length differs from number of keys")
            # [..., Tk] -> [..., 1, 1, Tk] so it broadcasts over heads and queries
            bias = np.where(pad_mask, -1e30, 0.0)[..., None, None, :]
            scores = scores + bias
        ctx = T.softmax(scores, axis=-1) @ v
        *lead, h, tq, hd = ctx.shape
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        ctx = ctx.transpose(*axes).reshape(*lead, tq, h * hd)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, dim: int, inner: int, rng: np.random.Generator, std: float = INIT_STD):
        self.fc1 = Linear(dim, inner, rng, std)
        self.fc2 = Linear(inner, dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(LN(x))`` then ``+ ffn(LN(.))`` with inner width 4d."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator, std: float = INIT_STD):
        d = spec.model_dim
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(spec, rng, std)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, 4 * d, rng, std)

    def __call__(self, x: Tensor, pad_mask=None) -> Tensor:
        h = self.ln_attn(x)
        x = x + self.attn(h, h, pad_mask)
        return x + self.ffn(self.ln_ffn(x))


def conv_output_length(length: int, layers: Sequence[tuple[int, int, int]]) -> int:
    """Output length of an unpadded conv stack; raises if the input is too short."""
    for _, kernel, stride in layers:
        if length < kernel:
            raise InvalidInputError(f"sequence of length {length} shorter than kernel {kernel}")
        length = (length - kernel) // stride + 1
    return length


def receptive_field(layers: Sequence[tuple[int, int, int]]) -> int:
    field, jump = 1, 1
    for _, kernel, stride in layers:
        field += (kernel - 1) * jump
        jump *= stride
    return field


class Conv1dLayer(Module):
    """Unpadded strided 1-D convolution followed by GELU.

    Weight is stored as ``[kernel * in_channels, out_channels]`` so that the
    convolution is one matmul over gathered windows.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator, std: float = INIT_STD):
        self.kernel = kernel
        self.stride = stride
        self.weight = param(rng.normal(0.0, std, size=(kernel * in_channels, out_channels)))
        self.bias = param(np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        *lead, length, c_in = x.shape
        if length < self.kernel:
            raise InvalidInputError(f"sequence of length {length} shorter than kernel {self.kernel}")
        if c_in * self.kernel != self.weight.shape[0]:
            raise ShapeError(f"conv expects {self.weight.shape[0] // self.kernel} channels, got {c_in}")
        out_len = (length - self.kernel) // self.stride + 1
        idx = np.arange(out_len)[:, None] * self.stride + np.arange(self.kernel)[None, :]
        windows = x[..., idx, :].reshape(*lead, out_len, self.kernel * c_in)
        return T.gelu(windows @ self.weight + self.bias)


class Conv1dStack(Module):
    def __init__(self, in_channels: int, layers: Sequence[tuple[int, int, int]],
                 rng: np.random.Generator, std: float = INIT_STD):
        self.spec = [tuple(layer) for layer in layers]
        self.layers = []
        c = in_channels
        for out_channels, kernel, stride in self.spec:
            self.layers.append(Conv1dLayer(c, out_channels, kernel, stride, rng, std))
            c = out_channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] < receptive_field(self.spec):
            raise InvalidInputError(
                f"input length {x.shape[-2]} below receptive field {receptive_field(self.spec)}"
            )
        for layer in self.layers:
            x = layer(x)
        return x


def strided_conv1d_stack(x: Tensor, stack: Conv1dStack) -> Tensor:
    return stack(x)


def multi_head_attention(queries: Tensor, keys_values: Tensor, attn: MultiHeadAttention,
                         pad_mask=None) -> Tensor:
    return attn(queries, keys_values, pad_mask)


def topk(scores, k: int) -> list[tuple[int, float]]:
    """The ``min(k, N)`` largest scores, descending, ties broken by lower index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise InvalidInputError("topk of an empty score vector")
    if k < 1:
        raise InvalidInputError("k must be positive")
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]
