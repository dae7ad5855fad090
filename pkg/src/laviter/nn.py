"""Parameter containers and the layers shared by the encoders, captioner and GAN."""

import contextlib
import hashlib
import logging
import math
from typing import Iterator, Mapping

import numpy as np

from .errors import CheckpointError, DimensionError
from .tensor import (
    Tensor,
    conv2d,
    layer_norm,
    leaky_relu,
    relu,
    softmax,
    take_rows,
)

log = logging.getLogger(__name__)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{index}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{index}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad = trainable

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        unknown = sorted(set(state) - set(params))
        if unknown:
            raise CheckpointError(f"unknown parameter names: {', '.join(unknown)}")
        for name, value in state.items():
            if params[name].shape != tuple(value.shape):
                raise CheckpointError(
                    f"parameter {name} has shape {params[name].shape}, checkpoint has {tuple(value.shape)}"
                )
            params[name].data = np.array(value, dtype=np.float64)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            digest.update(name.encode())
            digest.update(p.data.tobytes())
        return digest.hexdigest()


@contextlib.contextmanager
def frozen(*modules: Module):
    """Temporarily stop gradients into every parameter of ``modules``."""
    params = [p for m in modules for p in m.parameters()]
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    """Fixed sine/cosine position table of shape (length, width)."""
    position = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, width, 2, dtype=np.float64) * (-math.log(10000.0) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: width // 2])
    return table


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Embedding(Module):
    def __init__(self, vocab_size: int, width: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(width), size=(vocab_size, width)))

    def forward(self, ids) -> Tensor:
        return take_rows(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 1,
    ):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel_size, kernel_size))
        )
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.expand = Linear(width, hidden, rng)
        self.contract = Linear(hidden, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.contract(relu(self.expand(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads of width ``head_dim``.

    Inputs are row-major (B, N, D). The concatenated head output (h·d_k) is
    projected back to D.
    """

    def __init__(self, width: int, heads: int, head_dim: int, rng: np.random.Generator):
        self.heads = heads
        self.head_dim = head_dim
        self.query = Linear(width, heads * head_dim, rng)
        self.key = Linear(width, heads * head_dim, rng)
        self.value = Linear(width, heads * head_dim, rng)
        self.output = Linear(heads * head_dim, width, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose((0, 2, 1, 3))

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_mask: np.ndarray | None = None,
        attn_mask: np.ndarray | None = None,
    ) -> tuple[Tensor, Tensor]:
        if query.ndim != 3 or key.shape != value.shape or query.shape[0] != key.shape[0]:
            raise DimensionError(f"attention inputs {query.shape}, {key.shape}, {value.shape} are incompatible")
        batch, length, _ = query.shape
        q, k, v = self._split(self.query(query)), self._split(self.key(key)), self._split(self.value(value))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))

        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if attn_mask is not None:
            causal = np.asarray(attn_mask, dtype=bool)[None, None]
            mask = causal if mask is None else mask & causal
        weights = softmax(scores, axis=-1, mask=mask)

        heads = (weights @ v).transpose((0, 2, 1, 3)).reshape(batch, length, self.heads * self.head_dim)
        return self.output(heads), weights


class EncoderLayer(Module):
    """Self-attention + FFN, each followed by residual add and LayerNorm.

    ``pos`` (when given) is added to the query/key input of the attention sub-layer.
    """

    def __init__(self, width: int, heads: int, head_dim: int, hidden: int, rng: np.random.Generator):
        self.attention = MultiHeadAttention(width, heads, head_dim, rng)
        self.attention_norm = LayerNorm(width)
        self.ffn = FeedForward(width, hidden, rng)
        self.ffn_norm = LayerNorm(width)

    def forward(self, x: Tensor, key_mask=None, pos=None) -> tuple[Tensor, Tensor]:
        qk = x if pos is None else x + pos
        attended, weights = self.attention(qk, qk, x, key_mask=key_mask)
        x = self.attention_norm(x + attended)
        return self.ffn_norm(x + self.ffn(x)), weights


class DecoderLayer(Module):
    """Causal self-attention, cross-attention over a memory, then FFN."""

    def __init__(self, width: int, heads: int, head_dim: int, hidden: int, rng: np.random.Generator):
        self.self_attention = MultiHeadAttention(width, heads, head_dim, rng)
        self.self_norm = LayerNorm(width)
        self.cross_attention = MultiHeadAttention(width, heads, head_dim, rng)
        self.cross_norm = LayerNorm(width)
        self.ffn = FeedForward(width, hidden, rng)
        self.ffn_norm = LayerNorm(width)

    def forward(self, x: Tensor, memory: Tensor, causal_mask, pos=None, memory_pos=None) -> Tensor:
        qk = x if pos is None else x + pos
        attended, _ = self.self_attention(qk, qk, x, attn_mask=causal_mask)
        x = self.self_norm(x + attended)

        query = x if pos is None else x + pos
        keys = memory if memory_pos is None else memory + memory_pos
        attended, _ = self.cross_attention(query, keys, memory)
        x = self.cross_norm(x + attended)
        return self.ffn_norm(x + self.ffn(x))


class ConvBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 1):
        self.conv = Conv2d(in_channels, out_channels, rng, kernel_size=3, stride=stride, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(self.conv(x), 0.2)
