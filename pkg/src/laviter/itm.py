"""
Image-to-text branch: a transformer encoder-decoder captioner over region features.

The encoder refines ``r`` with self-attention; the decoder predicts the next token
from a causally masked prefix and cross-attention into the refined regions.
Positional encodings are added to the query/key input of every attention
sub-layer (regions by flattened index, tokens by position).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .nn import DecoderLayer, Embedding, EncoderLayer, Linear, Module, sinusoidal_positions
from .tensor import Tensor, as_tensor, log_softmax, no_grad, relu, softmax
from .text_encoder import END_ID, PAD_ID, START_ID

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CaptionerConfig:
    vocab_size: int
    d_model: int = 256
    heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 512
    max_len: int = 15

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _batched(r) -> tuple[Tensor, bool]:
    r = as_tensor(r)
    if r.ndim == 2:
        return r.reshape(1, *r.shape), True
    if r.ndim != 3:
        raise DimensionError(f"expected region features (B, D, M) or (D, M), got {r.shape}")
    return r, False


class Captioner(Module):
    def __init__(self, config: CaptionerConfig, rng: np.random.Generator):
        self.config = config
        width, heads, head_dim = config.d_model, config.heads, config.head_dim
        self.embedding = Embedding(config.vocab_size, width, rng)
        self.encoder_layers = [
            EncoderLayer(width, heads, head_dim, config.ffn_dim, rng) for _ in range(config.encoder_layers)
        ]
        self.decoder_layers = [
            DecoderLayer(width, heads, head_dim, config.ffn_dim, rng) for _ in range(config.decoder_layers)
        ]
        self.head_hidden = Linear(width, width, rng)
        self.head_out = Linear(width, config.vocab_size, rng)
        self._token_positions = sinusoidal_positions(config.max_len + 1, width)

    def encode_regions(self, r, return_attention: bool = False):
        """Refine region features; output has the shape of ``r`` ((B, D, M) or (D, M))."""
        r, single = _batched(r)
        if r.shape[1] != self.config.d_model:
            raise DimensionError(f"region features {r.shape} do not have D={self.config.d_model}")
        x = r.swapaxes(1, 2)
        pos = Tensor(sinusoidal_positions(x.shape[1], self.config.d_model))
        attention = []
        for layer in self.encoder_layers:
            x, weights = layer(x, pos=pos)
            attention.append(weights)
        refined = x.swapaxes(1, 2)
        if single:
            refined = refined[0]
        return (refined, attention) if return_attention else refined

    def _check_prefix(self, prefix) -> np.ndarray:
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        if prefix.shape[1] == 0:
            raise ContractError("decoder prefix is empty; it must begin with START")
        if (prefix[:, 0] != START_ID).any():
            raise ContractError("decoder prefix must begin with START")
        if prefix.shape[1] > self.config.max_len + 1:
            raise DimensionError(f"prefix length {prefix.shape[1]} exceeds {self.config.max_len + 1}")
        return prefix

    def _logits(self, refined: Tensor, embedded: Tensor) -> Tensor:
        length = embedded.shape[1]
        memory = refined.swapaxes(1, 2)
        pos = Tensor(self._token_positions[:length])
        memory_pos = Tensor(sinusoidal_positions(memory.shape[1], self.config.d_model))
        mask = causal_mask(length)
        x = embedded
        for layer in self.decoder_layers:
            x = layer(x, memory, mask, pos=pos, memory_pos=memory_pos)
        return self.head_out(relu(self.head_hidden(x)))

    def decode_embedded(self, refined, embedded) -> Tensor:
        """Log-probabilities (B, P, V) from an already embedded prefix (B, P, D)."""
        refined, _ = _batched(refined)
        return log_softmax(self._logits(refined, as_tensor(embedded)), axis=-1)

    def decode(self, refined, prefix) -> Tensor:
        """Teacher-forced log-probabilities (B, P, V); position p predicts token p + 1."""
        prefix = self._check_prefix(prefix)
        return self.decode_embedded(refined, self.embedding(prefix))

    def decode_step(self, refined, prefix) -> Tensor:
        """Distribution over the vocabulary for the token following ``prefix``: (B, V)."""
        refined, _ = _batched(refined)
        prefix = self._check_prefix(prefix)
        logits = self._logits(refined, self.embedding(prefix))
        return softmax(logits[:, -1], axis=-1)

    def captioning_loss(self, r, targets) -> Tensor:
        """Teacher-forced NLL; ``targets`` (B, L) hold caption ids then END, PAD afterwards."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        prefix = np.concatenate([np.full((targets.shape[0], 1), START_ID), targets[:, :-1]], axis=1)
        return caption_nll(self.decode(self.encode_regions(r), prefix), targets)

    def generate_caption(self, r, max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding from START; captions exclude START and END."""
        max_len = self.config.max_len if max_len is None else max_len
        with no_grad():
            refined, _ = _batched(self.encode_regions(r))
            batch = refined.shape[0]
            prefix = np.full((batch, 1), START_ID, dtype=np.int64)
            captions: list[list[int]] = [[] for _ in range(batch)]
            finished = np.zeros(batch, dtype=bool)
            for _ in range(max_len):
                probs = self.decode_step(refined, prefix).data
                # argmax returns the lowest id among ties
                chosen = probs.argmax(axis=-1)
                for row, token in enumerate(chosen):
                    if finished[row]:
                        continue
                    if token == END_ID:
                        finished[row] = True
                    else:
                        captions[row].append(int(token))
                if finished.all():
                    break
                prefix = np.concatenate([prefix, chosen[:, None]], axis=1)
        return captions


def caption_nll(log_probs, targets) -> Tensor:
    """-Σ_p log p(T_p) over non-PAD positions, averaged over the batch."""
    log_probs = as_tensor(log_probs)
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.shape[:2] != targets.shape:
        raise DimensionError(f"log-probabilities {log_probs.shape} do not match targets {targets.shape}")
    batch, length = targets.shape
    rows, cols = np.meshgrid(np.arange(batch), np.arange(length), indexing="ij")
    picked = log_probs[rows, cols, targets]
    real = Tensor((targets != PAD_ID).astype(np.float64))
    return -(picked * real).sum() * (1.0 / batch)
