"""
Word-level vocabulary and the transformer text encoder F_T.

F_T maps a padded token sequence to word features ``w`` (D x N) and the sentence
feature ``s``, the mean of ``w`` over real (unmasked) tokens.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, VocabularyError
from .nn import Embedding, EncoderLayer, Module, sinusoidal_positions
from .tensor import Tensor
from .utils import atomic_write_text

log = logging.getLogger(__name__)

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = range(len(RESERVED))

_PUNCTUATION = re.compile(r"[^\w]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation, drop empty pieces."""
    pieces = (_PUNCTUATION.sub("", piece) for piece in text.lower().split())
    return [piece for piece in pieces if piece]


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        words = sorted(set(tokens) - set(RESERVED))
        self.id_to_token: list[str] = [*RESERVED, *words]
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(token for text in texts for token in tokenize(text))

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(token, UNK_ID) for token in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        words = []
        for i in ids:
            i = int(i)
            if i == END_ID:
                break
            if not 0 <= i < len(self):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self)}")
            if i not in (PAD_ID, START_ID):
                words.append(self.id_to_token[i])
        return words

    def save(self, path: Path | str) -> None:
        words = self.id_to_token[len(RESERVED):]
        atomic_write_text(path, "".join(f"{w}\n" for w in words))

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        if words != sorted(set(words)):
            raise VocabularyError(f"vocabulary file {path} is not a sorted list of unique tokens")
        if set(words) & set(RESERVED):
            raise VocabularyError(f"vocabulary file {path} lists reserved tokens")
        return cls(words)


def pad_batch(sequences: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncate/pad id sequences to ``max_len``; returns (tokens, mask)."""
    tokens = np.full((len(sequences), max_len), PAD_ID, dtype=np.int64)
    for row, ids in enumerate(sequences):
        ids = list(ids)[:max_len]
        tokens[row, : len(ids)] = ids
    return tokens, tokens != PAD_ID


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 256
    heads: int = 8
    d_k: int | None = None
    layers: int = 1
    ffn_dim: int = 512
    max_len: int = 15

    def __post_init__(self):
        if self.d_k is None and self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_k if self.d_k is not None else self.d_model // self.heads


@dataclass
class EncodedText:
    """Word features ``w`` (..., D, N), sentence feature ``s`` (..., D), real-token mask (..., N)."""

    w: Tensor
    s: Tensor
    mask: np.ndarray

    @property
    def n_real(self) -> np.ndarray:
        return self.mask.sum(axis=-1)

    def __len__(self) -> int:
        return self.w.shape[0]

    def __getitem__(self, index) -> "EncodedText":
        return EncodedText(self.w[index], self.s[index], self.mask[index])

    def detach(self) -> "EncodedText":
        return EncodedText(self.w.detach(), self.s.detach(), self.mask)


class TextEncoder(Module):
    def __init__(self, config: TransformerConfig, vocab_size: int, rng: np.random.Generator):
        self.config = config
        self.vocab_size = vocab_size
        self.embedding = Embedding(vocab_size, config.d_model, rng)
        self.layers = [
            EncoderLayer(config.d_model, config.heads, config.head_dim, config.ffn_dim, rng)
            for _ in range(config.layers)
        ]
        self._positions = sinusoidal_positions(config.max_len, config.d_model)

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError(f"expected a (batch, length) token array, got shape {tokens.shape}")
        if tokens.shape[1] > self.config.max_len:
            raise DimensionError(f"sequence length {tokens.shape[1]} exceeds N_max={self.config.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise VocabularyError(f"token ids must lie in [0, {self.vocab_size}), got {tokens.min()}..{tokens.max()}")
        return tokens

    def _embed_rows(self, tokens: np.ndarray) -> Tensor:
        return self.embedding(tokens) + Tensor(self._positions[: tokens.shape[1]])

    def embed(self, tokens) -> Tensor:
        """Token embedding plus sinusoidal positions: (D, N) for one sequence, (B, D, N) for a batch."""
        single = np.ndim(tokens) == 1
        tokens = self._check_tokens(np.atleast_2d(tokens))
        if not (tokens != PAD_ID).any(axis=1).all():
            raise DegenerateInputError("cannot embed a sequence made only of padding")
        rows = self._embed_rows(tokens).swapaxes(1, 2)
        return rows[0] if single else rows

    def encode(self, tokens, mask=None, return_attention: bool = False):
        """Encode a batch of sequences (B, N) into an ``EncodedText`` batch."""
        tokens = self._check_tokens(tokens)
        mask = tokens != PAD_ID if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != tokens.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match tokens {tokens.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateInputError("every sequence needs at least one real token")

        x = self._embed_rows(tokens)
        attention = []
        for layer in self.layers:
            x, weights = layer(x, key_mask=mask)
            attention.append(weights)

        weights_real = Tensor(mask[..., None].astype(np.float64))
        counts = Tensor(mask.sum(axis=1, keepdims=True).astype(np.float64))
        s = (x * weights_real).sum(axis=1) / counts
        encoded = EncodedText(w=x.swapaxes(1, 2), s=s, mask=mask)
        return (encoded, attention) if return_attention else encoded

    def encode_text(self, tokens, mask=None) -> EncodedText:
        """Encode one sequence; ``w`` is (D, N) and ``s`` is (D,)."""
        tokens = np.asarray(tokens, dtype=np.int64)[None]
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
        return self.encode(tokens, mask)[0]
