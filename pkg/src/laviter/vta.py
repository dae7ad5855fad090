"""
Visual-text alignment: word-region attention, matching scores and the symmetric
batch posterior losses that make up the total matching loss L_m.

All functions broadcast over leading axes, so a (B_i, 1, D, M) region tensor
against a (1, B_t, D, N) word tensor yields every image-text pair at once.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .image_encoder import EncodedImage
from .tensor import Tensor, as_tensor, cosine_similarity, log_softmax, logsumexp, no_grad, softmax
from .text_encoder import EncodedText

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GammaParams:
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class MatchBatch:
    """Index-aligned images and texts: pair (i, i) is positive, every other pair negative."""

    images: EncodedImage
    texts: EncodedText

    def __post_init__(self):
        if len(self.images) != len(self.texts):
            raise DimensionError(f"batch has {len(self.images)} images but {len(self.texts)} texts")
        if len(self.images) < 1:
            raise DimensionError("a match batch needs at least one pair")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class MatchingLoss:
    sentence_ti: Tensor
    sentence_it: Tensor
    word_ti: Tensor
    word_it: Tensor
    total: Tensor

    def components(self) -> dict[str, float]:
        return {
            "sentence_ti": self.sentence_ti.item(),
            "sentence_it": self.sentence_it.item(),
            "word_ti": self.word_ti.item(),
            "word_it": self.word_it.item(),
        }


def word_region_attention(w, r, mask=None, gamma1: float = 4.0) -> tuple[Tensor, Tensor]:
    """Attend from every word to the regions.

    ``w`` is (..., D, N), ``r`` is (..., D, M), ``mask`` (..., N) marks real words.
    Returns ``alpha`` (..., N, M), rows summing to 1 over regions, and the region
    context ``c`` (..., D, N).
    """
    w, r = as_tensor(w), as_tensor(r)
    if w.shape[-2] != r.shape[-2]:
        raise DimensionError(f"word features {w.shape} and region features {r.shape} disagree on D")
    similarity = w.swapaxes(-1, -2) @ r
    word_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., :, None]
    over_words = softmax(similarity, axis=-2, mask=word_mask)
    alpha = softmax(over_words * gamma1, axis=-1)
    context = r @ alpha.swapaxes(-1, -2)
    return alpha, context


def word_match_score(w, r, mask=None, gamma1: float = 4.0, gamma2: float = 5.0) -> Tensor:
    """(1/γ2)·log Σ_j exp(γ2·cos(c_j, w_j)) over real words."""
    w = as_tensor(w)
    mask = np.ones(w.shape[:-2] + w.shape[-1:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise DegenerateInputError("word match score needs at least one real word")
    _, context = word_region_attention(w, r, mask, gamma1)
    cos = cosine_similarity(context, w, axis=-2)
    return logsumexp(cos * gamma2, axis=-1, mask=mask) * (1.0 / gamma2)


def sentence_match_score(v, s) -> Tensor:
    return cosine_similarity(v, s, axis=-1)


def _pairwise_word_inputs(images: EncodedImage, texts: EncodedText):
    batch_i, dim, regions = images.r.shape
    batch_t, _, words = texts.w.shape
    r = images.r.reshape(batch_i, 1, dim, regions)
    w = texts.w.reshape(1, batch_t, texts.w.shape[1], words)
    return w, r, texts.mask[None]


def word_score_matrix(images: EncodedImage, texts: EncodedText, gamma: GammaParams) -> Tensor:
    """(B_i, B_t) word-level scores; row i scores image i against every text."""
    w, r, mask = _pairwise_word_inputs(images, texts)
    return word_match_score(w, r, mask, gamma.gamma1, gamma.gamma2)


def sentence_score_matrix(images: EncodedImage, texts: EncodedText) -> Tensor:
    batch_i, dim = images.v.shape
    batch_t = texts.s.shape[0]
    return sentence_match_score(images.v.reshape(batch_i, 1, dim), texts.s.reshape(1, batch_t, texts.s.shape[1]))


def batch_posterior_loss(scores, gamma3: float = 10.0) -> tuple[Tensor, Tensor]:
    """Symmetric batch losses over a square score matrix.

    Returns ``(L_it, L_ti)``: the mean negative log posterior of the diagonal under
    a row-wise and a column-wise softmax of ``gamma3 * scores``.
    """
    scores = as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimensionError(f"batch posterior loss needs a square score matrix, got {scores.shape}")
    diagonal = np.arange(scores.shape[0])
    scaled = scores * gamma3
    loss_it = -log_softmax(scaled, axis=1)[diagonal, diagonal].mean()
    loss_ti = -log_softmax(scaled, axis=0)[diagonal, diagonal].mean()
    return loss_it, loss_ti


def total_matching_loss(batch: MatchBatch, gamma: GammaParams) -> MatchingLoss:
    sentence_it, sentence_ti = batch_posterior_loss(sentence_score_matrix(batch.images, batch.texts), gamma.gamma3)
    word_it, word_ti = batch_posterior_loss(word_score_matrix(batch.images, batch.texts, gamma), gamma.gamma3)
    total = sentence_ti + sentence_it + word_ti + word_it
    return MatchingLoss(sentence_ti, sentence_it, word_ti, word_it, total)


def retrieval_scores(
    images: EncodedImage,
    texts: EncodedText,
    gamma: GammaParams,
    mode: str = "combined",
    chunk: int = 16,
) -> np.ndarray:
    """Score every image against every text without building a graph.

    ``mode`` is ``sentence``, ``word`` or ``combined`` (their unweighted sum).
    Images are processed ``chunk`` at a time to bound the pairwise context tensor.
    """
    if mode not in ("sentence", "word", "combined"):
        raise ConfigError(f"unknown score mode {mode!r}")
    rows = []
    with no_grad():
        for start in range(0, len(images), chunk):
            part = images[start : start + chunk]
            total = np.zeros((len(part), len(texts)))
            if mode in ("sentence", "combined"):
                total += sentence_score_matrix(part, texts).data
            if mode in ("word", "combined"):
                total += word_score_matrix(part, texts, gamma).data
            rows.append(total)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, len(texts)))
