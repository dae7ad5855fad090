"""
Evaluation metrics and analysis exports: top-k R-precision, AIMCoS, class
similarity maps, BLEU-n and the embedding file used for external projection.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sacrebleu.metrics import BLEU

from .errors import ConfigError, DatasetError, DegenerateInputError, SamplingError
from .tensor import Tensor, cosine_similarity, no_grad
from .utils import atomic_write_text

log = logging.getLogger(__name__)

EMBEDDING_FORMAT_VERSION = 1


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between rows of ``a`` (P, D) and rows of ``b`` (Q, D)."""
    with no_grad():
        return cosine_similarity(Tensor(a[:, None, :]), Tensor(b[None, :, :]), axis=-1).data


@dataclass(frozen=True)
class RetrievalQuery:
    """One query's candidate pool; ``pool[0]`` is the positive."""

    query: int
    pool: np.ndarray
    top_k: int

    def hit(self, scores: np.ndarray) -> bool:
        """True when the positive ranks within ``top_k``; ties go to the lower candidate index."""
        positive = self.pool[0]
        pool_scores = scores[self.query, self.pool]
        ahead = (pool_scores > pool_scores[0]) | ((pool_scores == pool_scores[0]) & (self.pool < positive))
        return int(ahead.sum()) < self.top_k


def sample_queries(
    n_queries: int,
    n_candidates: int,
    positives: Sequence[int] | None = None,
    pool_size: int = 100,
    top_k: int = 3,
    seed: int = 0,
) -> list[RetrievalQuery]:
    if pool_size <= top_k:
        raise ConfigError(f"pool size {pool_size} must exceed top_k {top_k}")
    if pool_size > n_candidates:
        raise SamplingError(f"pool of {pool_size} needs at least that many candidates, have {n_candidates}")
    positives = np.arange(n_queries) if positives is None else np.asarray(positives, dtype=np.int64)
    rng = np.random.default_rng(seed)
    queries = []
    for query, positive in enumerate(positives):
        negatives = rng.choice(n_candidates - 1, size=pool_size - 1, replace=False)
        negatives = negatives + (negatives >= positive)
        queries.append(RetrievalQuery(query, np.concatenate([[positive], negatives]), top_k))
    return queries


def r_precision(
    scores: np.ndarray,
    positives: Sequence[int] | None = None,
    pool_size: int = 100,
    top_k: int = 3,
    seed: int = 0,
) -> float:
    """Fraction of queries (rows of ``scores``) whose positive candidate ranks in the top ``top_k``.

    Each pool is the positive plus ``pool_size - 1`` negatives drawn without
    replacement from the other candidates (columns). By default query ``i``'s
    positive is candidate ``i``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    queries = sample_queries(scores.shape[0], scores.shape[1], positives, pool_size, top_k, seed)
    if not queries:
        return 0.0
    return sum(q.hit(scores) for q in queries) / len(queries)


@dataclass(frozen=True)
class AttributeSet:
    image_id: str
    phrases: tuple[str, ...]


@dataclass(frozen=True)
class AimcosReport:
    score: float
    images: int
    skipped: int


def aimcos(
    global_features: np.ndarray,
    attribute_sets: Sequence[AttributeSet],
    encode: Callable[[list[str]], np.ndarray],
) -> AimcosReport:
    """Mean over images of the mean cosine between ``v`` and each attribute's ``s``.

    ``encode`` maps phrases to sentence features (K, D). Images with no attributes
    are skipped with a warning and counted in the report.
    """
    per_image, skipped = [], 0
    for v, attributes in zip(np.asarray(global_features), attribute_sets):
        if not attributes.phrases:
            log.warning(f"image {attributes.image_id} has no attributes; skipped in AIMCoS")
            skipped += 1
            continue
        sentence = np.asarray(encode(list(attributes.phrases)))
        per_image.append(cosine_matrix(v[None], sentence)[0].mean())
    score = float(np.mean(per_image)) if per_image else 0.0
    return AimcosReport(score=score, images=len(per_image), skipped=skipped)


def permuted_attribute_sets(attribute_sets: Sequence[AttributeSet], seed: int = 0) -> list[AttributeSet]:
    """Hand every image another image's attributes (a cyclic shift over a seeded shuffle)."""
    order = np.random.default_rng(seed).permutation(len(attribute_sets))
    shuffled = list(attribute_sets)
    for i, target in enumerate(order):
        source = attribute_sets[order[(i + 1) % len(order)]]
        shuffled[target] = AttributeSet(attribute_sets[target].image_id, source.phrases)
    return shuffled


def similarity_map(token_features: np.ndarray, image_groups: Sequence[np.ndarray]) -> np.ndarray:
    """(C, C) matrix: cell (i, j) is the mean cosine of token i against class j's images."""
    token_features = np.asarray(token_features)
    if len(image_groups) != len(token_features):
        raise DatasetError(f"{len(token_features)} class tokens but {len(image_groups)} image groups")
    columns = []
    for index, group in enumerate(image_groups):
        group = np.asarray(group)
        if group.shape[0] == 0:
            raise DegenerateInputError(f"image group {index} is empty")
        columns.append(cosine_matrix(token_features, group).mean(axis=1))
    return np.stack(columns, axis=1)


def write_similarity_csv(path: Path | str, labels: Sequence[str], matrix: np.ndarray) -> Path:
    lines = [",".join(["token", *labels])]
    lines += [",".join([label, *(repr(float(x)) for x in row)]) for label, row in zip(labels, matrix)]
    atomic_write_text(path, "\n".join(lines) + "\n")
    return Path(path)


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]], n: int = 4) -> float:
    """Corpus BLEU-n in [0, 1]: clipped n-gram precisions, geometric mean, brevity penalty, no smoothing."""
    if not 1 <= n <= 4:
        raise ConfigError(f"BLEU order must lie in 1..4, got {n}")
    if len(candidates) != len(references):
        raise DatasetError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if any(not refs for refs in references):
        raise DatasetError("every candidate needs at least one reference")
    empty = sum(1 for c in candidates if not c)
    if empty:
        log.warning(f"{empty} empty candidate(s) in BLEU evaluation")
    if not candidates or empty == len(candidates):
        return 0.0

    # sacrebleu wants aligned reference streams; repeating a reference leaves clipping and lengths unchanged
    width = max(len(refs) for refs in references)
    streams = [
        [" ".join(refs[i] if i < len(refs) else refs[0]) for refs in references]
        for i in range(width)
    ]
    metric = BLEU(tokenize="none", smooth_method="none", max_ngram_order=n, effective_order=False)
    return metric.corpus_score([" ".join(c) for c in candidates], streams).score / 100.0


def bleu_n(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int = 4) -> float:
    return corpus_bleu([candidate], [references], n)


def export_embeddings(path: Path | str, rows: Sequence[tuple[str, str, np.ndarray]], dim: int) -> Path:
    """Write ``(id, modality, features)`` rows under a versioned header."""
    lines = [f"laviter-embeddings version={EMBEDDING_FORMAT_VERSION} dim={dim} count={len(rows)}"]
    for identifier, modality, features in rows:
        if "," in identifier:
            raise DatasetError(f"embedding id {identifier!r} contains a comma")
        lines.append(",".join([identifier, modality, *(repr(float(x)) for x in features)]))
    atomic_write_text(path, "\n".join(lines) + "\n")
    log.info(f"wrote {len(rows)} embeddings to {path}")
    return Path(path)


def read_embeddings(path: Path | str) -> tuple[dict[str, int], list[tuple[str, str, np.ndarray]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("laviter-embeddings "):
        raise DatasetError(f"{path} is not an embedding file")
    header = {k: int(v) for k, v in (item.split("=") for item in lines[0].split()[1:])}
    if header.get("version") != EMBEDDING_FORMAT_VERSION:
        raise DatasetError(f"unsupported embedding file version {header.get('version')}")
    rows = []
    for line in lines[1:]:
        identifier, modality, *values = line.split(",")
        rows.append((identifier, modality, np.array([float(v) for v in values])))
    if len(rows) != header["count"]:
        raise DatasetError(f"{path} declares {header['count']} rows but holds {len(rows)}")
    return header, rows
