import math

import numpy as np
import pytest

from laviter.errors import ConfigError, DegenerateInputError, DimensionError
from laviter.image_encoder import EncodedImage
from laviter.tensor import Tensor
from laviter.text_encoder import EncodedText
from laviter.vta import (
    GammaParams,
    MatchBatch,
    batch_posterior_loss,
    retrieval_scores,
    sentence_score_matrix,
    total_matching_loss,
    word_match_score,
    word_region_attention,
    word_score_matrix,
)

from .gradcheck import check_gradients

GAMMA = GammaParams(4.0, 5.0, 10.0)


def random_batch(rng, batch=None, words=None, regions=None, dim=None):
    batch = batch or int(rng.integers(1, 5))
    words = words or int(rng.integers(1, 6))
    regions = regions or int(rng.integers(1, 7))
    dim = dim or int(rng.integers(2, 9))
    lengths = rng.integers(1, words + 1, size=batch)
    mask = np.arange(words)[None, :] < lengths[:, None]
    images = EncodedImage(Tensor(rng.normal(size=(batch, dim, regions))), Tensor(rng.normal(size=(batch, dim))))
    texts = EncodedText(Tensor(rng.normal(size=(batch, dim, words))), Tensor(rng.normal(size=(batch, dim))), mask)
    return images, texts


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def oracle_word_score(w, r, gamma):
    similarity = w.T @ r
    normalized = _softmax(similarity, axis=0)
    alpha = _softmax(gamma.gamma1 * normalized, axis=1)
    context = r @ alpha.T
    total = sum(math.exp(gamma.gamma2 * _cos(context[:, j], w[:, j])) for j in range(w.shape[1]))
    return math.log(total) / gamma.gamma2


def oracle_posterior_losses(scores, gamma3):
    batch = scores.shape[0]
    loss_it = loss_ti = 0.0
    for i in range(batch):
        loss_it -= math.log(math.exp(gamma3 * scores[i, i]) / sum(math.exp(gamma3 * scores[i, j]) for j in range(batch)))
        loss_ti -= math.log(math.exp(gamma3 * scores[i, i]) / sum(math.exp(gamma3 * scores[j, i]) for j in range(batch)))
    return loss_it / batch, loss_ti / batch


def oracle_matching_loss(images, texts, gamma):
    batch = len(images)
    word = np.zeros((batch, batch))
    sentence = np.zeros((batch, batch))
    for i in range(batch):
        for j in range(batch):
            real = texts.mask[j]
            word[i, j] = oracle_word_score(texts.w.data[j][:, real], images.r.data[i], gamma)
            sentence[i, j] = _cos(images.v.data[i], texts.s.data[j])
    return sum(oracle_posterior_losses(sentence, gamma.gamma3)) + sum(oracle_posterior_losses(word, gamma.gamma3))


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        images, texts = random_batch(rng)
        loss = total_matching_loss(MatchBatch(images, texts), GAMMA)
        assert loss.total.item() == pytest.approx(oracle_matching_loss(images, texts, GAMMA), abs=1e-10)


def test_uniform_scores_give_log_batch_size():
    for batch in (1, 2, 5):
        loss_it, loss_ti = batch_posterior_loss(Tensor(np.full((batch, batch), 0.37)), 10.0)
        assert loss_it.item() == pytest.approx(math.log(batch), abs=1e-10)
        assert loss_ti.item() == pytest.approx(math.log(batch), abs=1e-10)


def test_single_word_score_is_cosine():
    rng = np.random.default_rng(5)
    w, r = rng.normal(size=(6, 1)), rng.normal(size=(6, 4))
    _, context = word_region_attention(w, r, gamma1=4.0)
    score = word_match_score(w, r, gamma1=4.0, gamma2=5.0)
    assert score.item() == pytest.approx(_cos(context.data[:, 0], w[:, 0]), abs=1e-10)


def test_equal_cosines_add_log_word_count():
    # a single region makes every context vector r itself; identical words make every cosine equal
    rng = np.random.default_rng(6)
    r = rng.normal(size=(5, 1))
    words = 4
    w = np.repeat(rng.normal(size=(5, 1)), words, axis=1)
    c0 = _cos(r[:, 0], w[:, 0])
    score = word_match_score(w, r, gamma1=4.0, gamma2=5.0)
    assert score.item() == pytest.approx(c0 + math.log(words) / 5.0, abs=1e-10)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(7)
    mask = np.array([True, True, False])
    alpha, context = word_region_attention(rng.normal(size=(4, 3)), rng.normal(size=(4, 5)), mask)
    assert alpha.shape == (3, 5)
    assert context.shape == (4, 3)
    np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-12)


def test_padding_words_do_not_change_scores():
    rng = np.random.default_rng(8)
    images, texts = random_batch(rng, batch=3, words=5)
    changed = texts.w.data.copy()
    changed[~np.broadcast_to(texts.mask[:, None, :], changed.shape)] = 99.0
    noisy = EncodedText(Tensor(changed), texts.s, texts.mask)
    np.testing.assert_allclose(
        word_score_matrix(images, texts, GAMMA).data, word_score_matrix(images, noisy, GAMMA).data, atol=1e-12
    )


def test_score_matrices_are_image_by_text():
    rng = np.random.default_rng(9)
    images, _ = random_batch(rng, batch=2, dim=4)
    _, texts = random_batch(rng, batch=3, dim=4)
    assert word_score_matrix(images, texts, GAMMA).shape == (2, 3)
    assert sentence_score_matrix(images, texts).shape == (2, 3)
    scores = retrieval_scores(images, texts, GAMMA, chunk=1)
    expected = word_score_matrix(images, texts, GAMMA).data + sentence_score_matrix(images, texts).data
    np.testing.assert_allclose(scores, expected, atol=1e-12)


def test_retrieval_score_modes():
    rng = np.random.default_rng(10)
    images, texts = random_batch(rng, batch=3)
    np.testing.assert_allclose(
        retrieval_scores(images, texts, GAMMA, mode="sentence"), sentence_score_matrix(images, texts).data
    )
    with pytest.raises(ConfigError):
        retrieval_scores(images, texts, GAMMA, mode="region")


@pytest.mark.parametrize("seed", range(10))
def test_matching_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    images, texts = random_batch(rng, batch=3, words=3, regions=4, dim=4)
    gamma = GammaParams(4.0, 5.0, 2.0)

    def loss(r, v, w, s):
        batch = MatchBatch(EncodedImage(r, v), EncodedText(w, s, texts.mask))
        return total_matching_loss(batch, gamma).total

    check_gradients(loss, images.r.data, images.v.data, texts.w.data, texts.s.data)


def test_components_sum_to_total():
    images, texts = random_batch(np.random.default_rng(11), batch=3)
    loss = total_matching_loss(MatchBatch(images, texts), GAMMA)
    assert sum(loss.components().values()) == pytest.approx(loss.total.item(), abs=1e-12)


def test_batch_contract_errors():
    rng = np.random.default_rng(12)
    images, _ = random_batch(rng, batch=2, dim=4)
    _, texts = random_batch(rng, batch=3, dim=4)
    with pytest.raises(DimensionError):
        MatchBatch(images, texts)
    with pytest.raises(DimensionError):
        batch_posterior_loss(Tensor(np.ones((2, 3))))
    with pytest.raises(DegenerateInputError):
        word_match_score(np.ones((3, 2)), np.ones((3, 2)), mask=np.array([False, False]))
    with pytest.raises(ConfigError):
        GammaParams(0.0, 5.0, 10.0)


def _permuted(images, texts, order):
    return (
        EncodedImage(Tensor(images.r.data[order]), Tensor(images.v.data[order])),
        EncodedText(Tensor(texts.w.data[order]), Tensor(texts.s.data[order]), texts.mask[order]),
    )


def test_loss_ignores_consistent_batch_order():
    rng = np.random.default_rng(13)
    images, texts = random_batch(rng, batch=4, words=4, regions=3, dim=5)
    base = total_matching_loss(MatchBatch(images, texts), GAMMA)
    shuffled = total_matching_loss(MatchBatch(*_permuted(images, texts, rng.permutation(4))), GAMMA)
    for name, value in base.components().items():
        assert shuffled.components()[name] == pytest.approx(value, abs=1e-10)


def test_single_pair_has_zero_loss():
    images, texts = random_batch(np.random.default_rng(14), batch=1)
    loss = total_matching_loss(MatchBatch(images, texts), GAMMA)
    assert loss.total.item() == pytest.approx(0.0, abs=1e-12)


def test_duplicated_pair_gives_log_two_per_term():
    images, texts = random_batch(np.random.default_rng(15), batch=1, words=3, regions=4, dim=6)
    twice = _permuted(images, texts, np.array([0, 0]))
    loss = total_matching_loss(MatchBatch(*twice), GAMMA)
    for value in loss.components().values():
        assert value == pytest.approx(math.log(2), abs=1e-10)


def test_saturated_diagonal_has_vanishing_loss():
    scores = 2 * np.eye(3) - 1
    loss_it, loss_ti = batch_posterior_loss(Tensor(scores), 10.0)
    assert loss_it.item() < 1e-8
    assert loss_ti.item() < 1e-8


def test_every_term_is_nonnegative():
    rng = np.random.default_rng(16)
    for _ in range(50):
        images, texts = random_batch(rng)
        loss = total_matching_loss(MatchBatch(images, texts), GAMMA)
        assert all(value >= -1e-12 for value in loss.components().values())


def test_sentence_score_ignores_feature_scale():
    images, texts = random_batch(np.random.default_rng(17), batch=3, dim=4)
    scaled_images = EncodedImage(images.r, Tensor(images.v.data * 3.7))
    scaled_texts = EncodedText(texts.w, Tensor(texts.s.data * 0.2), texts.mask)
    np.testing.assert_allclose(
        sentence_score_matrix(scaled_images, scaled_texts).data, sentence_score_matrix(images, texts).data, atol=1e-12
    )
