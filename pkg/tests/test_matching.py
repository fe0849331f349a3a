import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clar.cif import accumulate_and_fire
from clar.encoders import EmbeddingBank
from clar.errors import ClarError, ShapeError, WindowError
from clar.matching import (
    NO_WINDOW,
    ShortPolicy,
    SimilarityMatrix,
    dumps_map,
    export_similarity_map,
    localized_span_embedding,
    mean_slice_score,
    rank_topk,
    score_all,
    similarity,
)

from oracles import naive_scores


def dummy_bank(widths, dim=1):
    n = len(widths)
    return EmbeddingBank(np.ones((n, dim)) / np.sqrt(dim), widths, [f"c{j}" for j in range(n)])


def two_frame_tokens(k):
    return accumulate_and_fire([0.5] * (2 * k), 1.0, "drop")


def random_case(rng, max_k=50, max_n=200, max_l=12):
    k = int(rng.integers(0, max_k + 1))
    # frames per token between 1 and 4, plus a few leftover frames
    weights = []
    for _ in range(k):
        f = int(rng.integers(1, 5))
        weights += [1.0 / f] * f
    weights += [0.1] * int(rng.integers(0, 3))
    align = accumulate_and_fire(weights, 1.0, "drop")
    n = int(rng.integers(1, max_n + 1))
    widths = rng.integers(1, max_l + 1, n)
    S = rng.normal(size=(align.num_frames, n))
    return align, SimilarityMatrix(S, 1.0), dummy_bank(widths)


def test_mean_slice_hand_example():
    align = two_frame_tokens(4)
    S = SimilarityMatrix(np.arange(1.0, 9.0)[:, None], 1.0)
    bank = dummy_bank([2])
    assert mean_slice_score(S, align, 0, 0, 2) == 2.5
    assert mean_slice_score(S, align, 0, 2, 2) == 6.5
    scored = score_all(S, align, bank)
    assert scored.best_score[0] == 6.5 and scored.best_start[0] == 2
    with pytest.raises(WindowError):
        mean_slice_score(S, align, 0, 3, 2)


def test_similarity_is_scaled_inner_product():
    audio = np.array([[1.0, 0.0], [0.6, 0.8]])
    bank = EmbeddingBank(np.array([[0.0, 1.0], [1.0, 0.0]]), [1, 1], ["a", "b"])
    sim = similarity(audio, bank, 2.0)
    np.testing.assert_allclose(sim.scores, [[0.0, 2.0], [1.6, 1.2]])
    with pytest.raises(ShapeError):
        similarity(np.ones((2, 3)), bank, 1.0)
    with pytest.raises(ClarError):
        similarity(audio, bank, 0.0)


def test_short_utterance_policies():
    align = two_frame_tokens(2)  # K = 2
    S = SimilarityMatrix(np.array([[1.0, 1.0], [3.0, 3.0], [5.0, 5.0], [7.0, 7.0]]), 1.0)
    bank = dummy_bank([1, 3])
    full = score_all(S, align, bank, ShortPolicy.FULL_WINDOW)
    assert full.best_score[1] == 4.0 and full.fallback[1] and full.best_start[1] == NO_WINDOW
    assert full.best_score[0] == 6.0 and not full.fallback[0]
    skip = score_all(S, align, bank, "skip")
    assert skip.skipped[1] and skip.best_score[1] == -np.inf
    ranked = rank_topk(skip, bank, 5)
    assert ranked.labels == ["c0"]


def test_no_fires_falls_back_to_all_frames():
    align = accumulate_and_fire([0.1, 0.1, 0.1], 1.0, "drop")
    S = SimilarityMatrix(np.array([[1.0], [2.0], [6.0]]), 1.0)
    scored = score_all(S, align, dummy_bank([1]))
    assert scored.best_score[0] == 3.0 and scored.fallback[0]


def test_fallback_ignores_unemitted_tail_frames():
    align = accumulate_and_fire([1.0, 1.0, 0.1], 1.0, "drop")  # K = 2, frame 2 not covered
    S = SimilarityMatrix(np.array([[1.0], [3.0], [100.0]]), 1.0)
    scored = score_all(S, align, dummy_bank([3]))
    assert scored.best_score[0] == 2.0


def test_frame_count_mismatch():
    with pytest.raises(ShapeError):
        score_all(SimilarityMatrix(np.zeros((3, 1)), 1.0), two_frame_tokens(2), dummy_bank([1]))


def test_empty_bank():
    align = two_frame_tokens(2)
    bank = EmbeddingBank(np.zeros((0, 4)), [], [])
    scored = score_all(SimilarityMatrix(np.zeros((4, 0)), 1.0), align, bank)
    assert len(scored) == 0
    record = export_similarity_map(SimilarityMatrix(np.zeros((4, 0)), 1.0), align, bank, scored)
    assert record["candidates"] == []


def test_matches_naive_double_loop():
    rng = np.random.default_rng(99)
    for i in range(1000):
        align, S, bank = random_case(rng)
        policy = "full_window" if i % 3 else "skip"
        fast = score_all(S, align, bank, policy)
        best, start = naive_scores(S.scores, list(align.spans), bank.token_lengths, policy)
        np.testing.assert_allclose(fast.best_score, best, atol=1e-9, rtol=0)
        windowed = bank.token_lengths <= align.emitted_count
        np.testing.assert_array_equal(fast.best_start[windowed], start[windowed])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 50.0))
def test_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 10))
    align = two_frame_tokens(k)
    audio = rng.normal(size=(2 * k, 4))
    emb = rng.normal(size=(6, 4))
    bank = EmbeddingBank(emb / np.linalg.norm(emb, axis=1, keepdims=True), rng.integers(1, 5, 6), list("abcdef"))
    base = score_all(similarity(audio, bank, 1.0), align, bank)
    scaled = score_all(similarity(audio, bank, c), align, bank)
    np.testing.assert_allclose(scaled.best_score, c * base.best_score, rtol=1e-9, atol=1e-12)
    assert rank_topk(scaled, bank, 6).indices == rank_topk(base, bank, 6).indices


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_equivariance_and_bounds(seed):
    rng = np.random.default_rng(seed)
    align, S, bank = random_case(rng, max_k=12, max_n=20, max_l=4)
    perm = rng.permutation(len(bank))
    scored = score_all(S, align, bank)
    permuted = score_all(SimilarityMatrix(S.scores[:, perm], 1.0), align, bank.subset(perm))
    np.testing.assert_allclose(permuted.best_score, scored.best_score[perm], atol=1e-12)
    if align.emitted_count:
        emitted = S.scores[: align.covered_frames()]
        ok = np.isfinite(scored.best_score)
        assert np.all(scored.best_score[ok] <= emitted.max(axis=0)[ok] + 1e-12)
        assert np.all(scored.best_score[ok] >= emitted.min(axis=0)[ok] - 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.data())
def test_constructive_localization(k, data):
    L = data.draw(st.integers(1, k))
    s = data.draw(st.integers(0, k - L))
    align = two_frame_tokens(k)
    col = np.zeros(2 * k)
    col[2 * s : 2 * (s + L)] = 1.0
    scored = score_all(SimilarityMatrix(col[:, None], 1.0), align, dummy_bank([L]))
    assert scored.best_start[0] == s and scored.best_score[0] == 1.0


def test_rank_ties_keep_bank_order():
    align = two_frame_tokens(1)
    S = SimilarityMatrix(np.array([[1.0, 2.0, 2.0, 1.0], [1.0, 2.0, 2.0, 1.0]]), 1.0)
    bank = dummy_bank([1, 1, 1, 1])
    ranked = rank_topk(score_all(S, align, bank), bank, 3)
    assert ranked.indices == [1, 2, 0]
    with pytest.raises(ClarError):
        rank_topk(score_all(S, align, bank), bank, 0)


def test_localized_span_embedding():
    align = two_frame_tokens(3)
    audio = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [0.0, 2.0], [5.0, 5.0], [5.0, 5.0]])
    np.testing.assert_allclose(localized_span_embedding(audio, align, (0, 1)), [1 / np.sqrt(5), 2 / np.sqrt(5)])
    with pytest.raises(WindowError):
        localized_span_embedding(audio, align, (2, 1))


def test_export_round_trip_and_cross_check():
    rng = np.random.default_rng(3)
    align, S, bank = random_case(rng, max_k=8, max_n=6, max_l=3)
    scored = score_all(S, align, bank)
    ranked = rank_topk(scored, bank, 3)
    record = export_similarity_map(S, align, bank, scored, ranked, "u1")
    assert json.loads(dumps_map(record)) == record
    assert record["format_version"] == 1
    for cand in record["candidates"]:
        j = cand["index"]
        if cand["best_window_start"] is not None:
            assert cand["best_window_start"] == scored.best_start[j]
            b, e = cand["frame_span"]
            assert np.mean(S.scores[b : e + 1, j]) == pytest.approx(scored.best_score[j], abs=1e-12)
    two = export_similarity_map(SimilarityMatrix(np.eye(2), 1.0), two_frame_tokens(1), dummy_bank([1, 1]),
                                score_all(SimilarityMatrix(np.eye(2), 1.0), two_frame_tokens(1), dummy_bank([1, 1])))
    assert json.loads(dumps_map(two)) == two
