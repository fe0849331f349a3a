"""Frame-by-candidate similarity and CIF-windowed mean-slice scoring.

For a candidate of token length ``L`` the score at window start ``s`` is the
plain mean of its similarity column over frames ``b_s .. e_{s+L-1}``, and the
candidate's retrieval score is the best such window.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .cif import CifAlignment, spans_for_window
from .encoders import EmbeddingBank
from .errors import ClarError, ShapeError, WindowError
from .kernels import l2_normalize, matmul

MAP_VERSION = 1
NO_WINDOW = -1  # best_start sentinel for fallback or skipped candidates


class ShortPolicy(str, enum.Enum):
    FULL_WINDOW = "full_window"
    SKIP = "skip"


@dataclass(frozen=True)
class SimilarityMatrix:
    scores: np.ndarray  # (T, N)
    tau: float


@dataclass
class ScoredCandidates:
    best_score: np.ndarray
    best_start: np.ndarray
    widths: np.ndarray
    fallback: np.ndarray  # scored over one window of all frames because L_j > K
    skipped: np.ndarray

    def __len__(self):
        return len(self.best_score)


@dataclass
class RetrievalResult:
    indices: list[int]
    labels: list[str]
    scores: list[float]

    def __len__(self):
        return len(self.indices)

    def to_record(self) -> list[dict]:
        return [{"label": lab, "score": sc} for lab, sc in zip(self.labels, self.scores)]


def similarity(audio_emb, bank: EmbeddingBank, tau: float) -> SimilarityMatrix:
    if tau <= 0:
        raise ClarError(f"logit scale must be positive, got {tau}")
    a = np.asarray(audio_emb, dtype=np.float64)
    if a.ndim != 2 or (len(bank) and a.shape[1] != bank.dim):
        raise ShapeError("similarity", a.shape, bank.embeddings.shape)
    return SimilarityMatrix(tau * matmul(a, bank.embeddings.T), float(tau))


def mean_slice_score(sim: SimilarityMatrix, alignment: CifAlignment, j: int, start: int, width: int) -> float:
    b, e = spans_for_window(alignment, start, width)
    column = sim.scores[b : e + 1, j]
    return float(column.sum() / (e - b + 1))


def score_all(sim: SimilarityMatrix, alignment: CifAlignment, bank: EmbeddingBank,
              short_policy=ShortPolicy.FULL_WINDOW) -> ScoredCandidates:
    """Best-window score for every candidate.

    Uses one prefix-sum table over frames and a single window sweep per
    distinct candidate length.
    """
    short_policy = ShortPolicy(short_policy)
    S = sim.scores
    T, N = S.shape
    if N != len(bank):
        raise ShapeError("score_all", S.shape, (None, len(bank)), detail="similarity built against another bank")
    if T != alignment.num_frames:
        raise ShapeError("score_all", S.shape, (alignment.num_frames, None), detail="frame count mismatch")

    widths = bank.token_lengths.copy()
    best = np.full(N, -np.inf)
    start = np.full(N, NO_WINDOW, dtype=np.int64)
    fallback = np.zeros(N, dtype=bool)
    skipped = np.zeros(N, dtype=bool)
    if N == 0:
        return ScoredCandidates(best, start, widths, fallback, skipped)

    K = alignment.emitted_count
    prefix = np.zeros((T + 1, N))
    np.cumsum(S, axis=0, out=prefix[1:])
    b = alignment.span_starts()
    e = alignment.span_ends()

    for L in np.unique(widths):
        cols = np.flatnonzero(widths == L)
        if L <= K:
            lo = b[: K - L + 1]
            hi = e[L - 1 :]
            sums = prefix[np.ix_(hi + 1, cols)] - prefix[np.ix_(lo, cols)]
            means = sums / (hi - lo + 1)[:, None]
            arg = np.argmax(means, axis=0)
            best[cols] = means[arg, np.arange(len(cols))]
            start[cols] = arg
        elif short_policy is ShortPolicy.FULL_WINDOW and T > 0:
            # K == 0 means nothing fired: fall back to the whole utterance
            end = alignment.covered_frames() if K > 0 else T
            best[cols] = prefix[end, cols] / end
            fallback[cols] = True
        else:
            skipped[cols] = True
    return ScoredCandidates(best, start, widths, fallback, skipped)


def rank_topk(scored: ScoredCandidates, bank: EmbeddingBank, k: int) -> RetrievalResult:
    """Top ``k`` candidates by score; ties keep ascending bank order, skipped ones are dropped."""
    if k < 1:
        raise ClarError(f"k must be >= 1, got {k}")
    keep = np.flatnonzero(~scored.skipped)
    order = keep[np.argsort(-scored.best_score[keep], kind="stable")][:k]
    return RetrievalResult(
        indices=[int(i) for i in order],
        labels=[bank.labels[i] for i in order],
        scores=[float(scored.best_score[i]) for i in order],
    )


def localized_span_embedding(audio_emb, alignment: CifAlignment, token_span: tuple[int, int]) -> np.ndarray:
    """Normalized mean of frame embeddings over tokens ``token_span[0] .. token_span[1]`` (inclusive)."""
    first, last = token_span
    if first > last:
        raise WindowError(f"token span {token_span} is reversed")
    b, e = spans_for_window(alignment, first, last - first + 1)
    a = np.asarray(audio_emb, dtype=np.float64)
    return l2_normalize(a[b : e + 1].mean(axis=0))


def export_similarity_map(sim: SimilarityMatrix, alignment: CifAlignment, bank: EmbeddingBank,
                          scored: ScoredCandidates, ranked: RetrievalResult | None = None,
                          utterance_id: str | None = None) -> dict:
    """JSON-ready record of S, token boundaries and each candidate's best window."""
    candidates = []
    for j, label in enumerate(bank.labels):
        s = int(scored.best_start[j])
        frames = None
        if s != NO_WINDOW:
            frames = list(spans_for_window(alignment, s, int(scored.widths[j])))
        score = float(scored.best_score[j])
        candidates.append({
            "index": j,
            "label": label,
            "width": int(scored.widths[j]),
            "best_score": score if np.isfinite(score) else None,
            "best_window_start": s if s != NO_WINDOW else None,
            "frame_span": frames,
            "fallback": bool(scored.fallback[j]),
            "skipped": bool(scored.skipped[j]),
        })
    return {
        "format_version": MAP_VERSION,
        "utterance_id": utterance_id,
        "tau": sim.tau,
        "similarity": sim.scores.tolist(),
        "token_spans": [list(sp) for sp in alignment.spans],
        "candidates": candidates,
        "ranked": ranked.to_record() if ranked is not None else [],
    }


def dumps_map(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False)
