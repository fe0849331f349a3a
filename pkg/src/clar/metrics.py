"""Retrieval metrics (Recall@K, F1) and biasing-aware ASR error rates (CER, B-WER, U-CER)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import DataError

REPORT_VERSION = 1

# edit operations
MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def edit_path(hyp: Sequence, ref: Sequence) -> list[tuple[str, int]]:
    """Minimum-cost alignment as ``(op, ref_position)`` pairs in ref order.

    For insertions ``ref_position`` is the index of the next ref symbol
    (``len(ref)`` when inserting at the end). Ties prefer match/substitution,
    then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1][j] + 1, d[i][j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, i - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append((DEL, i - 1))
            i -= 1
        else:
            ops.append((INS, i))
            j -= 1
    ops.reverse()
    return ops


def cer(hyp: str, ref: str) -> float:
    if not ref:
        raise DataError("CER is undefined for an empty reference")
    return 100.0 * edit_distance(hyp, ref) / len(ref)


def bias_mask(ref: str, bias_list: Sequence[str]) -> list[bool]:
    """True for every ref character covered by some occurrence of a bias word."""
    mask = [False] * len(ref)
    for word in bias_list:
        if not word:
            continue
        start = ref.find(word)
        while start != -1:
            for p in range(start, start + len(word)):
                mask[p] = True
            start = ref.find(word, start + 1)
    return mask


@dataclass
class BiasCounts:
    biased_errors: int = 0
    biased_len: int = 0
    unbiased_errors: int = 0
    unbiased_len: int = 0

    def __iadd__(self, other: "BiasCounts"):
        self.biased_errors += other.biased_errors
        self.biased_len += other.biased_len
        self.unbiased_errors += other.unbiased_errors
        self.unbiased_len += other.unbiased_len
        return self

    @property
    def b_wer(self) -> float | None:
        return 100.0 * self.biased_errors / self.biased_len if self.biased_len else None

    @property
    def u_cer(self) -> float | None:
        return 100.0 * self.unbiased_errors / self.unbiased_len if self.unbiased_len else None


def biased_counts(hyp: str, ref: str, bias_list: Sequence[str]) -> BiasCounts:
    mask = bias_mask(ref, bias_list)
    counts = BiasCounts(biased_len=sum(mask), unbiased_len=len(ref) - sum(mask))
    for op, pos in edit_path(hyp, ref):
        if op == MATCH:
            continue
        # insertions belong to the region of the following ref character
        biased = pos < len(ref) and mask[pos]
        if biased:
            counts.biased_errors += 1
        else:
            counts.unbiased_errors += 1
    return counts


def biased_metrics(hyp: str, ref: str, bias_list: Sequence[str]) -> tuple[float | None, float | None]:
    """``(b_wer, u_cer)`` in percent; a rate is ``None`` when its region is empty."""
    if not ref:
        raise DataError("biased metrics are undefined for an empty reference")
    c = biased_counts(hyp, ref, bias_list)
    return c.b_wer, c.u_cer


def _gold_pairs(gold: Mapping[str, Sequence[str]], bank_labels=None):
    known = set(bank_labels) if bank_labels is not None else None
    pairs = []
    for uid in sorted(gold):
        for label in gold[uid]:
            if known is not None and label not in known:
                raise DataError(f"gold hotword {label!r} of {uid} is not in the bank")
            pairs.append((uid, label))
    return pairs


def recall_at_k(ranked: Mapping[str, Sequence[str]], gold: Mapping[str, Sequence[str]], k: int,
                bank_labels: Sequence[str] | None = None) -> float:
    """Percent of (utterance, gold hotword) pairs found in that utterance's top ``k``."""
    pairs = _gold_pairs(gold, bank_labels)
    if not pairs:
        raise DataError("recall needs at least one gold hotword")
    hits = sum(label in list(ranked.get(uid, []))[:k] for uid, label in pairs)
    return 100.0 * hits / len(pairs)


def f1_score(ranked: Mapping[str, Sequence[tuple[str, float]]], gold: Mapping[str, Sequence[str]],
             threshold: float | None = None) -> float:
    """F1 in percent over (utterance, hotword) pairs.

    Without a threshold each utterance predicts its top-1 candidate; with one,
    every listed candidate scoring at least ``threshold`` is predicted.
    """
    predicted = set()
    for uid, items in ranked.items():
        items = list(items)
        if threshold is None:
            predicted.update((uid, label) for label, _ in items[:1])
        else:
            predicted.update((uid, label) for label, score in items if score >= threshold)
    truth = {(uid, label) for uid, labels in gold.items() for label in labels}
    tp = len(predicted & truth)
    if tp == 0:
        return 0.0
    precision = tp / len(predicted)
    recall = tp / len(truth)
    return 100.0 * 2 * precision * recall / (precision + recall)


def r1_hotwords(baseline_hyps: Mapping[str, str], refs: Mapping[str, str], hotwords: Sequence[str],
                threshold: float = 40.0) -> list[str]:
    """Hotwords whose recall in a baseline system's output is below ``threshold`` percent.

    A hotword occurrence counts as recalled when the baseline hypothesis for
    that utterance contains it.
    """
    hard = []
    for word in hotwords:
        seen = [uid for uid, ref in refs.items() if word in ref]
        if not seen:
            continue
        hit = sum(word in baseline_hyps.get(uid, "") for uid in seen)
        if 100.0 * hit / len(seen) < threshold:
            hard.append(word)
    return hard


@dataclass
class EvalReport:
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    f1: float
    cer: float | None = None
    b_wer: float | None = None
    u_cer: float | None = None
    num_utterances: int = 0
    r1_recall_at_1: float | None = None
    details: list[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "recall@1": self.recall_at_1,
            "recall@5": self.recall_at_5,
            "recall@10": self.recall_at_10,
            "f1": self.f1,
            "cer": self.cer,
            "b_wer": self.b_wer,
            "u_cer": self.u_cer,
            "r1_recall@1": self.r1_recall_at_1,
            "num_utterances": self.num_utterances,
            "details": self.details,
        }

    def table(self) -> str:
        rows = [("Recall@1", self.recall_at_1), ("Recall@5", self.recall_at_5), ("Recall@10", self.recall_at_10),
                ("F1", self.f1), ("CER", self.cer), ("B-WER", self.b_wer), ("U-CER", self.u_cer),
                ("R1 Recall@1", self.r1_recall_at_1)]
        lines = [f"{'metric':<12} {'value':>8}"]
        for name, value in rows:
            lines.append(f"{name:<12} {'-' if value is None else f'{value:8.2f}':>8}")
        lines.append(f"{'utterances':<12} {self.num_utterances:>8d}")
        return "\n".join(lines)


def evaluate(ranked: Mapping[str, Sequence[tuple[str, float]]], gold: Mapping[str, Sequence[str]],
             bank_labels: Sequence[str] | None = None, hyps: Mapping[str, str] | None = None,
             refs: Mapping[str, str] | None = None, baseline: Mapping[str, str] | None = None,
             threshold: float | None = None) -> EvalReport:
    """Aggregate retrieval metrics and, when hypotheses are supplied, corpus-level error rates.

    The bias list for B-WER/U-CER is the bank when given, else each utterance's gold hotwords.
    """
    labels = {uid: [lab for lab, _ in items] for uid, items in ranked.items()}
    r = {k: recall_at_k(labels, gold, k, bank_labels) for k in (1, 5, 10)}
    report = EvalReport(r[1], r[5], r[10], f1_score(ranked, gold, threshold), num_utterances=len(gold))

    for uid in sorted(gold):
        got = labels.get(uid, [])
        report.details.append({
            "utterance_id": uid,
            "gold": list(gold[uid]),
            "top1": got[0] if got else None,
            "gold_ranks": [got.index(g) + 1 if g in got else None for g in gold[uid]],
        })

    if hyps is not None:
        if refs is None:
            raise DataError("error rates need reference transcripts")
        edits = total = 0
        counts = BiasCounts()
        for uid in sorted(refs):
            ref = refs[uid]
            hyp = hyps.get(uid, "")
            edits += edit_distance(hyp, ref)
            total += len(ref)
            bias = bank_labels if bank_labels is not None else gold.get(uid, [])
            counts += biased_counts(hyp, ref, bias)
        report.cer = 100.0 * edits / total if total else None
        report.b_wer = counts.b_wer
        report.u_cer = counts.u_cer

    if baseline is not None and refs is not None:
        hard = set(r1_hotwords(baseline, refs, bank_labels if bank_labels is not None else
                               sorted({g for gs in gold.values() for g in gs})))
        sub = {uid: [g for g in gs if g in hard] for uid, gs in gold.items()}
        sub = {uid: gs for uid, gs in sub.items() if gs}
        report.r1_recall_at_1 = recall_at_k(labels, sub, 1) if sub else None
    return report
