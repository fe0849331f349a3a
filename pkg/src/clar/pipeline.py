"""End-to-end hotword retrieval, prompt emission and similarity-map export."""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .cif import CifAlignment, TailPolicy, accumulate_and_fire
from .data import UtteranceRecord
from .encoders import ClarModel, EmbeddingBank, build_bank, lengths_to_mask, pad_features
from .errors import ClarError, DataError
from .matching import (
    RetrievalResult,
    ShortPolicy,
    export_similarity_map,
    rank_topk,
    score_all,
    similarity,
)

RESULTS_VERSION = 1
DEFAULT_TEMPLATE = "Hotwords: {hotwords}. Transcribe the audio."
PLACEHOLDER = "{hotwords}"
PROMPT_SEP = ", "


@dataclass
class UtteranceView:
    """Inference-time encodings of one utterance."""

    frames: np.ndarray  # (T, D) unit rows
    alignment: CifAlignment


def encode_utterances(model: ClarModel, records: Sequence[UtteranceRecord], tail=TailPolicy.HALF,
                      batch_size: int = 64) -> list[UtteranceView]:
    """Batched speech forward; each utterance gets its own CIF alignment from raw weights."""
    views = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        nonempty = [r for r in chunk if len(r.features)]
        encoded = {}
        if nonempty:
            feats, lengths = pad_features([r.features for r in nonempty], model.config.feat_dim)
            with torch.no_grad():
                hidden, out_lengths = model.speech(feats, lengths)
                alphas = model.cif(hidden, lengths_to_mask(out_lengths, hidden.shape[1]))
                frames = model.audio_proj(hidden)
            for i, r in enumerate(nonempty):
                n = int(out_lengths[i])
                encoded[id(r)] = UtteranceView(frames[i, :n].numpy(), accumulate_and_fire(alphas[i, :n].numpy(), 1.0, tail))
        for r in chunk:
            if id(r) not in encoded:
                encoded[id(r)] = UtteranceView(np.zeros((0, model.config.embed_dim)), accumulate_and_fire([], 1.0, tail))
            views.append(encoded[id(r)])
    return views


def bank_from_candidates(model: ClarModel, candidates: Sequence[tuple[str, Sequence[int]]]) -> EmbeddingBank:
    return build_bank(candidates, model.text, model.text_proj)


def score_view(view: UtteranceView, bank: EmbeddingBank, tau: float, policy=ShortPolicy.FULL_WINDOW):
    sim = similarity(view.frames, bank, tau)
    return sim, score_all(sim, view.alignment, bank, policy)


def retrieve(utterance: UtteranceRecord, bank: EmbeddingBank, model: ClarModel, k: int = 10,
             tail=TailPolicy.HALF, policy=ShortPolicy.FULL_WINDOW) -> RetrievalResult:
    """Rank bank candidates for one utterance.

    A zero-frame utterance yields an empty result rather than an error.
    """
    return retrieve_many([utterance], bank, model, k, tail, policy)[0]


def _threads() -> int:
    raw = os.environ.get("CLAR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ClarError(f"CLAR_THREADS must be an integer, got {raw!r}") from None


def retrieve_many(records: Sequence[UtteranceRecord], bank: EmbeddingBank, model: ClarModel, k: int = 10,
                  tail=TailPolicy.HALF, policy=ShortPolicy.FULL_WINDOW) -> list[RetrievalResult]:
    views = encode_utterances(model, records, tail)
    tau = model.logit_scale.item()

    def run(pair):
        record, view = pair
        if view.alignment.num_frames == 0:
            return RetrievalResult([], [], [])
        try:
            _, scored = score_view(view, bank, tau, policy)
            return rank_topk(scored, bank, k)
        except ClarError as exc:
            raise ClarError(f"utterance {record.id}: {exc}") from exc

    pairs = list(zip(records, views))
    workers = _threads()
    if workers == 1:
        return [run(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, pairs))  # map preserves input order


def heldout_metrics(model: ClarModel, records: Sequence[UtteranceRecord], candidates, tail="half",
                    policy="full_window") -> dict:
    """Recall@1 against the annotated hotwords and mean |sum(alpha) - transcript length|."""
    from .metrics import recall_at_k

    model.eval()
    bank = bank_from_candidates(model, candidates)
    results = retrieve_many(records, bank, model, k=1, tail=TailPolicy.parse(tail), policy=ShortPolicy(policy))
    ranked = {r.id: res.labels for r, res in zip(records, results)}
    gold = {r.id: [h.text for h in r.hotwords] for r in records}
    gap = cif_count_gap(model, records)
    return {"recall@1": recall_at_k(ranked, gold, 1, bank.labels), "heldout_cif_gap": gap}


def cif_count_gap(model: ClarModel, records: Sequence[UtteranceRecord]) -> float:
    feats, lengths = pad_features([r.features for r in records], model.config.feat_dim)
    with torch.no_grad():
        hidden, out_lengths = model.speech(feats, lengths)
        alphas = model.cif(hidden, lengths_to_mask(out_lengths, hidden.shape[1]))
    target = torch.tensor([len(r.token_ids) for r in records], dtype=torch.float64)
    return float((alphas.sum(1) - target).abs().mean())


def results_record(utterance_id: str, result: RetrievalResult) -> dict:
    return {"format_version": RESULTS_VERSION, "utterance_id": utterance_id, "ranked": result.to_record()}


@dataclass
class PromptArtifact:
    utterance_id: str
    hotwords: list[str]
    prompt: str

    def to_record(self) -> dict:
        return {"format_version": RESULTS_VERSION, "utterance_id": self.utterance_id,
                "hotwords": self.hotwords, "prompt": self.prompt}


def _check_template(template: str) -> None:
    if template.count(PLACEHOLDER) != 1:
        raise ClarError(f"prompt template must contain {PLACEHOLDER} exactly once: {template!r}")


def emit_prompt(result: RetrievalResult, template: str = DEFAULT_TEMPLATE, utterance_id: str = "") -> PromptArtifact:
    _check_template(template)
    for label in result.labels:
        if PROMPT_SEP in label:
            raise DataError(f"hotword {label!r} contains the list separator {PROMPT_SEP!r}")
    rendered = template.replace(PLACEHOLDER, PROMPT_SEP.join(result.labels))
    return PromptArtifact(utterance_id, list(result.labels), rendered)


def parse_prompt(prompt: str, template: str = DEFAULT_TEMPLATE) -> list[str]:
    """Recover the ranked hotword list from a rendered prompt."""
    _check_template(template)
    head, tail = template.split(PLACEHOLDER)
    m = re.fullmatch(re.escape(head) + "(.*)" + re.escape(tail), prompt, flags=re.S)
    if m is None:
        raise ClarError("prompt does not match the template")
    body = m.group(1)
    return body.split(PROMPT_SEP) if body else []


def similarity_map(model: ClarModel, record: UtteranceRecord, bank: EmbeddingBank, k: int = 10,
                   tail=TailPolicy.HALF, policy=ShortPolicy.FULL_WINDOW) -> dict:
    view = encode_utterances(model, [record], tail)[0]
    sim, scored = score_view(view, bank, model.logit_scale.item(), policy)
    ranked = rank_topk(scored, bank, k) if len(bank) else RetrievalResult([], [], [])
    rec = export_similarity_map(sim, view.alignment, bank, scored, ranked, utterance_id=record.id)
    rec["gold"] = [h.text for h in record.hotwords]
    return rec
