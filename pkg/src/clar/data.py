"""Utterance records, JSON-lines I/O and the synthetic prototype-feature corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

DATA_VERSION = 1
TOKEN_BASE = 0x4E00  # token id i is displayed as one CJK character


def token_char(token_id: int) -> str:
    return chr(TOKEN_BASE + token_id)


def detokenize(token_ids) -> str:
    return "".join(token_char(t) for t in token_ids)


def tokenize(text: str, vocab_size: int | None = None) -> list[int]:
    ids = [ord(c) - TOKEN_BASE for c in text]
    if any(i < 0 or (vocab_size is not None and i >= vocab_size) for i in ids):
        raise DataError(f"text {text!r} has characters outside the token alphabet")
    return ids


@dataclass
class Hotword:
    text: str
    token_ids: list[int]
    span: tuple[int, int]  # inclusive token positions in the transcript

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class UtteranceRecord:
    id: str
    features: np.ndarray  # (T0, F)
    token_ids: list[int]
    text: str
    hotwords: list[Hotword] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = len(self.token_ids)
        for hw in self.hotwords:
            s, e = hw.span
            if not (0 <= s <= e < n):
                raise DataError(f"{self.id}: hotword span {hw.span} outside transcript of {n} tokens")
            if list(self.token_ids[s : e + 1]) != list(hw.token_ids):
                raise DataError(f"{self.id}: hotword {hw.text!r} does not match transcript at {hw.span}")

    def to_record(self) -> dict:
        return {
            "format_version": DATA_VERSION,
            "id": self.id,
            "text": self.text,
            "token_ids": list(self.token_ids),
            "hotwords": [{"text": h.text, "token_ids": h.token_ids, "span": list(h.span)} for h in self.hotwords],
            "features": self.features.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "UtteranceRecord":
        try:
            hotwords = [Hotword(h["text"], list(h["token_ids"]), tuple(h["span"])) for h in rec.get("hotwords", [])]
            return cls(rec["id"], np.asarray(rec["features"], dtype=np.float64).reshape(len(rec["features"]), -1),
                       list(rec["token_ids"]), rec.get("text", ""), hotwords)
        except KeyError as exc:
            raise DataError(f"utterance record missing field {exc}") from None


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_record() if hasattr(rec, "to_record") else rec, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(path) -> list[UtteranceRecord]:
    records = [UtteranceRecord.from_record(r) for r in read_jsonl(path)]
    seen = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"{path}: duplicate utterance id {r.id!r}")
        seen.add(r.id)
    return records


@dataclass
class SynthConfig:
    vocab_size: int = 50
    feat_dim: int = 16
    frames_per_token: int = 4
    noise: float = 0.1
    utt_len: tuple[int, int] = (8, 16)
    hotword_len: tuple[int, int] = (3, 6)
    n_train: int = 500
    n_test: int = 100
    bank_size: int = 50
    train_hotwords: int = 1  # n-gram annotations drawn per training utterance
    train_annotation: str = "random"  # "random": train_hotwords draws; "all": every n-gram in hotword_len
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.utt_len
        hlo, hhi = self.hotword_len
        if self.vocab_size < 10:
            raise DataError(f"vocab_size must be >= 10, got {self.vocab_size}")
        if not (1 <= lo <= hi):
            raise DataError(f"invalid utterance length range {self.utt_len}")
        if not (1 <= hlo <= hhi <= lo):
            raise DataError(f"hotword length range {self.hotword_len} must fit in utterances {self.utt_len}")
        if self.train_hotwords < 1:
            raise DataError("train_hotwords must be >= 1")
        if self.train_annotation not in ("random", "all"):
            raise DataError(f"train_annotation must be 'random' or 'all', got {self.train_annotation!r}")
        if self.frames_per_token < 1 or self.noise < 0:
            raise DataError("frames_per_token must be >= 1 and noise >= 0")
        if self.bank_size < 1 and self.n_test > 0:
            raise DataError("a test split needs a non-empty hotword bank")
        if self.bank_size > self.vocab_size ** hlo:
            raise DataError(f"cannot draw {self.bank_size} distinct hotwords from this vocabulary")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("utt_len", "hotword_len"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synthesis config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["utt_len"] = list(self.utt_len)
        d["hotword_len"] = list(self.hotword_len)
        return d


@dataclass
class SyntheticCorpus:
    train: list[UtteranceRecord]
    test: list[UtteranceRecord]
    bank: list[tuple[str, list[int]]]
    prototypes: np.ndarray
    config: SynthConfig


def _contains(seq: list[int], sub: tuple[int, ...]) -> bool:
    n = len(sub)
    return any(tuple(seq[i : i + n]) == sub for i in range(len(seq) - n + 1))


def render_features(token_ids, prototypes, frames_per_token, noise, rng) -> np.ndarray:
    frames = np.repeat(prototypes[np.asarray(token_ids, dtype=np.int64)], frames_per_token, axis=0)
    if noise > 0:
        frames = frames + noise * rng.standard_normal(frames.shape)
    return frames


def synthesize_dataset(config: SynthConfig | None = None) -> SyntheticCorpus:
    """Seeded corpus: one shared hotword bank, test utterances that each embed one
    bank hotword, and training utterances (free of bank hotwords) annotated with
    n-grams of their own transcript, either ``train_hotwords`` random draws or all of them."""
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    prototypes = rng.standard_normal((cfg.vocab_size, cfg.feat_dim))
    hlo, hhi = cfg.hotword_len
    lo, hi = cfg.utt_len

    bank_seqs: list[tuple[int, ...]] = []
    seen = set()
    while len(bank_seqs) < (cfg.bank_size if cfg.n_test else 0):
        n = int(rng.integers(hlo, hhi + 1))
        seq = tuple(int(t) for t in rng.integers(0, cfg.vocab_size, n))
        if seq not in seen:
            seen.add(seq)
            bank_seqs.append(seq)

    def render(uid, tokens, spans):
        hws = [Hotword(detokenize(tokens[s : e + 1]), tokens[s : e + 1], (s, e)) for s, e in spans]
        feats = render_features(tokens, prototypes, cfg.frames_per_token, cfg.noise, rng)
        return UtteranceRecord(uid, feats, tokens, detokenize(tokens), hws)

    train = []
    while len(train) < cfg.n_train:
        n = int(rng.integers(lo, hi + 1))
        tokens = [int(t) for t in rng.integers(0, cfg.vocab_size, n)]
        if any(_contains(tokens, b) for b in bank_seqs):
            continue
        if cfg.train_annotation == "all":
            spans = [(s, s + m - 1) for m in range(hlo, hhi + 1) for s in range(n - m + 1)]
        else:
            spans = []
            for _ in range(cfg.train_hotwords):
                m = int(rng.integers(hlo, hhi + 1))
                s = int(rng.integers(0, n - m + 1))
                spans.append((s, s + m - 1))
        train.append(render(f"train-{len(train):05d}", tokens, spans))

    test = []
    while len(test) < cfg.n_test:
        gold = bank_seqs[int(rng.integers(0, len(bank_seqs)))]
        n = int(rng.integers(max(lo, len(gold)), hi + 1))
        filler = [int(t) for t in rng.integers(0, cfg.vocab_size, n - len(gold))]
        s = int(rng.integers(0, len(filler) + 1))
        tokens = filler[:s] + list(gold) + filler[s:]
        if sum(_contains(tokens, b) for b in bank_seqs) != 1:
            continue
        test.append(render(f"test-{len(test):05d}", tokens, [(s, s + len(gold) - 1)]))

    bank = [(detokenize(seq), list(seq)) for seq in bank_seqs]
    return SyntheticCorpus(train, test, bank, prototypes, cfg)


def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / "train.jsonl", "test": out / "test.jsonl", "bank": out / "bank.jsonl",
             "config": out / "synth_config.json"}
    write_jsonl(corpus.train, paths["train"])
    write_jsonl(corpus.test, paths["test"])
    write_jsonl(
        ({"format_version": DATA_VERSION, "label": label, "token_ids": ids, "embedding": None} for label, ids in corpus.bank),
        paths["bank"],
    )
    paths["config"].write_text(json.dumps({"format_version": DATA_VERSION, **corpus.config.to_dict()}, indent=2) + "\n")
    return {k: str(v) for k, v in paths.items()}
