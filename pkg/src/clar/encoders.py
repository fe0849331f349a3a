"""Toy speech/text encoders, projection heads, and the candidate embedding bank."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .cif import CifPredictor
from .errors import ClarError, DataError, ShapeError
from .kernels import l2_normalize_rows

CHECKPOINT_VERSION = 1
BANK_VERSION = 1
NORM_EPS = 1e-12


@dataclass
class ModelConfig:
    feat_dim: int = 16
    vocab_size: int = 50
    conv_channels: int = 32
    conv_layers: int = 2
    conv_kernel: int = 3
    stride: int = 1
    enc_dim: int = 32
    text_width: int = 32
    proj_hidden: int = 32
    embed_dim: int = 16
    cif_kernel: int = 3
    init_logit_scale: float = 14.0
    activation: str = "relu"  # encoder hidden activation: "relu" or "gelu"
    seed: int = 0


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return (torch.arange(max_len)[None, :] < lengths[:, None]).to(torch.float64)


def _l2norm(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


_ACTIVATIONS = {"relu": torch.relu, "gelu": nn.functional.gelu}


def _activation(name: str):
    if name not in _ACTIVATIONS:
        raise DataError(f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[name]


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.act = _activation(cfg.activation)
        self.feat_dim = cfg.feat_dim
        self.stride = cfg.stride
        pad = cfg.conv_kernel // 2
        convs = []
        in_ch = cfg.feat_dim
        for i in range(cfg.conv_layers):
            stride = cfg.stride if i == 0 else 1
            convs.append(nn.Conv1d(in_ch, cfg.conv_channels, cfg.conv_kernel, stride=stride,
                                   padding=pad, dtype=torch.float64))
            in_ch = cfg.conv_channels
        self.convs = nn.ModuleList(convs)
        self.mlp_in = nn.Linear(in_ch, cfg.enc_dim, dtype=torch.float64)
        self.mlp_out = nn.Linear(cfg.enc_dim, cfg.enc_dim, dtype=torch.float64)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return torch.div(lengths + self.stride - 1, self.stride, rounding_mode="floor")

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor):
        # feats: (B, T0, F) zero-padded; returns hidden (B, T, D_enc) and output lengths
        out_lengths = self.output_lengths(lengths)
        x = feats.transpose(1, 2)
        for conv in self.convs:
            x = self.act(conv(x))
            # re-zero padding so batched and single-utterance forwards agree
            x = x * lengths_to_mask(out_lengths, x.shape[-1])[:, None, :]
        x = x.transpose(1, 2)
        h = self.mlp_out(self.act(self.mlp_in(x)))
        mask = lengths_to_mask(out_lengths, h.shape[1])
        return h * mask[..., None], out_lengths


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.act = _activation(cfg.activation)
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.text_width, dtype=torch.float64)
        self.mlp_in = nn.Linear(cfg.text_width, cfg.text_width, dtype=torch.float64)
        self.mlp_out = nn.Linear(cfg.text_width, cfg.text_width, dtype=torch.float64)

    def token_states(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.mlp_out(self.act(self.mlp_in(self.embedding(tokens))))

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        # tokens: (B, L) padded with any valid id; masked mean over the first `lengths` positions
        states = self.token_states(tokens)
        mask = lengths_to_mask(lengths, tokens.shape[1])
        return (states * mask[..., None]).sum(1) / lengths[:, None].to(torch.float64)


class Projection(nn.Module):
    """Two linear layers with a ReLU between, followed by L2 normalization."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, out_dim, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _l2norm(self.fc2(torch.relu(self.fc1(x))))


class ClarModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.config = cfg
        self.speech = SpeechEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.cif = CifPredictor(cfg.enc_dim, cfg.enc_dim, cfg.cif_kernel)
        self.audio_proj = Projection(cfg.enc_dim, cfg.proj_hidden, cfg.embed_dim)
        self.text_proj = Projection(cfg.text_width, cfg.proj_hidden, cfg.embed_dim)
        self.log_scale = nn.Parameter(torch.tensor(math.log(cfg.init_logit_scale), dtype=torch.float64))
        init_parameters(self, cfg.seed)

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.log_scale.exp()

    def encoder_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("cif."):
                yield p

    def embed_texts(self, token_seqs: Sequence[Sequence[int]]) -> torch.Tensor:
        tokens, lengths = pad_tokens(token_seqs, self.text.vocab_size)
        return self.text_proj(self.text(tokens, lengths))


def init_parameters(model: nn.Module, seed: int) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases; LayerNorm at identity."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Conv1d)):
                w = module.weight
                fan_in = w.shape[1] * (w.shape[2] if w.ndim == 3 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                if module.bias is not None:
                    b = module.bias
                    b.copy_(torch.rand(b.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
            elif isinstance(module, nn.Embedding):
                w = module.weight
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 - 1)
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)


def pad_tokens(token_seqs: Sequence[Sequence[int]], vocab_size: int):
    if not token_seqs:
        raise DataError("no token sequences given")
    lengths = [len(s) for s in token_seqs]
    for i, seq in enumerate(token_seqs):
        if len(seq) == 0:
            raise DataError(f"token sequence {i} is empty")
        bad = [t for t in seq if not 0 <= t < vocab_size]
        if bad:
            raise DataError(f"token sequence {i} has out-of-vocabulary id {bad[0]} (vocab {vocab_size})")
    out = torch.zeros(len(token_seqs), max(lengths), dtype=torch.long)
    for i, seq in enumerate(token_seqs):
        out[i, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    return out, torch.as_tensor(lengths)


def pad_features(feature_list: Sequence[np.ndarray], feat_dim: int):
    lengths = [len(f) for f in feature_list]
    out = torch.zeros(len(feature_list), max(lengths) if lengths else 0, feat_dim, dtype=torch.float64)
    for i, f in enumerate(feature_list):
        f = np.asarray(f, dtype=np.float64)
        if len(f) and (f.ndim != 2 or f.shape[1] != feat_dim):
            raise ShapeError("encode_speech", f.shape, (None, feat_dim))
        if len(f):
            out[i, : len(f)] = torch.from_numpy(f)
    return out, torch.as_tensor(lengths)


# numpy-facing single-utterance operations


def encode_speech(features, encoder: SpeechEncoder) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != encoder.feat_dim:
        raise ShapeError("encode_speech", f.shape, (None, encoder.feat_dim))
    if len(f) == 0:
        return np.zeros((0, encoder.mlp_out.out_features))
    feats, lengths = pad_features([f], encoder.feat_dim)
    with torch.no_grad():
        h, _ = encoder(feats, lengths)
    return h[0].numpy()


def encode_text(tokens: Sequence[int], encoder: TextEncoder) -> np.ndarray:
    t, lengths = pad_tokens([list(tokens)], encoder.vocab_size)
    with torch.no_grad():
        return encoder(t, lengths)[0].numpy()


def project_audio(hidden, proj: Projection) -> np.ndarray:
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != proj.in_dim:
        raise ShapeError("project_audio", h.shape, (None, proj.in_dim))
    with torch.no_grad():
        return proj(torch.from_numpy(h)).numpy()


def project_text(pooled, proj: Projection) -> np.ndarray:
    z = np.asarray(pooled, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != proj.in_dim:
        raise ShapeError("project_text", z.shape, (proj.in_dim,))
    return project_audio(z[None, :], proj)[0]


@dataclass
class EmbeddingBank:
    embeddings: np.ndarray  # (N, D), unit rows
    token_lengths: np.ndarray
    labels: list[str]
    token_ids: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        self.embeddings = emb.reshape(len(self.labels), -1) if len(self.labels) else emb.reshape(0, emb.shape[-1] if emb.ndim == 2 else 0)
        self.token_lengths = np.asarray(self.token_lengths, dtype=np.int64)
        if len(self.token_lengths) != len(self.labels):
            raise DataError("bank labels and token lengths differ in count")
        if np.any(self.token_lengths < 1):
            raise DataError("bank token lengths must be >= 1")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index_of(self, label: str) -> int:
        return self.labels.index(label)

    def subset(self, indices) -> "EmbeddingBank":
        idx = list(indices)
        return EmbeddingBank(
            self.embeddings[idx], self.token_lengths[idx], [self.labels[i] for i in idx],
            [self.token_ids[i] for i in idx] if self.token_ids else [],
        )


def build_bank(candidates: Sequence[tuple[str, Sequence[int]]], text_encoder: TextEncoder,
               text_proj: Projection) -> EmbeddingBank:
    """Embed ``(label, token_ids)`` candidates in input order."""
    if not candidates:
        raise DataError("build_bank needs at least one candidate")
    labels = [c[0] for c in candidates]
    seqs = [list(c[1]) for c in candidates]
    for i, seq in enumerate(seqs):
        try:
            pad_tokens([seq], text_encoder.vocab_size)
        except DataError as exc:
            raise DataError(f"candidate {i} ({labels[i]!r}): {exc}") from exc
    with torch.no_grad():
        tokens, lengths = pad_tokens(seqs, text_encoder.vocab_size)
        emb = text_proj(text_encoder(tokens, lengths)).numpy()
    return EmbeddingBank(l2_normalize_rows(emb), lengths.numpy(), labels, seqs)


def save_bank(bank: EmbeddingBank, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, label in enumerate(bank.labels):
            rec = {"format_version": BANK_VERSION, "label": label,
                   "token_ids": list(bank.token_ids[i]) if bank.token_ids else None,
                   "embedding": bank.embeddings[i].tolist()}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_candidates(path) -> list[dict]:
    """Bank file rows; ``embedding`` is optional and ignored when re-embedding."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "label" not in rec or not rec.get("token_ids"):
                raise DataError(f"{path}:{n}: bank rows need 'label' and 'token_ids'")
            rows.append(rec)
    if not rows:
        raise DataError(f"{path}: empty bank")
    return rows


def load_bank(path) -> EmbeddingBank:
    rows = read_candidates(path)
    if any(r.get("embedding") is None for r in rows):
        raise DataError(f"{path}: rows lack embeddings; rebuild the bank from a checkpoint")
    return EmbeddingBank(
        np.array([r["embedding"] for r in rows]), [len(r["token_ids"]) for r in rows],
        [r["label"] for r in rows], [r["token_ids"] for r in rows],
    )


def save_checkpoint(model: ClarModel, path, extra: dict | None = None) -> None:
    params = {
        name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
        for name, t in model.state_dict().items()
    }
    record = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "params": params}
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record), encoding="utf-8")


def load_checkpoint(path) -> tuple[ClarModel, dict]:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ClarError(f"{path}: unsupported checkpoint version {record.get('format_version')}")
    model = ClarModel(ModelConfig(**record["config"]))
    state = {}
    for name, spec in record["params"].items():
        state[name] = torch.tensor(spec["data"], dtype=torch.float64).reshape(spec["shape"])
    model.load_state_dict(state)
    return model, record.get("extra", {})
