"""Multi-granularity contrastive objective, two-stage schedule and gradient checks."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .cif import SCALED_ATOL, TailPolicy, accumulate_and_fire, scale_weights_to_length, spans_for_window
from .data import Hotword, SynthConfig, UtteranceRecord, load_dataset, synthesize_dataset
from .encoders import ClarModel, ModelConfig, lengths_to_mask, pad_features, _l2norm
from .errors import DataError, TrainingError, WindowError

log = logging.getLogger(__name__)

STAGES = ("cif_pretrain", "joint")
TRACE_FIELDS = ["stage", "epoch", "l_local", "l_global", "l_cif", "total", "recall@1", "heldout_cif_gap"]


@dataclass(frozen=True)
class TrainItem:
    """One utterance paired with exactly one annotated hotword."""

    record: UtteranceRecord
    hotword: Hotword


def expand_items(records: Sequence[UtteranceRecord]) -> list[TrainItem]:
    return [TrainItem(r, hw) for r in records for hw in r.hotwords]


@dataclass
class LossWeights:
    local: float = 1.0
    global_: float = 1.0
    cif: float = 1.0

    def __post_init__(self):
        if min(self.local, self.global_, self.cif) < 0:
            raise TrainingError(f"loss weights must be non-negative, got {self}")


@dataclass
class LossReport:
    local: torch.Tensor
    global_: torch.Tensor
    cif: torch.Tensor
    total: torch.Tensor
    weights: LossWeights
    cif_residuals: torch.Tensor | None = None  # per-utterance sum(alpha) - L

    def as_floats(self) -> dict:
        return {"l_local": self.local.item(), "l_global": self.global_.item(),
                "l_cif": self.cif.item(), "total": self.total.item()}


def soft_targets(keys: Sequence) -> torch.Tensor:
    """Identity targets with mass shared among batch items carrying the same key."""
    ids: dict = {}
    codes = np.array([ids.setdefault(k, len(ids)) for k in keys])
    same = torch.from_numpy((codes[:, None] == codes[None, :]).astype(np.float64))
    return same / same.sum(dim=1, keepdim=True)


def symmetric_contrastive(audio: torch.Tensor, text: torch.Tensor, scale: torch.Tensor,
                          targets: torch.Tensor) -> torch.Tensor:
    """Mean of the audio->text and text->audio soft-target cross-entropies."""
    logits = scale * audio @ text.T
    n = logits.shape[0]
    a2t = -(targets * torch.log_softmax(logits, dim=1)).sum() / n
    t2a = -(targets.T * torch.log_softmax(logits.T, dim=1)).sum() / n
    return 0.5 * (a2t + t2a)


def teacher_forced_alignment(alphas: np.ndarray, target_len: int):
    """CIF alignment of weights rescaled to sum to the transcript length."""
    return accumulate_and_fire(scale_weights_to_length(alphas, target_len), 1.0, TailPolicy.HALF,
                               atol=SCALED_ATOL * target_len)


def teacher_forced_frames(alphas: np.ndarray | None, target_len: int, span: tuple[int, int], uid: str,
                          aligned=None) -> tuple[int, int]:
    """Frame range of a transcript token span under length-scaled CIF weights."""
    if aligned is None:
        aligned = teacher_forced_alignment(alphas, target_len)
    first, last = span
    try:
        return spans_for_window(aligned, first, last - first + 1)
    except WindowError:
        raise TrainingError(
            f"{uid}: hotword tokens {span} map to no frames ({aligned.emitted_count} tokens emitted)"
        ) from None


@dataclass
class BatchForward:
    hidden: torch.Tensor
    lengths: torch.Tensor
    alphas: torch.Tensor
    frames: torch.Tensor  # projected, normalized per-frame embeddings
    records: list  # one row per distinct utterance
    rows: list[int]  # batch row of each item's utterance


def forward_batch(model: ClarModel, records: Sequence[UtteranceRecord], freeze_encoder: bool = False) -> BatchForward:
    """Encode each distinct utterance once; ``rows`` maps the inputs onto batch rows."""
    index: dict[str, int] = {}
    unique, rows = [], []
    for r in records:
        if r.id not in index:
            index[r.id] = len(unique)
            unique.append(r)
        rows.append(index[r.id])
    records = unique
    feats, lengths = pad_features([r.features for r in records], model.config.feat_dim)
    if freeze_encoder:
        with torch.no_grad():
            hidden, out_lengths = model.speech(feats, lengths)
    else:
        hidden, out_lengths = model.speech(feats, lengths)
    mask = lengths_to_mask(out_lengths, hidden.shape[1])
    alphas = model.cif(hidden, mask)
    frames = model.audio_proj(hidden)
    return BatchForward(hidden, out_lengths, alphas, frames, records, rows)


def cif_residuals(fwd: BatchForward) -> torch.Tensor:
    target = torch.tensor([len(r.token_ids) for r in fwd.records], dtype=torch.float64)
    return fwd.alphas.sum(dim=1) - target


def loss_cif(fwd: BatchForward, items: Sequence[TrainItem] | None = None) -> torch.Tensor:
    """Mean absolute count error over the distinct utterances of the batch."""
    return cif_residuals(fwd).abs().mean()


def loss_global(model: ClarModel, fwd: BatchForward, items: Sequence[TrainItem] | None = None) -> torch.Tensor:
    """Utterance-level contrastive loss, one row per distinct utterance."""
    mask = lengths_to_mask(fwd.lengths, fwd.hidden.shape[1])
    pooled = (fwd.hidden * mask[..., None]).sum(1) / fwd.lengths[:, None].to(torch.float64)
    audio = model.audio_proj(pooled)
    text = model.embed_texts([r.token_ids for r in fwd.records])
    targets = soft_targets([tuple(r.token_ids) for r in fwd.records])
    return symmetric_contrastive(audio, text, model.logit_scale, targets)


def batch_alignments(fwd: BatchForward) -> dict:
    """Teacher-forced alignment of every utterance in the batch, keyed by id."""
    alphas = fwd.alphas.detach().numpy()
    return {r.id: teacher_forced_alignment(alphas[i, : int(fwd.lengths[i])], len(r.token_ids))
            for i, r in enumerate(fwd.records)}


def loss_local(model: ClarModel, fwd: BatchForward, items: Sequence[TrainItem],
               normalize_pooled: bool = False, aligned: dict | None = None) -> torch.Tensor:
    """Span-level contrastive loss over teacher-forced hotword frames.

    The pooled frame embedding is left unnormalized by default so that its
    inner product with a text embedding equals the inference-time window mean.
    ``aligned`` pins the (piecewise constant) frame alignment, e.g. while
    probing the loss with finite differences.
    """
    if aligned is None:
        aligned = batch_alignments(fwd)
    n_rows, n_time = fwd.frames.shape[:2]
    # row-stochastic pooling matrix over the flattened (row, frame) axis
    pool = np.zeros((len(items), n_rows * n_time))
    for k, (it, i) in enumerate(zip(items, fwd.rows)):
        b, e = teacher_forced_frames(None, len(it.record.token_ids), it.hotword.span, it.record.id,
                                     aligned[it.record.id])
        pool[k, i * n_time + b : i * n_time + e + 1] = 1.0 / (e - b + 1)
    audio = torch.from_numpy(pool) @ fwd.frames.reshape(n_rows * n_time, -1)
    if normalize_pooled:
        audio = _l2norm(audio)
    text = model.embed_texts([it.hotword.token_ids for it in items])
    targets = soft_targets([tuple(it.hotword.token_ids) for it in items])
    return symmetric_contrastive(audio, text, model.logit_scale, targets)


def loss_total(model: ClarModel, items: Sequence[TrainItem], weights: LossWeights | None = None,
               freeze_encoder: bool = False, aligned: dict | None = None) -> LossReport:
    weights = weights or LossWeights()
    if len(items) < 2:
        raise TrainingError("contrastive losses need a batch of at least 2 items")
    fwd = forward_batch(model, [it.record for it in items], freeze_encoder)
    l_cif = loss_cif(fwd, items)
    l_global = loss_global(model, fwd, items)
    l_local = loss_local(model, fwd, items, aligned=aligned)
    total = weights.local * l_local + weights.global_ * l_global + weights.cif * l_cif
    return LossReport(l_local, l_global, l_cif, total, weights, cif_residuals(fwd))


# parameter groups used by the gradient check
PARAM_GROUPS = {
    "conv": ("speech.convs.", "cif.conv."),
    "layernorm": ("cif.norm.",),
    "linear": ("cif.linear.", "speech.mlp_", "text.mlp_"),
    "embeddings": ("text.embedding.",),
    "projections": ("audio_proj.", "text_proj."),
    "tau": ("log_scale",),
}


def group_parameters(model: ClarModel, group: str) -> dict[str, torch.nn.Parameter]:
    prefixes = PARAM_GROUPS[group]
    return {n: p for n, p in model.named_parameters() if n.startswith(prefixes)}


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
                            coords: dict[str, np.ndarray], epsilon: float = 1e-4,
                            abs_floor: float = 1e-8, pattern_fn: Callable[[], object] | None = None) -> float:
    """Max relative error between autograd and a fourth-order central difference.

    ``coords`` maps parameter names to flat indices to probe. Relative error is
    ``|g - fd| / max(|g|, |fd|, abs_floor)``.

    ``pattern_fn`` returns the activation pattern of the last loss evaluation
    (e.g. ReLU on/off signs). When a probe changes it, the stencil straddles a
    kink, so that coordinate is probed again with a 10x smaller step, down to
    the 1e-6 floor.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise TrainingError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    if not any(len(c) for c in coords.values()):
        return 0.0
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    base = pattern_fn() if pattern_fn else None
    analytic = {n: (p.grad.reshape(-1).clone() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype))
                for n, p in params.items()}
    worst = 0.0
    with torch.no_grad():
        for name, idx in coords.items():
            flat = params[name].view(-1)
            for i in idx:
                orig = flat[i].item()
                eps = epsilon
                while True:
                    values, crossed = [], False
                    for step in (2, 1, -1, -2):
                        flat[i] = orig + step * eps
                        values.append(loss_fn().item())
                        crossed = crossed or (pattern_fn is not None and not _same_pattern(pattern_fn(), base))
                    flat[i] = orig
                    if not crossed or eps / 10 < 1e-6 * (1 - 1e-9):
                        break
                    eps /= 10
                # differences first, so an exactly flat direction gives exactly zero
                fd = (8 * (values[1] - values[2]) - (values[0] - values[3])) / (12 * eps)
                g = analytic[name][i].item()
                err = abs(g - fd) / max(abs(g), abs(fd), abs_floor)
                worst = max(worst, err)
    return worst


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


class KinkRecorder:
    """Forward hooks recording which side of every piecewise-linear kink the model is on."""

    def __init__(self, model: ClarModel):
        self.pattern: list[torch.Tensor] = []
        self.handles = []
        # outputs feeding a ReLU
        relu_inputs = [model.cif.norm, model.audio_proj.fc1, model.text_proj.fc1]
        if model.config.activation == "relu":
            relu_inputs += [*model.speech.convs, model.speech.mlp_in, model.text.mlp_in]
        for m in relu_inputs:
            self.handles.append(m.register_forward_hook(lambda _m, _i, out: self.pattern.append(out.detach() > 0)))

    def reset(self):
        self.pattern = []

    def take(self) -> list[torch.Tensor]:
        out, self.pattern = self.pattern, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def sample_coords(params: dict[str, torch.Tensor], n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    names = list(params)
    sizes = np.array([params[k].numel() for k in names])
    total = int(sizes.sum())
    if total == 0:
        return {}
    flat = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords = {}
    for k, name in enumerate(names):
        sel = flat[(flat >= offsets[k]) & (flat < offsets[k + 1])] - offsets[k]
        coords[name] = np.sort(sel)
    return coords


def grad_check(model: ClarModel, items: Sequence[TrainItem], groups: Sequence[str] | None = None,
               epsilon: float = 1e-4, n_coords: int = 100, term: str = "total",
               weights: LossWeights | None = None, seed: int = 0) -> dict[str, float]:
    """Per-group max relative gradient error of one loss term (local/global/cif/total)."""
    if term not in ("local", "global", "cif", "total"):
        raise TrainingError(f"unknown loss term {term!r}")
    groups = list(PARAM_GROUPS) if groups is None else list(groups)
    rng = np.random.default_rng(seed)
    # the alignment is a step function of the CIF weights; hold it at the
    # base point so the probes stay on one smooth piece
    with torch.no_grad():
        aligned = batch_alignments(forward_batch(model, [it.record for it in items]))

    kinks = KinkRecorder(model)

    def loss_fn():
        kinks.reset()
        report = loss_total(model, items, weights, aligned=aligned)
        # |sum(alpha) - L| has its own kink
        kinks.pattern.append((report.cif_residuals.detach() > 0))
        return {"local": report.local, "global": report.global_, "cif": report.cif, "total": report.total}[term]

    out = {}
    try:
        for group in groups:
            params = group_parameters(model, group)
            out[group] = finite_difference_check(loss_fn, params, sample_coords(params, n_coords, rng), epsilon,
                                                 pattern_fn=kinks.take)
    finally:
        kinks.close()
    model.zero_grad(set_to_none=True)
    return out


@dataclass
class TrainState:
    model: ClarModel
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    stage: str = "cif_pretrain"


def make_optimizer(params, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def optimizer_step(state: TrainState, named_params: dict[str, torch.nn.Parameter]) -> TrainState:
    """Apply one Adam update from the gradients currently stored on the parameters."""
    for name, p in named_params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.optimizer.step()
    state.step += 1
    return state


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    train_path: str | None = None
    heldout_path: str | None = None
    bank_path: str | None = None
    cif_epochs: int = 10
    joint_epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    freeze_encoder_stage1: bool = True
    seed: int = 0
    tail: str = "half"
    policy: str = "full_window"
    eval_every: int = 1
    lr_schedule: str = "constant"  # or "cosine": anneal the joint-stage rate to zero

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d.pop("format_version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown training config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if d.get("synth") is not None:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        if "weights" in d:
            w = dict(d["weights"])
            if "global" in w:
                w["global_"] = w.pop("global")
            d["weights"] = LossWeights(**w)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict() if self.synth else None
        w = d["weights"]
        w["global"] = w.pop("global_")
        return d


@dataclass
class TrainResult:
    state: TrainState
    trace: list[dict]
    stage1_model: ClarModel | None = None


def load_training_data(cfg: TrainConfig):
    """Train records, held-out records and bank candidates from files or synthesis."""
    if cfg.train_path:
        train = load_dataset(cfg.train_path)
        heldout = load_dataset(cfg.heldout_path) if cfg.heldout_path else []
        bank = []
        if cfg.bank_path:
            from .encoders import read_candidates

            bank = [(r["label"], list(r["token_ids"])) for r in read_candidates(cfg.bank_path)]
        return train, heldout, bank
    if cfg.synth is None:
        raise DataError("training config names neither a dataset file nor synthesis parameters")
    corpus = synthesize_dataset(cfg.synth)
    return corpus.train, corpus.test, corpus.bank


def _batches(records: list[UtteranceRecord], batch_size: int, rng: np.random.Generator):
    """Shuffled utterance batches, each expanded to all of its annotated hotwords."""
    order = rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        batch = expand_items([records[i] for i in order[start : start + batch_size]])
        if len(batch) >= 2:
            yield batch


def _run_epochs(state: TrainState, records, weights, epochs, cfg, rng, trace, evaluate, freeze, scheduler=None):
    named = dict(state.model.named_parameters())
    for epoch in range(epochs):
        sums = {"l_local": 0.0, "l_global": 0.0, "l_cif": 0.0, "total": 0.0}
        n = 0
        state.model.train()
        for batch in _batches(records, cfg.batch_size, rng):
            state.optimizer.zero_grad(set_to_none=True)
            report = loss_total(state.model, batch, weights, freeze_encoder=freeze)
            report.total.backward()
            if freeze:
                for name, p in named.items():
                    if not name.startswith("cif."):
                        p.grad = None
            optimizer_step(state, named)
            for k, v in report.as_floats().items():
                sums[k] += v * len(batch)
            n += len(batch)
        if scheduler is not None:
            scheduler.step()
        row = {"stage": state.stage, "epoch": len(trace) + 1, **{k: v / max(n, 1) for k, v in sums.items()}}
        if evaluate is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == epochs):
            row.update(evaluate(state.model))
        else:
            row.update({"recall@1": None, "heldout_cif_gap": None})
        log.info("stage=%s epoch=%d total=%.4f recall@1=%s", row["stage"], row["epoch"], row["total"], row["recall@1"])
        trace.append(row)


def train(cfg: TrainConfig, data=None) -> TrainResult:
    """Stage 1 optimizes only the CIF quantity loss; stage 2 resumes and trains everything.

    One Adam instance spans both stages, so its moments carry over. ``data``
    optionally supplies ``(train_records, heldout_records, bank)`` and skips
    loading.
    """
    train_records, heldout, bank = data if data is not None else load_training_data(cfg)
    items = expand_items(train_records)
    if len(items) < 2:
        raise DataError("training needs at least two annotated hotword items")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ClarModel(cfg.model)
    state = TrainState(model, make_optimizer(model.parameters(), cfg.lr), stage="cif_pretrain")
    trace: list[dict] = []

    evaluate = None
    if heldout and bank:
        from .pipeline import heldout_metrics

        def evaluate(m):
            return heldout_metrics(m, heldout, bank, tail=cfg.tail, policy=cfg.policy)

    stage1_model = None
    if cfg.cif_epochs > 0:
        stage1_weights = LossWeights(local=0.0, global_=0.0, cif=cfg.weights.cif)
        _run_epochs(state, train_records, stage1_weights, cfg.cif_epochs, cfg, rng, trace, evaluate,
                    cfg.freeze_encoder_stage1)
        stage1_model = ClarModel(cfg.model)
        stage1_model.load_state_dict(model.state_dict())
        stage1_model.eval()

    if cfg.joint_epochs > 0:
        state.stage = "joint"
        scheduler = None
        if cfg.lr_schedule == "cosine":
            scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(state.optimizer, T_max=cfg.joint_epochs)
        elif cfg.lr_schedule != "constant":
            raise TrainingError(f"unknown lr_schedule {cfg.lr_schedule!r}")
        _run_epochs(state, train_records, cfg.weights, cfg.joint_epochs, cfg, rng, trace, evaluate, False, scheduler)
    model.eval()
    return TrainResult(state, trace, stage1_model)


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in TRACE_FIELDS})
