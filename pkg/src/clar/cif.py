"""Continuous integrate-and-fire: weight prediction and token boundary extraction.

Indices are 0-based throughout: frame ``t`` in ``[0, T)``, token ``k`` in
``[0, K)``, and a span ``(b, e)`` is inclusive on both ends.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import AlignmentError, ShapeError, WindowError

LAYERNORM_EPS = 1e-5


class TailPolicy(str, enum.Enum):
    DROP = "drop"
    HALF = "half"  # fire a last token if the leftover residual is >= theta / 2

    @classmethod
    def parse(cls, value) -> "TailPolicy":
        if isinstance(value, cls):
            return value
        aliases = {"fire_if_residual_ge_half": cls.HALF}
        if value in aliases:
            return aliases[value]
        return cls(value)


class CifPredictor(nn.Module):
    """Conv1d over time -> per-frame LayerNorm -> ReLU -> Linear -> sigmoid."""

    def __init__(self, in_dim: int, conv_dim: int | None = None, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        conv_dim = conv_dim or in_dim
        self.in_dim = in_dim
        self.conv = nn.Conv1d(in_dim, conv_dim, kernel_size, padding=kernel_size // 2, dtype=torch.float64)
        self.norm = nn.LayerNorm(conv_dim, eps=LAYERNORM_EPS, dtype=torch.float64)
        self.linear = nn.Linear(conv_dim, 1, dtype=torch.float64)

    def forward(self, hidden: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        # hidden: (B, T, D) -> alphas: (B, T)
        x = self.conv(hidden.transpose(1, 2)).transpose(1, 2)
        x = torch.relu(self.norm(x))
        alphas = torch.sigmoid(self.linear(x)).squeeze(-1)
        if mask is not None:
            alphas = alphas * mask
        return alphas


def predict_weights(hidden, predictor: CifPredictor) -> np.ndarray:
    """Per-frame firing weights in (0, 1) for one utterance's ``(T, D)`` hidden matrix."""
    h = torch.as_tensor(np.asarray(hidden, dtype=np.float64))
    if h.ndim != 2 or h.shape[1] != predictor.in_dim:
        raise ShapeError("predict_weights", tuple(h.shape), (None, predictor.in_dim))
    if h.shape[0] == 0:
        return np.zeros(0)
    with torch.no_grad():
        return predictor(h[None])[0].numpy()


@dataclass(frozen=True)
class CifAlignment:
    weights: np.ndarray
    theta: float
    counters: np.ndarray  # accumulated value at each frame, before the fire subtraction
    fire_flags: np.ndarray
    token_of_frame: np.ndarray
    spans: tuple[tuple[int, int], ...]
    tail_policy: TailPolicy = TailPolicy.HALF
    tail_fired: bool = False
    residual: float = 0.0

    @property
    def num_frames(self) -> int:
        return len(self.weights)

    @property
    def emitted_count(self) -> int:
        return len(self.spans)

    @property
    def fire_count(self) -> int:
        return int(self.fire_flags.sum())

    def span_starts(self) -> np.ndarray:
        return np.array([b for b, _ in self.spans], dtype=np.int64)

    def span_ends(self) -> np.ndarray:
        return np.array([e for _, e in self.spans], dtype=np.int64)

    def covered_frames(self) -> int:
        """Number of frames that belong to an emitted token."""
        return self.spans[-1][1] + 1 if self.spans else 0

    def to_record(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "theta": self.theta,
            "spans": [list(s) for s in self.spans],
            "K": self.emitted_count,
            "tail_policy": self.tail_policy.value,
            "tail_fired": self.tail_fired,
        }

    @classmethod
    def from_record(cls, record: dict) -> "CifAlignment":
        return accumulate_and_fire(record["weights"], record["theta"], record.get("tail_policy", "half"))


def accumulate_and_fire(weights, theta: float = 1.0, tail_policy=TailPolicy.HALF, atol: float = 0.0) -> CifAlignment:
    """Integrate weights frame by frame and emit a token each time the counter reaches ``theta``.

    The frame that reaches the threshold closes the current token. At most one
    fire happens per frame; any excess stays in the counter and is released on
    later frames. ``atol`` lets a counter within rounding distance of ``theta``
    fire, which length-scaled weights need (their sum is only exact up to ulps).
    """
    tail_policy = TailPolicy.parse(tail_policy)
    if theta <= 0:
        raise AlignmentError(f"theta must be positive, got {theta}")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0):
        raise AlignmentError(f"negative CIF weight at frame {int(np.argmax(w < 0))}")
    if not np.all(np.isfinite(w)):
        raise AlignmentError("non-finite CIF weight")

    n = len(w)
    counters = np.zeros(n)
    fires = np.zeros(n, dtype=bool)
    token_of_frame = np.zeros(n, dtype=np.int64)
    spans = []
    acc = 0.0
    token = 0
    start = 0
    for t in range(n):
        token_of_frame[t] = token
        acc += w[t]
        counters[t] = acc
        if acc >= theta - atol:
            fires[t] = True
            acc = max(acc - theta, 0.0)
            spans.append((start, t))
            token += 1
            start = t + 1

    tail_fired = False
    if start < n and tail_policy is TailPolicy.HALF and acc >= theta / 2:
        spans.append((start, n - 1))
        tail_fired = True
        acc = 0.0
    return CifAlignment(
        weights=w,
        theta=float(theta),
        counters=counters,
        fire_flags=fires,
        token_of_frame=token_of_frame,
        spans=tuple(spans),
        tail_policy=tail_policy,
        tail_fired=tail_fired,
        residual=float(acc),
    )


SCALED_ATOL = 1e-9


def scale_weights_to_length(weights, target_len: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if target_len < 1:
        raise AlignmentError(f"target_len must be >= 1, got {target_len}")
    total = w.sum()
    if not total > 0:
        raise AlignmentError("cannot scale CIF weights with zero total")
    return w * (target_len / total)


def spans_for_window(alignment: CifAlignment, start: int, width: int) -> tuple[int, int]:
    """First frame of token ``start`` and last frame of token ``start + width - 1``."""
    if width < 1 or start < 0 or start + width > alignment.emitted_count:
        raise WindowError(
            f"window start={start} width={width} exceeds {alignment.emitted_count} emitted tokens"
        )
    return alignment.spans[start][0], alignment.spans[start + width - 1][1]


def spans_from_token_map(token_of_frame, emitted_count: int) -> list[tuple[int, int]]:
    """Rebuild spans as maximal runs of equal token index, keeping only emitted tokens."""
    spans = []
    for t, k in enumerate(np.asarray(token_of_frame)):
        if k >= emitted_count:
            break
        if spans and spans[-1][2] == k:
            spans[-1][1] = t
        else:
            spans.append([t, t, k])
    return [(b, e) for b, e, _ in spans]
