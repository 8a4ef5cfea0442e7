"""Answer decoders and loss functions.

The pooled visual vector o = [mean(V_f); mean(M_f)] and the averaged question
vector feed three heads: softmax classification over a label vocabulary,
scalar count regression with rounding at inference, and per-candidate scoring
ranked by a hinge loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import LinearLayer

TASKS = ("open_ended", "count", "multi_choice")

LOG_EPS = 1e-12  # floor inside log() for numeric safety


class TaskError(Exception):
    """A decoder was invoked for the wrong task kind."""


@dataclass
class AnswerSpace:
    kind: str
    labels: list[str] | None = None
    num_candidates: int = 0
    count_min: int = 1
    count_max: int = 10

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "open_ended" and (self.labels is None or len(self.labels) < 2):
            raise ValueError("open-ended answer space needs at least 2 labels")
        if self.kind == "multi_choice" and self.num_candidates < 2:
            raise ValueError("multi-choice answer space needs at least 2 candidates")
        if self.kind == "count" and self.count_min > self.count_max:
            raise ValueError("empty count range")

    @property
    def num_labels(self) -> int:
        return len(self.labels) if self.labels else 0


@dataclass
class FusedRepresentation:
    v_bar: Tensor   # pooled appearance nodes
    m_bar: Tensor   # pooled motion nodes
    o: Tensor       # [v_bar; m_bar]
    u_bar: Tensor   # mean question row


def fuse_pool(v_f: Tensor, m_f: Tensor, u_bar: Tensor) -> FusedRepresentation:
    """Average-pool the final visual nodes along the node axis and concatenate."""
    v_bar = T.mean_axis(v_f, 0)
    m_bar = T.mean_axis(m_f, 0)
    return FusedRepresentation(v_bar, m_bar, T.concat_last([v_bar, m_bar]), u_bar)


def decoder_hidden(o: Tensor, u_bar: Tensor, w1: LinearLayer, w2: LinearLayer,
                   wy: LinearLayer) -> Tensor:
    """Shared trunk of the open-ended and count heads: o, u_bar -> y'."""
    y = w2.forward(T.concat_last([o, w1.forward(u_bar)]))
    return wy.forward(y)


def open_ended_decode(o: Tensor, u_bar: Tensor, w1: LinearLayer, w2: LinearLayer,
                      wy: LinearLayer, wyp: LinearLayer) -> Tensor:
    """Label probabilities over the answer vocabulary (sums to 1)."""
    logits = wyp.forward(decoder_hidden(o, u_bar, w1, w2, wy))
    return T.softmax(logits, axis=0, scale=1.0)


def count_decode(o: Tensor, u_bar: Tensor, w1: LinearLayer, w2: LinearLayer,
                 wy: LinearLayer, wc: LinearLayer) -> Tensor:
    """Raw (unrounded) count regression output as a scalar tensor."""
    return T.element(wc.forward(decoder_hidden(o, u_bar, w1, w2, wy)), 0)


def round_count(raw: float, count_min: int, count_max: int) -> int:
    """Round half up, then clamp into the count range."""
    value = int(math.floor(raw + 0.5))
    return max(count_min, min(count_max, value))


def multichoice_score(o: Tensor, o_a: Tensor, u_bar: Tensor, a_bar: Tensor,
                      ww: LinearLayer, wa: LinearLayer, wy: LinearLayer,
                      wyp: LinearLayer) -> Tensor:
    """Scalar score for one candidate from the four fused vectors."""
    y = T.concat_last([o, o_a, ww.forward(u_bar), wa.forward(a_bar)])
    return T.element(wyp.forward(wy.forward(y)), 0)


def select_answer(scores: Sequence[float]) -> int:
    """Index of the largest score; ties go to the lowest index."""
    values = [s.item() if isinstance(s, Tensor) else float(s) for s in scores]
    if not values:
        raise ValueError("select_answer: no scores")
    return int(np.argmax(values))


def cross_entropy_loss(p: Tensor, label: int) -> Tensor:
    if p.ndim != 1:
        raise T.RankError(f"cross_entropy_loss expects a probability vector, got {p.shape}")
    if not (0 <= label < p.shape[0]):
        raise TaskError(f"label {label} out of range for {p.shape[0]} classes")
    return -T.log(T.element(p, label) + LOG_EPS)


def mse_loss(raw: Tensor, target: float) -> Tensor:
    diff = raw - float(target)
    return T.mul(diff, diff)


def hinge_loss(scores: Sequence[Tensor], correct: int) -> Tensor:
    """Sum over incorrect candidates of max(0, 1 + s_wrong - s_correct)."""
    if not (0 <= correct < len(scores)):
        raise TaskError(f"correct index {correct} out of range for {len(scores)} candidates")
    s_p = scores[correct]
    total = None
    for i, s_n in enumerate(scores):
        if i == correct:
            continue
        term = T.relu(T.add_scalar(T.sub(s_n, s_p), 1.0))
        total = term if total is None else T.add(total, term)
    if total is None:  # single candidate: nothing to rank against
        total = T.mul_scalar(s_p, 0.0)
    return total
