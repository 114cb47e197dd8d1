"""Response influences and the influence-comparison prediction rule.

A correct response's influence is how much P(target correct) drops when that
response is flipped to incorrect; an incorrect response's influence is the
drop in P(target incorrect) when it is flipped to correct. The prediction is
1 when the summed correct influences reach the summed incorrect ones.

Two estimators are provided. ``exact_forward_influences`` intervenes on every
historical response and scores the target (2t encoder passes).
``backward_influences`` intervenes on the target instead and reads the change
off every historical position at once (4 passes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from .data import Interaction, ResponseSequence
from .views import (
    Category,
    Target,
    approx_view_categories,
    counterfactual_view,
    factual_view,
    forward_views,
)

SCORE_EPS = 1e-7
EXACT_FORWARD = "exact_forward"
APPROX_BACKWARD = "approx_backward"


class DegenerateInputError(ValueError):
    pass


class StatisticsError(ValueError):
    pass


class ViewScorer(Protocol):
    def predict_views(self, views) -> np.ndarray: ...


@dataclass(frozen=True)
class InfluenceEntry:
    index: int
    question_id: int
    concept_ids: tuple[int, ...]
    label: int
    f_prob: float
    cf_prob: float
    delta: float

    @property
    def group(self) -> str:
        return "correct" if self.label == 1 else "incorrect"


@dataclass
class InfluenceSet:
    entries: list[InfluenceEntry]
    target: Target
    mode: str

    @property
    def t(self) -> int:
        return len(self.entries)

    def group(self, name: str) -> list[InfluenceEntry]:
        return [e for e in self.entries if e.group == name]


@dataclass
class PredictionRecord:
    target_question: int | None
    total_correct: float
    total_incorrect: float
    score: float
    prediction: int
    label: int | None = None
    tie: bool = field(default=False)


def _history(seq) -> tuple[Interaction, ...]:
    return tuple(seq.interactions) if isinstance(seq, ResponseSequence) else tuple(seq)


def _entry(i, x, f, cf) -> InfluenceEntry:
    return InfluenceEntry(i, x.question_id, tuple(x.concept_ids), x.correctness, float(f), float(cf), float(f - cf))


def backward_influences(seq, target, model: ViewScorer, mono: bool = True) -> InfluenceSet:
    """Approximate influences from the four target-intervention views F+, CF-, F-, CF+."""
    history = _history(seq)
    views = [
        factual_view(history, target, Category.CORRECT),
        counterfactual_view(history, target, Category.INCORRECT, mono=mono),
        factual_view(history, target, Category.INCORRECT),
        counterfactual_view(history, target, Category.CORRECT, mono=mono),
    ]
    p = model.predict_views(views)
    entries = []
    for i, x in enumerate(history):
        if x.correctness == 1:
            entries.append(_entry(i, x, p[0, i], p[1, i]))
        else:
            entries.append(_entry(i, x, 1.0 - p[2, i], 1.0 - p[3, i]))
    return InfluenceSet(entries, Target.of(target), APPROX_BACKWARD)


def exact_forward_influences(seq, target, model: ViewScorer, mono: bool = True) -> InfluenceSet:
    """Flip each historical response in turn and score the target slot."""
    history = _history(seq)
    if not history:
        return InfluenceSet([], Target.of(target), EXACT_FORWARD)
    views = [v for i in range(len(history)) for v in forward_views(history, i, target, mono=mono)]
    p = model.predict_views(views)
    t = len(history)
    entries = []
    for i, x in enumerate(history):
        f, cf = p[2 * i, t], p[2 * i + 1, t]
        if x.correctness == 0:
            f, cf = 1.0 - f, 1.0 - cf
        entries.append(_entry(i, x, f, cf))
    return InfluenceSet(entries, Target.of(target), EXACT_FORWARD)


def totals(influences: InfluenceSet) -> tuple[float, float]:
    plus = math.fsum(e.delta for e in influences.entries if e.label == 1)
    minus = math.fsum(e.delta for e in influences.entries if e.label == 0)
    return plus, minus


def influence_score(total_correct, total_incorrect, t):
    """(total_correct - total_incorrect) / (2t) + 1/2; works on floats, arrays and tensors."""
    return (total_correct - total_incorrect) / (2 * t) + 0.5


def predict(total_correct: float, total_incorrect: float, t: int, label: int | None = None,
            target_question: int | None = None) -> PredictionRecord:
    if t < 1:
        raise DegenerateInputError("cannot predict a target without history")
    diff = total_correct - total_incorrect
    score = min(max(influence_score(total_correct, total_incorrect, t), SCORE_EPS), 1.0 - SCORE_EPS)
    return PredictionRecord(
        target_question=target_question,
        total_correct=total_correct,
        total_incorrect=total_incorrect,
        score=score,
        prediction=int(diff >= 0),
        label=label,
        tie=diff == 0,
    )


def predict_from(influences: InfluenceSet, label: int | None = None) -> PredictionRecord:
    plus, minus = totals(influences)
    return predict(plus, minus, influences.t, label=label, target_question=influences.target.question_id)


# ------------------------------------------------------------------------ batched tensors


@dataclass
class BatchInfluences:
    delta: torch.Tensor  # [B, L], zero outside history
    correct: torch.Tensor  # [B, L] bool, historical correct positions
    incorrect: torch.Tensor
    total_correct: torch.Tensor  # [B]
    total_incorrect: torch.Tensor
    t: torch.Tensor  # [B] history lengths

    @property
    def score(self) -> torch.Tensor:
        return influence_score(self.total_correct, self.total_incorrect, self.t.to(self.delta.dtype))


def _split_groups(labels, lengths, L):
    pos = torch.arange(L, device=labels.device)[None, :]
    hist = pos < (lengths - 1)[:, None]
    return hist & (labels == 1), hist & (labels == 0)


def _finish(delta, correct, incorrect, lengths) -> BatchInfluences:
    zero = torch.zeros_like(delta)
    delta = torch.where(correct | incorrect, delta, zero)
    return BatchInfluences(
        delta=delta,
        correct=correct,
        incorrect=incorrect,
        total_correct=torch.where(correct, delta, zero).sum(1),
        total_incorrect=torch.where(incorrect, delta, zero).sum(1),
        t=lengths - 1,
    )


def batch_backward_influences(model, questions, concepts, labels, lengths, mono: bool = True,
                              question_embeddings=None) -> BatchInfluences:
    """Row ``b``: history ``[0, lengths[b]-1)``, target at ``lengths[b]-1``. One 4B-row pass."""
    B, L = labels.shape
    cats = approx_view_categories(labels, lengths, mono=mono).reshape(4 * B, L)
    rep = lambda x: None if x is None else x.repeat(4, *([1] * (x.dim() - 1)))  # noqa: E731
    p = model(rep(questions), rep(concepts), cats, lengths.repeat(4), rep(question_embeddings)).view(4, B, L)
    correct, incorrect = _split_groups(labels, lengths, L)
    # incorrect group: (1 - p[F-]) - (1 - p[CF+])
    delta = torch.where(correct, p[0] - p[1], p[3] - p[2])
    return _finish(delta, correct, incorrect, lengths)


def batch_exact_influences(model, questions, concepts, labels, lengths, mono: bool = True) -> BatchInfluences:
    """Exact forward influences; builds 2t intervention rows per sequence."""
    B, L = labels.shape
    device = labels.device
    pos = torch.arange(L, device=device)
    t = lengths - 1
    rows, ipos = torch.nonzero(pos[None, :] < t[:, None], as_tuple=True)  # one per (sequence, position)
    lab = labels[rows]
    own = lab.gather(1, ipos[:, None])
    flip = 1 - own
    is_i = pos[None, :] == ipos[:, None]
    is_target = pos[None, :] == t[rows][:, None]
    masked = torch.full_like(lab, Category.MASKED)
    factual = torch.where(is_target, masked, lab)
    others = torch.where(lab != flip, masked, lab) if mono else lab
    cf = torch.where(is_i, flip.expand_as(lab), others)
    cf = torch.where(is_target, masked, cf)
    n = rows.numel()
    p = model(
        questions[rows].repeat(2, 1),
        concepts[rows].repeat(2, 1, 1),
        torch.cat([factual, cf]),
        lengths[rows].repeat(2),
    )
    p_target = p.gather(1, t[rows].repeat(2)[:, None]).squeeze(1)
    f, c = p_target[:n], p_target[n:]
    d = torch.where(own.squeeze(1) == 1, f - c, c - f)
    delta = torch.zeros(B, L, dtype=p.dtype, device=device)
    delta[rows, ipos] = d
    correct, incorrect = _split_groups(labels, lengths, L)
    return _finish(delta, correct, incorrect, lengths)


# ------------------------------------------------------------------ approximation quality


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 3 or len(x) != len(y):
        raise StatisticsError(f"need at least 3 paired values, got {len(x)}")
    return float(np.corrcoef(x, y)[0, 1])


def bootstrap_ci(x, y, n_boot: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    xs, ys = x[idx], y[idx]
    xc, yc = xs - xs.mean(1, keepdims=True), ys - ys.mean(1, keepdims=True)
    r = (xc * yc).sum(1) / np.sqrt((xc**2).sum(1) * (yc**2).sum(1))
    lo, hi = np.quantile(r, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class CorrelationReport:
    r_correct: float
    r_incorrect: float
    pairs_correct: list[tuple[float, float]]
    pairs_incorrect: list[tuple[float, float]]


def collect_influence_pairs(model, sequences: Sequence[ResponseSequence], n_targets: int, seed: int = 0,
                            mono: bool = True):
    """Paired (exact, approx) deltas over randomly chosen prefix targets."""
    rng = np.random.default_rng(seed)
    candidates = [(s, j) for s, seq in enumerate(sequences) for j in range(1, len(seq))]
    if not candidates:
        raise StatisticsError("no sequence has a target with history")
    picks = rng.choice(len(candidates), size=min(n_targets, len(candidates)), replace=False)
    pairs = {"correct": [], "incorrect": []}
    for c in picks:
        s, j = candidates[c]
        history, target = sequences[s].interactions[:j], sequences[s].interactions[j]
        exact = exact_forward_influences(history, target, model, mono=mono)
        approx = backward_influences(history, target, model, mono=mono)
        for ex, ap in zip(exact.entries, approx.entries):
            pairs[ex.group].append((ex.delta, ap.delta))
    return pairs


def correlation_exact_vs_approx(model, sequences, n_targets: int, seed: int = 0, mono: bool = True) -> CorrelationReport:
    pairs = collect_influence_pairs(model, sequences, n_targets, seed, mono)
    rc = pearson(*zip(*pairs["correct"])) if len(pairs["correct"]) >= 3 else _raise_few("correct")
    ri = pearson(*zip(*pairs["incorrect"])) if len(pairs["incorrect"]) >= 3 else _raise_few("incorrect")
    return CorrelationReport(rc, ri, pairs["correct"], pairs["incorrect"])


def _raise_few(group):
    raise StatisticsError(f"fewer than 3 {group}-group pairs")
