"""Factual and counterfactual renderings of a response sequence.

Every view keeps the questions of the history and changes only the
correctness channel, which takes one of three categories. Flipping a
response toward INCORRECT lowers proficiency, so earlier or later correct
answers are no longer guaranteed and are masked while incorrect answers stay
valid; flipping toward CORRECT is the mirror image.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import torch

from .data import Interaction

PAD_CHAR = "·"
MASK_CHAR = "◦"


class Category(IntEnum):
    INCORRECT = 0
    CORRECT = 1
    MASKED = 2


@dataclass(frozen=True)
class Target:
    """The question being predicted; ``question_id`` is None for a virtual concept target."""

    question_id: int | None
    concept_ids: tuple[int, ...]

    @classmethod
    def of(cls, x: "Interaction | Target") -> "Target":
        if isinstance(x, Target):
            return x
        return cls(x.question_id, tuple(x.concept_ids))


@dataclass(frozen=True)
class SequenceView:
    history: tuple[Interaction, ...]
    categories: tuple[int, ...]
    target: Target | None = None
    target_assumed: int | None = None

    def __post_init__(self):
        expected = len(self.history) + (self.target is not None)
        if len(self.categories) != expected:
            raise ValueError(f"view has {len(self.categories)} categories for {expected} positions")
        if self.target is not None and self.categories[-1] != self.target_assumed:
            raise ValueError("target slot category differs from the assumed target label")
        flipped = sum(
            1 for x, c in zip(self.history, self.categories) if c not in (x.correctness, Category.MASKED)
        )
        # at most the one intervened position may differ from its true label
        if flipped > 1:
            raise ValueError("a view may only mask historical responses or flip the intervened one")

    def __len__(self):
        return len(self.categories)

    @property
    def target_index(self) -> int | None:
        return len(self.history) if self.target is not None else None

    @property
    def questions(self) -> list[int | None]:
        qs: list[int | None] = [x.question_id for x in self.history]
        if self.target is not None:
            qs.append(self.target.question_id)
        return qs

    @property
    def concepts(self) -> list[tuple[int, ...]]:
        ks = [tuple(x.concept_ids) for x in self.history]
        if self.target is not None:
            ks.append(self.target.concept_ids)
        return ks

    def render(self, pad_to: int | None = None) -> str:
        """Debug text: one char per position, ``|`` before the target slot."""
        chars = {0: "0", 1: "1", 2: MASK_CHAR}
        body = "".join(chars[c] for c in self.categories[: len(self.history)])
        if self.target is not None:
            body += "|" + chars[self.categories[-1]]
        if pad_to is not None:
            body += PAD_CHAR * max(0, pad_to - len(self.categories))
        return body


# ----------------------------------------------------------------------------- rules


def _hide(label: int, flipped_to: int, mono: bool) -> int:
    # flip toward INCORRECT masks corrects; toward CORRECT masks incorrects
    if mono and label != flipped_to:
        return Category.MASKED
    return label


def factual_view(history: Sequence[Interaction], target, target_assumed: int) -> SequenceView:
    cats = tuple(x.correctness for x in history) + (int(target_assumed),)
    return SequenceView(tuple(history), cats, Target.of(target), int(target_assumed))


def counterfactual_view(
    history: Sequence[Interaction], target, target_flipped_to: int, mono: bool = True
) -> SequenceView:
    flip = int(target_flipped_to)
    cats = tuple(_hide(x.correctness, flip, mono) for x in history) + (flip,)
    return SequenceView(tuple(history), cats, Target.of(target), flip)


def forward_views(
    history: Sequence[Interaction], i: int, target, mono: bool = True
) -> tuple[SequenceView, SequenceView]:
    """Exact-mode pair (factual, counterfactual) for intervening on position ``i`` (0-based).

    The target slot is MASKED in both: its answer is the unknown being scored.
    """
    if not 0 <= i < len(history):
        raise IndexError(f"position {i} outside history of length {len(history)}")
    labels = [x.correctness for x in history]
    flip = 1 - labels[i]
    cf = [(_hide(r, flip, mono) if j != i else flip) for j, r in enumerate(labels)]
    target = Target.of(target)
    f_view = SequenceView(tuple(history), tuple(labels) + (Category.MASKED,), target, Category.MASKED)
    cf_view = SequenceView(tuple(history), tuple(cf) + (Category.MASKED,), target, Category.MASKED)
    return f_view, cf_view


def masked_views_for_training(history: Sequence[Interaction]) -> tuple[SequenceView, SequenceView]:
    """(M+, M-): incorrect answers hidden, and correct answers hidden."""
    labels = [x.correctness for x in history]
    plus = tuple(r if r == 1 else Category.MASKED for r in labels)
    minus = tuple(r if r == 0 else Category.MASKED for r in labels)
    return SequenceView(tuple(history), plus), SequenceView(tuple(history), minus)


# ---------------------------------------------------------------------- tensor form


def approx_view_categories(
    labels: torch.Tensor, lengths: torch.Tensor, mono: bool = True
) -> torch.Tensor:
    """Categories of the four approximation views for right-padded batches.

    Row ``b`` has history ``[0, lengths[b]-1)`` and target slot ``lengths[b]-1``.
    Returns ``[4, B, L]`` in the order F+, CF-, F-, CF+. Padding gets MASKED.
    """
    B, L = labels.shape
    pos = torch.arange(L, device=labels.device)[None, :]
    hist = pos < (lengths - 1)[:, None]
    target = pos == (lengths - 1)[:, None]
    masked = torch.full_like(labels, Category.MASKED)

    def render(hist_cats, target_label):
        cats = torch.where(hist, hist_cats, masked)
        return torch.where(target, torch.full_like(labels, target_label), cats)

    if mono:
        keep_incorrect = torch.where(labels == 0, labels, masked)
        keep_correct = torch.where(labels == 1, labels, masked)
    else:
        keep_incorrect = keep_correct = labels
    return torch.stack(
        [
            render(labels, Category.CORRECT),
            render(keep_incorrect, Category.INCORRECT),
            render(labels, Category.INCORRECT),
            render(keep_correct, Category.CORRECT),
        ]
    )


def training_view_categories(labels: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """``[3, B, L]``: factual, M+ and M- categories over whole sequences."""
    L = labels.shape[1]
    valid = torch.arange(L, device=labels.device)[None, :] < lengths[:, None]
    masked = torch.full_like(labels, Category.MASKED)
    factual = torch.where(valid, labels, masked)
    plus = torch.where(valid & (labels == 1), labels, masked)
    minus = torch.where(valid & (labels == 0), labels, masked)
    return torch.stack([factual, plus, minus])
