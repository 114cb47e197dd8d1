from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .data import ResponseSequence


@dataclass
class Batch:
    questions: torch.Tensor  # [B, L] long, pad sentinel beyond lengths
    concepts: torch.Tensor  # [B, L, K] long
    labels: torch.Tensor  # [B, L] long, 0 beyond lengths
    lengths: torch.Tensor  # [B] long

    def __len__(self):
        return self.questions.shape[0]

    def to(self, device) -> "Batch":
        return Batch(*(x.to(device) for x in (self.questions, self.concepts, self.labels, self.lengths)))

    def select(self, rows: torch.Tensor, lengths: torch.Tensor | None = None) -> "Batch":
        return Batch(
            self.questions[rows],
            self.concepts[rows],
            self.labels[rows],
            self.lengths[rows] if lengths is None else lengths,
        )


def collate(sequences: Sequence[ResponseSequence], pad_question: int, pad_concept: int,
            pad_to: int | None = None) -> Batch:
    B = len(sequences)
    L = max(pad_to or 0, max(len(s) for s in sequences))
    K = max(len(x.concept_ids) for s in sequences for x in s.interactions)
    questions = torch.full((B, L), pad_question, dtype=torch.long)
    concepts = torch.full((B, L, K), pad_concept, dtype=torch.long)
    labels = torch.zeros((B, L), dtype=torch.long)
    for b, seq in enumerate(sequences):
        n = len(seq)
        questions[b, :n] = torch.tensor(seq.questions)
        labels[b, :n] = torch.tensor(seq.labels)
        for i, x in enumerate(seq.interactions):
            concepts[b, i, : len(x.concept_ids)] = torch.tensor(x.concept_ids)
    lengths = torch.tensor([len(s) for s in sequences], dtype=torch.long)
    return Batch(questions, concepts, labels, lengths)


def prefix_targets(batch: Batch, min_history: int = 1) -> Batch:
    """One row per (sequence, target position j >= min_history), truncated to length j + 1."""
    L = batch.questions.shape[1]
    pos = torch.arange(L)
    keep = (pos[None, :] >= min_history) & (pos[None, :] < batch.lengths[:, None])
    rows, j = torch.nonzero(keep, as_tuple=True)
    return batch.select(rows, lengths=j + 1)


def sampled_targets(batch: Batch, per_sequence: int, generator: torch.Generator | None = None) -> Batch:
    """Up to ``per_sequence`` random prefix targets per sequence (without replacement)."""
    L = batch.questions.shape[1]
    pos = torch.arange(L)
    keep = (pos[None, :] >= 1) & (pos[None, :] < batch.lengths[:, None])
    noise = torch.rand(keep.shape, generator=generator)
    noise = torch.where(keep, noise, torch.full_like(noise, 2.0))
    order = noise.argsort(dim=1)[:, :per_sequence]
    chosen = torch.zeros_like(keep).scatter_(1, order, True) & keep
    rows, j = torch.nonzero(chosen, as_tuple=True)
    return batch.select(rows, lengths=j + 1)


def last_targets(batch: Batch) -> Batch:
    """Target = final response; rows with no history are dropped."""
    rows = torch.nonzero(batch.lengths >= 2).flatten()
    return batch.select(rows)
