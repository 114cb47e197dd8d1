"""Adaptive response probability generator.

A question is embedded as its ID vector plus the mean of its concept
vectors; adding one of three correctness-category vectors gives the response
embedding. A bidirectional encoder summarizes, for every position, the
responses strictly before it and strictly after it, and an MLP turns that
summary plus the question embedding into P(correct). Position ``i`` never
sees its own response, so one pass scores every position leave-one-out.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .views import Category, SequenceView

CHECKPOINT_VERSION = "cfkt-ckpt-1"

BACKBONES = ("dkt", "sakt", "akt")
BACKBONE_ALIASES = {
    "recurrent": "dkt",
    "attention": "sakt",
    "monotonic_attention": "akt",
}


@dataclass
class EncoderConfig:
    n_questions: int
    n_concepts: int
    backbone: str = "dkt"
    d: int = 128
    n_layers: int = 1
    dropout: float = 0.0
    encoder_dropout: float = 0.0
    heads: int = 8
    max_positions: int = 256
    decay_scale: float = 8.0

    def __post_init__(self):
        self.backbone = BACKBONE_ALIASES.get(self.backbone.lower(), self.backbone.lower())
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.d <= 0 or self.n_layers < 1:
            raise ValueError("d must be positive and n_layers at least 1")
        if not 0 <= self.dropout < 1 or not 0 <= self.encoder_dropout < 1:
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.backbone != "dkt" and self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = line.split("=", 1)
            kind = types[key]
            kwargs[key] = value if kind == "str" else (float(value) if kind == "float" else int(value))
        return cls(**kwargs)


def reverse_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each row of a right-padded ``[B, L, ...]`` tensor within its length."""
    L = x.shape[1]
    pos = torch.arange(L, device=x.device)[None, :]
    idx = torch.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)
    idx = idx.reshape(*idx.shape, *([1] * (x.dim() - 2))).expand_as(x)
    return x.gather(1, idx)


class RecurrentSummary(nn.Module):
    """Stacked LSTM; output at ``i`` summarizes inputs ``0..i``."""

    def __init__(self, d, n_layers, dropout=0.0):
        super().__init__()
        self.rnn = nn.LSTM(d, d, n_layers, batch_first=True, dropout=dropout if n_layers > 1 else 0.0)

    def forward(self, a, lengths):
        out, _ = self.rnn(a)
        return out


class AttentionBlock(nn.Module):
    def __init__(self, d, heads, dropout, monotonic, decay_scale):
        super().__init__()
        self.heads = heads
        self.d_head = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d, d))
        self.dropout = nn.Dropout(dropout)
        self.monotonic = monotonic
        if monotonic:
            # softplus(gamma) is the per-head decay rate; start at exp(-|i-j| / decay_scale)
            init = math.log(math.expm1(1.0 / decay_scale))
            self.gamma = nn.Parameter(torch.full((heads,), init))
        for lin in (self.qkv, self.out, self.ffn[0], self.ffn[3]):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, allowed, distance):
        B, L, d = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, self.d_head).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if self.monotonic:
            scores = scores - F.softplus(self.gamma)[None, :, None, None] * distance
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(B, L, d)
        x = self.norm1(x + self.dropout(self.out(ctx)))
        return self.norm2(x + self.dropout(self.ffn(x)))


class AttentionSummary(nn.Module):
    """Masked self-attention; output at ``i`` summarizes inputs on one side of ``i`` (inclusive)."""

    def __init__(self, d, heads, n_layers, dropout, max_positions, monotonic, reverse, decay_scale=8.0):
        super().__init__()
        self.reverse = reverse
        self.position = nn.Embedding(max_positions, d)
        nn.init.xavier_uniform_(self.position.weight)
        self.blocks = nn.ModuleList(
            AttentionBlock(d, heads, dropout, monotonic, decay_scale) for _ in range(n_layers)
        )

    def forward(self, a, lengths):
        B, L, _ = a.shape
        pos = torch.arange(L, device=a.device)
        x = a + self.position(pos)[None]
        i, j = pos[:, None], pos[None, :]
        if self.reverse:
            valid_key = j[None] < lengths[:, None, None]
            allowed = (j >= i)[None] & (valid_key | (j == i)[None])
        else:
            allowed = (j <= i)[None].expand(B, L, L)
        distance = (i - j).abs().to(a.dtype)
        for block in self.blocks:
            x = block(x, allowed, distance)
        return x


class BidirectionalEncoder(nn.Module):
    """h_i = Fwd(a_0..a_{i-1}) + Bwd(a_{i+1}..a_{n-1}); a missing side contributes zero."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = cfg.backbone
        if cfg.backbone == "dkt":
            self.forward_enc = RecurrentSummary(cfg.d, cfg.n_layers, cfg.encoder_dropout)
            self.backward_enc = RecurrentSummary(cfg.d, cfg.n_layers, cfg.encoder_dropout)
        else:
            mono = cfg.backbone == "akt"
            args = (cfg.d, cfg.heads, cfg.n_layers, cfg.encoder_dropout, cfg.max_positions, mono)
            self.forward_enc = AttentionSummary(*args, reverse=False, decay_scale=cfg.decay_scale)
            self.backward_enc = AttentionSummary(*args, reverse=True, decay_scale=cfg.decay_scale)

    def summaries(self, a: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Inclusive summaries: ``fwd[:, i]`` of ``a_0..a_i`` and ``bwd[:, i]`` of ``a_i..a_{n-1}``."""
        fwd = self.forward_enc(a, lengths)
        if self.backbone == "dkt":
            bwd = reverse_padded(self.backward_enc(reverse_padded(a, lengths), lengths), lengths)
        else:
            bwd = self.backward_enc(a, lengths)
        return fwd, bwd

    def forward(self, a: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        B, L, d = a.shape
        fwd, bwd = self.summaries(a, lengths)
        zero = a.new_zeros(B, 1, d)
        fwd_term = torch.cat([zero, fwd[:, :-1]], dim=1)
        bwd_term = torch.cat([bwd[:, 1:], zero], dim=1)
        pos = torch.arange(L, device=a.device)[None, :]
        has_next = (pos + 1 < lengths[:, None]).unsqueeze(-1)
        valid = (pos < lengths[:, None]).unsqueeze(-1)
        return (fwd_term + torch.where(has_next, bwd_term, torch.zeros_like(bwd_term))) * valid


class ResponseProbabilityGenerator(nn.Module):
    def __init__(self, cfg: EncoderConfig, question_concepts: dict[int, Sequence[int]] | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.pad_question = cfg.n_questions
        self.pad_concept = cfg.n_concepts
        self.question_emb = nn.Embedding(cfg.n_questions + 1, d, padding_idx=self.pad_question)
        self.concept_emb = nn.Embedding(cfg.n_concepts + 1, d, padding_idx=self.pad_concept)
        self.category_emb = nn.Embedding(3, d)
        for emb in (self.question_emb, self.concept_emb, self.category_emb):
            nn.init.xavier_uniform_(emb.weight)
        with torch.no_grad():
            self.question_emb.weight[self.pad_question].zero_()
            self.concept_emb.weight[self.pad_concept].zero_()
        self.encoder = BidirectionalEncoder(cfg)
        self.mlp = nn.Sequential(nn.Linear(2 * d, d), nn.ReLU(), nn.Dropout(cfg.dropout), nn.Linear(d, 1))
        for lin in (self.mlp[0], self.mlp[3]):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.register_buffer("question_concepts", self._concept_table(question_concepts))
        self.view_passes = 0

    def _concept_table(self, table):
        table = table or {}
        width = max((len(v) for v in table.values()), default=1)
        out = torch.full((self.cfg.n_questions, width), self.pad_concept, dtype=torch.long)
        for q, ks in table.items():
            out[q, : len(ks)] = torch.as_tensor(list(ks), dtype=torch.long)
        return out

    # -- embeddings ---------------------------------------------------------------------
    def embed_questions(self, questions: torch.Tensor, concepts: torch.Tensor) -> torch.Tensor:
        """e = q + mean of concept vectors; ``concepts`` is ``[..., K]`` padded with the sentinel."""
        present = (concepts != self.pad_concept).to(self.question_emb.weight.dtype)
        k_sum = (self.concept_emb(concepts) * present.unsqueeze(-1)).sum(-2)
        return self.question_emb(questions) + k_sum / present.sum(-1, keepdim=True).clamp(min=1.0)

    def embed_responses(self, e: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
        return e + self.category_emb(categories)

    def concept_target_embedding(self, concept_id: int) -> torch.Tensor:
        """Mean ID vector of the concept's questions plus the concept vector."""
        if not 0 <= concept_id < self.cfg.n_concepts:
            raise IndexError(f"concept {concept_id} outside vocabulary of {self.cfg.n_concepts}")
        related = (self.question_concepts == concept_id).any(-1).nonzero().flatten()
        if related.numel() == 0:
            raise LookupError(f"concept {concept_id} has no associated questions")
        return self.question_emb(related).mean(0) + self.concept_emb.weight[concept_id]

    def head(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(torch.cat([h, e], dim=-1)).squeeze(-1))

    # -- passes -------------------------------------------------------------------------
    def forward(
        self,
        questions: torch.Tensor,
        concepts: torch.Tensor,
        categories: torch.Tensor,
        lengths: torch.Tensor,
        question_embeddings: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Leave-one-out P(correct) at every position, ``[B, L]``; padding gives 0.5-ish junk."""
        e = self.embed_questions(questions, concepts) if question_embeddings is None else question_embeddings
        self.view_passes += int(questions.shape[0])
        h = self.encoder(self.embed_responses(e, categories), lengths)
        return self.head(h, e)

    def views_to_tensors(self, views: Sequence[SequenceView]):
        if not views:
            raise ValueError("empty view batch")
        device = self.question_emb.weight.device
        B, L = len(views), max(len(v) for v in views)
        K = max(max((len(k) for k in v.concepts), default=1) for v in views)
        questions = torch.full((B, L), self.pad_question, dtype=torch.long)
        concepts = torch.full((B, L, K), self.pad_concept, dtype=torch.long)
        categories = torch.full((B, L), int(Category.MASKED), dtype=torch.long)
        lengths = torch.tensor([len(v) for v in views], dtype=torch.long)
        virtual = []
        for b, view in enumerate(views):
            for i, (q, ks) in enumerate(zip(view.questions, view.concepts)):
                if q is None:
                    virtual.append((b, i, ks))
                    continue
                if not 0 <= q < self.cfg.n_questions:
                    raise IndexError(f"question {q} outside vocabulary of {self.cfg.n_questions}")
                if any(not 0 <= k < self.cfg.n_concepts for k in ks):
                    raise IndexError(f"concepts {ks} outside vocabulary of {self.cfg.n_concepts}")
                questions[b, i] = q
                concepts[b, i, : len(ks)] = torch.as_tensor(ks)
            categories[b, : len(view)] = torch.as_tensor(view.categories)
        return questions.to(device), concepts.to(device), categories.to(device), lengths.to(device), virtual

    def predict_views(self, views: Sequence[SequenceView]) -> np.ndarray:
        """Probabilities for every position of every view in one pass; padding is NaN."""
        questions, concepts, categories, lengths, virtual = self.views_to_tensors(views)
        with torch.no_grad():
            e = self.embed_questions(questions, concepts)
            for b, i, ks in virtual:
                e[b, i] = torch.stack([self.concept_target_embedding(k) for k in ks]).mean(0)
            probs = self(questions, concepts, categories, lengths, question_embeddings=e)
        out = probs.double().cpu().numpy()
        L = out.shape[1]
        out[np.arange(L)[None, :] >= lengths.cpu().numpy()[:, None]] = np.nan
        return out


# ---------------------------------------------------------------- single-position helpers


def embed_question(model: ResponseProbabilityGenerator, question_id: int, concept_ids: Sequence[int]):
    if not 0 <= question_id < model.cfg.n_questions:
        raise IndexError(f"question {question_id} outside vocabulary")
    if not concept_ids or any(not 0 <= k < model.cfg.n_concepts for k in concept_ids):
        raise IndexError(f"concepts {concept_ids} outside vocabulary")
    q = torch.tensor(question_id)
    ks = torch.tensor(list(concept_ids))
    return model.embed_questions(q, ks)


def embed_response(model: ResponseProbabilityGenerator, e: torch.Tensor, category: int):
    return model.embed_responses(e, torch.tensor(int(category)))


def predict_prob(model: ResponseProbabilityGenerator, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    if not (torch.isfinite(h).all() and torch.isfinite(e).all()):
        raise FloatingPointError("non-finite input to the prediction head")
    return model.head(h, e)


# ------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: ResponseProbabilityGenerator, meta: dict | None = None) -> None:
    """npz archive: version tag, config as key=value text, and named row-major tensors."""
    arrays = {
        "__format__": np.array(CHECKPOINT_VERSION),
        "__config__": np.array(model.cfg.to_text()),
        "__meta__": np.array("".join(f"{k}={v}\n" for k, v in (meta or {}).items())),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = np.ascontiguousarray(tensor.detach().cpu().numpy())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[ResponseProbabilityGenerator, dict[str, str]]:
    with np.load(path, allow_pickle=False) as archive:
        version = str(archive["__format__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        cfg = EncoderConfig.from_text(str(archive["__config__"]))
        meta = dict(line.split("=", 1) for line in str(archive["__meta__"]).splitlines() if line)
        state = {k[len("param/") :]: torch.from_numpy(archive[k]) for k in archive.files if k.startswith("param/")}
    model = ResponseProbabilityGenerator(cfg)
    model.question_concepts = state["question_concepts"].clone()
    model.load_state_dict(state)
    return model, meta
