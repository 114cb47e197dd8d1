"""Losses, metrics, the joint training loop and evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .batch import Batch, collate, last_targets, prefix_targets, sampled_targets
from .data import ResponseSequence
from .influence import (
    SCORE_EPS,
    BatchInfluences,
    batch_backward_influences,
    batch_exact_influences,
)
from .model import EncoderConfig, ResponseProbabilityGenerator
from .views import training_view_categories

log = logging.getLogger(__name__)

LOG_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lam: float = 0.1
    alpha: float = 1.0
    l2_weight: float = 0.0
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    target_mode: str = "all_prefix"  # "all_prefix", "sampled" or "last"
    targets_per_sequence: int = 4
    eval_targets: str = "all_prefix"
    no_joint: bool = False
    no_mono: bool = False
    no_constraint: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lambda and alpha must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.target_mode not in ("all_prefix", "sampled", "last"):
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        if self.eval_targets not in ("all_prefix", "last"):
            raise ValueError(f"unknown evaluation target mode {self.eval_targets!r}")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.no_joint else self.lam

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.no_constraint else self.alpha


# ------------------------------------------------------------------------------- losses


def constraint_penalty(delta: torch.Tensor, hist_mask: torch.Tensor) -> torch.Tensor:
    """Sum of max(-delta, 0) over historical positions, per row."""
    return torch.where(hist_mask, torch.relu(-delta), torch.zeros_like(delta)).sum(-1)


def counterfactual_argument(total_correct, total_incorrect, label, t):
    sign = 1.0 - 2.0 * label.to(total_correct.dtype)  # (-1)^label
    return sign / (2.0 * t.to(total_correct.dtype)) * (total_incorrect - total_correct) + 0.5


def loss_cf(total_correct, total_incorrect, label, t, alpha: float = 1.0, delta=None, hist_mask=None):
    """Per-target counterfactual loss: -log(scaled margin) + alpha * constraint."""
    total_correct = torch.as_tensor(total_correct, dtype=torch.float64) if not torch.is_tensor(total_correct) else total_correct
    total_incorrect = torch.as_tensor(total_incorrect, dtype=total_correct.dtype)
    label = torch.as_tensor(label)
    t = torch.as_tensor(t)
    arg = counterfactual_argument(total_correct, total_incorrect, label, t)
    tol = 1e-5
    if bool(((arg < -tol) | (arg > 1 + tol)).any()):
        raise AssertionError(f"log argument left [0, 1]: {arg.min().item()} .. {arg.max().item()}")
    loss = -torch.log(arg.clamp(LOG_EPS, 1.0 - LOG_EPS))
    if delta is not None and alpha:
        if hist_mask is None:
            hist_mask = torch.ones_like(delta, dtype=torch.bool)
        loss = loss + alpha * constraint_penalty(delta, hist_mask)
    return loss


def loss_factual(probs: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean BCE over unmasked positions of each row, averaged over rows with any position."""
    labels = labels.to(probs.dtype)
    bce = -(labels * torch.log(probs.clamp(LOG_EPS, 1.0)) + (1 - labels) * torch.log((1 - probs).clamp(LOG_EPS, 1.0)))
    mask = mask.to(probs.dtype)
    if probs.dim() == 1:
        bce, mask = bce[None], mask[None]
    counts = mask.sum(-1)
    rows = counts > 0
    if not bool(rows.any()):
        log.debug("factual loss over an empty mask")
        return probs.sum() * 0.0
    per_row = (bce * mask).sum(-1)[rows] / counts[rows]
    return per_row.mean()


def loss_masked(p_plus, p_minus, labels, mask) -> torch.Tensor:
    return loss_factual(p_plus, labels, mask) + loss_factual(p_minus, labels, mask)


def total_loss(l_cf, l_f, l_mp, l_mm, lam: float):
    return l_cf + lam * (l_f + l_mp + l_mm)


def l2_penalty(model: torch.nn.Module) -> torch.Tensor:
    return sum((p**2).sum() for p in model.parameters() if p.requires_grad)


def select_targets(batch: Batch, cfg: TrainConfig, generator: torch.Generator | None = None) -> Batch:
    if cfg.target_mode == "all_prefix":
        return prefix_targets(batch)
    if cfg.target_mode == "sampled":
        return sampled_targets(batch, cfg.targets_per_sequence, generator)
    return last_targets(batch)


def batch_losses(model: ResponseProbabilityGenerator, batch: Batch, cfg: TrainConfig,
                 generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    """All loss components for one mini-batch; ``total`` includes the L2 term."""
    targets = select_targets(batch, cfg, generator)
    inf = batch_backward_influences(
        model, targets.questions, targets.concepts, targets.labels, targets.lengths, mono=not cfg.no_mono
    )
    target_label = targets.labels.gather(1, (targets.lengths - 1)[:, None]).squeeze(1)
    hist = inf.correct | inf.incorrect
    l_cf = loss_cf(inf.total_correct, inf.total_incorrect, target_label, inf.t,
                   cfg.effective_alpha, inf.delta, hist).mean()

    lam = cfg.effective_lambda
    zero = l_cf.new_zeros(())
    l_f = l_mp = l_mm = zero
    if lam > 0:
        B, L = batch.labels.shape
        cats = training_view_categories(batch.labels, batch.lengths).reshape(3 * B, L)
        p = model(
            batch.questions.repeat(3, 1), batch.concepts.repeat(3, 1, 1), cats, batch.lengths.repeat(3)
        ).view(3, B, L)
        valid = torch.arange(L)[None, :] < batch.lengths[:, None]
        l_f = loss_factual(p[0], batch.labels, valid)
        l_mp = loss_factual(p[1], batch.labels, valid)
        l_mm = loss_factual(p[2], batch.labels, valid)
    total = total_loss(l_cf, l_f, l_mp, l_mm, lam)
    if cfg.l2_weight:
        total = total + cfg.l2_weight * l2_penalty(model)
    return {"total": total, "cf": l_cf, "factual": l_f, "masked_plus": l_mp, "masked_minus": l_mm}


# ------------------------------------------------------------------------------ metrics


def auc(scores, labels) -> float:
    """Rank-based ROC AUC; tied scores share their average rank."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def acc(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return float(np.mean(predictions == labels))


@dataclass
class Scored:
    scores: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    auc: float
    acc: float


@dataclass
class EvalResult:
    auc: list[float] = field(default_factory=list)
    acc: list[float] = field(default_factory=list)

    def add(self, auc_value: float, acc_value: float) -> None:
        self.auc.append(auc_value)
        self.acc.append(acc_value)

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.auc))

    @property
    def auc_std(self) -> float:
        return float(np.std(self.auc))

    @property
    def acc_mean(self) -> float:
        return float(np.mean(self.acc))

    @property
    def acc_std(self) -> float:
        return float(np.std(self.acc))

    def summary(self) -> str:
        return f"AUC {self.auc_mean:.4f}±{self.auc_std:.4f}  ACC {self.acc_mean:.4f}±{self.acc_std:.4f}"


def score_sequences(model: ResponseProbabilityGenerator, sequences: Sequence[ResponseSequence],
                    mode: str = "approx", targets: str = "all_prefix", batch_size: int = 64,
                    mono: bool = True) -> Scored:
    """Influence-based scores for every target in ``sequences``."""
    if mode not in ("approx", "exact"):
        raise ValueError(f"unknown influence mode {mode!r}")
    was_training = model.training
    model.eval()
    device = model.question_emb.weight.device
    scores, labels, preds = [], [], []
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            batch = collate(sequences[start : start + batch_size], model.pad_question, model.pad_concept)
            rows = prefix_targets(batch) if targets == "all_prefix" else last_targets(batch)
            rows = rows.to(device)
            fn = batch_backward_influences if mode == "approx" else batch_exact_influences
            inf: BatchInfluences = fn(model, rows.questions, rows.concepts, rows.labels, rows.lengths, mono=mono)
            diff = inf.total_correct - inf.total_incorrect
            scores.append(inf.score.clamp(SCORE_EPS, 1 - SCORE_EPS).double().cpu().numpy())
            preds.append((diff >= 0).long().cpu().numpy())
            labels.append(rows.labels.gather(1, (rows.lengths - 1)[:, None]).squeeze(1).cpu().numpy())
    model.train(was_training)
    scores, preds, labels = map(np.concatenate, (scores, preds, labels))
    return Scored(scores, preds, labels, auc(scores, labels), acc(preds, labels))


def evaluate(model, sequences, mode: str = "approx", targets: str = "all_prefix", batch_size: int = 64,
             mono: bool = True) -> EvalResult:
    scored = score_sequences(model, sequences, mode, targets, batch_size, mono)
    result = EvalResult()
    result.add(scored.auc, scored.acc)
    return result


# ------------------------------------------------------------------------------ training


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly better metric."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.stale = 0
        self.epoch = -1

    def step(self, value: float) -> bool:
        """Record one epoch; returns True when this epoch is the new best."""
        self.epoch += 1
        if value > self.best:
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def build_model(cfg: EncoderConfig, sequences: Sequence[ResponseSequence], seed: int = 0) -> ResponseProbabilityGenerator:
    torch.manual_seed(seed)
    table = {}
    for seq in sequences:
        for x in seq.interactions:
            table.setdefault(x.question_id, x.concept_ids)
    return ResponseProbabilityGenerator(cfg, table)


def train_model(
    train_seqs: Sequence[ResponseSequence],
    val_seqs: Sequence[ResponseSequence],
    model_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    model: ResponseProbabilityGenerator | None = None,
    metrics_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ResponseProbabilityGenerator, list[dict]]:
    """Adam on the joint loss with early stopping on validation AUC.

    Returns the best-validation model and one metrics record per epoch.
    """
    if not train_seqs:
        raise ValueError("empty training split")
    if model is None:
        model = build_model(model_cfg, list(train_seqs) + list(val_seqs), train_cfg.seed)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.betas, eps=train_cfg.adam_eps
    )
    stopper = EarlyStopping(train_cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    history = []
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(train_cfg.max_epochs):
            started = time.perf_counter()
            model.train()
            order = torch.randperm(len(train_seqs), generator=gen).tolist()
            sums = {"total": 0.0, "cf": 0.0, "factual": 0.0, "masked_plus": 0.0, "masked_minus": 0.0}
            n_batches = 0
            for start in range(0, len(order), train_cfg.batch_size):
                chunk = [train_seqs[i] for i in order[start : start + train_cfg.batch_size]]
                batch = collate(chunk, model.pad_question, model.pad_concept)
                losses = batch_losses(model, batch, train_cfg, gen)
                if not torch.isfinite(losses["total"]):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        + ", ".join(f"{k}={v.item():.4g}" for k, v in losses.items())
                    )
                opt.zero_grad()
                losses["total"].backward()
                losses = {k: v.detach() for k, v in losses.items()}
                opt.step()
                for k, v in losses.items():
                    sums[k] += v.item()
                n_batches += 1
            record = {"epoch": epoch, **{f"train_{k}": v / n_batches for k, v in sums.items()}}
            if val_seqs:
                scored = score_sequences(model, val_seqs, "approx", train_cfg.eval_targets,
                                         mono=not train_cfg.no_mono)
                record.update(val_auc=scored.auc, val_acc=scored.acc)
                improved = stopper.step(scored.auc)
            else:
                improved = stopper.step(-record["train_total"])
            if improved:
                best_state = copy.deepcopy(model.state_dict())
            record["seconds"] = time.perf_counter() - started
            history.append(record)
            log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in record.items() if isinstance(v, float)})
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if on_epoch:
                on_epoch(record)
            if stopper.should_stop:
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` (or ``key: value``) file; ``#`` starts a comment."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        key, value = line.split(sep, 1)
        out[key.strip()] = value.strip()
    return out


CONFIG_KEYS = {
    "lr": "learning_rate",
    "lambda": "lam",
    "l2": "l2_weight",
}


def train_config_from_mapping(values: dict[str, str], **overrides) -> TrainConfig:
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for key, raw in values.items():
        name = CONFIG_KEYS.get(key, key)
        if name not in kinds or name == "betas":
            continue
        kind = kinds[name]
        if kind == "bool":
            kwargs[name] = raw.lower() in ("1", "true", "yes")
        elif kind == "int":
            kwargs[name] = int(raw)
        elif kind == "float":
            kwargs[name] = float(raw)
        else:
            kwargs[name] = raw
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def config_snapshot(cfg) -> dict:
    return asdict(cfg)
