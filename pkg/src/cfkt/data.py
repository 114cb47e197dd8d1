"""Dataset ingestion, preprocessing, fold splitting and a synthetic student simulator."""

from __future__ import annotations

import csv
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    student_id: str
    question_id: int
    concept_ids: tuple[int, ...]
    correctness: int
    timestamp: int = 0

    def __post_init__(self):
        if not self.concept_ids:
            raise DataError(f"question {self.question_id} has no concepts")
        if self.correctness not in (0, 1):
            raise DataError(f"correctness must be 0 or 1, got {self.correctness!r}")


@dataclass(frozen=True)
class ResponseSequence:
    interactions: tuple[Interaction, ...]
    pad_length: int = 50

    def __post_init__(self):
        if self.pad_length < len(self.interactions):
            raise ValueError("pad_length shorter than the sequence")

    def __len__(self):
        return len(self.interactions)

    @property
    def student_id(self) -> str:
        return self.interactions[0].student_id if self.interactions else ""

    @property
    def questions(self) -> list[int]:
        return [x.question_id for x in self.interactions]

    @property
    def labels(self) -> list[int]:
        return [x.correctness for x in self.interactions]

    def history(self, end: int) -> "ResponseSequence":
        """Prefix of the first ``end`` interactions."""
        return ResponseSequence(self.interactions[:end], self.pad_length)


@dataclass
class DatasetStats:
    n_responses: int
    n_sequences: int
    n_questions: int
    n_concepts: int
    mean_concepts_per_question: float
    fraction_correct: float


@dataclass
class DatasetSchema:
    """Column mapping for a delimited raw file."""

    student: str
    question: str
    concept: str
    correctness: str
    order: str | None = None
    delimiter: str = ","
    concept_delimiters: str = "_;"
    encoding: str = "utf-8"


CANONICAL_SCHEMA = DatasetSchema(
    student="student_id",
    question="question_id",
    concept="concept_ids",
    correctness="correctness",
    order="timestamp",
    concept_delimiters="|",
)

ASSIST09_SCHEMA = DatasetSchema(
    student="user_id",
    question="problem_id",
    concept="skill_id",
    correctness="correct",
    order="order_id",
    encoding="latin-1",
)


@dataclass
class Vocabulary:
    """Raw key -> dense 0-based index."""

    index: dict[str, int] = field(default_factory=dict)

    def add(self, key: str) -> int:
        if key not in self.index:
            self.index[key] = len(self.index)
        return self.index[key]

    def __len__(self):
        return len(self.index)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key, idx in self.index.items():
                fh.write(f"{key}\t{idx}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                key, idx = line.rstrip("\n").split("\t")
                vocab.index[key] = int(idx)
        return vocab


@dataclass
class LoadedDataset:
    interactions: list[Interaction]
    question_vocab: Vocabulary
    concept_vocab: Vocabulary

    @property
    def n_questions(self) -> int:
        return len(self.question_vocab)

    @property
    def n_concepts(self) -> int:
        return len(self.concept_vocab)


def _parse_binary(value: str, row_number: int) -> int:
    try:
        number = float(value)
    except ValueError:
        raise DataError(f"row {row_number}: correctness {value!r} is not numeric") from None
    if number not in (0.0, 1.0):
        raise DataError(f"row {row_number}: correctness {value!r} is not binary")
    return int(number)


def _parse_order(value: str, fallback: int) -> int:
    if value is None or value == "":
        return fallback
    try:
        return int(float(value))
    except ValueError:
        return fallback


def load_dataset(
    path: str | Path,
    schema: DatasetSchema,
    vocab_dir: str | Path | None = None,
) -> LoadedDataset:
    """Read a delimited interaction file and re-index questions and concepts densely.

    Rows whose concept field is empty are skipped (ASSIST09 has unlabeled rows).
    When ``vocab_dir`` is given the two vocabulary maps are written there.
    """
    splitter = re.compile("[" + re.escape(schema.concept_delimiters) + "]")
    qvocab, kvocab = Vocabulary(), Vocabulary()
    interactions = []
    with open(path, newline="", encoding=schema.encoding) as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        columns = [schema.student, schema.question, schema.concept, schema.correctness]
        if schema.order:
            columns.append(schema.order)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"missing column(s) {missing} in {path}")
        for row_number, row in enumerate(reader, start=2):
            raw_concepts = [c.strip() for c in splitter.split(row[schema.concept] or "")]
            raw_concepts = list(dict.fromkeys(c for c in raw_concepts if c))
            if not raw_concepts:
                continue
            correctness = _parse_binary(row[schema.correctness].strip(), row_number)
            concept_ids = tuple(sorted({kvocab.add(c) for c in raw_concepts}))
            timestamp = _parse_order(row[schema.order], row_number) if schema.order else row_number
            interactions.append(
                Interaction(
                    student_id=row[schema.student].strip(),
                    question_id=qvocab.add(row[schema.question].strip()),
                    concept_ids=concept_ids,
                    correctness=correctness,
                    timestamp=timestamp,
                )
            )
    if vocab_dir is not None:
        vocab_dir = Path(vocab_dir)
        vocab_dir.mkdir(parents=True, exist_ok=True)
        qvocab.save(vocab_dir / "question_vocab.tsv")
        kvocab.save(vocab_dir / "concept_vocab.tsv")
    return LoadedDataset(interactions, qvocab, kvocab)


def read_canonical(path: str | Path) -> list[Interaction]:
    """Read the canonical interchange format, keeping integer ids as written."""
    interactions = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"student_id", "question_id", "concept_ids", "correctness", "timestamp"} - set(
            reader.fieldnames or []
        )
        if missing:
            raise SchemaError(f"missing column(s) {sorted(missing)} in {path}")
        for row_number, row in enumerate(reader, start=2):
            interactions.append(
                Interaction(
                    student_id=row["student_id"],
                    question_id=int(row["question_id"]),
                    concept_ids=tuple(int(c) for c in row["concept_ids"].split("|")),
                    correctness=_parse_binary(row["correctness"], row_number),
                    timestamp=int(row["timestamp"]),
                )
            )
    return interactions


def write_canonical(interactions: Iterable[Interaction], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "question_id", "concept_ids", "correctness", "timestamp"])
        for x in interactions:
            writer.writerow(
                [x.student_id, x.question_id, "|".join(map(str, x.concept_ids)), x.correctness, x.timestamp]
            )


def group_by_student(interactions: Iterable[Interaction]) -> dict[str, list[Interaction]]:
    """Per-student streams sorted by timestamp; ties keep file order (sort is stable)."""
    streams: dict[str, list[Interaction]] = defaultdict(list)
    for x in interactions:
        streams[x.student_id].append(x)
    return {s: sorted(xs, key=lambda x: x.timestamp) for s, xs in streams.items()}


def preprocess(
    interactions: Iterable[Interaction], max_len: int = 50, min_len: int = 5
) -> list[ResponseSequence]:
    """Split each student's stream into consecutive chunks of ``max_len``.

    Chunks shorter than ``min_len`` are dropped.
    """
    sequences = []
    for stream in group_by_student(interactions).values():
        for start in range(0, len(stream), max_len):
            chunk = stream[start : start + max_len]
            if len(chunk) >= min_len:
                sequences.append(ResponseSequence(tuple(chunk), pad_length=max_len))
    return sequences


def kfold_split(
    sequences: Sequence[ResponseSequence],
    k: int = 5,
    val_fraction: float = 0.1,
    seed: int = 0,
    by: str = "sequence",
) -> list[tuple[list[ResponseSequence], list[ResponseSequence], list[ResponseSequence]]]:
    """Return ``k`` (train, val, test) triples.

    ``by="student"`` keeps all sequences of a student inside one fold.
    """
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    if not 0 <= val_fraction < 1:
        raise ConfigurationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    if by == "sequence":
        units = [[i] for i in range(len(sequences))]
    elif by == "student":
        owners: dict[str, list[int]] = defaultdict(list)
        for i, seq in enumerate(sequences):
            owners[seq.student_id].append(i)
        units = list(owners.values())
    else:
        raise ConfigurationError(f"unknown split unit {by!r}")
    if len(units) < k:
        raise ConfigurationError(f"need at least {k} {by}s to split, got {len(units)}")

    order = rng.permutation(len(units))
    folds = [order[j::k] for j in range(k)] if by == "student" else np.array_split(order, k)
    splits = []
    for j in range(k):
        test_idx = [i for u in folds[j] for i in units[u]]
        rest_units = np.concatenate([folds[m] for m in range(k) if m != j])
        rest_units = rng.permutation(rest_units)
        rest = [i for u in rest_units for i in units[u]]
        n_val = int(round(val_fraction * len(rest)))
        val_idx, train_idx = rest[:n_val], rest[n_val:]
        splits.append(
            (
                [sequences[i] for i in train_idx],
                [sequences[i] for i in val_idx],
                [sequences[i] for i in test_idx],
            )
        )
    return splits


def dataset_stats(sequences: Sequence[ResponseSequence]) -> DatasetStats:
    questions: dict[int, tuple[int, ...]] = {}
    concepts = set()
    n_correct = n_responses = 0
    for seq in sequences:
        for x in seq.interactions:
            questions[x.question_id] = x.concept_ids
            concepts.update(x.concept_ids)
            n_correct += x.correctness
            n_responses += 1
    mean_k = float(np.mean([len(c) for c in questions.values()])) if questions else 0.0
    return DatasetStats(
        n_responses=n_responses,
        n_sequences=len(sequences),
        n_questions=len(questions),
        n_concepts=len(concepts),
        mean_concepts_per_question=mean_k,
        fraction_correct=n_correct / n_responses if n_responses else 0.0,
    )


def question_concept_table(interactions: Iterable[Interaction]) -> dict[int, tuple[int, ...]]:
    table: dict[int, tuple[int, ...]] = {}
    for x in interactions:
        table.setdefault(x.question_id, x.concept_ids)
    return table


# --------------------------------------------------------------------------- synthetic students


def correct_probability(theta, difficulty, guess: float, slip: float, discrimination: float):
    """guess + (1 - guess - slip) * sigmoid(a * (theta - b)); strictly increasing in theta."""
    z = discrimination * (np.asarray(theta, dtype=float) - np.asarray(difficulty, dtype=float))
    return guess + (1.0 - guess - slip) / (1.0 + np.exp(-z))


@dataclass
class SyntheticGroundTruth:
    difficulty: np.ndarray  # [n_questions]
    question_concepts: dict[int, tuple[int, ...]]
    # (student, step, concept, theta-before-response)
    trajectory: list[tuple[str, int, int, float]]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("student_id,step,concept_id,theta\n")
            for s, step, k, theta in self.trajectory:
                fh.write(f"{s},{step},{k},{theta:.6f}\n")


def generate_synthetic(
    n_students: int,
    n_questions: int,
    n_concepts: int,
    seq_len: int,
    learn_rate: float = 0.05,
    guess: float = 0.1,
    slip: float = 0.1,
    seed: int = 0,
    discrimination: float = 8.0,
    max_concepts_per_question: int = 2,
    concept_spread: float = 0.3,
    difficulty_range: tuple[float, float] = (0.3, 0.7),
    focus_size: int = 1,
    block_length: int = 10,
) -> tuple[list[Interaction], SyntheticGroundTruth]:
    """Simulate students whose per-concept proficiency drives their answers.

    Each student draws a base ability; concept proficiencies scatter around it
    by ``concept_spread``. Practice comes in blocks of ``block_length`` steps on
    ``focus_size`` concepts. A question's effective proficiency is the mean over
    its concepts, and practicing a question moves each of its concepts by
    ``learn_rate * (1 - theta)``.
    """
    for name, value in (("learn_rate", learn_rate), ("guess", guess), ("slip", slip)):
        if not 0.0 <= value <= 1.0:
            raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    if guess + slip >= 1.0:
        raise ConfigurationError("guess + slip must be below 1 for a monotone response curve")
    if seq_len < 1 or n_students < 1 or n_questions < 1 or n_concepts < 1:
        raise ConfigurationError("sizes must be positive")

    rng = np.random.default_rng(seed)
    difficulty = rng.uniform(*difficulty_range, size=n_questions)
    qconcepts: dict[int, tuple[int, ...]] = {}
    for q in range(n_questions):
        n_k = 1 if max_concepts_per_question <= 1 or rng.random() < 0.8 else 2
        first = q % n_concepts  # every concept gets questions
        extra = rng.choice(n_concepts, size=n_k - 1, replace=False) if n_k > 1 else []
        qconcepts[q] = tuple(sorted({first, *map(int, extra)}))
    by_concept: dict[int, list[int]] = defaultdict(list)
    for q, ks in qconcepts.items():
        by_concept[ks[0]].append(q)

    interactions: list[Interaction] = []
    trajectory: list[tuple[str, int, int, float]] = []
    for s in range(n_students):
        sid = f"s{s}"
        ability = rng.beta(2.0, 2.0)
        theta = np.clip(ability + rng.normal(0.0, concept_spread, size=n_concepts) - 0.15, 0.0, 1.0)
        # students work through a few concepts at a time, like assignment blocks
        focus = rng.choice(n_concepts, size=min(focus_size, n_concepts), replace=False)
        for step in range(seq_len):
            if step % block_length == 0 and step:
                focus = rng.choice(n_concepts, size=min(focus_size, n_concepts), replace=False)
            k = int(rng.choice(focus))
            q = int(rng.choice(by_concept[k]))
            ks = qconcepts[q]
            th = float(np.mean(theta[list(ks)]))
            for kk in ks:
                trajectory.append((sid, step, kk, float(theta[kk])))
            p = float(correct_probability(th, difficulty[q], guess, slip, discrimination))
            r = int(rng.random() < p)
            interactions.append(Interaction(sid, q, ks, r, step))
            for kk in ks:
                theta[kk] += learn_rate * (1.0 - theta[kk])
    return interactions, SyntheticGroundTruth(difficulty, qconcepts, trajectory)


def oracle_probabilities(interactions: Sequence[Interaction], truth: SyntheticGroundTruth, guess: float,
                         slip: float, discrimination: float = 8.0) -> np.ndarray:
    """True correct-probabilities of every synthetic interaction, for ceiling estimates."""
    theta_at: dict[tuple[str, int, int], float] = {(s, st, k): th for s, st, k, th in truth.trajectory}
    out = []
    for x in interactions:
        th = np.mean([theta_at[(x.student_id, x.timestamp, k)] for k in x.concept_ids])
        out.append(correct_probability(th, truth.difficulty[x.question_id], guess, slip, discrimination))
    return np.asarray(out)
