"""Influence reports and per-concept proficiency traces."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

from .data import Interaction, ResponseSequence
from .influence import (
    APPROX_BACKWARD,
    EXACT_FORWARD,
    DegenerateInputError,
    InfluenceEntry,
    InfluenceSet,
    PredictionRecord,
    backward_influences,
    exact_forward_influences,
    predict_from,
)
from .views import Target

COLUMNS = ("index", "question", "concepts", "label", "group", "f", "cf", "delta")


@dataclass
class InfluenceReport:
    influences: InfluenceSet
    prediction: PredictionRecord

    def to_records(self) -> list[dict]:
        rows = [
            {
                "index": e.index,
                "question": e.question_id,
                "concepts": list(e.concept_ids),
                "label": e.label,
                "group": e.group,
                "f": e.f_prob,
                "cf": e.cf_prob,
                "delta": e.delta,
            }
            for e in self.influences.entries
        ]
        summary = {
            "summary": True,
            "target_question": self.influences.target.question_id,
            "target_concepts": list(self.influences.target.concept_ids),
            "mode": self.influences.mode,
            **asdict(self.prediction),
        }
        return rows + [summary]

    def to_json_lines(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())

    def to_text(self) -> str:
        """Tab-separated rows between a header comment and a totals comment."""
        out = io.StringIO()
        tgt = self.influences.target
        q = "" if tgt.question_id is None else tgt.question_id
        out.write(f"# target_question={q} concepts={'|'.join(map(str, tgt.concept_ids))} "
                  f"mode={self.influences.mode}\n")
        out.write("\t".join(COLUMNS) + "\n")
        for e in self.influences.entries:
            out.write("\t".join([
                str(e.index), str(e.question_id), "|".join(map(str, e.concept_ids)), str(e.label), e.group,
                repr(e.f_prob), repr(e.cf_prob), repr(e.delta),
            ]) + "\n")
        p = self.prediction
        label = "" if p.label is None else p.label
        out.write(f"# total_correct={p.total_correct!r} total_incorrect={p.total_incorrect!r} "
                  f"score={p.score!r} prediction={p.prediction} label={label} "
                  f"tie={'true' if p.tie else 'false'}\n")
        return out.getvalue()


def parse_report(text: str) -> InfluenceReport:
    lines = text.strip("\n").split("\n")
    head = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split(" "))
    tail = dict(kv.split("=", 1) for kv in lines[-1].lstrip("# ").split(" "))
    entries = []
    for line in lines[2:-1]:
        idx, q, ks, label, _group, f, cf, delta = line.split("\t")
        entries.append(InfluenceEntry(int(idx), int(q), tuple(int(k) for k in ks.split("|")), int(label),
                                      float(f), float(cf), float(delta)))
    target = Target(int(head["target_question"]) if head["target_question"] else None,
                    tuple(int(k) for k in head["concepts"].split("|") if k))
    influences = InfluenceSet(entries, target, head["mode"])
    prediction = PredictionRecord(
        target_question=target.question_id,
        total_correct=float(tail["total_correct"]),
        total_incorrect=float(tail["total_incorrect"]),
        score=float(tail["score"]),
        prediction=int(tail["prediction"]),
        label=int(tail["label"]) if tail["label"] else None,
        tie=tail["tie"] == "true",
    )
    return InfluenceReport(influences, prediction)


def influence_report(model, history: Sequence[Interaction] | ResponseSequence, target, mode: str = "approx",
                     label: int | None = None, mono: bool = True) -> InfluenceReport:
    if mode in ("approx", APPROX_BACKWARD):
        influences = backward_influences(history, target, model, mono=mono)
    elif mode in ("exact", EXACT_FORWARD):
        influences = exact_forward_influences(history, target, model, mono=mono)
    else:
        raise ValueError(f"unknown influence mode {mode!r}")
    if label is None and isinstance(target, Interaction):
        label = target.correctness
    return InfluenceReport(influences, predict_from(influences, label=label))


@dataclass
class ProficiencyTrace:
    concept_id: int
    values: list[float]
    influences: list[InfluenceSet]

    def to_records(self) -> list[dict]:
        return [
            {"concept": self.concept_id, "step": s, "proficiency": v,
             "influences": [e.delta for e in inf.entries]}
            for s, (v, inf) in enumerate(zip(self.values, self.influences))
        ]


def trace_proficiency(model, seq: ResponseSequence | Sequence[Interaction], concept_id: int,
                      mono: bool = True) -> ProficiencyTrace:
    """Proficiency in ``concept_id`` after each response of ``seq``.

    The target is a virtual question for the concept, so every value is the
    influence score of that target given the prefix.
    """
    history = tuple(seq.interactions) if isinstance(seq, ResponseSequence) else tuple(seq)
    if not history:
        raise DegenerateInputError("proficiency needs at least one response")
    model.concept_target_embedding(concept_id)  # raises LookupError for unknown concepts
    target = Target(None, (concept_id,))
    values, sets = [], []
    for step in range(1, len(history) + 1):
        influences = backward_influences(history[:step], target, model, mono=mono)
        values.append(predict_from(influences).score)
        sets.append(influences)
    return ProficiencyTrace(concept_id, values, sets)
