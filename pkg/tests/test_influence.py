
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfkt.batch import collate, prefix_targets
from cfkt.data import Interaction, ResponseSequence
from cfkt.influence import (
    APPROX_BACKWARD,
    EXACT_FORWARD,
    DegenerateInputError,
    StatisticsError,
    backward_influences,
    batch_backward_influences,
    batch_exact_influences,
    bootstrap_ci,
    collect_influence_pairs,
    correlation_exact_vs_approx,
    exact_forward_influences,
    influence_score,
    pearson,
    predict,
    predict_from,
    totals,
)
from cfkt.model import EncoderConfig, ResponseProbabilityGenerator
from cfkt.views import Category

from conftest import make_history

# P(correct) at positions 0..4 of each of the four views in the worked example table;
# incorrect-group rows list 1 - P(incorrect).
WORKED_EXAMPLE_VIEWS = {
    "10110|1": [0.6, 0.0, 0.7, 0.6, 0.0],
    "◦0◦◦0|0": [0.5, 0.0, 0.2, 0.3, 0.0],
    "10110|0": [0.0, 1 - 0.6, 0.0, 0.0, 1 - 0.9],
    "1◦11◦|1": [0.0, 1 - 0.4, 0.0, 0.0, 1 - 0.1],
}


class TableScorer:
    """Returns fixed probabilities keyed by the rendered view."""

    def __init__(self, table):
        self.table = table
        self.calls = 0

    def predict_views(self, views):
        self.calls += 1
        return np.array([self.table[v.render()] + [0.5] for v in views])


class CountingScorer:
    """Target-slot P(correct) = 0.5 + 0.05 * (visible correct - visible incorrect)."""

    def predict_views(self, views):
        out = []
        for v in views:
            hist = v.categories[: len(v.history)]
            score = 0.5 + 0.05 * (hist.count(Category.CORRECT) - hist.count(Category.INCORRECT))
            out.append([np.nan] * len(v.history) + [score])
        return np.array(out)


def test_worked_example_backward(worked_example):
    history, target = worked_example
    scorer = TableScorer(WORKED_EXAMPLE_VIEWS)
    inf = backward_influences(history, target, scorer)
    assert inf.mode == APPROX_BACKWARD and inf.t == 5
    assert scorer.calls == 1
    deltas = [e.delta for e in inf.entries]
    assert deltas == pytest.approx([0.1, 0.2, 0.5, 0.3, 0.8], abs=1e-12)
    plus, minus = totals(inf)
    assert abs(plus - 0.9) < 1e-9 and abs(minus - 1.0) < 1e-9
    rec = predict_from(inf, label=1)
    assert rec.prediction == 0
    assert rec.score == pytest.approx((0.9 - 1.0) / 10 + 0.5)


def test_exact_forward_matches_hand_oracle():
    labels = [1, 1, 0, 1, 0, 0, 1]
    history = make_history(labels)
    target = Interaction("s", 50, (0,), 1, 7)
    inf = exact_forward_influences(history, target, CountingScorer())
    assert inf.mode == EXACT_FORWARD
    n1, n0 = labels.count(1), labels.count(0)
    for e in inf.entries:
        # flipping a correct answer leaves n0 + 1 incorrect visible; an incorrect one leaves n1 + 1 correct
        expected = 0.05 * (n1 + 1) if e.label == 1 else 0.05 * (n0 + 1)
        assert e.delta == pytest.approx(expected, abs=1e-12)


def test_exact_forward_empty_history():
    assert exact_forward_influences([], Interaction("s", 0, (0,), 1, 0), CountingScorer()).t == 0


def test_predict_rules():
    assert predict(0.4, 0.4, 3).prediction == 1
    assert predict(0.4, 0.4, 3).tie
    assert predict(0.3, 0.4, 3).prediction == 0
    assert predict(5.0, 0.0, 5).score == pytest.approx(1 - 1e-7)
    assert predict(0.0, 5.0, 5).score == pytest.approx(1e-7)
    with pytest.raises(DegenerateInputError):
        predict(0.0, 0.0, 0)


@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 100))
def test_score_and_prediction_agree(a, b, t):
    a, b = a * t, b * t
    rec = predict(a, b, t)
    assert 0 < rec.score < 1
    assert rec.prediction == int(a >= b)
    if abs(a - b) > 1e-9:
        assert (rec.score >= 0.5) == (a >= b)
    assert rec.score == pytest.approx(min(max(influence_score(a, b, t), 1e-7), 1 - 1e-7))


def model_and_batch(backbone="dkt", seed=0, n=5, L=9):
    torch.manual_seed(seed)
    cfg = EncoderConfig(12, 4, backbone=backbone, d=16, heads=4)
    model = ResponseProbabilityGenerator(cfg, {q: (q % 4,) for q in range(12)}).eval().double()
    rng = np.random.default_rng(seed)
    seqs = []
    for s in range(n):
        length = int(rng.integers(2, L + 1))
        seqs.append(ResponseSequence(tuple(
            Interaction(f"s{s}", int(rng.integers(12)), (int(rng.integers(4)),), int(rng.integers(2)), i)
            for i in range(length)
        )))
    return model, seqs


@pytest.mark.parametrize("backbone", ["dkt", "sakt", "akt"])
@pytest.mark.parametrize("mono", [True, False])
def test_tensor_paths_match_object_paths(backbone, mono):
    model, seqs = model_and_batch(backbone)
    batch = prefix_targets(collate(seqs, model.pad_question, model.pad_concept))
    with torch.no_grad():
        approx = batch_backward_influences(model, batch.questions, batch.concepts, batch.labels, batch.lengths, mono)
        exact = batch_exact_influences(model, batch.questions, batch.concepts, batch.labels, batch.lengths, mono)
    row = 0
    for seq in seqs:
        for j in range(1, len(seq)):
            hist, target = seq.interactions[:j], seq.interactions[j]
            ob = backward_influences(hist, target, model, mono)
            oe = exact_forward_influences(hist, target, model, mono)
            assert np.allclose([e.delta for e in ob.entries], approx.delta[row, :j].numpy(), atol=1e-10)
            assert np.allclose([e.delta for e in oe.entries], exact.delta[row, :j].numpy(), atol=1e-10)
            assert predict_from(ob).score == pytest.approx(float(approx.score[row].clamp(1e-7, 1 - 1e-7)), abs=1e-10)
            row += 1
    assert row == len(batch)


def test_pass_counts():
    model, seqs = model_and_batch()
    seq = seqs[0]
    batch = collate([seq], model.pad_question, model.pad_concept)
    t = len(seq) - 1
    with torch.no_grad():
        model.view_passes = 0
        batch_backward_influences(model, batch.questions, batch.concepts, batch.labels, batch.lengths)
        assert model.view_passes == 4
        model.view_passes = 0
        batch_exact_influences(model, batch.questions, batch.concepts, batch.labels, batch.lengths)
        assert model.view_passes == 2 * t


def test_pearson_and_bootstrap():
    rng = np.random.default_rng(0)
    x = rng.normal(size=300)
    y = x + 0.5 * rng.normal(size=300)
    r = pearson(x, y)
    assert r == pytest.approx(np.corrcoef(x, y)[0, 1])
    lo, hi = bootstrap_ci(x, y, n_boot=500)
    assert lo < r < hi and lo > 0
    with pytest.raises(StatisticsError):
        pearson([1, 2], [1, 2])


def test_correlation_pipeline_runs():
    model, seqs = model_and_batch(n=8)
    pairs = collect_influence_pairs(model, seqs, n_targets=10)
    assert set(pairs) == {"correct", "incorrect"}
    report = correlation_exact_vs_approx(model, seqs, n_targets=30)
    assert -1 <= report.r_correct <= 1 and -1 <= report.r_incorrect <= 1
    with pytest.raises(StatisticsError):
        collect_influence_pairs(model, [ResponseSequence((seqs[0].interactions[0],))], 5)
