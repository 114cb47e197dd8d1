import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfkt.data import Interaction
from cfkt.views import (
    Category,
    SequenceView,
    Target,
    approx_view_categories,
    counterfactual_view,
    factual_view,
    forward_views,
    masked_views_for_training,
    training_view_categories,
)

from conftest import make_history

labels_st = st.lists(st.integers(0, 1), min_size=1, max_size=30)


def test_worked_example_renderings(worked_example):
    # the four views of the worked example table, in its notation
    history, target = worked_example
    assert factual_view(history, target, 1).render() == "10110|1"
    assert counterfactual_view(history, target, 0).render() == "◦0◦◦0|0"
    assert factual_view(history, target, 0).render() == "10110|0"
    assert counterfactual_view(history, target, 1).render() == "1◦11◦|1"


def test_render_padding(worked_example):
    history, target = worked_example
    assert factual_view(history, target, 1).render(pad_to=9) == "10110|1···"


def test_no_mono_keeps_everything(worked_example):
    history, target = worked_example
    assert counterfactual_view(history, target, 0, mono=False).render() == "10110|0"


@given(labels_st)
def test_flip_to_incorrect_masks_correct_and_keeps_incorrect(labels):
    history = make_history(labels)
    view = counterfactual_view(history, Target(99, (0,)), Category.INCORRECT)
    for r, c in zip(labels, view.categories):
        assert c == (Category.MASKED if r == 1 else Category.INCORRECT)
    assert view.categories[-1] == Category.INCORRECT


@given(labels_st)
def test_flip_to_correct_masks_incorrect_and_keeps_correct(labels):
    history = make_history(labels)
    view = counterfactual_view(history, Target(99, (0,)), Category.CORRECT)
    for r, c in zip(labels, view.categories):
        assert c == (Category.MASKED if r == 0 else Category.CORRECT)


@given(labels_st, st.data())
def test_forward_views_intervene_on_one_position(labels, data):
    history = make_history(labels)
    i = data.draw(st.integers(0, len(labels) - 1))
    f, cf = forward_views(history, i, Target(99, (0,)))
    assert f.categories[:-1] == tuple(labels)
    assert f.categories[-1] == cf.categories[-1] == Category.MASKED
    flip = 1 - labels[i]
    assert cf.categories[i] == flip
    for j, (r, c) in enumerate(zip(labels, cf.categories)):
        if j != i:
            assert c == (Category.MASKED if r != flip else r)


def test_forward_views_bounds(worked_example):
    history, target = worked_example
    with pytest.raises(IndexError):
        forward_views(history, 5, target)
    with pytest.raises(IndexError):
        forward_views(history, -1, target)


def test_masked_training_views(worked_example):
    history, _ = worked_example
    plus, minus = masked_views_for_training(history)
    assert plus.render() == "1◦11◦"
    assert minus.render() == "◦0◦◦0"


def test_view_validation(worked_example):
    history, target = worked_example
    with pytest.raises(ValueError):
        SequenceView(tuple(history), (1, 0, 1), Target.of(target), 1)
    with pytest.raises(ValueError):
        SequenceView(tuple(history), (1, 0, 1, 1, 0, 0), Target.of(target), 1)
    # two positions disagreeing with the record is not a single intervention
    with pytest.raises(ValueError):
        SequenceView(tuple(history), (0, 1, 1, 1, 0))


def test_target_of_interaction():
    x = Interaction("s", 4, (1, 2), 0, 0)
    assert Target.of(x) == Target(4, (1, 2))
    assert Target.of(Target(None, (3,))).question_id is None


@settings(max_examples=50)
@given(st.lists(labels_st, min_size=1, max_size=6), st.booleans())
def test_tensor_views_match_object_views(rows, mono):
    """Batched categories agree with the per-sequence builders (history + target per row)."""
    rows = [r + [1] for r in rows]  # last entry is the target slot
    L = max(len(r) for r in rows)
    labels = torch.zeros(len(rows), L, dtype=torch.long)
    for b, r in enumerate(rows):
        labels[b, : len(r)] = torch.tensor(r)
    lengths = torch.tensor([len(r) for r in rows])
    cats = approx_view_categories(labels, lengths, mono=mono)
    assert cats.shape == (4, len(rows), L)
    for b, r in enumerate(rows):
        history = make_history(r[:-1])
        target = Target(99, (0,))
        expected = [
            factual_view(history, target, 1),
            counterfactual_view(history, target, 0, mono=mono),
            factual_view(history, target, 0),
            counterfactual_view(history, target, 1, mono=mono),
        ]
        for v, view in enumerate(expected):
            n = len(r)
            assert cats[v, b, :n].tolist() == list(view.categories)
            assert (cats[v, b, n:] == Category.MASKED).all()


def test_training_view_categories():
    labels = torch.tensor([[1, 0, 1, 0], [0, 1, 0, 0]])
    lengths = torch.tensor([4, 2])
    cats = training_view_categories(labels, lengths)
    M = Category.MASKED
    assert cats[0].tolist() == [[1, 0, 1, 0], [0, 1, M, M]]
    assert cats[1].tolist() == [[1, M, 1, M], [M, 1, M, M]]
    assert cats[2].tolist() == [[M, 0, M, 0], [0, M, M, M]]
