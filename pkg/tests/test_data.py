import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfkt.data import (
    ASSIST09_SCHEMA,
    CANONICAL_SCHEMA,
    ConfigurationError,
    DataError,
    Interaction,
    ResponseSequence,
    SchemaError,
    Vocabulary,
    correct_probability,
    dataset_stats,
    generate_synthetic,
    kfold_split,
    load_dataset,
    oracle_probabilities,
    preprocess,
    question_concept_table,
    read_canonical,
    write_canonical,
)
from cfkt.training import auc


def test_interaction_validation():
    with pytest.raises(DataError):
        Interaction("s", 0, (), 1)
    with pytest.raises(DataError):
        Interaction("s", 0, (1,), 2)


def test_assist_style_loading(tmp_path):
    raw = tmp_path / "skill_builder.csv"
    raw.write_text(
        "order_id,user_id,problem_id,skill_id,correct\n"
        "3,u1,p9,s1_s2,1\n"
        "1,u1,p7,s1,0\n"
        "2,u1,p8,,1\n"  # no concept tag: dropped
        "5,u2,p7,s1,1\n",
        encoding="latin-1",
    )
    ds = load_dataset(raw, ASSIST09_SCHEMA, vocab_dir=tmp_path / "vocab")
    assert len(ds.interactions) == 3
    assert ds.n_questions == 2 and ds.n_concepts == 2
    first = ds.interactions[0]
    assert first.concept_ids == (0, 1) and first.timestamp == 3
    seqs = preprocess(ds.interactions, max_len=50, min_len=1)
    u1 = [s for s in seqs if s.student_id == "u1"][0]
    # sorted by order id
    assert [x.timestamp for x in u1.interactions] == [1, 3]
    assert Vocabulary.load(tmp_path / "vocab" / "question_vocab.tsv").index == {"p9": 0, "p7": 1}


def test_missing_column_and_bad_label(tmp_path):
    raw = tmp_path / "x.csv"
    raw.write_text("user_id,problem_id,correct\nu,p,1\n")
    with pytest.raises(SchemaError):
        load_dataset(raw, ASSIST09_SCHEMA)
    raw.write_text("order_id,user_id,problem_id,skill_id,correct\n1,u,p,s,0.5\n")
    with pytest.raises(DataError):
        load_dataset(raw, ASSIST09_SCHEMA)


def test_canonical_round_trip(tmp_path):
    xs = [Interaction("a", 3, (0, 2), 1, 0), Interaction("a", 1, (1,), 0, 1), Interaction("b", 3, (0, 2), 0, 0)]
    path = tmp_path / "c.csv"
    write_canonical(xs, path)
    assert read_canonical(path) == xs
    ds = load_dataset(path, CANONICAL_SCHEMA)
    assert [x.correctness for x in ds.interactions] == [1, 0, 0]


def test_preprocess_chunks_and_drops_short():
    xs = [Interaction("s", i, (0,), i % 2, i) for i in range(107)]
    seqs = preprocess(xs, max_len=50, min_len=5)
    # 50 + 50 kept, trailing 7 kept, nothing shorter than 5
    assert [len(s) for s in seqs] == [50, 50, 7]
    assert preprocess(xs[:4], max_len=50, min_len=5) == []


def test_stable_timestamp_ties():
    xs = [Interaction("s", q, (0,), 1, 0) for q in (5, 3, 8)]
    assert preprocess(xs, min_len=1)[0].questions == [5, 3, 8]


def test_sequence_history():
    seq = ResponseSequence(tuple(Interaction("s", i, (0,), 1, i) for i in range(6)))
    assert len(seq.history(3)) == 3
    with pytest.raises(ValueError):
        ResponseSequence(seq.interactions, pad_length=2)


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 80), st.integers(2, 6), st.integers(0, 1000))
def test_kfold_partitions(n, k, seed):
    seqs = [ResponseSequence((Interaction(f"s{i}", 0, (0,), 1, 0),)) for i in range(n)]
    splits = kfold_split(seqs, k, 0.1, seed=seed)
    tests = [id(s) for _, _, test in splits for s in test]
    # every sequence is tested exactly once
    assert sorted(tests) == sorted(id(s) for s in seqs)
    for train, val, test in splits:
        assert len(train) + len(val) + len(test) == n
        assert not ({id(s) for s in train} & {id(s) for s in test})
        assert len(val) == round(0.1 * (n - len(test)))


def test_kfold_by_student_keeps_students_together():
    seqs = [ResponseSequence((Interaction(f"s{i // 3}", 0, (0,), 1, i),)) for i in range(30)]
    for train, val, test in kfold_split(seqs, 5, 0.1, by="student"):
        test_students = {s.student_id for s in test}
        assert not test_students & {s.student_id for s in train + val}


def test_kfold_errors():
    seqs = [ResponseSequence((Interaction("s", 0, (0,), 1, 0),))] * 3
    with pytest.raises(ConfigurationError):
        kfold_split(seqs, 5)
    with pytest.raises(ConfigurationError):
        kfold_split(seqs, 1)
    with pytest.raises(ConfigurationError):
        kfold_split(seqs, 2, by="school")


def test_kfold_deterministic():
    seqs = [ResponseSequence((Interaction(f"s{i}", 0, (0,), 1, 0),)) for i in range(20)]
    a = kfold_split(seqs, 5, seed=3)
    b = kfold_split(seqs, 5, seed=3)
    assert [[s.student_id for s in t] for t, _, _ in a] == [[s.student_id for s in t] for t, _, _ in b]


def test_correct_probability_limits_and_monotone():
    theta = np.linspace(-1, 2, 50)
    p = correct_probability(theta, 0.5, 0.1, 0.2, 8.0)
    assert np.all(np.diff(p) > 0)
    assert p[0] == pytest.approx(0.1, abs=1e-4) and p[-1] == pytest.approx(0.8, abs=1e-4)
    assert correct_probability(0.5, 0.5, 0.1, 0.2, 8.0) == pytest.approx(0.1 + 0.7 / 2)


def test_synthetic_shapes_and_determinism(tmp_path):
    xs, truth = generate_synthetic(20, 30, 5, 12, seed=4)
    ys, _ = generate_synthetic(20, 30, 5, 12, seed=4)
    assert xs == ys
    assert len(xs) == 20 * 12
    assert question_concept_table(xs).items() <= truth.question_concepts.items()
    stats = dataset_stats(preprocess(xs, 12, 1))
    assert stats.n_sequences == 20 and stats.n_responses == 240
    truth.write(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().startswith("student_id,step,concept_id,theta")


def test_synthetic_learning_raises_proficiency():
    xs, truth = generate_synthetic(5, 10, 3, 40, learn_rate=0.2, seed=1)
    # theta before each practice of a concept never decreases for a student
    last: dict = {}
    for s, step, k, theta in truth.trajectory:
        if (s, k) in last:
            assert theta >= last[(s, k)]
        last[(s, k)] = theta


def test_synthetic_config_errors():
    with pytest.raises(ConfigurationError):
        generate_synthetic(1, 1, 1, 1, guess=0.6, slip=0.5)
    with pytest.raises(ConfigurationError):
        generate_synthetic(1, 1, 1, 1, learn_rate=1.5)


def test_oracle_is_informative():
    xs, truth = generate_synthetic(200, 50, 10, 30, seed=0)
    p = oracle_probabilities(xs, truth, 0.1, 0.1)
    assert auc(p, [x.correctness for x in xs]) > 0.7
