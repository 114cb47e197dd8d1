import os

import pytest
import torch

from cfkt.data import Interaction

torch.set_num_threads(int(os.environ.get("CFKT_THREADS", "1")))


def make_history(labels, concepts=None, student="s"):
    """Interactions with question ids 0..n-1 and the given correctness labels."""
    out = []
    for i, r in enumerate(labels):
        ks = (concepts[i],) if concepts is not None else (i % 3,)
        out.append(Interaction(student, i, ks, int(r), i))
    return out


@pytest.fixture
def worked_example():
    """Five answered questions (correct, incorrect, correct, correct, incorrect) and a sixth as target."""
    history = make_history([1, 0, 1, 1, 0], concepts=[0, 0, 1, 1, 1])
    target = Interaction("s", 5, (1,), 1, 5)
    return history, target


# (criterion, passed, detail) rows recorded by the acceptance suite
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
