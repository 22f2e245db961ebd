import datetime as dt

import numpy as np
import pytest

from latent_states.preprocess import DailyActivitySequence, slot_vocabulary

VOCAB = slot_vocabulary()


def make_corpus(n_participants=4, n_days=40, n_clusters=3, seed=0, start=dt.date(2024, 1, 1)):
    """Day keys with random cluster labels for triplet tests."""
    rng = np.random.default_rng(seed)
    keys = [(f"p{i}", start + dt.timedelta(days=d)) for i in range(n_participants) for d in range(n_days)]
    labels = rng.integers(0, n_clusters, size=len(keys))
    return keys, labels


def random_day(rng, pid="p", date=dt.date(2024, 1, 1)):
    return DailyActivitySequence(pid, date, tuple(rng.choice(VOCAB, size=72)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
