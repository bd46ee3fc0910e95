import numpy as np
import pytest

from proxyrating.clickstream import ActionVocab, Journey

SMALL_LABELS = ("Home", "Search", "Detail", "Cart", "Help", "Purchase", "Survey")


@pytest.fixture(scope="session")
def small_vocab() -> ActionVocab:
    return ActionVocab.from_labels(SMALL_LABELS)


def random_journeys(rng: np.random.Generator, vocab: ActionVocab, n: int, max_len: int = 30) -> list[Journey]:
    """Random journeys: purchase only as the last event, at most one survey."""
    plain = [i for i in range(vocab.size) if i not in (vocab.purchase_id, vocab.survey_id)]
    out = []
    for k in range(n):
        m = int(rng.integers(2, max_len + 1))
        acts = list(rng.choice(plain, size=m))
        if rng.random() < 0.4:
            acts[-1] = vocab.purchase_id
        score = None
        if m >= 3 and rng.random() < 0.5:
            pos = int(rng.integers(1, m - 1))
            acts[pos] = vocab.survey_id
            score = int(rng.integers(0, 11))
        out.append(Journey.from_actions(acts, vocab, customer_id=f"c{k:05d}", survey_score=score))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
