import numpy as np
import pytest

from erckit.dialogue import Conversation, SynthSpec, builtin_label_set, synth_corpus


@pytest.fixture
def iemocap():
    return builtin_label_set("iemocap")


@pytest.fixture
def three_turns():
    return Conversation.from_turns("c1", [("A", "Hi"), ("B", "Hello"), ("A", "How are you")])


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(n_conversations=12, min_turns=4, max_turns=7, persistence=0.8, signal=0.7,
                     labels=("neutral", "happiness", "sadness", "anger"))


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return synth_corpus(small_spec, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
