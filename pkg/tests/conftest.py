import numpy as np
import pytest

from tbsa.corpus import Sentence, load_synthetic

TABLE1_TOKENS = "The AMD Turin Processor seems to always perform much better than Intel .".split()
TABLE1_UNIFIED = ["O", "B-POS", "I-POS", "E-POS", "O", "O", "O", "O", "O", "O", "O", "S-NEG", "O"]
TABLE1_BOUNDARY = ["O", "B", "I", "E", "O", "O", "O", "O", "O", "O", "O", "S", "O"]
TABLE1_SPANS = [(1, 3, "POS"), (11, 11, "NEG")]

ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.fixture
def table1():
    return Sentence(TABLE1_TOKENS, TABLE1_SPANS, "table1")


@pytest.fixture(scope="session")
def synthetic():
    return load_synthetic()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(f"criterion {key}: {ACCEPTANCE_RESULTS[key]}")
