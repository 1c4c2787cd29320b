import numpy as np
import pytest

from attnlab.training import build_vocab, load_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shakespeare():
    return build_vocab(load_corpus())


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    def report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append(line)
        print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
