import numpy as np
import pytest

from segattack.encoders.toy import ToyConvEncoder


@pytest.fixture(scope="session")
def encoder():
    return ToyConvEncoder(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, h=16, w=16, c=3, lo=0.1, hi=0.9):
    return rng.uniform(lo, hi, size=(h, w, c))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager recording ``PASS``/``FAIL`` for one acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.label = f"C{number:<2} {title}"
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        detail = "; ".join(self.details)
        if exc_type is None:
            line = f"PASS  {self.label}  {detail}"
        else:
            line = f"FAIL  {self.label}  {detail}{'; ' if detail else ''}{exc_type.__name__}: {exc}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
