import numpy as np
import pytest

from dssep import scene


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or timing test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus_1x1(tmp_path_factory):
    """Five indoor training scenes with one near and one far talker."""
    out = tmp_path_factory.mktemp("corpus_1x1")
    return scene.generate_corpus(5, "train", out, mix_ratio=(100, 0), seed=3, counts=(1, 1))


@pytest.fixture(scope="session")
def corpus_mixed(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus_mixed")
    return scene.generate_corpus(4, "train", out, mix_ratio=(50, 50), seed=11)


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, title, ok, detail)`` then assert ``ok``."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
