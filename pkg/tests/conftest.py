import os

import pytest

os.environ.setdefault("FWI_THREADS", "1")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Ten ST samples split (6, 2, 2); built once per test session."""
    from fwibench.dataset import build_dataset
    from fwibench.velmodel import GenConfig

    out = tmp_path_factory.mktemp("tiny_st")
    return build_dataset(GenConfig.st(rng_seed=1), 10, (6, 2, 2), out, shard_size=4)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance verdict and asserts it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
