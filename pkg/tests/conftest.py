import time
from contextlib import contextmanager

import pytest

from eadtransfer import mnist

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "mnist: needs the MNIST archives in the data directory")
    config.addinivalue_line("markers", "slow: trains models or runs full attack budgets")
    config.addinivalue_line("markers", "acceptance: one of the numbered acceptance criteria")
    config.stash[RESULTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


class Criterion:
    def __init__(self, number, title, limit):
        self.number, self.title, self.limit = number, title, limit
        self.checks = []
        self.notes = []
        self.extra_seconds = 0.0  # e.g. cached training time charged to this criterion

    def check(self, ok, what):
        self.checks.append((bool(ok), what))

    def note(self, text):
        self.notes.append(text)


@pytest.fixture
def criterion(request, capsys):
    """Context manager that times a criterion and records one PASS/FAIL line."""

    @contextmanager
    def run(number, title, limit):
        c = Criterion(number, title, limit)
        t0 = time.perf_counter()
        error = None
        try:
            yield c
        except Exception as exc:  # recorded, then re-raised below
            error = exc
        elapsed = time.perf_counter() - t0 + c.extra_seconds
        in_time = elapsed < limit
        ok = error is None and in_time and bool(c.checks) and all(k for k, _ in c.checks)
        parts = [what for _, what in c.checks] + c.notes
        if error is not None:
            parts.append(f"error: {type(error).__name__}: {error}")
        parts.append(f"{elapsed:.1f}s of {limit:.0f}s")
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: " + "; ".join(parts)
        request.config.stash[RESULTS].append((number, line))
        with capsys.disabled():
            print("\n" + line)
        if error is not None:
            raise error
        assert in_time, f"criterion {number} took {elapsed:.1f}s (limit {limit}s)"
        failed = [what for k, what in c.checks if not k]
        assert not failed, f"criterion {number} failed: {failed}"

    return run


@pytest.fixture(scope="session")
def mnist_test():
    try:
        return mnist.load_mnist("test")
    except FileNotFoundError:
        pytest.skip("MNIST not found; run `python -m eadtransfer fetch-data`")


@pytest.fixture(scope="session")
def mnist_train():
    try:
        return mnist.load_mnist("train")
    except FileNotFoundError:
        pytest.skip("MNIST not found; run `python -m eadtransfer fetch-data`")
