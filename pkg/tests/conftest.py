import os
from pathlib import Path

import pytest

from gbnorm.data import export_mnist_split


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """MNIST IDX files: GBN_MNIST_DIR if set, else a 2000/1000 subset exported from mlxtend's bundled digits."""
    env = os.environ.get("GBN_MNIST_DIR")
    if env:
        return Path(env)
    from mlxtend.data import mnist_data

    images, labels = mnist_data()
    out = tmp_path_factory.mktemp("mnist")
    return export_mnist_split(out, images, labels, train_size=2000, test_size=1000, seed=0)


_REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(number, title, ok, detail)``; then assert ``ok``.

    A test that errors before reporting still gets a FAIL line.
    """
    lines = request.config.stash[_REPORT]
    done = []

    def _record(number, title, ok, detail=""):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        print(line)
        lines.append((number, line))
        done.append(number)
        assert ok, line

    yield _record
    if not done:
        lines.append((99, f"{request.node.name} [FAIL] raised before reporting"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
