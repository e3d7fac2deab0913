import numpy as np
import pytest

from minprof.datasets import IDX_FILES, default_data_dir, write_idx
from minprof.fetch import REGISTRY, is_cached

ACCEPTANCE = {}


def make_synthetic_idx(root, n_train=600, n_test=200, seed=0, name="mnist"):
    """Write a learnable 10-class 28x28 IDX dataset: fixed class prototypes plus noise."""
    rng = np.random.default_rng(seed)
    protos = rng.integers(0, 256, size=(10, 28, 28))
    out = root / name
    out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        labels = np.arange(n) % 10
        rng.shuffle(labels)
        noise = rng.normal(0, 60, size=(n, 28, 28))
        images = np.clip(protos[labels] + noise, 0, 255).astype(np.uint8)
        write_idx(out / IDX_FILES[(split, "images")], images)
        write_idx(out / IDX_FILES[(split, "labels")], labels.astype(np.uint8))
    return root


@pytest.fixture(scope="session")
def synthetic_data_dir(tmp_path_factory):
    return make_synthetic_idx(tmp_path_factory.mktemp("data"))


@pytest.fixture(scope="session")
def mnist_dir():
    root = default_data_dir()
    if not is_cached(REGISTRY["mnist"], root / "mnist"):
        pytest.skip("MNIST not cached; run `minprof fetch mnist`")
    return root


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail=""):
        ACCEPTANCE[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
