import numpy as np
import pytest

from rundet.config import ExperimentConfig
from rundet.shapesdata import generate_dataset, load_dataset
from rundet.tensor import Param, backward


def tiny_config(mode="3way", **overrides):
    """Small enough for finite differences: 4-6 channels, depth 4."""
    base = {"backbone.widths": "4,4,6,6,6,6", "resblock.depth": 4, "resblock.mode": mode}
    base.update(overrides)
    return ExperimentConfig().replace(**base)


def numeric_grad(f, arr, index, h=1e-6):
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]`` (restored afterwards)."""
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_op_grads(build, inputs, rng, probes=6):
    """Worst relative error between backward and finite differences.

    ``build(*params)`` returns a scalar Tensor; ``inputs`` are float arrays
    wrapped as Params and probed at random positions.
    """
    params = [Param(x.copy(), f"in{i}") for i, x in enumerate(inputs)]
    backward(build(*params))
    worst = 0.0
    for p in params:
        for _ in range(probes):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            fd = numeric_grad(lambda: build(*params).item(), p.data, idx)
            worst = max(worst, rel_err(fd, p.grad[idx]))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("shapes") / "train"
    generate_dataset(100, 7, str(path))
    return load_dataset(str(path))


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """The 3000-image training set (seed 0) and 500-image test set (seed 1000)."""
    root = tmp_path_factory.mktemp("desk")
    generate_dataset(3000, 0, str(root / "train"))
    generate_dataset(500, 1000, str(root / "test"))
    return load_dataset(str(root / "train")), load_dataset(str(root / "test"))


@pytest.fixture
def verdict(request):
    """``verdict(number, ok, detail)`` records one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, {})

    def record(number, ok, detail):
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok

    return record


_VERDICTS = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
