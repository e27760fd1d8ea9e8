from pathlib import Path

import numpy as np
import pytest

import mal.align
from mal.data import load_dataset
from mal.nn import ArchSpec, Hyperparams, ModelCheckpoint, _forward, cross_entropy, gradients, train_sgd

DATA_ROOT = Path(__file__).parent / "data" / "mnist5k"
GOLDEN = Path(__file__).parent / "data" / "golden_222.ckpt"

MONOTONE_LOG = []


@pytest.fixture(autouse=True, scope="session")
def monotone_guard():
    """Every LAP step of every matching run in the suite must not lower the objective."""
    original = mal.align._Search.solve

    def checked(self, side, l):
        before = self.objective
        changed = original(self, side, l)
        MONOTONE_LOG.append((before, self.objective))
        assert self.objective >= before, f"objective fell from {before!r} to {self.objective!r}"
        return changed

    mp = pytest.MonkeyPatch()
    mp.setattr(mal.align._Search, "solve", checked)
    yield MONOTONE_LOG
    mp.undo()


@pytest.fixture(scope="session")
def data_root():
    return DATA_ROOT


@pytest.fixture(scope="session")
def mnist_train():
    return load_dataset("mnist", DATA_ROOT, "train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_dataset("mnist", DATA_ROOT, "test")


def random_model(widths, seed, scale=1.0):
    g = np.random.default_rng(seed)
    ws = [g.normal(0, scale / np.sqrt(a), size=(b, a)) for a, b in zip(widths, widths[1:])]
    bs = [g.normal(0, 0.1, size=b) for b in widths[1:]]
    return ModelCheckpoint(ArchSpec(tuple(widths)), tuple(ws), tuple(bs))


def finite_difference_check(model, x, y, picks, delta=1e-5):
    """Largest relative error between analytic and central-difference gradients at ``picks``."""
    ws = [np.array(w, dtype=np.float64) for w in model.weights]
    bs = [np.array(b, dtype=np.float64) for b in model.biases]
    gw, gb = gradients(model, x, y)

    def loss():
        return cross_entropy(_forward(ws, bs, x)[0], y)

    worst = 0.0
    for kind, l, idx in picks:
        arr = (ws if kind == "w" else bs)[l]
        analytic = (gw if kind == "w" else gb)[l][idx]
        keep = arr[idx]
        arr[idx] = keep + delta
        up = loss()
        arr[idx] = keep - delta
        down = loss()
        arr[idx] = keep
        numeric = (up - down) / (2 * delta)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def random_picks(model, n, g):
    picks = []
    for _ in range(n):
        l = int(g.integers(model.num_layers))
        if g.random() < 0.7:
            shape = model.weights[l].shape
            picks.append(("w", l, (int(g.integers(shape[0])), int(g.integers(shape[1])))))
        else:
            picks.append(("b", l, int(g.integers(model.biases[l].shape[0]))))
    return picks


_TRAINED = {}


def trained(widths, seed, train, epochs=20, lr=1e-3):
    key = (tuple(widths), seed, epochs, lr)
    if key not in _TRAINED:
        _TRAINED[key] = train_sgd(ArchSpec(tuple(widths)), train, Hyperparams(lr, epochs, 1, seed))
    return _TRAINED[key]


@pytest.fixture(scope="session")
def mnist_pair(mnist_train):
    """Two width-64 three-layer nets from different seeds."""
    return (trained((784, 64, 64, 10), 1, mnist_train), trained((784, 64, 64, 10), 2, mnist_train))


@pytest.fixture(scope="session")
def mnist_narrow(mnist_train):
    return trained((784, 32, 32, 10), 3, mnist_train)


# ---- acceptance summary -------------------------------------------------

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.addinivalue_line("markers", "run_last: audit tests that summarize the whole session")


def pytest_collection_modifyitems(items):
    items.sort(key=lambda item: item.get_closest_marker("run_last") is not None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA.append((marker.args[0], marker.args[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_CRITERIA):
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
