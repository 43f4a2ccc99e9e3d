import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedssg.core import Dataset, RngStream

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record():
    """Record a criterion's verdict; a PASS/FAIL line is printed per criterion."""
    def _record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return RngStream(1234)


def make_dataset(counts, domain=0, dim=3, n_domains=1, seed=0):
    """Dataset with ``counts[c]`` samples of class c, features = class id + noise."""
    gen = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(counts)), counts)
    feats = labels[:, None] + 0.1 * gen.normal(size=(len(labels), dim))
    return Dataset(feats, labels, np.full(len(labels), domain), len(counts), n_domains)


TWO_CLASS_MEANS = np.array([[3.0, 0.0], [-3.0, 0.0]])
TWO_CLASS_CONFIG = dict(T=128, epochs=400, hidden=(128, 128), guidance=5.0)


def two_class_data(seed, n=2000):
    gen = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    return Dataset(TWO_CLASS_MEANS[y] + gen.normal(size=(n, 2)), y, np.zeros(n, np.int64), 2, 1)


@pytest.fixture(scope="session")
def two_class_generators():
    """Three DDPMs fitted to the 2-D two-Gaussian benchmark, one per seed."""
    from fedssg.generator import GeneratorConfig, train_generator

    import time

    cfg = GeneratorConfig(**TWO_CLASS_CONFIG)
    t0 = time.perf_counter()
    models = [train_generator(two_class_data(s), cfg, RngStream(s)) for s in range(3)]
    TRAIN_SECONDS["two_class"] = time.perf_counter() - t0
    return models


TRAIN_SECONDS: dict[str, float] = {}
