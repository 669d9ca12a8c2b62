import numpy as np
import pytest

from copycat import evaluation, model_zoo
from copycat.data import LabelSource, Split, corpora, from_arrays, split_problem

TARGET_CFG = model_zoo.TrainConfig(max_epochs=30, step_epochs=12, seed=11)
COPYCAT_CFG = model_zoo.TrainConfig(max_epochs=10, step_epochs=4, seed=21)


def toy_separable(n=200, seed=0, size=8):
    """Two classes: bright top half versus bright bottom half, plus noise."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for i in range(n):
        y = i % 2
        img = rng.uniform(0, 0.3, (size, size, 1))
        half = slice(0, size // 2) if y == 0 else slice(size // 2, size)
        img[half] += rng.uniform(0.5, 0.7)
        xs.append(np.clip(img, 0, 1).astype(np.float32))
        ys.append(y)
    return xs, ys


@pytest.fixture(scope="session")
def toy_data():
    xs, ys = toy_separable()
    return xs, ys, from_arrays(xs, ys, split=Split.ODD, label_source=LabelSource.OL, num_classes=2)


@pytest.fixture(scope="session")
def toy_model(toy_data):
    _, _, m = toy_data
    spec = model_zoo.ModelSpec.create("SMALL", 2, input_shape=(16, 16, 1))
    return model_zoo.train(model_zoo.build_model(spec, 0), m, model_zoo.TrainConfig(max_epochs=5, seed=1))


@pytest.fixture(scope="session")
def digits_split():
    return split_problem(corpora.digits_corpus(), (0.6, 0.2, 0.2), seed=0)


@pytest.fixture(scope="session")
def letters_pool():
    return corpora.letters_corpus(20_000, seed=1)


def train_target(odd, arch, seed):
    spec = model_zoo.ModelSpec.create(arch, 10, name=f"target-{arch.lower()}")
    return model_zoo.train(model_zoo.build_model(spec, seed), odd, TARGET_CFG.replace(seed=seed + 1))


@pytest.fixture(scope="session")
def small_target(digits_split):
    odd, _, tdd = digits_split
    ckpt = train_target(odd, "SMALL", 100)
    return ckpt, evaluation.accuracy_on(ckpt, tdd)


@pytest.fixture(scope="session")
def large_target(digits_split):
    odd, _, tdd = digits_split
    ckpt = train_target(odd, "LARGE", 200)
    return ckpt, evaluation.accuracy_on(ckpt, tdd)


ACCEPTANCE = []  # (criterion, passed, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
