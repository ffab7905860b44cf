import time

import numpy as np
import pytest

import cae.train

from cae.codec import fit_histograms
from cae.data import synthetic_corpus
from cae.harness import FinetuneConfig, RunConfig, add_scale_sets, build_ensemble
from cae.model import CaeConfig
from cae.train import EnsembleSpec, TrainConfig, train_ensemble

DESK_STEPS = 2000


@pytest.fixture(scope="session")
def train_images():
    return synthetic_corpus(24, seed=1)


@pytest.fixture(scope="session")
def test_images():
    return {f"held{i}": im for i, im in enumerate(synthetic_corpus(8, seed=2))}


@pytest.fixture(scope="session")
def quick_ensemble():
    """Three briefly trained small models with histograms; enough for codec plumbing."""
    data = synthetic_corpus(6, seed=5, height=32, width=32)
    spec = EnsembleSpec([(0.01, 8), (0.05, 8), (0.2, 6)])
    cfg = TrainConfig(batch_size=4, crop_size=16, max_updates=40, window=10)
    models = [r.model for r in train_ensemble(spec, data, cfg, CaeConfig(base_filters=8))]
    for m in models:
        fit_histograms(m, data)
    return models


@pytest.fixture(scope="session")
def desk_build(train_images):
    """The seeded desk ensemble: three models, each with fine-tuned and interpolated scale sets.

    Set 0 is the trained base, sets 1-2 are fine-tuned at alpha/2 and 2*alpha,
    and the rest interpolate between neighbouring alphas.
    """
    run = RunConfig.from_dict({
        "seed": 0,
        "train": {"max_updates": DESK_STEPS},
        "finetune": {"alphas": [], "interpolate": []},
    })
    # record, for every training step, whether disabled channels carried only zeros
    masked_zero = []
    forward = cae.train.training_forward

    def watched(model, *args, **kw):
        res = forward(model, *args, **kw)
        off = model.mask.values == 0
        masked_zero.append(bool(np.all(res.codes[:, off] == 0)))
        return res

    t0 = time.perf_counter()
    cae.train.training_forward = watched
    try:
        build = build_ensemble(run, train_images)
    finally:
        cae.train.training_forward = forward
    t_train = time.perf_counter() - t0
    for m in build.models:
        a = m.scale_sets[0].alpha
        add_scale_sets(m, train_images, run.train, FinetuneConfig([a / 2, 2 * a], [0.25, 0.5, 0.75]))
        fit_histograms(m, train_images)
    build.masked_zero = masked_zero
    build.train_seconds = t_train
    build.total_seconds = time.perf_counter() - t0
    return build


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
