"""Shared fixtures.

Unit tests use only small, fast fixtures. The session-scoped pipeline
fixtures (dataset, pretrained base, fully trained experts, trained router)
are built lazily on first use by the acceptance suite and reused across
criteria; their wall-clock build times are recorded for the runtime
budgets.
"""

import time

import numpy as np
import pytest

from lorex import persist
from lorex.degradations import DatasetConfig, make_dataset
from lorex.harness import clean_training_images, load_task_data, router_training_set
from lorex.restorer import TrainConfig, build_model, pretrain_base, train_lora_for
from lorex.router import build_router, train_router

MASTER_SEED = 7
PRETRAIN_CONFIG = dict(learning_rate=2e-3, iterations=4000, batch_size=8)
# expert training keeps the default 2000-iteration budget; the learning
# rate compensates for the 40x schedule scale-down vs full scale
LORA_CONFIG = dict(learning_rate=1e-3, iterations=2000, batch_size=8)
ROUTER_CONFIG = dict(learning_rate=1e-3, iterations=6000, batch_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def timings():
    return {}


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("pipeline")


@pytest.fixture(scope="session")
def dataset(workspace, timings):
    t0 = time.time()
    manifests = make_dataset(DatasetConfig(seed=MASTER_SEED), workspace / "data")
    timings["dataset"] = time.time() - t0
    return manifests


@pytest.fixture(scope="session")
def base_model_path(workspace, dataset, timings):
    t0 = time.time()
    model = build_model(dataset["train"].labels, seed=MASTER_SEED)
    pretrain_base(model, clean_training_images(dataset["train"]),
                  TrainConfig(seed=MASTER_SEED, **PRETRAIN_CONFIG))
    path = workspace / "base.uirl"
    persist.save_model(path, model)
    timings["pretrain"] = time.time() - t0
    return path


@pytest.fixture(scope="session")
def trained_model_path(workspace, dataset, base_model_path, timings):
    t0 = time.time()
    model = persist.load_model(base_model_path)
    for k, label in enumerate(model.labels):
        task = load_task_data(dataset["train"], label)
        train_lora_for(model, k, task, TrainConfig(seed=MASTER_SEED, **LORA_CONFIG))
    path = workspace / "trained.uirl"
    persist.save_model(path, model)
    timings["train_lora_all"] = time.time() - t0
    return path


@pytest.fixture(scope="session")
def trained_model(trained_model_path):
    return persist.load_model(trained_model_path)


@pytest.fixture(scope="session")
def trained_router(workspace, dataset, timings):
    t0 = time.time()
    state = build_router(dataset["train"].labels, seed=MASTER_SEED)
    train_router(state, router_training_set(dataset["train"]),
                 TrainConfig(seed=MASTER_SEED, **ROUTER_CONFIG))
    persist.save_router(workspace / "router.uirl", state)
    timings["train_router"] = time.time() - t0
    return state
