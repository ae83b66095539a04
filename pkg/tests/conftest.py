import numpy as np
import pytest

from vitgate.checkpoint import ViTConfig
from vitgate.data import labeled_dataset, non_target
from vitgate.injector import default_plan, inject
from vitgate.triggers import build_trigger_set
from vitgate.vit import new_model


@pytest.fixture(scope="session")
def toy_cfg():
    return ViTConfig()


@pytest.fixture(scope="session")
def toy(toy_cfg):
    return new_model(toy_cfg, 0)


@pytest.fixture(scope="session")
def toy_plan(toy):
    return default_plan(toy)


@pytest.fixture(scope="session")
def toy_injected(toy, toy_plan):
    """(edited checkpoint, report) for the default plan."""
    return inject(toy, toy_plan)


@pytest.fixture(scope="session")
def toy_triggers(toy, toy_plan):
    return build_trigger_set(toy, toy_plan.triggers)


@pytest.fixture(scope="session")
def toy_eval(toy, toy_plan):
    """200 labeled images and their non-target subset."""
    ds = labeled_dataset(toy, 200, 21)
    return ds, non_target(ds, toy_plan.target)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
