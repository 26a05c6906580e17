import numpy as np
import pytest

from explainrec.data import FeatureTables
from explainrec.synth import SynthConfig, synth_generate
from explainrec.training import TrainConfig, TrainData


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(users=30, items=60, features=20, density=0.25), seed=3)


@pytest.fixture(scope="session")
def small_data(small_synth):
    ds = small_synth.dataset
    tables = FeatureTables.build(ds)
    return ds, tables, TrainData.from_dataset(ds, tables)


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=2, id_dim=8, feature_dim=8, hidden=(8, 4), batch_size=64, outer=2, cf_steps=20, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
