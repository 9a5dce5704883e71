import warnings

import numpy as np
import pytest

from fptq.calibration import CalibSource, build_recipe, calibrate
from fptq.toymodel.model import ModelConfig, ToyModel
from fptq.toymodel.synth import generate_checkpoint

TINY = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64, vocab_size=64, max_seq=48)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return ToyModel.random(TINY, seed=3)


@pytest.fixture(scope="session")
def tiny_ln_model():
    return ToyModel.random(ModelConfig(**{**TINY.to_dict(), "norm_kind": "layernorm"}), seed=4)


@pytest.fixture(scope="session")
def outlier_model():
    return generate_checkpoint(seed=0)


@pytest.fixture(scope="session")
def outlier_stats(outlier_model):
    return calibrate(outlier_model, CalibSource.random(128, 32, seed=11))


@pytest.fixture(scope="session")
def outlier_recipe(outlier_model, outlier_stats):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        return build_recipe(outlier_model, outlier_stats)
