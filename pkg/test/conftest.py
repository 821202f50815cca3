"""
Master file for pytest fixtures.
Any fixtures declared here are available to all test functions in this directory.
"""


import logging
from collections.abc import Generator

import numpy as np
import pytest
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource

from biasbench import cli, utils
from biasbench.gradnet import desk_cnn
from biasbench.models import BenchConfig, LayerSpec, ModelSpec

LOGGER = logging.getLogger(__name__)


class TestConfig(BenchConfig):
    """
    An override for BenchConfig that only uses
    settings provided to __init__()

    This makes tests independent from env values
    and the content of .appenv
    """

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)


@pytest.fixture(autouse=True)
def config(monkeypatch: pytest.MonkeyPatch) -> Generator[BenchConfig, None, None]:
    cfg = TestConfig(debug=True)
    monkeypatch.setattr(utils, 'get_config', lambda: cfg)
    yield cfg


@pytest.fixture(autouse=True)
def setup_logging(config):
    cli.setup_logging(True)


@pytest.fixture
def small_model() -> ModelSpec:
    """Desk architecture on 16x16 inputs. Fast enough for gradient checks."""
    return desk_cnn(num_classes=3, input_shape=(16, 16, 3), widths=(4, 6, 8), seed=7)


@pytest.fixture
def desk_model() -> ModelSpec:
    return desk_cnn(num_classes=2, input_shape=(64, 64, 3), seed=3)


@pytest.fixture
def linear_model() -> ModelSpec:
    """
    A single dense layer on a 2x2x1 input: logits = W @ x + b.
    Input gradients and relevances have closed forms.
    """
    weight = np.array([[1.0, -2.0, 0.5, 3.0],
                       [-1.0, 1.0, 2.0, 0.0]])
    bias = np.array([0.25, -0.5])
    return ModelSpec([LayerSpec('dense', weight, bias), LayerSpec('softmax')], (2, 2, 1))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
