import json
from pathlib import Path

import pytest

from scripts.encoders import EncoderConfig, init_frozen
from scripts.phantom_data import PhantomFamily, build_dataset, generate_phantom
from scripts.prompt_adapter import PromptAdapterModel
from scripts.run_config import RunConfig
from scripts.trainer import SupportSet

TEST_DATA = Path(__file__).parent / "test_data"
TINY_CONFIG_PATH = TEST_DATA / "tiny_config.json"


@pytest.fixture(scope="session")
def tiny_config_path():
    return TINY_CONFIG_PATH


@pytest.fixture(scope="session")
def tiny_encoder_config():
    """
    A small encoder (32×32 input, 2 tap layers) so unit tests run in milliseconds.
    """
    return EncoderConfig.from_dict(json.loads(TINY_CONFIG_PATH.read_text())["encoder"])


@pytest.fixture(scope="session")
def tiny_encoders(tiny_encoder_config):
    return init_frozen(tiny_encoder_config, seed=0)


@pytest.fixture
def tiny_model(tiny_encoders):
    """Fresh trainable prompts and adapters on the shared frozen encoder."""
    return PromptAdapterModel(tiny_encoders, prompt_length=4, init_seed=0)


@pytest.fixture
def tiny_run_config():
    return RunConfig.load(TINY_CONFIG_PATH)


@pytest.fixture(scope="session")
def blob_support():
    family = PhantomFamily.named("blob")
    return SupportSet(images=[generate_phantom(family, seed=i, size=32) for i in range(3)])


@pytest.fixture(scope="session")
def blob_dataset(tmp_path_factory):
    """A tiny blob dataset on disk: 3 train, 4 normal + 4 anomalous test images."""
    out_dir = tmp_path_factory.mktemp("blob")
    return build_dataset(PhantomFamily.named("blob"), 3, 4, 4, seed=11, out_dir=out_dir, size=32)


@pytest.fixture(scope="session")
def ring_dataset(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("ring")
    return build_dataset(PhantomFamily.named("ring"), 3, 4, 4, seed=12, out_dir=out_dir, size=32)
