import pytest

from meltlab.encoders import EncoderConfig, build_bank
from meltlab.rng import Rng
from meltlab.scenes import SceneFamily
from meltlab.text import SlotCatalog, TriggerSpec, build_vocabulary

# encoders small enough for gradient checks and fast training smoke tests
MICRO_CONFIGS = (
    EncoderConfig("E1", d_model=16, n_layers=1, n_heads=2, d_ffn=32),
    EncoderConfig("E2", d_model=24, n_layers=1, n_heads=2, d_ffn=48),
    EncoderConfig("E3", d_model=32, n_layers=2, n_heads=2, d_ffn=64),
)


@pytest.fixture(scope="session")
def catalog():
    return SlotCatalog()


@pytest.fixture(scope="session")
def vocab(catalog):
    return build_vocabulary(catalog)


@pytest.fixture(scope="session")
def trigger_spec():
    return TriggerSpec()


@pytest.fixture(scope="session")
def family(catalog):
    return SceneFamily(catalog)


@pytest.fixture
def micro_bank():
    return build_bank(MICRO_CONFIGS, Rng(0).child("init"))
