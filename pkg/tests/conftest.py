import pytest
import torch

from icvt.config import ModelConfig
from icvt.model import ICVT

TINY = dict(
    image_height=32, image_width=32, patch_size=16, d_vision=32, vision_layers=1, vision_heads=4,
    adapter_layers=1, d_attr=8, d_z=8, n_layers=2, n_heads=4, d_ff=64, n_bins=16, max_elements=8,
)

ACCEPTANCE = pytest.StashKey[dict]()


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


def tiny_model(seed=0, **kw) -> ICVT:
    torch.manual_seed(seed)
    return ICVT(tiny_config(**kw)).eval()


@pytest.fixture
def model():
    return tiny_model()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one result line per acceptance criterion for the terminal summary."""
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
