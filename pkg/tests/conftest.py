import pytest
import torch

from defined.config.run_configs import ModelConfig
from defined.config.settings import Settings


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """Small QPSK detector used wherever the default size is not needed"""
    return ModelConfig(scheme="qpsk", d_e=8, n_layers=2, n_heads=2, d_ff=16, T_max=8)


@pytest.fixture
def settings(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return Settings(_env_file=None, log_file="", output_dir=str(tmp_path / "runs"), eval_batch_size=64)


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    yield
