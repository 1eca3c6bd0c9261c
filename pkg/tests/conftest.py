import numpy as np
import pytest

from vip.model import ModelConfig, random_model


def pytest_addoption(parser):
    parser.addoption("--with-checkpoints", action="store_true", help="run checks that need downloaded pretrained weights")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--with-checkpoints"):
        return
    skip = pytest.mark.skip(reason="needs --with-checkpoints")
    for item in items:
        if "checkpoints" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("VIP_CACHE_DIR", str(tmp_path / "cache"))


@pytest.fixture
def tiny_config():
    return ModelConfig(depth=2, dim=8, heads=2, patch_size=2, num_registers=2, pos_grid=(2, 2))


@pytest.fixture
def tiny_model(tiny_config):
    return random_model(tiny_config, seed=0)


@pytest.fixture
def tiny_patches(tiny_config):
    return np.random.default_rng(1).standard_normal((4, tiny_config.patch_pixels)).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    if not terminalreporter.config.getoption("--with-checkpoints"):
        terminalreporter.write_line("SKIP  pretrained checkpoint trends: run with --with-checkpoints")
