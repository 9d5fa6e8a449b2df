import json

import pytest
import torch

from incant.backend import load_backend
from incant.core import validate_config

# Short denoiser training keeps the shared backend cheap; the full 2,000-step
# run is exercised in the acceptance suite.
FAST = {"backend": {"denoiser_train_steps": 300}}


@pytest.fixture(scope="session")
def cache_root(tmp_path_factory):
    return tmp_path_factory.mktemp("weights")


@pytest.fixture(scope="session")
def raw64(cache_root):
    return {**FAST, "training": {"precision": "float64"}, "io": {"cache_dir": str(cache_root)}}


@pytest.fixture(scope="session")
def cfg64(raw64):
    return validate_config(raw64)


@pytest.fixture(scope="session")
def backend64(cfg64):
    return load_backend(cfg64)


@pytest.fixture(scope="session")
def config_file(tmp_path_factory, cache_root):
    """A float32 run config for CLI tests, sharing the session weight cache."""
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    raw = {**FAST, "training": {"iterations": 30}, "io": {"cache_dir": str(cache_root), "png_scale": 2}}
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture()
def gen():
    return torch.Generator().manual_seed(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
