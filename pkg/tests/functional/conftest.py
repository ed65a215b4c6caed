import logging
from pathlib import Path

import pytest

log = logging.getLogger(__name__)

TINY_CONFIG = """\
methods = uniform, kmm, skmm
modes = global, mondrian
seeds = 0, 1
synthetic.n_source = 40
synthetic.n_target = 40
synthetic.overlap = 0.7
synthetic.separation = 3
kernel.n_permutations = 10
kmm.tau = 0.3
levels.grid = 0.5, 0.7, 0.9
"""


def pytest_addoption(parser):
    parser.addoption(
        "--jobs",
        type=int,
        default=1,
        help="Parallel (method, seed) groups for the command line runs.",
    )


@pytest.fixture
def jobs(request) -> int:
    return request.config.getoption("--jobs")


@pytest.fixture
def config_path(tmp_path) -> Path:
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG)
    log.info("Wrote config to %s", path)
    return path


@pytest.fixture(autouse=True)
def clear_seed_env(monkeypatch):
    monkeypatch.delenv("SHIFTCAL_SEED", raising=False)
