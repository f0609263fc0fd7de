import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adsmarket.config import Config  # noqa: E402
from adsmarket.sim import build_world  # noqa: E402


def small_config(seed: int = 11, **sections) -> Config:
    """A market small enough to build and simulate in seconds."""
    cfg = Config(seed=seed).replace(
        market={"n_advertisers": 40, "n_queries": 400, "vocab_size": 300},
        sim={"days": 3, "warmup_days": 1, "queries_per_day": 2000, "history_days": 2},
        embed={"walks_per_node": 2, "walk_length": 10},
        retrieval={"tower_epochs": 2, "term_pretrain_epochs": 1},
        bid={"alpha_pretrain_episodes": 200},
    )
    return cfg.replace(**sections) if sections else cfg


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_world(small_cfg):
    return build_world(small_cfg)


@pytest.fixture(scope="session")
def default_world():
    """The default market; large enough for held-out conversion statistics."""
    return build_world(Config(seed=0))


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
