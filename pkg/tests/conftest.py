import pytest

from event_vpr.config import RunConfig
from event_vpr.toyworld import ToyWorldConfig, generate, write_world

TINY_WORLD = ToyWorldConfig(n_places=8, bins_per_place=3, width=32, height=32, noise_events=20, seed=5)


def tiny_config(**sections) -> RunConfig:
    base = {
        "vlad": {"num_clusters": 4, "init_bins": 12, "init_descriptors": 512},
        "backbone": {"descriptor_depth": 16},
        "representation": {"channels": 2},
        "mining": {"n_sample": 20, "n_neg": 3, "cache_interval": 500},
        "training": {"epochs": 1, "batch_size": 2},
    }
    for k, v in sections.items():
        base.setdefault(k, {}).update(v)
    return RunConfig.from_dict(base)


@pytest.fixture(scope="session")
def tiny_db():
    return generate(TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory, tiny_db):
    return write_world(tiny_db, tmp_path_factory.mktemp("world"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
