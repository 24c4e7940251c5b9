import pytest

from glyphlayout.env import EnvConfig
from glyphlayout.ppo import PpoConfig, train

TINY_PPO = PpoConfig(rollout_horizon=64, minibatch_size=32, epochs_per_update=2, total_timesteps=128)


@pytest.fixture(scope="session")
def tiny_policy():
    """A barely trained N=5 policy; enough to exercise inference paths."""
    return train(EnvConfig(max_steps=60), TINY_PPO, seed=0).policy


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_policy):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.json"
    tiny_policy.save(path, EnvConfig(max_steps=60).to_dict())
    return path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
