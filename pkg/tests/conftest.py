import pytest

from sfrl.dataset import Dataset, EnvSpec, Episode, Transition


def reward_episode(rewards, index=0, terminal=True):
    """Discrete 1-state episode carrying the given rewards."""
    n = len(rewards)
    return Episode(
        tuple(
            Transition(0, 0, r, 0, terminal=terminal and t == n - 1, timeout=not terminal and t == n - 1)
            for t, r in enumerate(rewards)
        ),
        index,
    )


def reward_dataset(reward_lists):
    eps = tuple(reward_episode(r, i) for i, r in enumerate(reward_lists))
    horizon = max([len(r) for r in reward_lists] + [1])
    return Dataset(eps, EnvSpec("toy", "discrete", 1, "discrete", 1, horizon))


@pytest.fixture
def make_reward_dataset():
    return reward_dataset


# acceptance criteria register (number, passed, detail) here; the lines are
# repeated in the terminal summary so they survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number, passed, detail in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
