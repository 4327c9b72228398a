import pytest

from windsteer.loads import train_surrogate

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def surrogate_fit():
    return train_surrogate(n_samples=20000, seed=1, return_report=True)


@pytest.fixture(scope="session")
def surrogate(surrogate_fit):
    return surrogate_fit[0]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
