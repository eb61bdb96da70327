import pytest

from trigger_cuped import DgpParams, Rng, generate, mask_to_one_sided


@pytest.fixture(scope="session")
def small_twin():
    """A two-sided draw from the default generator at 1/10 scale."""
    return generate(DgpParams(n_control=2500, n_treatment=7500), Rng(7))


@pytest.fixture(scope="session")
def small_one(small_twin):
    return mask_to_one_sided(small_twin)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
