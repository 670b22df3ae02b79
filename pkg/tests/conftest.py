import numpy as np
import pytest
import torch

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdict(request):
    """Record one acceptance line; all lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, {})

    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines[criterion] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(lines):
            terminalreporter.write_line(lines[criterion])
