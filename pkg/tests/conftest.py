import numpy as np
import pytest
import torch

torch.use_deterministic_algorithms(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1337)


@pytest.fixture
def tiny_net():
    from ccnet.netcore import CCNet

    torch.manual_seed(0)
    return CCNet(base_channels=2)


def random_probs(shape, gen=None):
    """Random two-class softmax map of shape (B, 2, *spatial)."""
    logits = torch.randn(shape[0], 2, *shape[1:], generator=gen, dtype=torch.float64)
    return torch.softmax(logits, dim=1)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number: int, name: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}"
        if detail:
            line += f": {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
