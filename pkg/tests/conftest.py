import numpy as np
import pytest
import torch

from icodoa.srp import MicArray


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def head12():
    return MicArray.head12()


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(cid: str, ok: bool, detail: str) -> None:
        ACCEPTANCE.append((cid, bool(ok), detail))
        assert ok, f"{cid} FAIL: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
