import colashape  # noqa: F401  (enables 64-bit JAX before anything else imports it)
import numpy as np
import pytest

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Record an acceptance criterion outcome and fail the test if it did not pass."""

    def _record(criterion, passed, detail=""):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        assert passed, f"{criterion}: {detail}"

    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE, key=lambda r: _sort_key(r[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")


def _sort_key(name):
    head = name.split()[0].lstrip("AC")
    digits = "".join(c for c in head if c.isdigit())
    return (int(digits) if digits else 99, name)
