"""Shared test plumbing: the acceptance-criteria result board.

Acceptance tests record one verdict per criterion; the board is printed
as a one-line-per-criterion summary at the end of the run so the
outcome is visible regardless of output capture.
"""

import pytest

_BOARD: dict = {}


@pytest.fixture
def criterion():
    """Record a criterion verdict and assert it.

    Usage: criterion(4, "static training", ok, "final mse 5.0e-04").
    The detail string ends up on the summary line either way.
    """

    def record(num: int, name: str, ok: bool, detail: str = ""):
        _BOARD[num] = (name, bool(ok), detail)
        assert ok, f"criterion {num} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _BOARD:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_BOARD):
        name, ok, detail = _BOARD[num]
        verdict = "PASS" if ok else "FAIL"
        line = f"criterion {num:2d} {name}: {verdict}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
