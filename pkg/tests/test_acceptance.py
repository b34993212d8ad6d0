"""One test per acceptance criterion; each prints a PASS/FAIL line with its measurements."""

import pytest

from cbo.acceptance import CHECKS, SLOW_CHECKS


@pytest.mark.parametrize(
    "number",
    [pytest.param(n, marks=pytest.mark.slow) if n in SLOW_CHECKS else n for n in sorted(CHECKS)],
    ids=lambda n: f"criterion_{n}",
)
def test_acceptance_criterion(number, capsys):
    result = CHECKS[number]()
    with capsys.disabled():
        print("\n" + result.line(), flush=True)
    assert result.passed, result.line()
