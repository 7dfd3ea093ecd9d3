"""One test per acceptance criterion, each at its stated tolerance.

Each test prints a single pass/fail line; the lines are also collected into
an "acceptance criteria" section of the terminal summary.
"""
import pytest

from streamloc.acceptance import CRITERIA, run_criterion


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, acceptance_log):
    res = run_criterion(number)
    print(res.line())
    acceptance_log.append(res.line())
    assert res.passed, res.line()
