"""Acceptance criteria 1-14, each at its stated tolerance.

All criteria share one run cache so that criterion 14 can replay every
simulation the others performed.  One PASS/FAIL line per criterion is
printed in the terminal summary.
"""
import pytest

from rtqm.checks import CHECKS, Context, run_checks

pytestmark = pytest.mark.slow

RESULTS: list = []


@pytest.fixture(scope="module")
def ctx():
    return Context(jobs=1)


@pytest.mark.parametrize("cid", sorted(CHECKS), ids=lambda c: f"criterion_{c:02d}")
def test_criterion(ctx, cid):
    res = run_checks([cid], ctx)[0]
    RESULTS.append(res)
    print(res.line())
    assert res.passed, res.detail
