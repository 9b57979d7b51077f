"""The full acceptance gate, one test per criterion.

These are the expensive end-to-end statistical checks; the whole module
takes tens of minutes.  Each test prints its gate's one-line verdict so the
run log doubles as the acceptance report.
"""

import pytest

from tiltedlines import acceptance


def _run(name):
    res = acceptance.GATES[name]()
    print(res.line())
    assert res.passed, res.line()


@pytest.mark.slow
def test_gate_oracle_equivalence():
    _run("oracle-equivalence")


def test_gate_untilted_exactness():
    _run("untilted-exactness")


def test_gate_curved_max_tightness():
    _run("curved-max-tightness")


def test_gate_max_scaling():
    _run("max-scaling")


def test_gate_monotone_coupling():
    _run("monotone-coupling")


def test_gate_gibbs_consistency():
    _run("gibbs-consistency")


def test_gate_minimal_gaps():
    _run("minimal-gaps")


def test_gate_monotone_convergence():
    _run("monotone-convergence")


def test_gate_determinism_persistence(tmp_path):
    res = acceptance.gate_determinism(tmpdir=tmp_path)
    print(res.line())
    assert res.passed, res.line()
