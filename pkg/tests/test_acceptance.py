"""Acceptance suite: one shipped fixture per criterion, each with a wall-clock budget.

Every test prints a single ``criterion k: PASS|FAIL`` line; the lines are also
collected into the terminal summary.
"""

import json
import time

import pytest

from conftest import ACCEPTANCE_LINES
from flowlab.experiments import fixture_path, run_experiment

CRITERIA = [
    (1, "counterexample", "sine counterexample: score error, final TV, Fokker-Planck residual", 30),
    (2, "identities", "error-operator closed forms", 10),
    (3, "convergence_vp_ei", "VP + exponential integrator: TV order -1", 180),
    (4, "convergence_ve_ddim", "VE + DDIM: TV order -1", 180),
    (5, "prior_decay", "prior TV decay rates", 60),
    (6, "lemma1", "TV derivative identity and refinement", 60),
    (7, "bounds_exact", "exact-constant certificates", 120),
    (8, "bounds_order", "order-only certificates", 120),
    (9, "theorem3", "five-term discretization inequality", 180),
    (10, "oracles", "derivative, inversion and determinism oracles", 60),
]


@pytest.mark.parametrize("number,fixture,title,budget", CRITERIA, ids=[c[1] for c in CRITERIA])
def test_criterion(number, fixture, title, budget, tmp_path, monkeypatch):
    monkeypatch.delenv("LAB_JOBS", raising=False)
    cfg = json.loads(fixture_path(fixture).read_text())
    t0 = time.perf_counter()
    report = run_experiment(cfg, out=tmp_path, jobs=1)
    elapsed = time.perf_counter() - t0
    failed = [c.name for c in report.checks if not c.passed]
    ok = report.passed and elapsed <= budget
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.1f} s of {budget} s)"
    if failed:
        line += "  failed checks: " + "; ".join(failed)
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "report.json").exists()
    assert report.passed, failed
    assert elapsed <= budget
