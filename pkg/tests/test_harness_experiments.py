import pytest

import shared_runs
from warmstart_fl.harness import cost_to_target


@pytest.mark.slow
def test_emp_study_emits_curves_for_three_starts():
    rows = shared_runs.preset_run("emp_study", seeds=(0,)).rows
    modes = {"random", "public_pretrain", "warm"}
    assert {r["mode"] for r in rows} == modes
    for mode in modes:
        curve = shared_runs.mean_curve(rows, mode)
        assert sorted(curve) == list(range(6))
        assert len(shared_runs.mean_curve(rows, mode, "pm_acc")) == 6


@pytest.mark.slow
def test_warm_start_cheaper_at_equal_accuracy():
    rows = shared_runs.preset_run("comm_cost", seeds=(0,)).rows
    best = {m: max(shared_runs.mean_curve(rows, m).values()) for m in ("fedavg", "warm")}
    target = min(best.values())
    warm, fedavg = cost_to_target(rows, "warm", target), cost_to_target(rows, "fedavg", target)
    assert warm is not None and fedavg is not None
    assert warm <= fedavg
