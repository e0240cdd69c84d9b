import math
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safemr.envs import EnvConfig
from safemr.eval import (EvalRecord, RunSummary, aggregate, evaluate_policy, final_mean,
                         improvement, improvement_table, read_records, rollout, t_interval,
                         write_records)
from safemr.safety_index import SafetyIndexParams

HAZARDS = EnvConfig(obstacle_kind="hazard", obstacle_count=8, horizon=60)


def test_t_interval_textbook_example():
    # five observations 1..5: mean 3, s = sqrt(2.5), t_{0.975, 4} = 2.776445
    m, h = t_interval([1, 2, 3, 4, 5])
    assert m == 3.0
    assert h == pytest.approx(2.776445105 * math.sqrt(2.5) / math.sqrt(5), rel=1e-9)


def test_t_interval_degenerate_cases():
    assert t_interval([4.2]) == (4.2, 0.0)
    assert t_interval([1.0, 1.0, 1.0]) == (1.0, 0.0)


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_t_interval_widens_with_confidence(values):
    _, h90 = t_interval(values, 0.90)
    _, h99 = t_interval(values, 0.99)
    assert h99 >= h90 >= 0


def test_improvement_examples():
    assert improvement(1.639, 1.020) == pytest.approx(0.6069, abs=1e-4)
    assert improvement(10.034, 9.286) == pytest.approx(0.0805, abs=1e-4)
    assert improvement(2.5, 2.5) == 0.0
    # a less negative return is an improvement
    assert improvement(-1.0, -2.0) == pytest.approx(0.5)
    assert improvement(-3.0, -2.0) == pytest.approx(-0.5)
    assert improvement(1.0, 0.0) == math.inf and improvement(0.0, 0.0) == 0.0


def _summary(alg, ret, cost, env="goal"):
    return RunSummary(alg, env, ret, 0.0, cost)


def test_improvement_table_uses_best_safe_baseline():
    rows = improvement_table([
        _summary("SafeMR", 1.2, 0.0),
        _summary("JointSIS", 1.0, 0.0),
        _summary("FAC-phih", 1.1, 0.0),
        _summary("FAC-phi0", 3.0, 7.5),
        _summary("SafeMR", 0.5, 0.0, env="push"),
        _summary("FAC-phi0", 0.9, 2.0, env="push"),
    ])
    by_env = {r["env"]: r for r in rows}
    assert by_env["goal"]["best_safe_algorithm"] == "FAC-phih"
    assert by_env["goal"]["improvement"] == pytest.approx(0.1 / 1.1)
    assert by_env["push"]["best_safe_algorithm"] is None
    assert by_env["push"]["improvement"] is None


def _rec(it, ret, cost=0.0, seed=0):
    return EvalRecord(it, ret, cost, 0.3, 1.0, 2.0, 0.5, seed)


def test_final_mean_uses_the_last_records():
    recs = [_rec(i, float(i)) for i in range(20, 0, -1)]
    assert final_mean(recs, last=10) == pytest.approx(np.mean(range(11, 21)))
    assert final_mean(recs[:3], last=10) == pytest.approx(np.mean([18, 19, 20]))


def test_aggregate_groups_by_iteration():
    recs = [_rec(1, 1.0, seed=0), _rec(1, 3.0, seed=1), _rec(2, 5.0, seed=0)]
    rows = aggregate(recs)
    assert [r["iteration"] for r in rows] == [1, 2]
    assert rows[0]["mean"] == 2.0 and rows[0]["n"] == 2 and rows[1]["ci"] == 0.0


def test_negative_cost_rejected():
    with pytest.raises(ValueError):
        _rec(0, 1.0, cost=-1.0)


def test_records_roundtrip(tmp_path):
    recs = [EvalRecord(i, 0.1 * i + 1e-13, float(i % 3), 0.201, 0.835, 2.084, 1 / 3, 7)
            for i in range(5)]
    back = read_records(write_records(tmp_path / "eval.csv", recs))
    assert back == recs


def test_cost_counts_violating_steps():
    total = 0
    for s in range(10):
        ret, cost, rows = rollout(lambda o: np.array([1.0, 0.3]), HAZARDS, s, record=True)
        assert cost == sum(int(r[6]) for r in rows)
        assert cost == sum(r[4] < HAZARDS.d_min for r in rows)
        assert ret == pytest.approx(sum(r[3] for r in rows))
        total += cost
    assert total > 0


def test_evaluation_is_deterministic_and_matches_rollouts():
    policy = lambda o: np.array([0.5, -0.5])
    p = SafetyIndexParams(0.2, 0.8, 2.1)
    a = evaluate_policy(policy, HAZARDS, episodes=4, seed=3, iteration=9, params=p)
    b = evaluate_policy(policy, HAZARDS, episodes=4, seed=3, iteration=9, params=p)
    np.testing.assert_equal(asdict(a), asdict(b))  # NaN multiplier compares equal here
    assert math.isnan(a.mean_multiplier)
    assert a.zeta == (0.2, 0.8, 2.1) and a.iteration == 9
    trajectories = []
    c = evaluate_policy(policy, HAZARDS, episodes=4, seed=3, trajectories=trajectories)
    assert len(trajectories) == 4
    recount = np.mean([sum(int(r[6]) for r in rows) for rows in trajectories])
    assert c.mean_episode_cost == recount
