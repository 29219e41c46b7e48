from __future__ import annotations

import json
import math
from fractions import Fraction

import numpy as np
import pytest

from matchsim.a3c import Hyperparams, ModelParams
from matchsim.env import ConfigError, Gender, Group, MatchRecord, WorldConfig, init_world, run_episode
from matchsim.harness import (
    BASELINE_REFERENCE,
    MIXED_REFERENCE,
    read_pairs_csv,
    replay_run,
    run_baseline,
    run_mixed,
    secretary_cutoff_diagnostic,
)
from matchsim.metrics import MetricError, avg_abs_label_diff, group_avg_diff

C, E = Group.CONTROL, Group.EXPERIMENTAL


def rec(f, m, fg=C, mg=C):
    return MatchRecord(0, f, m, fg, mg, (f + m) / 2)


# ---------------------------------------------------------------- metrics


def test_avg_abs_examples():
    assert avg_abs_label_diff([rec(3, 1), rec(2, 2), rec(0, 1)])[0] == 1.0
    assert avg_abs_label_diff([rec(k, k) for k in range(5)]) == (0.0, 0.0)
    assert avg_abs_label_diff([rec(24, 0)]) == (24.0, 0.0)


def test_std_is_population():
    mean, std = avg_abs_label_diff([rec(0, 2), rec(0, 4)])
    assert (mean, std) == (3.0, 1.0)


def test_avg_abs_empty():
    with pytest.raises(MetricError):
        avg_abs_label_diff([])


def test_group_avg_examples():
    pairs = [rec(19, 5, C, E), rec(16, 7, C, E), rec(3, 3, E, C)]
    assert group_avg_diff(pairs, E, Gender.MALE) == 11.5
    assert group_avg_diff(pairs, E, Gender.FEMALE) == 0.0
    assert group_avg_diff(pairs, E) == pytest.approx((14 + 9 + 0) / 3)
    assert group_avg_diff([rec(2, 9, E, C), rec(1, 8, E, C)], C) < 0


def test_group_avg_empty_selection():
    with pytest.raises(MetricError):
        group_avg_diff([rec(1, 2)], E)


# ---------------------------------------------------------------- baseline sweep


def test_baseline_table_layout(tmp_path):
    out = run_baseline([5, 15, 25], 5, seed=3, config=WorldConfig(max_steps=120), out_dir=tmp_path)
    assert len(out.summaries) == 15
    grid = (tmp_path / "table1.csv").read_text().splitlines()
    assert grid[0].split(",") == ["view_range", *[f"trial_{k}" for k in range(1, 6)], "mean", "reference_mean"]
    assert [row.split(",")[0] for row in grid[1:]] == ["5", "15", "25"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["paper_targets"]["mean_avg_abs_diff_by_view_range"] == BASELINE_REFERENCE
    assert BASELINE_REFERENCE == {"5": 7.71, "15": 4.44, "25": 1.02}
    assert all(s.egr_avg_diff is None for s in out.summaries)


def test_baseline_csv_bytes_repeat(tmp_path):
    cfg = WorldConfig(max_steps=100)
    run_baseline([5, 25], 2, seed=9, config=cfg, out_dir=tmp_path / "a")
    run_baseline([5, 25], 2, seed=9, config=cfg, out_dir=tmp_path / "b")
    for name in ("table1.csv", "trials.csv", "pairs.csv", "events.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_summary_metrics_recompute_from_pairs_csv(tmp_path):
    run_baseline([15], 3, seed=1, config=WorldConfig(max_steps=200), out_dir=tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    pairs = read_pairs_csv(tmp_path / "pairs.csv")
    for row in summary["per_trial"]:
        mean, std = avg_abs_label_diff(pairs[row["trial"]])
        assert abs(mean - row["avg_abs_diff"]) <= 1e-9 and abs(std - row["std_abs_diff"]) <= 1e-9
        assert row["n_pairs"] <= 25


def test_baseline_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        run_baseline([25], 0, seed=0)
    with pytest.raises(ConfigError):
        run_baseline([500], 1, seed=0)


# ---------------------------------------------------------------- mixed evaluation


def test_mixed_run_reports_group_columns(tmp_path):
    params = ModelParams.build(Hyperparams(), 0)
    out = run_mixed(WorldConfig(max_steps=150), params, 2, seed=5, out_dir=tmp_path)
    assert len(out.summaries) == 2
    assert out.paper_targets == MIXED_REFERENCE
    assert MIXED_REFERENCE["avg_abs_diff"] == 7.09 and MIXED_REFERENCE["std_abs_diff"] == 5.80
    assert MIXED_REFERENCE["egr_avg_diff_band"] == [1.00, 4.70]
    assert all(s.pairs for s in out.summaries)
    agg = json.loads((tmp_path / "summary.json").read_text())["aggregates"]
    assert {"mean_egr_avg_diff", "mean_cgr_avg_diff_f", "mean_egr_avg_diff_m"} <= set(agg)


def test_untrained_greedy_policy_reproduces_the_baseline():
    # Zero policy head plus TowardTarget at index 0: greedy is the baseline rule.
    params = ModelParams.build(Hyperparams(), 0)
    cfg = WorldConfig(max_steps=200)
    mixed = run_mixed(cfg, params, 2, seed=3)
    for s in mixed.summaries:
        w = init_world(WorldConfig(max_steps=200, seed=s.seed))
        run_episode(w)
        assert w.match_log == s.pairs


def test_mixed_requires_params():
    with pytest.raises(FileNotFoundError):
        run_mixed(WorldConfig(), None, 1, seed=0)


# ---------------------------------------------------------------- replay


def _write_meta(run_dir, mode, world):
    (run_dir / "metadata.json").write_text(json.dumps({"mode": mode, "config": {"world": world.to_dict()}}))


def test_replay_matches_baseline_and_eval(tmp_path):
    cfg = WorldConfig(max_steps=150)
    run_baseline([5, 25], 2, seed=4, config=cfg, out_dir=tmp_path / "b")
    _write_meta(tmp_path / "b", "baseline", cfg)
    assert replay_run(tmp_path / "b").ok
    run_mixed(cfg, ModelParams.build(Hyperparams(), 1), 2, seed=4, out_dir=tmp_path / "e")
    _write_meta(tmp_path / "e", "eval", cfg)
    report = replay_run(tmp_path / "e")
    assert report.ok and report.trials == 2


def test_replay_detects_tampering(tmp_path):
    cfg = WorldConfig(max_steps=150)
    run_baseline([25], 1, seed=4, config=cfg, out_dir=tmp_path)
    _write_meta(tmp_path, "baseline", cfg)
    summary = json.loads((tmp_path / "summary.json").read_text())
    summary["per_trial"][0]["avg_abs_diff"] += 1e-15
    (tmp_path / "summary.json").write_text(json.dumps(summary))
    report = replay_run(tmp_path)
    assert not report.ok and "avg_abs_diff" in report.mismatches[0]


# ---------------------------------------------------------------- optimal stopping


def _closed_form(L: int, n: int) -> Fraction:
    if n == 0:
        return Fraction(1, L)
    return Fraction(n, L) * sum(Fraction(1, i - 1) for i in range(n + 1, L + 1))


def test_secretary_small_cases():
    r3 = secretary_cutoff_diagnostic(3)
    assert r3.best_cutoff == 1 and r3.success_prob[1] == 0.5 and r3.orders == 6
    np.testing.assert_array_equal(secretary_cutoff_diagnostic(2).success_prob, [0.5, 0.5])


@pytest.mark.parametrize("L", range(2, 10))
def test_secretary_matches_closed_form(L):
    r = secretary_cutoff_diagnostic(L)
    expected = [float(_closed_form(L, n)) for n in range(L)]
    np.testing.assert_allclose(r.success_prob, expected, rtol=0, atol=1e-12)
    assert r.orders == math.factorial(L)


@pytest.mark.parametrize("L", [1, 11])
def test_secretary_range(L):
    with pytest.raises(ValueError):
        secretary_cutoff_diagnostic(L)
