"""Experiment orchestration: baseline view-range sweeps, mixed-population
evaluation of a trained policy, event-log replay and the optimal-stopping
diagnostic. Everything here writes plain CSV/JSON into one run directory."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .a3c import ModelParams, act_batch, encode_batch, episode_seed, to_agent_action
from .env import (
    ConfigError,
    Event,
    Gender,
    Group,
    MatchRecord,
    World,
    WorldConfig,
    init_world,
    read_matches_from_events,
    run_episode,
    write_events_csv,
    write_matches_csv,
)
from .metrics import MetricError, avg_abs_label_diff, group_avg_diff_or_none

log = logging.getLogger(__name__)

SUMMARY_FORMAT_VERSION = 1

# Published reference numbers, stored next to our results for comparison only.
BASELINE_REFERENCE = {"5": 7.71, "15": 4.44, "25": 1.02}
MIXED_REFERENCE = {"avg_abs_diff": 7.09, "std_abs_diff": 5.80, "egr_avg_diff_band": [1.00, 4.70]}

_GROUP_FIELDS = tuple(
    f"{g}_avg_diff{suffix}" for g in ("cgr", "egr") for suffix in ("_f", "_m", "")
)

TRIAL_COLUMNS = ("trial", "seed", "view_range", "n_pairs", "avg_abs_diff", "std_abs_diff") + _GROUP_FIELDS


# ---------------------------------------------------------------- trial summaries


@dataclass
class TrialSummary:
    trial_id: int
    seed: int
    view_range: float
    pairs: list[MatchRecord]
    avg_abs_diff: float | None
    std_abs_diff: float | None
    # Group fields stay None in pure-baseline runs.
    cgr_avg_diff_f: float | None = None
    cgr_avg_diff_m: float | None = None
    cgr_avg_diff: float | None = None
    egr_avg_diff_f: float | None = None
    egr_avg_diff_m: float | None = None
    egr_avg_diff: float | None = None

    def row(self) -> dict:
        d = {
            "trial": self.trial_id,
            "seed": self.seed,
            "view_range": self.view_range,
            "n_pairs": len(self.pairs),
            "avg_abs_diff": self.avg_abs_diff,
            "std_abs_diff": self.std_abs_diff,
        }
        d.update({k: getattr(self, k) for k in _GROUP_FIELDS})
        return d


def summarize_trial(trial_id: int, seed: int, view_range: float, pairs: Sequence[MatchRecord],
                    with_groups: bool) -> TrialSummary:
    try:
        mean, std = avg_abs_label_diff(pairs)
    except MetricError:
        mean = std = None
    s = TrialSummary(trial_id, seed, view_range, list(pairs), mean, std)
    if with_groups:
        for prefix, group in (("cgr", Group.CONTROL), ("egr", Group.EXPERIMENTAL)):
            setattr(s, f"{prefix}_avg_diff_f", group_avg_diff_or_none(pairs, group, Gender.FEMALE))
            setattr(s, f"{prefix}_avg_diff_m", group_avg_diff_or_none(pairs, group, Gender.MALE))
            setattr(s, f"{prefix}_avg_diff", group_avg_diff_or_none(pairs, group))
    return s


def _mean(values: Iterable[float | None]) -> float | None:
    v = [x for x in values if x is not None]
    return math.fsum(v) / len(v) if v else None


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_trials_csv(path: Path, summaries: Sequence[TrialSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_COLUMNS)
        for s in summaries:
            row = s.row()
            w.writerow([_cell(row[c]) for c in TRIAL_COLUMNS])


def read_pairs_csv(path: Path) -> dict[int, list[MatchRecord]]:
    out: dict[int, list[MatchRecord]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["trial"]), []).append(
                MatchRecord(
                    step=int(row["step"]),
                    female_label=int(row["female_label"]),
                    male_label=int(row["male_label"]),
                    female_group=Group[row["female_group"].upper()],
                    male_group=Group[row["male_group"].upper()],
                    reward_each=(int(row["female_label"]) + int(row["male_label"])) / 2.0,
                )
            )
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _with(config: WorldConfig, **changes) -> WorldConfig:
    d = config.to_dict()
    d.update(changes)
    return WorldConfig.from_dict(d)


# ---------------------------------------------------------------- baseline sweep


@dataclass
class RunOutput:
    summaries: list[TrialSummary]
    events: list[tuple[int, list[Event]]]
    aggregates: dict
    paper_targets: dict
    trial_seeds: list[int] = field(default_factory=list)


def baseline_trial_seed(seed: int, trial: int) -> int:
    # Shared across view ranges so each range sees the same starting layouts.
    return episode_seed(seed, 0xBA5E, trial)


def run_baseline(view_ranges: Sequence[float], trials_per_range: int, seed: int,
                 config: WorldConfig | None = None, out_dir: Path | None = None) -> RunOutput:
    """All-baseline episodes for every view range.

    Trial ids run ``range_index * trials_per_range + t``. With ``out_dir`` the
    grid, per-trial table, pairs, events and summary are written there.
    """
    if trials_per_range < 1:
        raise ConfigError("trials_per_range must be >= 1")
    if not view_ranges:
        raise ConfigError("need at least one view range")
    base = _with(config or WorldConfig(), experimental_labels=[])
    summaries, events = [], []
    for r, vr in enumerate(view_ranges):
        for t in range(trials_per_range):
            tid = r * trials_per_range + t
            s = baseline_trial_seed(seed, t)
            world = init_world(_with(base, view_range=float(vr), seed=s))
            ev = run_episode(world)
            summaries.append(summarize_trial(tid, s, float(vr), world.match_log, with_groups=False))
            events.append((tid, ev))
        log.info("view range %s done: mean avg diff %.3f", vr,
                 _mean(x.avg_abs_diff for x in summaries[-trials_per_range:]))
    L = base.agents_per_gender
    per_range = {}
    for vr in view_ranges:
        rows = [s for s in summaries if s.view_range == float(vr)]
        per_range[_key(vr)] = {
            "mean_avg_abs_diff": _mean(s.avg_abs_diff for s in rows),
            "mean_std_abs_diff": _mean(s.std_abs_diff for s in rows),
            "full_match_fraction": sum(len(s.pairs) == L for s in rows) / len(rows),
        }
    out = RunOutput(summaries, events, {"per_view_range": per_range},
                    {"mean_avg_abs_diff_by_view_range": BASELINE_REFERENCE},
                    [baseline_trial_seed(seed, t) for t in range(trials_per_range)])
    if out_dir is not None:
        _write_run(out_dir, "baseline", out)
        _write_grid(out_dir / "table1.csv", view_ranges, trials_per_range, summaries)
    return out


def _key(vr: float) -> str:
    return str(int(vr)) if float(vr).is_integer() else repr(float(vr))


def _write_grid(path: Path, view_ranges, n: int, summaries: Sequence[TrialSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view_range", *[f"trial_{t + 1}" for t in range(n)], "mean", "reference_mean"])
        for r, vr in enumerate(view_ranges):
            vals = [summaries[r * n + t].avg_abs_diff for t in range(n)]
            ref = BASELINE_REFERENCE.get(_key(vr))
            w.writerow([_key(vr), *map(_cell, vals), _cell(_mean(vals)), _cell(ref)])


def _write_run(out_dir: Path, mode: str, out: RunOutput) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trials_csv(out_dir / "trials.csv", out.summaries)
    write_matches_csv(out_dir / "pairs.csv", [(s.trial_id, s.pairs) for s in out.summaries])
    write_events_csv(out_dir / "events.csv", out.events)
    write_json(out_dir / "summary.json", {
        "format_version": SUMMARY_FORMAT_VERSION,
        "mode": mode,
        "per_trial": [s.row() for s in out.summaries],
        "aggregates": out.aggregates,
        "paper_targets": out.paper_targets,
    })


# ---------------------------------------------------------------- mixed evaluation


def eval_trial_seed(seed: int, trial: int) -> int:
    return episode_seed(seed, 0xE7A1, trial)


def greedy_overrides(params: ModelParams):
    def fn(world: World):
        ids = [a.id for a in world.agents if a.group == Group.EXPERIMENTAL and not a.paired]
        if not ids:
            return None
        res = act_batch(params, encode_batch(world, ids), None, greedy=True)
        return {aid: to_agent_action(int(a), world, aid) for aid, a in zip(ids, res.actions)}
    return fn


def run_mixed(config: WorldConfig, params: ModelParams | None, trials: int, seed: int,
              out_dir: Path | None = None) -> RunOutput:
    """Control agents follow the baseline; experimental agents act greedily
    from ``params``."""
    if params is None:
        raise FileNotFoundError("a checkpoint is required for mixed evaluation")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    config.validate()
    summaries, events, seeds = [], [], []
    policy = greedy_overrides(params)
    for t in range(trials):
        s = eval_trial_seed(seed, t)
        world = init_world(_with(config, seed=s))
        ev = run_episode(world, policy)
        summaries.append(summarize_trial(t, s, config.view_range, world.match_log, with_groups=True))
        events.append((t, ev))
        seeds.append(s)
    agg = {"mean_avg_abs_diff": _mean(s.avg_abs_diff for s in summaries),
           "mean_std_abs_diff": _mean(s.std_abs_diff for s in summaries),
           "full_match_fraction": sum(len(s.pairs) == config.agents_per_gender for s in summaries) / trials}
    for k in _GROUP_FIELDS:
        agg[f"mean_{k}"] = _mean(getattr(s, k) for s in summaries)
    out = RunOutput(summaries, events, agg, MIXED_REFERENCE, seeds)
    if out_dir is not None:
        _write_run(out_dir, "eval", out)
    return out


# ---------------------------------------------------------------- replay


@dataclass
class ReplayReport:
    trials: int
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def replay_run(run_dir: Path) -> ReplayReport:
    """Recompute per-trial metrics from ``events.csv`` and compare them with
    ``summary.json`` using exact float equality."""
    meta = json.loads((run_dir / "metadata.json").read_text())
    summary = json.loads((run_dir / "summary.json").read_text())
    exp = meta["config"]["world"]["experimental_labels"] if meta["mode"] == "eval" else []
    with_groups = meta["mode"] == "eval"
    rebuilt = read_matches_from_events(run_dir / "events.csv", exp)
    mismatches = []
    for rec in summary["per_trial"]:
        tid = rec["trial"]
        s = summarize_trial(tid, rec["seed"], rec["view_range"], rebuilt.get(tid, []), with_groups).row()
        for k, v in rec.items():
            if s[k] != v:
                mismatches.append(f"trial {tid} {k}: recorded {v!r}, replayed {s[k]!r}")
    extra = sorted(set(rebuilt) - {r["trial"] for r in summary["per_trial"]})
    if extra:
        mismatches.append(f"event log has trials missing from the summary: {extra}")
    return ReplayReport(len(summary["per_trial"]), mismatches)


# ---------------------------------------------------------------- optimal stopping


@dataclass
class SecretaryResult:
    best_cutoff: int
    success_prob: np.ndarray  # index = number of leading offers declined
    orders: int


def _all_orders(L: int) -> np.ndarray:
    # Insert k into every slot of each order of 0..k-1.
    p = np.zeros((1, 0), dtype=np.int8)
    for k in range(L):
        rows = p.shape[0]
        out = np.empty((rows * (k + 1), k + 1), dtype=np.int8)
        for pos in range(k + 1):
            blk = out[pos * rows:(pos + 1) * rows]
            blk[:, :pos] = p[:, :pos]
            blk[:, pos] = k
            blk[:, pos + 1:] = p[:, pos:]
        p = out
    return p


def secretary_cutoff_diagnostic(L: int) -> SecretaryResult:
    """Exhaustive check of the decline-first-n rule for one receiver.

    Senders labelled 0..L-1 arrive in every possible order. The receiver
    declines the first n, then accepts the first sender at least as good as
    everything declined. Success means ending up with label L-1.
    """
    if not 2 <= L <= 10:
        raise ValueError(f"L must be in [2, 10] for exact enumeration, got {L}")
    orders = _all_orders(L)
    prefix_max = np.maximum.accumulate(orders, axis=1)
    wins = np.zeros(L, dtype=np.int64)
    for n in range(L):
        bar = prefix_max[:, n - 1] if n else np.full(len(orders), -1, dtype=np.int8)
        ok = orders[:, n:] >= bar[:, None]
        first = ok.argmax(axis=1)
        chosen = orders[np.arange(len(orders)), n + first]
        wins[n] = np.count_nonzero(ok.any(axis=1) & (chosen == L - 1))
    prob = wins / len(orders)
    return SecretaryResult(int(np.argmax(prob)), prob, len(orders))
