"""Pairing statistics used in training traces and experiment tables."""

from __future__ import annotations

import math
from typing import Sequence

from .env import Gender, Group, MatchRecord


class MetricError(ValueError):
    pass


def avg_abs_label_diff(pairs: Sequence[MatchRecord]) -> tuple[float, float]:
    """Mean and population standard deviation of |female - male| label gaps."""
    if not pairs:
        raise MetricError("no pairs to summarize")
    d = [abs(p.female_label - p.male_label) for p in pairs]
    mu = math.fsum(d) / len(d)
    var = math.fsum((x - mu) ** 2 for x in d) / len(d)
    return mu, math.sqrt(var)


def _gains(pairs: Sequence[MatchRecord], group: Group, gender: Gender | None) -> list[int]:
    out = []
    for p in pairs:
        if gender in (None, Gender.FEMALE) and p.female_group == group:
            out.append(p.male_label - p.female_label)
        if gender in (None, Gender.MALE) and p.male_group == group:
            out.append(p.female_label - p.male_label)
    return out


def group_avg_diff(pairs: Sequence[MatchRecord], group: Group, gender: Gender | None = None) -> float:
    """Mean of (partner label - own label) over matched members of ``group``.

    ``gender=None`` pools both genders. Positive means the group paired up.
    """
    g = _gains(pairs, group, gender)
    if not g:
        raise MetricError(f"no matched {group.name.lower()} agents for gender {gender}")
    return math.fsum(g) / len(g)


def group_avg_diff_or_none(pairs, group, gender=None) -> float | None:
    try:
        return group_avg_diff(pairs, group, gender)
    except MetricError:
        return None
