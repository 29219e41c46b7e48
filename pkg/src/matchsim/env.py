"""Assortative-matching world: agents wander a bounded square, chase the
best-labelled partner they can see, exchange offers and pair up for good.

A :class:`World` is a plain mutable value. Every random draw goes through
``world.rng`` so that ``(config, seed, overrides)`` fully determines a run.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid world or run configuration."""


class ResolutionError(RuntimeError):
    pass


class StepError(RuntimeError):
    pass


class Gender(enum.IntEnum):
    FEMALE = 0
    MALE = 1


class Group(enum.IntEnum):
    CONTROL = 0
    EXPERIMENTAL = 1


class Decision(enum.Enum):
    ACCEPT = "accept"
    DECLINE = "decline"


class RejectReason(enum.Enum):
    TOO_FAR = "TooFar"
    ALREADY_PAIRED = "AlreadyPaired"
    BUSY = "Busy"
    SAME_GENDER = "SameGender"
    SELF = "Self"


class OfferRejected(Exception):
    def __init__(self, reason: RejectReason):
        super().__init__(reason.value)
        self.reason = reason


@dataclass
class WorldConfig:
    side: int = 50
    agents_per_gender: int = 25
    view_range: float = 25.0
    offer_distance: float = 3.0
    max_steps: int = 500
    initial_n: int = 4
    move_speed: float = 1.0
    deadlock_patience: int = 50
    seed: int = 0
    experimental_labels: tuple[int, ...] = tuple(range(10))

    def validate(self) -> None:
        if self.side <= 0:
            raise ConfigError("side must be > 0")
        if self.agents_per_gender <= 0:
            raise ConfigError("agents_per_gender must be > 0")
        if self.view_range <= 0:
            raise ConfigError("view_range must be > 0")
        if self.view_range > self.side * math.sqrt(2):
            raise ConfigError("view_range must be <= side * sqrt(2)")
        if self.offer_distance <= 0:
            raise ConfigError("offer_distance must be > 0")
        if self.offer_distance > self.view_range:
            raise ConfigError("offer_distance must be <= view_range")
        if self.max_steps <= 0:
            raise ConfigError("max_steps must be > 0")
        if self.initial_n < 0:
            raise ConfigError("initial_n must be >= 0")
        if self.move_speed <= 0:
            raise ConfigError("move_speed must be > 0")
        if self.deadlock_patience <= 0:
            raise ConfigError("deadlock_patience must be > 0")
        bad = [x for x in self.experimental_labels if not 0 <= x < self.agents_per_gender]
        if bad:
            raise ConfigError(f"experimental_labels out of range [0, {self.agents_per_gender - 1}]: {bad}")

    @classmethod
    def from_dict(cls, data: dict) -> WorldConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown world keys: {unknown}")
        data = dict(data)
        if "experimental_labels" in data:
            data["experimental_labels"] = tuple(int(x) for x in data["experimental_labels"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["experimental_labels"] = list(self.experimental_labels)
        return d


@dataclass
class Agent:
    id: int
    gender: Gender
    label: int
    pos: tuple[float, float]
    group: Group = Group.CONTROL
    first_decline_n: int = 0
    paired_with: int | None = None
    paused: bool = False
    decline_list: list[int] = field(default_factory=list)
    being_declined_list: list[int] = field(default_factory=list)
    offers_received: int = 0

    @property
    def paired(self) -> bool:
        return self.paired_with is not None

    @property
    def excluded_label(self) -> int | None:
        return self.being_declined_list[-1] if self.being_declined_list else None


@dataclass(frozen=True)
class Offer:
    sender_id: int
    recipient_id: int
    issued_step: int


@dataclass(frozen=True)
class MatchRecord:
    step: int
    female_label: int
    male_label: int
    female_group: Group
    male_group: Group
    reward_each: float


@dataclass(frozen=True)
class Event:
    step: int
    event_type: str  # move | offer | accept | decline | match | relax
    sender_label: int | None = None
    recipient_label: int | None = None
    decision: str | None = None
    reward_each: float | None = None
    sender_gender: Gender | None = None


@dataclass
class World:
    config: WorldConfig
    agents: list[Agent]
    rng: np.random.Generator
    pending_offers: list[Offer] = field(default_factory=list)
    step: int = 0
    match_log: list[MatchRecord] = field(default_factory=list)
    steps_since_match: int = 0

    @property
    def stalled(self) -> bool:
        """True while the deadlock breaker is active."""
        return self.steps_since_match >= self.config.deadlock_patience

    def agent(self, agent_id: int) -> Agent:
        if not 0 <= agent_id < len(self.agents):
            raise KeyError(f"unknown agent id {agent_id}")
        return self.agents[agent_id]

    def positions(self) -> np.ndarray:
        return np.array([a.pos for a in self.agents], dtype=np.float64)

    def busy_ids(self) -> set[int]:
        out = set()
        for o in self.pending_offers:
            out.add(o.sender_id)
            out.add(o.recipient_id)
        return out

    def pending_for(self, recipient_id: int) -> Offer | None:
        for o in self.pending_offers:
            if o.recipient_id == recipient_id:
                return o
        return None


class Movement(enum.Enum):
    TOWARD_TARGET = "TowardTarget"
    RANDOM_HEADING = "RandomHeading"
    FOLLOW_BEST_SAME_SEX = "FollowBestSameSex"
    HOLD = "Hold"


class OfferResponse(enum.Enum):
    USE_BASELINE_RULE = "UseBaselineRule"
    FORCE_ACCEPT = "ForceAccept"
    FORCE_DECLINE = "ForceDecline"


@dataclass(frozen=True)
class AgentAction:
    """One tick of instructions for one agent.

    ``heading`` is only read for ``RANDOM_HEADING``; when it is None the
    world draws a uniform angle.
    """

    movement: Movement
    heading: float | None = None
    offer_response: OfferResponse = OfferResponse.USE_BASELINE_RULE
    n_adjust: int = 0

    def __post_init__(self):
        if self.n_adjust not in (-1, 0, 1):
            raise ValueError("n_adjust must be one of -1, 0, +1")


# ---------------------------------------------------------------- geometry


def distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Euclidean distance; the world does not wrap."""
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    return math.sqrt(dx * dx + dy * dy)


def pairwise_distances(pos: np.ndarray) -> np.ndarray:
    # Same operation order as distance() so both agree bit for bit.
    dx = pos[:, None, 0] - pos[None, :, 0]
    dy = pos[:, None, 1] - pos[None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


def clamp_position(x: float, y: float, side: float) -> tuple[float, float]:
    hi = math.nextafter(float(side), 0.0)
    return (min(max(x, 0.0), hi), min(max(y, 0.0), hi))


def move_toward(pos, goal, speed: float, side: float) -> tuple[float, float]:
    d = distance(pos, goal)
    if d == 0.0:
        return (pos[0], pos[1])
    step = min(speed, d)
    return clamp_position(pos[0] + (goal[0] - pos[0]) * step / d, pos[1] + (goal[1] - pos[1]) * step / d, side)


def move_heading(pos, heading: float, speed: float, side: float) -> tuple[float, float]:
    return clamp_position(pos[0] + speed * math.cos(heading), pos[1] + speed * math.sin(heading), side)


# ---------------------------------------------------------------- setup


def init_world(config: WorldConfig) -> World:
    config.validate()
    rng = np.random.default_rng(config.seed)
    L = config.agents_per_gender
    exp = set(config.experimental_labels)
    agents: list[Agent] = []
    for gender in (Gender.FEMALE, Gender.MALE):
        labels = rng.permutation(L)
        xy = rng.uniform(0.0, config.side, size=(L, 2))
        for k in range(L):
            label = int(labels[k])
            agents.append(
                Agent(
                    id=len(agents),
                    gender=gender,
                    label=label,
                    pos=clamp_position(float(xy[k, 0]), float(xy[k, 1]), config.side),
                    group=Group.EXPERIMENTAL if label in exp else Group.CONTROL,
                    first_decline_n=config.initial_n,
                )
            )
    return World(config=config, agents=agents, rng=rng)


# ---------------------------------------------------------------- visibility


def _visibility_matrix(world: World, dist: np.ndarray, same_gender: bool = False) -> np.ndarray:
    genders = np.array([a.gender for a in world.agents])
    free = np.array([not a.paired for a in world.agents])
    if same_gender:
        gmask = genders[:, None] == genders[None, :]
        np.fill_diagonal(gmask, False)
    else:
        gmask = genders[:, None] != genders[None, :]
    return gmask & free[None, :] & (dist <= world.config.view_range)


def visible_candidates(world: World, agent_id: int) -> list[int]:
    """Unpaired opposite-gender agents in view, best label first."""
    me = world.agent(agent_id)
    out = []
    for other in world.agents:
        if other.gender == me.gender or other.paired:
            continue
        if distance(me.pos, other.pos) <= world.config.view_range:
            out.append(other)
    out.sort(key=lambda a: (-a.label, a.id))
    return [a.id for a in out]


def baseline_targets(world: World, dist: np.ndarray | None = None) -> list[int | None]:
    """Move-policy target of every agent, computed for all agents at once.

    Entry i is the highest-label visible unpaired partner of agent i that is
    not its most recent decliner, or None.
    """
    if dist is None:
        dist = pairwise_distances(world.positions())
    vis = _visibility_matrix(world, dist)
    labels = np.array([a.label for a in world.agents])
    if not world.stalled:
        excluded = np.array([-1 if (e := a.excluded_label) is None else e for a in world.agents])
        vis &= labels[None, :] != excluded[:, None]
    # Labels are unique per gender, so the score has no ties; lower id wins defensively.
    score = np.where(vis, labels[None, :] * (len(labels) + 1) + (len(labels) - np.arange(len(labels)))[None, :], -1)
    best = score.argmax(axis=1)
    has = vis.any(axis=1)
    return [int(best[i]) if has[i] else None for i in range(len(world.agents))]


def best_same_sex(world: World, agent_id: int, dist: np.ndarray | None = None) -> int | None:
    me = world.agent(agent_id)
    best = None
    for other in world.agents:
        if other.id == agent_id or other.gender != me.gender or other.paired:
            continue
        d = dist[agent_id, other.id] if dist is not None else distance(me.pos, other.pos)
        if d <= world.config.view_range and (best is None or other.label > best.label):
            best = other
    return None if best is None else best.id


# ---------------------------------------------------------------- offers


def submit_offer(world: World, sender_id: int, recipient_id: int) -> Offer:
    """Register an offer and pause both parties.

    Raises :class:`OfferRejected` (with no state change) if the pair is not
    eligible.
    """
    s = world.agent(sender_id)
    r = world.agent(recipient_id)
    if sender_id == recipient_id:
        raise OfferRejected(RejectReason.SELF)
    if s.gender == r.gender:
        raise OfferRejected(RejectReason.SAME_GENDER)
    if s.paired or r.paired:
        raise OfferRejected(RejectReason.ALREADY_PAIRED)
    busy = world.busy_ids()
    if sender_id in busy or recipient_id in busy:
        raise OfferRejected(RejectReason.BUSY)
    if distance(s.pos, r.pos) > world.config.offer_distance:
        raise OfferRejected(RejectReason.TOO_FAR)
    offer = Offer(sender_id, recipient_id, world.step)
    world.pending_offers.append(offer)
    s.paused = True
    r.paused = True
    return offer


def resolve_offer(world: World, offer: Offer, decision: Decision) -> MatchRecord | None:
    if offer not in world.pending_offers:
        raise ResolutionError(f"offer {offer} is not pending")
    world.pending_offers.remove(offer)
    s = world.agent(offer.sender_id)
    r = world.agent(offer.recipient_id)
    r.offers_received += 1
    if decision is Decision.DECLINE:
        r.decline_list.append(s.label)
        s.being_declined_list.append(r.label)
        s.paused = False
        r.paused = False
        return None
    s.paired_with = r.id
    r.paired_with = s.id
    f, m = (s, r) if s.gender == Gender.FEMALE else (r, s)
    rec = MatchRecord(
        step=world.step,
        female_label=f.label,
        male_label=m.label,
        female_group=f.group,
        male_group=m.group,
        reward_each=(f.label + m.label) / 2.0,
    )
    world.match_log.append(rec)
    return rec


# ---------------------------------------------------------------- the tick


def is_terminal(world: World) -> bool:
    return world.step >= world.config.max_steps or all(a.paired for a in world.agents)


def step_world(world: World, action_overrides: dict[int, AgentAction] | None = None) -> tuple[World, list[Event]]:
    """Advance one tick in place and return ``(world, events)``.

    Order: resolve offers issued on earlier ticks, move, submit offers,
    deadlock bookkeeping, step increment. An offer therefore stays pending
    across exactly one tick boundary, during which neither party moves.
    """
    # Imported here: baseline_policy depends on this module.
    from . import baseline_policy as bp

    if is_terminal(world):
        raise StepError("episode already terminal")
    overrides = action_overrides or {}
    cfg = world.config
    events: list[Event] = []

    # (1) resolve offers issued on earlier ticks
    matched = False
    for offer in [o for o in world.pending_offers if o.issued_step < world.step]:
        s, r = world.agents[offer.sender_id], world.agents[offer.recipient_id]
        act = overrides.get(r.id)
        decision = _apply_response(r, s.label, act)
        rec = resolve_offer(world, offer, decision)
        events.append(Event(world.step, decision.value, s.label, r.label, decision=decision.value, sender_gender=s.gender))
        if rec is not None:
            matched = True
            events.append(
                Event(world.step, "match", s.label, r.label, decision="accept", reward_each=rec.reward_each, sender_gender=s.gender)
            )

    # (2) movement
    dist = pairwise_distances(world.positions())
    targets = baseline_targets(world, dist)
    for a in world.agents:
        if a.paired or a.paused:
            continue
        act = overrides.get(a.id)
        if act is None:
            act = bp.choose_move(world, a.id, targets[a.id])
        old = a.pos
        mv = act.movement
        if mv is Movement.FOLLOW_BEST_SAME_SEX:
            lead = best_same_sex(world, a.id, dist)
            if lead is not None:
                a.pos = move_toward(a.pos, world.agents[lead].pos, cfg.move_speed, cfg.side)
            else:
                mv = Movement.TOWARD_TARGET
        if mv is Movement.TOWARD_TARGET:
            t = targets[a.id]
            if t is not None:
                a.pos = move_toward(a.pos, world.agents[t].pos, cfg.move_speed, cfg.side)
            else:
                mv = Movement.RANDOM_HEADING
        if mv is Movement.RANDOM_HEADING:
            heading = act.heading if act.heading is not None else float(world.rng.uniform(0.0, 2.0 * math.pi))
            a.pos = move_heading(a.pos, heading, cfg.move_speed, cfg.side)
        if a.pos != old:
            events.append(Event(world.step, "move", sender_label=a.label, sender_gender=a.gender))

    # (3) offers, arrival order shuffled
    candidates = []
    for a in world.agents:
        t = targets[a.id]
        if a.paired or a.paused or t is None:
            continue
        if bp.should_offer(world, a.id, t):
            candidates.append((a.id, t))
    order = world.rng.permutation(len(candidates)) if candidates else []
    for k in order:
        sid, rid = candidates[k]
        try:
            submit_offer(world, sid, rid)
        except OfferRejected:
            continue
        s, r = world.agents[sid], world.agents[rid]
        events.append(Event(world.step, "offer", s.label, r.label, sender_gender=s.gender))

    # (4) deadlock breaker: every `deadlock_patience` matchless steps each
    # free agent drops its highest declined label; the most-recent-decliner
    # exclusion stays suspended until the next match.
    if matched:
        world.steps_since_match = 0
    else:
        world.steps_since_match += 1
        if world.steps_since_match % cfg.deadlock_patience == 0:
            for a in world.agents:
                if a.paired:
                    continue
                if a.decline_list:
                    a.decline_list.remove(max(a.decline_list))
            events.append(Event(world.step, "relax"))

    world.step += 1
    return world, events


def _apply_response(recipient: Agent, sender_label: int, act: AgentAction | None) -> Decision:
    from . import baseline_policy as bp

    if act is not None:
        in_phase_one = recipient.offers_received < recipient.first_decline_n
        if act.offer_response is OfferResponse.FORCE_ACCEPT:
            recipient.first_decline_n = recipient.offers_received
            return Decision.ACCEPT
        if act.offer_response is OfferResponse.FORCE_DECLINE:
            if in_phase_one:
                recipient.first_decline_n += 1
            return Decision.DECLINE
        if act.n_adjust:
            recipient.first_decline_n = max(0, recipient.first_decline_n + act.n_adjust)
    return bp.respond_to_offer(recipient, sender_label)


def run_episode(world: World, overrides_fn=None) -> list[Event]:
    """Step until terminal; ``overrides_fn(world)`` supplies per-tick overrides."""
    log: list[Event] = []
    while not is_terminal(world):
        _, ev = step_world(world, overrides_fn(world) if overrides_fn else None)
        log.extend(ev)
    return log


# ---------------------------------------------------------------- CSV export

EVENT_COLUMNS = ("trial", "step", "event_type", "sender_label", "recipient_label", "decision", "reward_each", "sender_gender")
MATCH_COLUMNS = ("trial", "step", "female_label", "male_label", "female_group", "male_group")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, enum.Enum):
        return v.name.lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_events_csv(path: Path, trials: Iterable[tuple[int, Sequence[Event]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for trial, events in trials:
            for e in events:
                w.writerow([trial, e.step, e.event_type, _cell(e.sender_label), _cell(e.recipient_label),
                            _cell(e.decision), _cell(e.reward_each), _cell(e.sender_gender)])


def write_matches_csv(path: Path, trials: Iterable[tuple[int, Sequence[MatchRecord]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATCH_COLUMNS)
        for trial, recs in trials:
            for r in recs:
                w.writerow([trial, r.step, r.female_label, r.male_label, _cell(r.female_group), _cell(r.male_group)])


def read_matches_from_events(path: Path, experimental_labels: Iterable[int]) -> dict[int, list[MatchRecord]]:
    """Rebuild per-trial match records from an event CSV."""
    exp = set(experimental_labels)
    out: dict[int, list[MatchRecord]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            trial = int(row["trial"])
            out.setdefault(trial, [])
            if row["event_type"] != "match":
                continue
            s, r = int(row["sender_label"]), int(row["recipient_label"])
            f, m = (s, r) if row["sender_gender"] == "female" else (r, s)
            out[trial].append(
                MatchRecord(
                    step=int(row["step"]),
                    female_label=f,
                    male_label=m,
                    female_group=Group.EXPERIMENTAL if f in exp else Group.CONTROL,
                    male_group=Group.EXPERIMENTAL if m in exp else Group.CONTROL,
                    reward_each=float(row["reward_each"]),
                )
            )
    return out

