"""Hand-written strategies every agent starts with: chase the best visible
partner, offer at close range, decline the first ``n`` offers, then accept
anyone at least as good as the best declined so far."""

from __future__ import annotations

import math

from .env import (
    Agent,
    AgentAction,
    Decision,
    Movement,
    World,
    baseline_targets,
    distance,
)

__all__ = ["AgentAction", "select_target", "choose_move", "should_offer", "respond_to_offer"]


def select_target(world: World, agent_id: int) -> int | None:
    me = world.agent(agent_id)
    if me.paired:
        return None
    return baseline_targets(world)[agent_id]


def choose_move(world: World, agent_id: int, target: int | None) -> AgentAction:
    me = world.agent(agent_id)
    if me.paused or me.paired:
        return AgentAction(Movement.HOLD)
    if target is not None:
        return AgentAction(Movement.TOWARD_TARGET)
    return AgentAction(Movement.RANDOM_HEADING, heading=float(world.rng.uniform(0.0, 2.0 * math.pi)))


def should_offer(world: World, agent_id: int, target: int) -> bool:
    busy = world.busy_ids()
    if agent_id in busy or target in busy:
        return False
    return distance(world.agent(agent_id).pos, world.agent(target).pos) <= world.config.offer_distance


def respond_to_offer(agent: Agent, sender_label: int) -> Decision:
    """Pure function of the recipient's bookkeeping and the sender's label."""
    if agent.offers_received < agent.first_decline_n:
        return Decision.DECLINE
    if not agent.decline_list or sender_label >= max(agent.decline_list):
        return Decision.ACCEPT
    return Decision.DECLINE
