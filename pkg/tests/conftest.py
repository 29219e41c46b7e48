from __future__ import annotations

import numpy as np

from matchsim.env import Agent, Gender, Group, World, WorldConfig


def make_world(specs, **cfg) -> World:
    """World from ``(gender, label, (x, y))`` triples; ids follow list order."""
    config = WorldConfig(**{"experimental_labels": (), **cfg})
    config.validate()
    exp = set(config.experimental_labels)
    agents = [
        Agent(id=i, gender=g, label=lab, pos=(float(x), float(y)),
              group=Group.EXPERIMENTAL if lab in exp else Group.CONTROL,
              first_decline_n=config.initial_n)
        for i, (g, lab, (x, y)) in enumerate(specs)
    ]
    return World(config=config, agents=agents, rng=np.random.default_rng(config.seed))


F, M = Gender.FEMALE, Gender.MALE


def max_rel_error(tensors, loss_fn, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest elementwise relative gap between backprop and central differences.

    ``loss_fn()`` must rebuild the graph from the current tensor values and
    return a scalar Tensor. ``floor`` keeps near-zero entries from dividing by 0.
    """
    from matchsim import nn

    for t in tensors:
        t.zero_grad()
    nn.backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        it = np.nditer(t.value, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = t.value[i]
            t.value[i] = orig + h
            up = float(loss_fn().value.sum())
            t.value[i] = orig - h
            down = float(loss_fn().value.sum())
            t.value[i] = orig
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - analytic[i]) / max(abs(num), abs(analytic[i]), floor))
    return worst
