"""Attention-enhanced asynchronous advantage actor-critic for the
experimental agents.

All experimental agents share one parameter set held by a
:class:`GlobalStore`. Workers pull a snapshot at the start of each episode,
push gradients every ``rollout_len`` ticks, and never pull mid-episode.
"""

from __future__ import annotations

import csv
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .attention import AttentionParams, enhance_state
from .env import (
    AgentAction,
    ConfigError,
    Group,
    Movement,
    OfferResponse,
    World,
    WorldConfig,
    init_world,
    is_terminal,
    pairwise_distances,
    step_world,
)
from .metrics import avg_abs_label_diff, group_avg_diff_or_none

log = logging.getLogger(__name__)

N_CANDIDATES = 5
SLOT_WIDTH = 6  # label, distance, sin, cos, busy, present
N_FEATURES = 9 + SLOT_WIDTH * (N_CANDIDATES + 1)

COMPASS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
ACTIONS = ("TowardTarget", "FollowBestSameSex", "ForceAccept", "ForceDecline") + tuple(f"Move{d}" for d in COMPASS)
N_ACTIONS = len(ACTIONS)


class EncodingError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class Hyperparams:
    gamma: float = 0.9
    lr: float = 1e-3
    rollout_len: int = 20
    entropy_coeff: float = 0.01
    value_coeff: float = 0.5
    workers: int = 4
    episodes: int = 300
    heads: int = 4
    hidden: tuple[int, ...] = (64, 64)
    max_grad_norm: float = 5.0
    reward_scale: float = 1.0
    normalize_advantages: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        for name in ("lr", "rollout_len", "workers", "heads", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("entropy_coeff", "value_coeff", "episodes", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden layer sizes must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> Hyperparams:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown hyperparams keys: {unknown}")
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(int(h) for h in data["hidden"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------- observation


@dataclass
class Observation:
    raw: np.ndarray
    normalized: np.ndarray


def _slot(me, other, dist: float, view_range: float, L: int, busy: set[int]) -> list[float]:
    dx = other.pos[0] - me.pos[0]
    dy = other.pos[1] - me.pos[1]
    s, c = (dy / dist, dx / dist) if dist > 0 else (0.0, 0.0)
    return [other.label, dist, s, c, float(other.id in busy), 1.0]


def _scales(world: World) -> np.ndarray:
    cfg = world.config
    L = cfg.agents_per_gender
    top = max(L - 1, 1)
    head = [top, cfg.side, cfg.side, cfg.max_steps, L, top, L, 1.0, top]
    slot = [top, cfg.view_range, 1.0, 1.0, 1.0, 1.0]
    return np.array(head + slot * (N_CANDIDATES + 1), dtype=np.float64)


def encode_observation(world: World, agent_id: int, dist: np.ndarray | None = None) -> Observation:
    """Fixed-layout feature vector for one unpaired agent, scaled into [-1, 1].

    Layout: own label, x, y, step, first-decline n, highest declined label,
    offers received, pending-offer flag, pending sender label, then five
    label-descending opposite-gender candidate slots and one slot for the best
    same-gender agent in view. Empty slots are zeros with presence 0.
    """
    me = world.agent(agent_id)
    if me.paired:
        raise EncodingError(f"agent {agent_id} is already paired")
    if dist is None:
        dist = pairwise_distances(world.positions())
    L = world.config.agents_per_gender
    vr = world.config.view_range
    pending = world.pending_for(agent_id)
    busy = world.busy_ids()
    raw = [
        me.label,
        me.pos[0],
        me.pos[1],
        world.step,
        me.first_decline_n,
        max(me.decline_list) if me.decline_list else 0,
        me.offers_received,
        1.0 if pending else 0.0,
        world.agents[pending.sender_id].label if pending else 0,
    ]
    row = dist[agent_id]
    opp, same = [], []
    for other in world.agents:
        if other.paired or other.id == agent_id or row[other.id] > vr:
            continue
        (opp if other.gender != me.gender else same).append(other)
    opp.sort(key=lambda a: (-a.label, a.id))
    same.sort(key=lambda a: (-a.label, a.id))
    for k in range(N_CANDIDATES):
        raw += _slot(me, opp[k], row[opp[k].id], vr, L, busy) if k < len(opp) else [0.0] * SLOT_WIDTH
    raw += _slot(me, same[0], row[same[0].id], vr, L, busy) if same else [0.0] * SLOT_WIDTH
    raw = np.array(raw, dtype=np.float64)
    return Observation(raw, np.clip(raw / _scales(world), -1.0, 1.0))


def encode_batch(world: World, ids: Sequence[int]) -> np.ndarray:
    dist = pairwise_distances(world.positions())
    return np.stack([encode_observation(world, i, dist).normalized for i in ids]) if ids else np.zeros((0, N_FEATURES))


# ---------------------------------------------------------------- actions


def to_agent_action(index: int, world: World, agent_id: int) -> AgentAction:
    """Map a catalogue index to an :class:`AgentAction`.

    ForceAccept/ForceDecline without an offer waiting on this agent fall back
    to TowardTarget.
    """
    name = ACTIONS[index]
    if name in ("ForceAccept", "ForceDecline"):
        if world.pending_for(agent_id) is None:
            return AgentAction(Movement.TOWARD_TARGET)
        resp = OfferResponse.FORCE_ACCEPT if name == "ForceAccept" else OfferResponse.FORCE_DECLINE
        return AgentAction(Movement.HOLD, offer_response=resp)
    if name == "TowardTarget":
        return AgentAction(Movement.TOWARD_TARGET)
    if name == "FollowBestSameSex":
        return AgentAction(Movement.FOLLOW_BEST_SAME_SEX)
    k = COMPASS.index(name[4:])
    return AgentAction(Movement.RANDOM_HEADING, heading=k * math.pi / 4)


# ---------------------------------------------------------------- model


@dataclass
class ModelParams:
    attention: AttentionParams
    policy: nn.MLPParams
    value: nn.MLPParams

    @classmethod
    def build(cls, hp: Hyperparams, seed: int, m: int = N_FEATURES, n_actions: int = N_ACTIONS) -> ModelParams:
        s = np.random.SeedSequence(seed).generate_state(3)
        width = hp.heads * m
        return cls(
            AttentionParams.build(m, hp.heads, int(s[0])),
            # Zero output layer: the untrained policy is exactly uniform.
            nn.MLPParams.build([width, *hp.hidden, n_actions], int(s[1]), out_scale=0.0),
            nn.MLPParams.build([width, *hp.hidden, 1], int(s[2])),
        )

    def tensors(self) -> list[nn.Tensor]:
        return self.attention.tensors() + self.policy.tensors() + self.value.tensors()

    def arrays(self) -> list[np.ndarray]:
        return [t.value.copy() for t in self.tensors()]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        ts = self.tensors()
        if len(ts) != len(arrays):
            raise nn.ShapeError(f"expected {len(ts)} arrays, got {len(arrays)}")
        for t, a in zip(ts, arrays):
            if t.shape != a.shape:
                raise nn.ShapeError(f"array shape {a.shape} != parameter shape {t.shape}")
            t.value = np.array(a, dtype=np.float64)
            t.zero_grad()

    def copy(self) -> ModelParams:
        out = ModelParams(
            AttentionParams([(nn.Param(w.value.copy()), nn.Param(b.value.copy())) for w, b in self.attention.heads]),
            nn.MLPParams([nn.Layer(nn.Param(l.weight.value.copy()), nn.Param(l.bias.value.copy()), l.activation)
                          for l in self.policy.layers]),
            nn.MLPParams([nn.Layer(nn.Param(l.weight.value.copy()), nn.Param(l.bias.value.copy()), l.activation)
                          for l in self.value.layers]),
        )
        return out

    def layout(self) -> dict:
        return {
            "m": self.attention.m,
            "heads": self.attention.H,
            "policy_sizes": [self.policy.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.policy.layers],
            "policy_activations": [l.activation for l in self.policy.layers],
            "value_sizes": [self.value.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.value.layers],
            "value_activations": [l.activation for l in self.value.layers],
        }


def forward(params: ModelParams, obs) -> tuple[nn.Tensor, nn.Tensor, list[np.ndarray]]:
    """Policy logits (N, A), values (N, 1) and per-head attention weights."""
    enhanced = enhance_state(obs, params.attention)
    logits = nn.mlp_forward(params.policy, enhanced.combined)
    values = nn.mlp_forward(params.value, enhanced.combined)
    return logits, values, enhanced.per_head_weights


@dataclass
class ActResult:
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    probs: np.ndarray
    betas: list[np.ndarray]


def act_batch(params: ModelParams, obs: np.ndarray, rng: np.random.Generator | None, greedy: bool = False) -> ActResult:
    with nn.no_grad():
        logits, values, betas = forward(params, obs)
    logp = nn.log_softmax(logits).value
    probs = np.exp(logp)
    if greedy:
        actions = probs.argmax(axis=1)
    else:
        u = rng.random(len(probs))
        cdf = np.cumsum(probs, axis=1)
        actions = np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)
    rows = np.arange(len(actions))
    return ActResult(actions, logp[rows, actions], values.value[:, 0], probs, betas)


def act(params: ModelParams, observation: Observation, rng: np.random.Generator | None, greedy: bool = False):
    """Single-observation form: ``(action, log_prob, value, per_head_betas)``."""
    r = act_batch(params, observation.normalized[None, :], rng, greedy)
    return int(r.actions[0]), float(r.log_probs[0]), float(r.values[0]), [b[0] for b in r.betas]


# ---------------------------------------------------------------- returns & loss


@dataclass
class RolloutBuffer:
    observations: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    active: list[bool] = field(default_factory=list)  # False when the action could not matter
    bootstrap_value: float = 0.0
    done: bool = False

    def __len__(self) -> int:
        return len(self.rewards)


def discounted_returns(rewards: Sequence[float], gamma: float, bootstrap_value: float = 0.0) -> np.ndarray:
    if len(rewards) == 0:
        raise ValueError("empty buffer")
    G = np.empty(len(rewards))
    running = bootstrap_value
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        G[t] = running
    return G


def advantages(G: Sequence[float], values: Sequence[float]) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if G.shape != values.shape:
        raise ValueError(f"length mismatch: {G.shape} vs {values.shape}")
    return G - values


@dataclass
class LossParts:
    total: nn.Tensor
    policy: float
    value: float
    entropy: float


def loss(params: ModelParams, obs: np.ndarray, actions: Sequence[int], G: Sequence[float], A: Sequence[float],
         entropy_coeff: float, value_coeff: float, active: Sequence[bool] | None = None) -> LossParts:
    """Actor-critic loss over a batch of T decisions.

    policy term  -mean(log pi(a_t|s_t) * A_t), with A held constant
    value term   value_coeff * mean((G_t - V(s_t))^2)
    entropy term -entropy_coeff * mean(H(pi(.|s_t)))

    ``active`` restricts the policy and entropy means to decisions that could
    affect the world; the value term always uses every row.
    """
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    G = np.asarray(G, dtype=np.float64).reshape(-1, 1)
    A = np.asarray(A, dtype=np.float64).reshape(-1, 1)
    if not (len(obs) == len(actions) == len(G) == len(A)):
        raise ValueError("obs, actions, returns and advantages must have equal lengths")
    w = np.ones((len(obs), 1)) if active is None else np.asarray(active, dtype=np.float64).reshape(-1, 1)
    if w.shape != G.shape:
        raise ValueError("active mask must match the batch length")
    w = w / max(w.sum(), 1.0)
    logits, values, _ = forward(params, obs)
    logp = nn.log_softmax(logits)
    chosen = nn.pick(logp, actions)
    policy_term = nn.neg(nn.reduce_sum(nn.mul(chosen, A * w)))
    value_term = nn.mean(nn.square(nn.add(values, -G)))
    probs = nn.softmax(logits)
    entropy = nn.neg(nn.reduce_sum(nn.mul(nn.reduce_sum(nn.mul(probs, logp), axis=1), w)))
    total = nn.add(nn.add(policy_term, nn.mul(value_term, value_coeff)), nn.mul(entropy, -entropy_coeff))
    return LossParts(total, float(policy_term.value.sum()), float(value_term.value.sum()), float(entropy.value.sum()))


# ---------------------------------------------------------------- global store & workers


class GlobalStore:
    """Master parameters plus a shared Adam state.

    Snapshots are deep copies taken under the lock; gradient applications are
    serialized and bump ``version`` by one each.
    """

    def __init__(self, params: ModelParams, hp: Hyperparams):
        self.params = params
        self.hp = hp
        self.adam = nn.AdamState.for_params(params.tensors(), lr=hp.lr)
        self.version = 0
        self._lock = threading.Lock()

    def snapshot(self) -> tuple[ModelParams, int]:
        with self._lock:
            return self.params.copy(), self.version


def apply_gradients(store: GlobalStore, grads: Sequence[np.ndarray]) -> int:
    ts = store.params.tensors()
    if len(grads) != len(ts) or any(g.shape != t.shape for g, t in zip(grads, ts)):
        raise nn.ShapeError("gradients do not match the master parameters")
    grads = [np.array(g, dtype=np.float64) for g in grads]
    with store._lock:
        nn.clip_grad_norm(grads, store.hp.max_grad_norm)
        nn.adam_step(ts, store.adam, grads)
        store.version += 1
        return store.version


@dataclass
class Worker:
    id: int
    rng: np.random.Generator
    params: ModelParams | None = None
    version: int = -1
    synced_versions: list[int] = field(default_factory=list)


def sync_from_global(worker: Worker, store: GlobalStore) -> Worker:
    worker.params, worker.version = store.snapshot()
    worker.synced_versions.append(worker.version)
    return worker


def _experimental_free(world: World) -> list[int]:
    return [a.id for a in world.agents if a.group == Group.EXPERIMENTAL and not a.paired]


def worker_rollout(worker: Worker, world: World, K: int, reward_scale: float = 1.0) -> dict[int, RolloutBuffer]:
    """Advance ``world`` up to K ticks with experimental agents driven by the
    worker's local policy; one buffer per participating agent."""
    if is_terminal(world):
        raise RuntimeError("world is already terminal")
    buffers: dict[int, RolloutBuffer] = {}
    for _ in range(K):
        if is_terminal(world):
            break
        ids = _experimental_free(world)
        if not ids:
            break
        obs = encode_batch(world, ids)
        live = [not world.agents[i].paused or world.pending_for(i) is not None for i in ids]
        res = act_batch(worker.params, obs, worker.rng)
        overrides = {aid: to_agent_action(int(a), world, aid) for aid, a in zip(ids, res.actions)}
        step_world(world, overrides)
        for k, aid in enumerate(ids):
            b = buffers.setdefault(aid, RolloutBuffer())
            b.observations.append(obs[k])
            b.actions.append(int(res.actions[k]))
            b.log_probs.append(float(res.log_probs[k]))
            b.values.append(float(res.values[k]))
            b.active.append(live[k])
            me = world.agents[aid]
            if me.paired:
                b.rewards.append(reward_scale * (me.label + world.agents[me.paired_with].label) / 2.0)
                b.done = True
            else:
                b.rewards.append(0.0)
    pending = [aid for aid, b in buffers.items() if not b.done]
    if pending and not is_terminal(world):
        obs = encode_batch(world, pending)
        vals = act_batch(worker.params, obs, None, greedy=True).values
        for aid, v in zip(pending, vals):
            buffers[aid].bootstrap_value = float(v)
    return buffers


def compute_gradients(params: ModelParams, buffers: Sequence[RolloutBuffer], hp: Hyperparams):
    """Loss over the concatenation of ``buffers``; returns (grads, LossParts)."""
    obs, acts, Gs, As, live = [], [], [], [], []
    for b in buffers:
        if not len(b):
            continue
        G = discounted_returns(b.rewards, hp.gamma, b.bootstrap_value)
        obs.extend(b.observations)
        acts.extend(b.actions)
        live.extend(b.active if b.active else [True] * len(b))
        Gs.append(G)
        As.append(advantages(G, b.values))
    A = np.concatenate(As)
    if hp.normalize_advantages and len(A) > 1:
        A = (A - A.mean()) / (A.std() + 1e-8)
    for t in params.tensors():
        t.zero_grad()
    parts = loss(params, np.stack(obs), acts, np.concatenate(Gs), A,
                 hp.entropy_coeff, hp.value_coeff, live)
    nn.backward(parts.total)
    grads = [t.grad.copy() for t in params.tensors()]
    for t in params.tensors():
        t.zero_grad()
    return grads, parts


# ---------------------------------------------------------------- training


TRACE_COLUMNS = ("episode", "worker", "version", "mean_loss", "mean_entropy", "egr_avg_diff", "avg_abs_diff", "matches")


def episode_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint64)[0])


def run_episode_training(worker: Worker, store: GlobalStore, world: World, hp: Hyperparams) -> dict:
    losses, entropies = [], []
    while not is_terminal(world):
        if not _experimental_free(world):
            step_world(world)
            continue
        buffers = worker_rollout(worker, world, hp.rollout_len, hp.reward_scale)
        grads, parts = compute_gradients(worker.params, list(buffers.values()), hp)
        apply_gradients(store, grads)
        losses.append(float(parts.total.value.sum()))
        entropies.append(parts.entropy)
    pairs = world.match_log
    return {
        "mean_loss": float(np.mean(losses)) if losses else float("nan"),
        "mean_entropy": float(np.mean(entropies)) if entropies else float("nan"),
        "egr_avg_diff": group_avg_diff_or_none(pairs, Group.EXPERIMENTAL),
        "avg_abs_diff": avg_abs_label_diff(pairs)[0] if pairs else None,
        "matches": len(pairs),
    }


@dataclass
class TrainResult:
    store: GlobalStore
    trace: list[dict]


def train(config: WorldConfig, hp: Hyperparams, seed: int, deterministic: bool = False,
          initial: ModelParams | None = None) -> TrainResult:
    """Train the shared policy; ``deterministic`` forces a single in-thread worker."""
    config.validate()
    hp.validate()
    params = initial.copy() if initial is not None else ModelParams.build(hp, episode_seed(seed, 0xA77))
    store = GlobalStore(params, hp)
    n_workers = 1 if deterministic else hp.workers
    trace: list[dict] = []
    counter = {"next": 0}
    claim = threading.Lock()

    def run_worker(wid: int) -> None:
        worker = Worker(wid, np.random.default_rng(episode_seed(seed, 0xB0, wid)))
        while True:
            with claim:
                ep = counter["next"]
                if ep >= hp.episodes:
                    return
                counter["next"] += 1
            sync_from_global(worker, store)
            world = init_world(_with_seed(config, episode_seed(seed, 0xE9, ep)))
            row = run_episode_training(worker, store, world, hp)
            row.update(episode=ep, worker=wid, version=worker.version)
            with claim:
                trace.append(row)
            if ep % 25 == 0:
                log.info("episode %d worker %d version %d egr=%s avg=%s", ep, wid, worker.version,
                         row["egr_avg_diff"], row["avg_abs_diff"])

    if n_workers == 1:
        run_worker(0)
    else:
        threads = [threading.Thread(target=run_worker, args=(w,), daemon=True) for w in range(n_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    trace.sort(key=lambda r: r["episode"])
    return TrainResult(store, trace)


def _with_seed(config: WorldConfig, seed: int) -> WorldConfig:
    d = config.to_dict()
    d["seed"] = seed
    return WorldConfig.from_dict(d)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: Path, params: ModelParams, adam: nn.AdamState | None = None, *,
                    version: int = 0, hp: Hyperparams | None = None, extra: dict | None = None) -> None:
    arrays = params.arrays()
    manifest = {
        "kind": "mha3c",
        "layout": params.layout(),
        "n_param_arrays": len(arrays),
        "version": version,
        "hyperparams": hp.to_dict() if hp else None,
        "extra": extra or {},
    }
    if adam is not None:
        manifest["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                            "epsilon": adam.epsilon, "step_count": adam.step_count}
        arrays = arrays + [m.copy() for m in adam.first_moment] + [v.copy() for v in adam.second_moment]
    nn.write_checkpoint(path, manifest, arrays)


def load_checkpoint(path: Path) -> tuple[ModelParams, nn.AdamState | None, dict]:
    manifest, arrays = nn.read_checkpoint(path)
    if manifest.get("kind") != "mha3c":
        raise ValueError(f"{path}: not an attention actor-critic checkpoint")
    lay = manifest["layout"]
    hp = Hyperparams(heads=lay["heads"], hidden=tuple(lay["policy_sizes"][1:-1]))
    params = ModelParams.build(hp, 0, m=lay["m"], n_actions=lay["policy_sizes"][-1])
    n = manifest["n_param_arrays"]
    params.load_arrays(arrays[:n])
    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        adam = nn.AdamState(
            [x.copy() for x in arrays[n : 2 * n]], [x.copy() for x in arrays[2 * n : 3 * n]],
            step_count=a["step_count"], lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], epsilon=a["epsilon"],
        )
    return params, adam, manifest


def write_trace_csv(path: Path, trace: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in TRACE_COLUMNS])
