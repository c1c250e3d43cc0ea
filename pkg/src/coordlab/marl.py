"""Joint-policy rollouts, replay and value-decomposition TD learning.

The joint action-value is the sum of per-agent Q values (VDN-style), so the
greedy joint policy decomposes into independent per-agent argmaxes. Agents
within a group share one parameter set; the agent index one-hot in the
observation disambiguates roles.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .nets import (NetSpec, OptState, ParamStore, backward_batch, forward,
                   forward_batch, init_params, optimizer_step)

GREEDY = ("greedy",)


def eps_greedy(epsilon: float):
    return ("eps_greedy", float(epsilon))


def softmax_mode(temperature: float):
    return ("softmax", float(temperature))


def softmax_probs(q: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(q, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def select_action(q_values, mode, rng: np.random.Generator) -> int:
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise ValueError("empty q-value vector")
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite q-values")
    kind = mode[0]
    if kind == "greedy":
        return int(np.argmax(q))
    if kind == "eps_greedy":
        if rng.random() < mode[1]:
            return int(rng.integers(len(q)))
        return int(np.argmax(q))
    if kind == "softmax":
        p = softmax_probs(q, mode[1])
        return int(rng.choice(len(q), p=p))
    raise ValueError(f"unknown action mode {mode!r}")


@dataclass
class Transition:
    obs: list[np.ndarray]        # per-slot stacked observation
    actions: np.ndarray          # per-slot action index
    reward: float
    next_obs: list[np.ndarray]
    done: bool


@dataclass
class Episode:
    transitions: list[Transition]
    return_undiscounted: float
    seed: int

    @property
    def length(self):
        return len(self.transitions)


class ReplayBuffer:
    """Bounded FIFO of episodes with uniform without-replacement sampling."""

    def __init__(self, capacity: int = 512, batch_size: int = 32):
        self.episodes = deque(maxlen=capacity)
        self.batch_size = batch_size

    def add(self, episode: Episode):
        self.episodes.append(episode)

    def __len__(self):
        return len(self.episodes)

    def sample(self, rng: np.random.Generator, batch_size: int | None = None):
        if not self.episodes:
            raise ValueError("cannot sample from an empty buffer")
        k = min(batch_size or self.batch_size, len(self.episodes))
        idx = rng.choice(len(self.episodes), size=k, replace=False)
        return [self.episodes[i] for i in idx]


class QNet:
    """One (backbone, head) parameter set with Adam state and a target copy."""

    def __init__(self, spec: NetSpec, rng: np.random.Generator | None = None,
                 lr: float = 5e-4, backbone: ParamStore | None = None,
                 head: ParamStore | None = None):
        self.spec = spec
        self.backbone = backbone if backbone is not None else init_params(spec.backbone_shapes, rng)
        self.head = head if head is not None else init_params(spec.head_shapes, rng)
        self.opt_backbone = OptState.for_store(self.backbone, lr=lr)
        self.opt_head = OptState.for_store(self.head, lr=lr)
        self.target_backbone = self.backbone.copy()
        self.target_head = self.head.copy()
        self.update_count = 0

    def q(self, x):
        return forward(self.spec, self.backbone, self.head, x)

    def refresh_target(self):
        self.target_backbone = self.backbone.copy()
        self.target_head = self.head.copy()

    def apply_grads(self, gb, gh, target_interval: int | None = None):
        optimizer_step(self.backbone, gb, self.opt_backbone)
        optimizer_step(self.head, gh, self.opt_head)
        self.update_count += 1
        if target_interval and self.update_count % target_interval == 0:
            self.refresh_target()

    def clone(self, lr: float | None = None) -> "QNet":
        net = QNet(self.spec, backbone=self.backbone.copy(), head=self.head.copy(),
                   lr=lr if lr is not None else self.opt_backbone.lr)
        return net


@dataclass
class SlotPolicy:
    """One agent slot: a q-function (spec, backbone, head) plus an action mode."""

    spec: NetSpec
    backbone: ParamStore
    head: ParamStore
    mode: tuple = GREEDY

    def q(self, x):
        return forward(self.spec, self.backbone, self.head, x)

    def with_mode(self, mode) -> "SlotPolicy":
        return SlotPolicy(self.spec, self.backbone, self.head, mode)


def slot_for(net: QNet, mode=GREEDY) -> SlotPolicy:
    return SlotPolicy(net.spec, net.backbone, net.head, mode)


def stack_obs(history: deque, dim: int, k: int) -> np.ndarray:
    """Concatenate the last k observations, zero-padded at episode start."""
    out = np.zeros(dim * k)
    for j, o in enumerate(history):
        out[(k - len(history) + j) * dim: (k - len(history) + j + 1) * dim] = o
    return out


def rollout(env, slot_policies, rng: np.random.Generator, frame_stack: int = 1) -> Episode:
    """Play one full episode; per-agent net inputs are stacked last-k observations."""
    if len(slot_policies) != env.spec.n_agents:
        raise ValueError("need one slot policy per agent")
    seed = int(rng.integers(2 ** 63))
    ep_rng = np.random.default_rng(seed)
    state, obs = env.reset(ep_rng)
    hists = [deque([o], maxlen=frame_stack) for o in obs]
    transitions = []
    total = 0.0
    while not env.is_terminal(state):
        stacked = [stack_obs(hists[i], env.obs_dim, frame_stack)
                   for i in range(env.spec.n_agents)]
        actions = np.array([select_action(sp.q(stacked[i]), sp.mode, ep_rng)
                            for i, sp in enumerate(slot_policies)])
        state, res = env.step(state, actions, ep_rng)
        for i, o in enumerate(res.next_obs):
            hists[i].append(o)
        next_stacked = [stack_obs(hists[i], env.obs_dim, frame_stack)
                        for i in range(env.spec.n_agents)]
        transitions.append(Transition(stacked, actions, res.reward, next_stacked, res.done))
        total += res.reward
    return Episode(transitions=transitions, return_undiscounted=total, seed=seed)


def episodes_to_arrays(episodes, n_slots: int):
    """Flatten a batch of episodes into per-slot transition arrays."""
    obs = [[] for _ in range(n_slots)]
    nxt = [[] for _ in range(n_slots)]
    acts = [[] for _ in range(n_slots)]
    rew, done = [], []
    for ep in episodes:
        for tr in ep.transitions:
            for i in range(n_slots):
                obs[i].append(tr.obs[i])
                nxt[i].append(tr.next_obs[i])
                acts[i].append(tr.actions[i])
            rew.append(tr.reward)
            done.append(tr.done)
    return ([np.array(o) for o in obs], [np.array(a, dtype=int) for a in acts],
            np.array(rew), [np.array(x) for x in nxt], np.array(done, dtype=bool))


def td_gradients(slot_nets, episodes, gamma: float, reward_sign: float = 1.0):
    """TD loss over a batch plus parameter gradients for every distinct net.

    slot_nets: one QNet per agent slot (the same object may fill several
    slots; its gradients accumulate). Returns (loss, {id(net): (gb, gh)},
    joint_q values) with the joint Q recomputed as the exact per-slot sum.
    """
    if not episodes:
        raise ValueError("empty batch")
    n_slots = len(slot_nets)
    obs, acts, rew, nxt, done = episodes_to_arrays(episodes, n_slots)
    B = len(rew)
    chosen = np.zeros(B)
    caches = []
    for i, net in enumerate(slot_nets):
        Q, cache = forward_batch(net.spec, net.backbone, net.head, obs[i])
        caches.append((Q, cache))
        chosen += Q[np.arange(B), acts[i]]
    target_sum = np.zeros(B)
    for i, net in enumerate(slot_nets):
        Qt, _ = forward_batch(net.spec, net.target_backbone, net.target_head, nxt[i])
        target_sum += Qt.max(axis=1)
    y = reward_sign * rew + gamma * np.where(done, 0.0, target_sum)
    err = chosen - y
    loss = float(np.mean(err * err))
    grads = {}
    for i, net in enumerate(slot_nets):
        Q, cache = caches[i]
        up = np.zeros_like(Q)
        up[np.arange(B), acts[i]] = 2.0 * err / B
        gb, gh = backward_batch(net.spec, net.backbone, net.head, cache, up)
        key = id(net)
        if key in grads:
            grads[key][0].values += gb.values
            grads[key][1].values += gh.values
        else:
            grads[key] = [gb, gh]
    return loss, grads, chosen


def vdn_td_update(slot_nets, trainable, episodes, gamma: float,
                  reward_sign: float = 1.0, target_interval: int = 200):
    """One TD step: joint Q = sum of per-slot Qs, squared-error to the target,
    Adam step on every net in `trainable` (others held fixed)."""
    loss, grads, _ = td_gradients(slot_nets, episodes, gamma, reward_sign)
    seen = set()
    for net in trainable:
        if id(net) in seen:
            continue
        seen.add(id(net))
        gb, gh = grads[id(net)]
        net.apply_grads(gb, gh, target_interval)
    return loss


def empirical_return(env, slot_policies, n_episodes: int, rng: np.random.Generator,
                     frame_stack: int = 1):
    """Mean/std of undiscounted returns under greedy execution."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    greedy = [sp.with_mode(GREEDY) for sp in slot_policies]
    returns = [rollout(env, greedy, rng, frame_stack).return_undiscounted
               for _ in range(n_episodes)]
    r = np.array(returns)
    return float(r.mean()), float(r.std())


def epsilon_schedule(t: int, budget: int, start: float = 1.0, end: float = 0.05,
                     fraction: float = 0.5) -> float:
    """Linear start->end over the first `fraction` of the step budget."""
    ramp = max(1.0, fraction * budget)
    return max(end, start - (start - end) * (t / ramp))
