"""Evolving a population of teammate groups.

Each population member is a teammate group: one shared teammate net for the
uncontrolled agent slots plus a complementary ego net that fills the
controlled slots during the group's own self-play. Training optimizes
self-play TD, an action-distribution diversity bonus across the population,
and an incompatibility term that pushes returns down when the real ego
policy fills the controlled slots. Generations alternate mutation (clone +
train offspring) with selection over the combined parent/offspring pool.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .envs import N_ACTIONS
from .marl import (GREEDY, QNet, ReplayBuffer, SlotPolicy, empirical_return,
                   eps_greedy, episodes_to_arrays, epsilon_schedule, rollout,
                   slot_for, softmax_probs, td_gradients)
from .nets import (NetSpec, backward_batch, forward, forward_batch,
                   load_checkpoint, save_checkpoint)


class IdGen:
    """Monotone id allocator so removed ids are never reused."""

    def __init__(self, start: int = 0):
        self.next_id = start

    def take(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i


class FrozenNet:
    """Read-only q-net view usable as a (non-trainable) TD slot: the target
    network is the network itself."""

    def __init__(self, spec, backbone, head):
        self.spec = spec
        self.backbone = backbone
        self.head = head
        self.target_backbone = backbone
        self.target_head = head


class TeammateGroup:
    """One population member: teammate net, complementary ego net, buffers."""

    def __init__(self, gid: int, spec: NetSpec, rng=None, lr: float = 5e-4,
                 lineage=(), buffer_capacity: int = 512, batch_size: int = 32,
                 tm: QNet | None = None, comp_ego: QNet | None = None):
        self.id = gid
        self.lineage = tuple(lineage)
        self.spec = spec
        self.tm = tm if tm is not None else QNet(spec, rng, lr)
        self.comp_ego = comp_ego if comp_ego is not None else QNet(spec, rng, lr)
        self.sp_buffer = ReplayBuffer(buffer_capacity, batch_size)
        self.xp_buffer = ReplayBuffer(buffer_capacity, batch_size)
        self.steps = 0
        self.last_partner_slots = None
        self.sp_return = None
        self.xp_return = None

    def clone(self, gid: int) -> "TeammateGroup":
        """Offspring: copied parameters, fresh id, optimizer state and buffers."""
        return TeammateGroup(
            gid, self.spec, lineage=self.lineage + (self.id,),
            buffer_capacity=self.sp_buffer.episodes.maxlen,
            batch_size=self.sp_buffer.batch_size,
            tm=self.tm.clone(), comp_ego=self.comp_ego.clone())

    def tm_slots(self, n_tm: int, mode=GREEDY):
        return [slot_for(self.tm, mode)] * n_tm

    def comp_slots(self, n_ego: int, mode=GREEDY):
        return [slot_for(self.comp_ego, mode)] * n_ego


@dataclass
class Population:
    members: list
    generation: int = 0

    def __len__(self):
        return len(self.members)

    def ids(self):
        return [g.id for g in self.members]


def make_group_spec(env, cfg) -> NetSpec:
    return NetSpec(env.obs_dim * cfg.frame_stack, cfg.hidden_dims, N_ACTIONS)


def new_population(env, cfg, rng, id_gen: IdGen) -> Population:
    spec = make_group_spec(env, cfg)
    members = [TeammateGroup(id_gen.take(), spec, rng, lr=cfg.lr,
                             buffer_capacity=cfg.buffer_capacity,
                             batch_size=cfg.batch_size)
               for _ in range(cfg.n_p)]
    return Population(members, generation=0)


# --- diversity objective ------------------------------------------------------

def jsd_diversity(per_group_q, temperature: float = 1.0):
    """Mean (over observations) generalized Jensen-Shannon divergence of the
    groups' softmax action distributions, with exact q-value gradients.

    per_group_q: list of [B, A] arrays, one per group, over the same
    observation batch. Returns (value, per-group [B, A] gradient arrays).
    """
    n = len(per_group_q)
    if n < 1:
        raise ValueError("need at least one group")
    B = per_group_q[0].shape[0]
    probs = [softmax_probs(np.asarray(q, dtype=np.float64), temperature)
             for q in per_group_q]
    pbar = np.mean(probs, axis=0)
    # mask entries where a group's probability underflowed to exactly zero:
    # their contribution to both value and gradient vanishes in the limit
    logs = [np.log(np.where(p > 0.0, p, 1.0)) for p in probs]
    logbar = np.log(np.where(pbar > 0.0, pbar, 1.0))
    value = 0.0
    grads = []
    for p, lg in zip(probs, logs):
        diff = np.where(p > 0.0, lg - logbar, 0.0)
        value += float(np.sum(p * diff))
        g = diff / (n * B)
        inner = np.sum(g * p, axis=1, keepdims=True)
        grads.append(p * (g - inner) / temperature)
    return value / (n * B), grads


def teammate_obs_matrix(episodes, n_slots: int, n_ego: int) -> np.ndarray:
    """All teammate-slot observations in a batch, stacked into one [N, D] array."""
    obs, _, _, _, _ = episodes_to_arrays(episodes, n_slots)
    return np.concatenate(obs[n_ego:], axis=0)


# --- training loop ------------------------------------------------------------

def update_group(env, pop: Population, idx: int, cfg, rng,
                 alpha_incom: float, alpha_div: float, use_xp: bool):
    """One gradient step for population member `idx`: self-play TD for both
    nets, plus incompatibility and diversity terms on the teammate net."""
    group = pop.members[idx]
    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    sp_batch = group.sp_buffer.sample(rng)
    sp_nets = [group.comp_ego] * n_ego + [group.tm] * n_tm
    loss_sp, grads, _ = td_gradients(sp_nets, sp_batch, cfg.gamma)
    tm_gb, tm_gh = grads[id(group.tm)]
    comp_gb, comp_gh = grads[id(group.comp_ego)]

    loss_xp = 0.0
    if use_xp and len(group.xp_buffer) > 0:
        xp_batch = group.xp_buffer.sample(rng)
        partner_nets = [FrozenNet(sp.spec, sp.backbone, sp.head)
                        for sp in group.last_partner_slots]
        xp_nets = partner_nets + [group.tm] * n_tm
        loss_xp, xp_grads, _ = td_gradients(xp_nets, xp_batch, cfg.gamma,
                                            reward_sign=-1.0)
        gb, gh = xp_grads[id(group.tm)]
        tm_gb.values += alpha_incom * gb.values
        tm_gh.values += alpha_incom * gh.values

    div = 0.0
    if alpha_div > 0.0 and len(pop.members) > 1:
        X = teammate_obs_matrix(sp_batch, env.spec.n_agents, n_ego)
        qs, caches = [], []
        for g in pop.members:
            Q, cache = forward_batch(g.spec, g.tm.backbone, g.tm.head, X)
            qs.append(Q)
            caches.append(cache)
        div, dqs = jsd_diversity(qs, cfg.softmax_temperature)
        gb, gh = backward_batch(group.spec, group.tm.backbone, group.tm.head,
                                caches[idx], dqs[idx])
        tm_gb.values -= alpha_div * gb.values
        tm_gh.values -= alpha_div * gh.values

    group.tm.apply_grads(tm_gb, tm_gh, cfg.target_update_interval)
    group.comp_ego.apply_grads(comp_gb, comp_gh, cfg.target_update_interval)
    return {"sp": loss_sp, "xp": loss_xp, "div": div}


def train_population(env, pop: Population, cfg, rng, budget: int,
                     partner_slots_fn=None, alpha_incom: float | None = None,
                     alpha_div: float | None = None):
    """Train every member for `budget` environment steps (counted per group).

    partner_slots_fn(group) -> list of controlled-slot policies used for
    compatibility rollouts, or None to train on self-play only. The
    incompatibility weight applies to those rollouts' TD term.
    """
    if alpha_incom is None:
        alpha_incom = cfg.alpha_incom
    if alpha_div is None:
        alpha_div = cfg.alpha_div
    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    consumed = {g.id: 0 for g in pop.members}
    while True:
        active = [i for i, g in enumerate(pop.members) if consumed[g.id] < budget]
        if not active:
            break
        for i in active:
            group = pop.members[i]
            eps = epsilon_schedule(consumed[group.id], budget, cfg.eps_start,
                                   cfg.eps_end, cfg.eps_fraction)
            mode = eps_greedy(eps)
            if partner_slots_fn is not None:
                partners = partner_slots_fn(group)
                group.last_partner_slots = partners
                ep = rollout(env, partners + group.tm_slots(n_tm, mode), rng,
                             cfg.frame_stack)
                group.xp_buffer.add(ep)
                consumed[group.id] += ep.length
            ep = rollout(env, group.comp_slots(n_ego, mode)
                         + group.tm_slots(n_tm, mode), rng, cfg.frame_stack)
            group.sp_buffer.add(ep)
            consumed[group.id] += ep.length
            for _ in range(cfg.updates_per_round):
                update_group(env, pop, i, cfg, rng, alpha_incom, alpha_div,
                             use_xp=partner_slots_fn is not None)
    for g in pop.members:
        g.steps += consumed[g.id]


def init_population(env, cfg, rng, id_gen: IdGen) -> Population:
    """Fresh population pretrained on self-play plus diversity only (there is
    no ego policy yet, so the incompatibility term is off)."""
    pop = new_population(env, cfg, rng, id_gen)
    train_population(env, pop, cfg, rng, cfg.pretrain_steps,
                     partner_slots_fn=None, alpha_incom=0.0)
    return pop


def mutate(pop: Population, env, cfg, rng, id_gen: IdGen,
           partner_slots_fn=None, alpha_incom=None, alpha_div=None) -> Population:
    """Clone every member into an offspring with a fresh id and buffers, then
    train the offspring population. Parents are left untouched."""
    offspring = Population([g.clone(id_gen.take()) for g in pop.members],
                           generation=pop.generation)
    train_population(env, offspring, cfg, rng, cfg.t_tm,
                     partner_slots_fn=partner_slots_fn,
                     alpha_incom=alpha_incom, alpha_div=alpha_div)
    return offspring


# --- selection ----------------------------------------------------------------

def evaluate_group(env, group: TeammateGroup, cfg, rng, ego_slots=None):
    """Greedy-execution returns: self-play with the complementary ego net and,
    if ego slots are given, cross-play with the real ego policy. `ego_slots`
    may be a list of slot policies or a callable group -> slot policies."""
    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    if callable(ego_slots):
        ego_slots = ego_slots(group)
    group.sp_return, _ = empirical_return(
        env, group.comp_slots(n_ego) + group.tm_slots(n_tm),
        cfg.n_eval_select, rng, cfg.frame_stack)
    if ego_slots is not None:
        group.xp_return, _ = empirical_return(
            env, list(ego_slots) + group.tm_slots(n_tm),
            cfg.n_eval_select, rng, cfg.frame_stack)
    return group.sp_return, group.xp_return


def select_by_returns(ids, sp_returns, xp_returns, n_p: int):
    """Pure selection rule over a pool of 2*n_p candidates.

    First remove the floor(n_p/2) candidates with the lowest self-play
    return, then the ceil(n_p/2) remaining candidates with the highest
    cross-play return. Ties remove the lower id first. Returns
    (kept_ids, removed_ids) with kept ids in ascending order.
    """
    ids = list(ids)
    if len(ids) != 2 * n_p or len(set(ids)) != len(ids):
        raise ValueError("selection pool must hold 2*n_p distinct ids")
    sp = dict(zip(ids, sp_returns))
    xp = dict(zip(ids, xp_returns))
    removed = sorted(ids, key=lambda i: (sp[i], i))[: n_p // 2]
    rest = [i for i in ids if i not in removed]
    removed += sorted(rest, key=lambda i: (-xp[i], i))[: n_p - n_p // 2]
    kept = sorted(i for i in ids if i not in removed)
    return kept, removed


def select(parents: Population, offspring: Population, env, cfg, rng,
           ego_slots) -> Population:
    """Evaluate the combined pool and keep n_p members by the selection rule."""
    pool = parents.members + offspring.members
    for g in pool:
        evaluate_group(env, g, cfg, rng, ego_slots)
    kept, _ = select_by_returns([g.id for g in pool],
                                [g.sp_return for g in pool],
                                [g.xp_return for g in pool], cfg.n_p)
    by_id = {g.id: g for g in pool}
    return Population([by_id[i] for i in kept], generation=parents.generation + 1)


# --- dissimilarity ------------------------------------------------------------

def trajectory_log_probs(q_fn, episodes, slots, temperature: float = 1.0):
    """Per-episode total log-probability of the recorded teammate-slot actions
    under the softmax policy of `q_fn`."""
    out = []
    for ep in episodes:
        lp = 0.0
        for tr in ep.transitions:
            for s in slots:
                z = np.asarray(q_fn(tr.obs[s]), dtype=np.float64) / temperature
                z = z - z.max()
                lp += float(z[tr.actions[s]] - np.log(np.exp(z).sum()))
        out.append(lp)
    return np.array(out)


def dissimilarity_from_logs(logs_i, logs_j) -> float:
    """max over trajectories of |1 - P_i(traj)/P_j(traj)|, in log space.

    A trajectory with zero probability under policy j but positive under
    policy i makes the ratio unbounded: returns +inf.
    """
    logs_i = np.asarray(logs_i, dtype=np.float64)
    logs_j = np.asarray(logs_j, dtype=np.float64)
    if logs_i.shape != logs_j.shape or logs_i.size == 0:
        raise ValueError("need matching non-empty log-probability arrays")
    worst = 0.0
    for li, lj in zip(logs_i, logs_j):
        if np.isneginf(lj):
            if np.isneginf(li):
                continue
            return float("inf")
        worst = max(worst, abs(1.0 - float(np.exp(li - lj))))
    return worst


def dissimilarity(group_i: TeammateGroup, group_j: TeammateGroup, episodes,
                  n_ego: int, n_agents: int, temperature: float = 1.0) -> float:
    slots = range(n_ego, n_agents)
    return dissimilarity_from_logs(
        trajectory_log_probs(group_i.tm.q, episodes, slots, temperature),
        trajectory_log_probs(group_j.tm.q, episodes, slots, temperature))


# --- archive serialization ----------------------------------------------------

def save_group(directory, group: TeammateGroup):
    path = os.path.join(directory, f"group_{group.id}.json")
    save_checkpoint(path, group.spec,
                    {"tm_backbone": group.tm.backbone,
                     "tm_head": group.tm.head,
                     "comp_backbone": group.comp_ego.backbone,
                     "comp_head": group.comp_ego.head},
                    extra={"id": group.id, "lineage": list(group.lineage),
                           "steps": group.steps,
                           "sp_return": group.sp_return,
                           "xp_return": group.xp_return})
    return path


def load_group(path, lr: float = 5e-4, buffer_capacity: int = 512,
               batch_size: int = 32) -> TeammateGroup:
    spec, stores, extra = load_checkpoint(path)
    tm = QNet(spec, backbone=stores["tm_backbone"], head=stores["tm_head"], lr=lr)
    comp = QNet(spec, backbone=stores["comp_backbone"], head=stores["comp_head"], lr=lr)
    group = TeammateGroup(int(extra["id"]), spec, lineage=tuple(extra["lineage"]),
                          buffer_capacity=buffer_capacity, batch_size=batch_size,
                          tm=tm, comp_ego=comp)
    group.steps = int(extra.get("steps", 0))
    group.sp_return = extra.get("sp_return")
    group.xp_return = extra.get("xp_return")
    return group
