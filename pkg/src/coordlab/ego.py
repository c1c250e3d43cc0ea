"""Continually learned ego policy with a shared backbone and per-teammate heads.

The ego policy keeps one feature backbone shared across all heads. Against
each new teammate group it trains a fresh head jointly with the backbone,
pulling the backbone back toward snapshots taken after earlier heads so old
heads keep working. A head is kept only if it beats the best existing head
on the new teammates (resilient expansion). At test time the head is picked
by a round-robin evaluation against the actual teammates.

Alternative update rules for the same training stream double as baselines:
a single head with or without the backbone regularizer, a quadratic penalty
weighted by a squared-gradient sensitivity estimate, and rehearsal on
episodes retained from earlier teammates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evolution import FrozenNet
from .marl import (GREEDY, QNet, ReplayBuffer, SlotPolicy, empirical_return,
                   eps_greedy, epsilon_schedule, rollout, td_gradients)
from .nets import (NetSpec, ParamStore, init_params, load_checkpoint,
                   save_checkpoint)

EGO_MODES = ("multi_head", "random_head", "single_head", "finetune",
             "ewc", "clear")


def reg_loss(backbone: ParamStore, snapshots, p: float = 2.0):
    """Mean p-norm distance from the backbone to each snapshot, with gradient.

    Zero (value and subgradient) when there are no snapshots or the backbone
    coincides with them.
    """
    if p < 1.0:
        raise ValueError("norm order must be >= 1")
    grad = np.zeros_like(backbone.values)
    if not snapshots:
        return 0.0, grad
    value = 0.0
    for snap in snapshots:
        d = backbone.values - snap.values
        norm = float(np.sum(np.abs(d) ** p) ** (1.0 / p))
        value += norm
        if norm > 0.0:
            grad += np.sign(d) * np.abs(d) ** (p - 1.0) / norm ** (p - 1.0)
    m = len(snapshots)
    return value / m, grad / m


def expansion_decision(r_new: float, r_existing, lam: float = 0.0) -> bool:
    """Keep a freshly trained head only if it improves on the best existing
    head's return by a relative margin of at least lam."""
    if not r_existing:
        return True
    best = max(r_existing)
    if best <= 0.0:
        return True
    return (r_new - best) / best >= lam


class EgoPolicy:
    """Shared backbone, a list of frozen heads, and one snapshot per head."""

    def __init__(self, spec: NetSpec, rng, lr: float = 5e-4):
        self.spec = spec
        self.lr = lr
        self.backbone = init_params(spec.backbone_shapes, rng)
        self.heads = []
        self.snapshots = []
        self.head_meta = []
        # state for the alternative update rules
        self.fisher = None
        self.anchor = None
        self.rehearsal = []

    @property
    def n_heads(self):
        return len(self.heads)

    def head_slot(self, head_idx: int, mode=GREEDY) -> SlotPolicy:
        return SlotPolicy(self.spec, self.backbone, self.heads[head_idx], mode)

    def slots(self, head_idx: int, n_ego: int, mode=GREEDY):
        return [self.head_slot(head_idx, mode)] * n_ego


def round_robin_select(eval_fn, n_heads: int, episodes_per_head: int):
    """Evaluate heads in rotation, one episode at a time, tracking incremental
    means. Returns (best index, per-head means); ties go to the lowest index."""
    if n_heads < 1 or episodes_per_head < 1:
        raise ValueError("need at least one head and one episode")
    means = np.zeros(n_heads)
    for e in range(episodes_per_head):
        for h in range(n_heads):
            means[h] += (eval_fn(h) - means[h]) / (e + 1)
    return int(np.argmax(means)), means


def meta_select_head(ego: EgoPolicy, env, tm_slots, rng,
                     episodes_per_head: int = 4, frame_stack: int = 1):
    n_ego = env.spec.n_ego

    def eval_fn(h):
        return rollout(env, ego.slots(h, n_ego) + list(tm_slots), rng,
                       frame_stack).return_undiscounted

    return round_robin_select(eval_fn, ego.n_heads, episodes_per_head)


def continual_train(ego: EgoPolicy, env, group, cfg, rng, mode: str = "multi_head"):
    """Adapt the ego policy to one new teammate group for cfg.t_ego env steps.

    Episodes come from two sources in alternation: play with the actual
    (frozen) teammates, and play with a trainable copy of them that keeps
    learning alongside the ego. Both feed the ego's TD update with equal
    weight; the mode decides which forgetting countermeasure applies.
    Returns a summary dict.
    """
    if mode not in EGO_MODES:
        raise ValueError(f"unknown ego mode {mode!r}")
    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    expanding = mode in ("multi_head", "random_head")

    if expanding or not ego.heads:
        head = init_params(ego.spec.head_shapes, rng)
        if not expanding:
            ego.heads.append(head)
            ego.head_meta.append({"group_id": group.id})
    else:
        head = ego.heads[0]
    ego_net = QNet(ego.spec, backbone=ego.backbone, head=head, lr=ego.lr)
    mirror = group.tm.clone()
    tm_frozen = FrozenNet(group.tm.spec, group.tm.backbone, group.tm.head)
    tm_greedy = [SlotPolicy(group.tm.spec, group.tm.backbone, group.tm.head)] * n_tm
    xp_buf = ReplayBuffer(cfg.ego_buf, cfg.batch_size)
    sp_buf = ReplayBuffer(cfg.ego_buf, cfg.batch_size)
    nb = len(ego.backbone.values)

    t = 0
    losses = []
    while t < cfg.t_ego:
        eps = epsilon_schedule(t, cfg.t_ego, cfg.eps_start, cfg.eps_end,
                               cfg.ego_epsf)
        ego_slots = [SlotPolicy(ego.spec, ego.backbone, head, eps_greedy(eps))] * n_ego
        ep = rollout(env, ego_slots + tm_greedy, rng, cfg.frame_stack)
        xp_buf.add(ep)
        t += ep.length
        mir_slots = [SlotPolicy(mirror.spec, mirror.backbone, mirror.head,
                                eps_greedy(eps))] * n_tm
        ep = rollout(env, ego_slots + mir_slots, rng, cfg.frame_stack)
        sp_buf.add(ep)
        t += ep.length
        for _ in range(cfg.ego_upr):
            l1, g1, _ = td_gradients([ego_net] * n_ego + [tm_frozen] * n_tm,
                                     xp_buf.sample(rng), cfg.gamma)
            l2, g2, _ = td_gradients([ego_net] * n_ego + [mirror] * n_tm,
                                     sp_buf.sample(rng), cfg.gamma)
            gb = (g1[id(ego_net)][0].values + g2[id(ego_net)][0].values) / 2.0
            gh = (g1[id(ego_net)][1].values + g2[id(ego_net)][1].values) / 2.0
            if mode in ("multi_head", "random_head", "single_head"):
                _, rgrad = reg_loss(ego.backbone, ego.snapshots, cfg.reg_p)
                gb += cfg.alpha_reg * rgrad
            elif mode == "ewc" and ego.fisher is not None:
                theta = np.concatenate([ego.backbone.values, head.values])
                pen = cfg.ewc_mu * ego.fisher * (theta - ego.anchor)
                gb += pen[:nb]
                gh += pen[nb:]
            elif mode == "clear" and ego.rehearsal:
                past_tm, past_eps = ego.rehearsal[int(rng.integers(len(ego.rehearsal)))]
                k = min(cfg.batch_size, len(past_eps))
                idx = rng.choice(len(past_eps), size=k, replace=False)
                _, g3, _ = td_gradients([ego_net] * n_ego + [past_tm] * n_tm,
                                        [past_eps[i] for i in idx], cfg.gamma)
                gb = (gb + g3[id(ego_net)][0].values) / 2.0
                gh = (gh + g3[id(ego_net)][1].values) / 2.0
            ego_net.apply_grads(ParamStore(gb, ego.spec.backbone_shapes),
                                ParamStore(gh, ego.spec.head_shapes),
                                cfg.target_update_interval)
            mgb, mgh = g2[id(mirror)]
            mirror.apply_grads(mgb, mgh, cfg.target_update_interval)
            losses.append(l1 + l2)

    info = {"group_id": group.id, "steps": t, "mode": mode,
            "final_loss": losses[-1] if losses else None}

    if expanding:
        r_new, _ = empirical_return(
            env, [SlotPolicy(ego.spec, ego.backbone, head)] * n_ego + tm_greedy,
            cfg.expand_eval_episodes, rng, cfg.frame_stack)
        r_existing = []
        for h in range(ego.n_heads):
            r, _ = empirical_return(env, ego.slots(h, n_ego) + tm_greedy,
                                    cfg.expand_eval_episodes, rng, cfg.frame_stack)
            r_existing.append(r)
        keep = expansion_decision(r_new, r_existing, cfg.lam)
        if keep:
            ego.heads.append(head)
            ego.snapshots.append(ego.backbone.copy())
            ego.head_meta.append({"group_id": group.id})
        info.update(kept=keep, r_new=r_new, r_existing=r_existing)
    elif mode == "single_head":
        ego.snapshots.append(ego.backbone.copy())
        info["kept"] = False
    elif mode == "ewc":
        sq = None
        for ep in xp_buf.episodes:
            _, grads, _ = td_gradients([ego_net] * n_ego + [tm_frozen] * n_tm,
                                       [ep], cfg.gamma)
            gb_e, gh_e = grads[id(ego_net)]
            g = np.concatenate([gb_e.values, gh_e.values]) ** 2
            sq = g if sq is None else sq + g
        sq /= max(1, len(xp_buf))
        ego.fisher = sq if ego.fisher is None else ego.fisher + sq
        ego.anchor = np.concatenate([ego.backbone.values, head.values])
        info["kept"] = False
    elif mode == "clear":
        ego.rehearsal.append((tm_frozen, list(xp_buf.episodes)))
        info["kept"] = False
    else:
        info["kept"] = False
    return info


# --- checkpoint serialization -------------------------------------------------
#
# One JSON file holds the backbone, every head and snapshot, and the state of
# the alternative update rules. Rehearsal episodes are not persisted.

def save_ego(path, ego: EgoPolicy):
    stores = {"backbone": ego.backbone}
    for i, (h, s) in enumerate(zip(ego.heads, ego.snapshots)):
        stores[f"head_{i}"] = h
        stores[f"snapshot_{i}"] = s
    for i in range(len(ego.snapshots), len(ego.heads)):
        stores[f"head_{i}"] = ego.heads[i]
    extra = {"n_heads": ego.n_heads, "n_snapshots": len(ego.snapshots),
             "head_meta": ego.head_meta, "lr": ego.lr,
             "fisher": None if ego.fisher is None else ego.fisher.tolist(),
             "anchor": None if ego.anchor is None else ego.anchor.tolist()}
    save_checkpoint(path, ego.spec, stores, extra=extra)
    return path


def load_ego(path) -> EgoPolicy:
    spec, stores, extra = load_checkpoint(path)
    ego = EgoPolicy.__new__(EgoPolicy)
    ego.spec = spec
    ego.lr = float(extra["lr"])
    ego.backbone = stores["backbone"]
    ego.heads = [stores[f"head_{i}"] for i in range(int(extra["n_heads"]))]
    ego.snapshots = [stores[f"snapshot_{i}"]
                     for i in range(int(extra["n_snapshots"]))]
    ego.head_meta = extra["head_meta"]
    ego.fisher = None if extra["fisher"] is None else np.array(extra["fisher"])
    ego.anchor = None if extra["anchor"] is None else np.array(extra["anchor"])
    ego.rehearsal = []
    return ego
