"""Outer training loop, baselines, run artifacts and resumption.

A run alternates teammate-population evolution with ego continual learning
until the newest population is already well covered by the ego (stopping
ratio C) or the iteration cap is reached. Every group the ego trains with
is archived; per-iteration statistics stream to an append-only CSV. Runs
are bitwise deterministic given (config, seed) and resumable at iteration
granularity.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .config import MacopConfig
from .ego import (EGO_MODES, EgoPolicy, continual_train, load_ego,
                  meta_select_head, save_ego)
from .envs import default_spec, make_env
from .evolution import (FrozenNet, IdGen, Population, TeammateGroup,
                        init_population, load_group, make_group_spec, mutate,
                        new_population, save_group, select, train_population)
from .marl import (GREEDY, QNet, ReplayBuffer, SlotPolicy, empirical_return,
                   eps_greedy, epsilon_schedule, rollout, td_gradients)
from .nets import init_params

LOG_COLUMNS = ("iteration", "member_id", "sp_mean", "sp_std", "xp_mean",
               "xp_std", "C", "head_count", "archive_size", "wall_seconds")

BASELINE_KINDS = ("fcp", "trajedi", "lipo", "finetune", "single_head",
                  "random_head", "ewc", "clear", "macop_no_incom",
                  "macop_no_div", "macop_no_incom_div", "macop_no_reg")


def make_run_env(cfg: MacopConfig):
    if cfg.horizon:
        return make_env(default_spec(cfg.env, horizon=cfg.horizon))
    return make_env(cfg.env)


def pick_head(ego: EgoPolicy, env, tm_slots, cfg, rng, ego_mode: str) -> int:
    """Test-time head choice: uniform for the random-head variant, otherwise
    round-robin evaluation against the given teammates."""
    if ego_mode == "random_head":
        return int(rng.integers(ego.n_heads))
    best, _ = meta_select_head(ego, env, tm_slots, rng,
                               cfg.meta_episodes_per_head, cfg.frame_stack)
    return best


def crossplay_return(ego, env, group, cfg, rng, ego_mode="multi_head",
                     n_episodes=None):
    """Greedy return of the ego (head chosen per testing protocol) with the
    group's teammate slots."""
    n_tm = env.spec.n_agents - env.spec.n_ego
    tm_slots = group.tm_slots(n_tm)
    h = pick_head(ego, env, tm_slots, cfg, rng, ego_mode)
    return empirical_return(env, ego.slots(h, env.spec.n_ego) + tm_slots,
                            n_episodes or cfg.n_eval_select, rng,
                            cfg.frame_stack)


def stopping_criterion(ego: EgoPolicy, population: Population, env, cfg, rng,
                       ego_mode: str = "multi_head"):
    """C = (min over members of ego cross-play return) / (mean self-play
    return). Returns (C, per-member stats). A near-zero denominator yields a
    +inf sentinel with a warning."""
    if not population.members:
        raise ValueError("empty population")
    stats = {}
    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    for g in population.members:
        sp_m, sp_s = empirical_return(env, g.comp_slots(n_ego) + g.tm_slots(n_tm),
                                      cfg.n_eval_select, rng, cfg.frame_stack)
        if ego.n_heads:
            xp_m, xp_s = crossplay_return(ego, env, g, cfg, rng, ego_mode)
        else:
            xp_m, xp_s = 0.0, 0.0
        stats[g.id] = (sp_m, sp_s, xp_m, xp_s)
    sp_mean = float(np.mean([s[0] for s in stats.values()]))
    min_xp = float(min(s[2] for s in stats.values()))
    if sp_mean <= 1e-9:
        warnings.warn("mean self-play return is ~0; stopping ratio undefined, "
                      "using +inf sentinel")
        return float("inf"), stats
    return min_xp / sp_mean, stats


@dataclass
class RunArtifacts:
    cfg: MacopConfig
    out_dir: str | None
    ego: EgoPolicy
    population: Population
    archive: list = field(default_factory=list)   # (iteration, TeammateGroup)
    log_rows: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    alpha_tilde: list = field(default_factory=list)
    iterations: int = 0
    stopped_early: bool = False
    run_id: str = ""


def _append_log(art: RunArtifacts, rows):
    art.log_rows.extend(rows)
    if art.out_dir:
        path = os.path.join(art.out_dir, "log.csv")
        new = not os.path.exists(path)
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(LOG_COLUMNS)
            for r in rows:
                w.writerow([r[c] for c in LOG_COLUMNS])


def _archive_group(art: RunArtifacts, iteration: int, group: TeammateGroup):
    art.archive.append((iteration, group))
    if art.out_dir:
        adir = os.path.join(art.out_dir, "archive")
        os.makedirs(adir, exist_ok=True)
        entry = len(art.archive) - 1
        path = save_group(adir, group)
        base = f"entry_{entry:04d}_group_{group.id}.json"
        os.replace(path, os.path.join(adir, base))
        manifest = os.path.join(adir, "manifest.json")
        entries = []
        if os.path.exists(manifest):
            with open(manifest) as f:
                entries = json.load(f)["entries"]
        entries.append({"entry": entry, "iteration": iteration,
                        "group_id": group.id, "file": base,
                        "lineage": list(group.lineage)})
        with open(manifest, "w") as f:
            json.dump({"run_id": art.run_id, "entries": entries}, f, indent=2)


def _alpha_value(ego, env, group, cfg, rng, ego_mode):
    mean, _ = crossplay_return(ego, env, group, cfg, rng, ego_mode,
                               n_episodes=cfg.alpha_eval_episodes)
    return mean


def _record_alpha_row(art: RunArtifacts, env, cfg, rng, ego_mode):
    row = [_alpha_value(art.ego, env, g, cfg, rng, ego_mode)
           for _, g in art.archive]
    art.alpha.append(row)
    if cfg.record_alpha_tilde:
        fresh = EgoPolicy(make_group_spec(env, cfg), rng, lr=cfg.lr)
        continual_train(fresh, env, art.archive[-1][1], cfg, rng)
        art.alpha_tilde.append(
            _alpha_value(fresh, env, art.archive[-1][1], cfg, rng, "multi_head"))


def _save_state(art: RunArtifacts, rng, id_gen, ego_mode):
    if not art.out_dir:
        return
    pdir = os.path.join(art.out_dir, "population")
    os.makedirs(pdir, exist_ok=True)
    for old in os.listdir(pdir):
        os.remove(os.path.join(pdir, old))
    for g in art.population.members:
        save_group(pdir, g)
    edir = os.path.join(art.out_dir, "ego")
    os.makedirs(edir, exist_ok=True)
    save_ego(os.path.join(edir, "ego.json"), art.ego)
    state = {
        "iteration": art.iterations,
        "stopped_early": art.stopped_early,
        "ego_mode": ego_mode,
        "rng_state": rng.bit_generator.state,
        "next_id": id_gen.next_id,
        "generation": art.population.generation,
        "population_ids": art.population.ids(),
        "alpha": art.alpha,
        "alpha_tilde": art.alpha_tilde,
        "log_rows": art.log_rows,
        "run_id": art.run_id,
    }
    with open(os.path.join(art.out_dir, "state.json"), "w") as f:
        json.dump(state, f)


def macop_train(cfg: MacopConfig, out_dir: str | None = None,
                ego_mode: str = "multi_head", _resume=None) -> RunArtifacts:
    """Full run of the evolution/continual-learning loop.

    Per iteration: build the next population (the first iteration reuses the
    pretrained one, later ones mutate + select); once at least n_min
    iterations have trained, stop if the ego already covers the new
    population (C >= xi) before adapting to it; otherwise adapt the ego to
    every member in population order and archive them all.
    """
    if ego_mode not in EGO_MODES:
        raise ValueError(f"unknown ego mode {ego_mode!r}")
    env = make_run_env(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cfg.save(os.path.join(out_dir, "config.json"))
    if _resume is None:
        rng = np.random.default_rng(cfg.seed)
        id_gen = IdGen()
        pop = init_population(env, cfg, rng, id_gen)
        ego = EgoPolicy(make_group_spec(env, cfg), rng, lr=cfg.lr)
        art = RunArtifacts(cfg, out_dir, ego, pop,
                           run_id=f"{ego_mode}_{cfg.env}_s{cfg.seed}")
        start_iter = 0
    else:
        rng, id_gen, art = _resume
        env = make_run_env(cfg)
        ego, pop = art.ego, art.population
        start_iter = art.iterations
        if art.stopped_early:
            return art

    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    for k in range(start_iter + 1, cfg.n_max + 1):
        wall_start = time.perf_counter()
        if k > 1:
            head_for = {}
            if ego.n_heads:
                for parent in pop.members:
                    head_for[parent.id] = pick_head(
                        ego, env, parent.tm_slots(n_tm), cfg, rng, ego_mode)

            def partner_fn(g, _h=head_for):
                return ego.slots(_h[g.lineage[-1]], n_ego)

            fn = partner_fn if ego.n_heads else None
            offspring = mutate(pop, env, cfg, rng, id_gen, partner_slots_fn=fn)
            if ego.n_heads:
                def ego_slots_for(g):
                    h = pick_head(ego, env, g.tm_slots(n_tm), cfg, rng, ego_mode)
                    return ego.slots(h, n_ego)
                pop = select(pop, offspring, env, cfg, rng, ego_slots_for)
            else:
                pop = select(pop, offspring, env, cfg, rng,
                             lambda g: g.comp_slots(n_ego))
            art.population = pop
        if k >= cfg.n_min and ego.n_heads:
            c_pre, _ = stopping_criterion(ego, pop, env, cfg, rng, ego_mode)
            if c_pre >= cfg.xi:
                art.stopped_early = True
                _save_state(art, rng, id_gen, ego_mode)
                break
        for g in pop.members:
            continual_train(ego, env, g, cfg, rng, mode=ego_mode)
            _archive_group(art, k, g)
            if cfg.record_alpha:
                _record_alpha_row(art, env, cfg, rng, ego_mode)
        art.iterations = k
        c_post, stats = stopping_criterion(ego, pop, env, cfg, rng, ego_mode)
        wall = time.perf_counter() - wall_start
        rows = [{"iteration": k, "member_id": g.id,
                 "sp_mean": stats[g.id][0], "sp_std": stats[g.id][1],
                 "xp_mean": stats[g.id][2], "xp_std": stats[g.id][3],
                 "C": c_post, "head_count": ego.n_heads,
                 "archive_size": len(art.archive), "wall_seconds": wall}
                for g in pop.members]
        _append_log(art, rows)
        _save_state(art, rng, id_gen, ego_mode)
    if art.out_dir and cfg.record_alpha:
        with open(os.path.join(art.out_dir, "alpha.json"), "w") as f:
            json.dump({"alpha": art.alpha, "alpha_tilde": art.alpha_tilde}, f)
    return art


def resume(out_dir: str) -> RunArtifacts:
    """Continue an interrupted run from its last completed iteration."""
    cfg = MacopConfig.load(os.path.join(out_dir, "config.json"))
    with open(os.path.join(out_dir, "state.json")) as f:
        state = json.load(f)
    rng = np.random.default_rng(cfg.seed)
    rng.bit_generator.state = state["rng_state"]
    id_gen = IdGen(state["next_id"])
    ego = load_ego(os.path.join(out_dir, "ego", "ego.json"))
    pdir = os.path.join(out_dir, "population")
    members = {g.id: g for g in
               (load_group(os.path.join(pdir, name), lr=cfg.lr,
                           buffer_capacity=cfg.buffer_capacity,
                           batch_size=cfg.batch_size)
                for name in sorted(os.listdir(pdir)))}
    pop = Population([members[i] for i in state["population_ids"]],
                     generation=state["generation"])
    archive = []
    manifest = os.path.join(out_dir, "archive", "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as f:
            for e in json.load(f)["entries"]:
                g = load_group(os.path.join(out_dir, "archive", e["file"]),
                               lr=cfg.lr)
                archive.append((e["iteration"], g))
    art = RunArtifacts(cfg, out_dir, ego, pop, archive=archive,
                       log_rows=state["log_rows"], alpha=state["alpha"],
                       alpha_tilde=state["alpha_tilde"],
                       iterations=state["iteration"],
                       stopped_early=state["stopped_early"],
                       run_id=state["run_id"])
    return macop_train(cfg, out_dir, ego_mode=state["ego_mode"],
                       _resume=(rng, id_gen, art))


def train_on_sequence(cfg: MacopConfig, env, groups, rng,
                      ego_mode: str = "multi_head",
                      record_alpha_tilde: bool = False):
    """Adapt a fresh ego to a fixed teammate sequence, recording the matrix of
    post-phase returns against every earlier group (and optionally the
    single-task reference returns). Returns (ego, alpha, alpha_tilde)."""
    ego = EgoPolicy(make_group_spec(env, cfg), rng, lr=cfg.lr)
    alpha, alpha_tilde = [], []
    for k, g in enumerate(groups):
        continual_train(ego, env, g, cfg, rng, mode=ego_mode)
        alpha.append([_alpha_value(ego, env, gj, cfg, rng, ego_mode)
                      for gj in groups[:k + 1]])
        if record_alpha_tilde:
            fresh = EgoPolicy(make_group_spec(env, cfg), rng, lr=cfg.lr)
            continual_train(fresh, env, g, cfg, rng)
            alpha_tilde.append(_alpha_value(fresh, env, g, cfg, rng, "multi_head"))
    return ego, alpha, alpha_tilde


def _best_response_ego(env, pop: Population, cfg, rng, budget: int) -> EgoPolicy:
    """Single-head ego trained against uniformly sampled population members."""
    ego = EgoPolicy(make_group_spec(env, cfg), rng, lr=cfg.lr)
    ego.heads.append(init_params(ego.spec.head_shapes, rng))
    ego.head_meta.append({"group_id": None})
    head = ego.heads[0]
    ego_net = QNet(ego.spec, backbone=ego.backbone, head=head, lr=ego.lr)
    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    bufs = {g.id: ReplayBuffer(cfg.ego_buf, cfg.batch_size)
            for g in pop.members}
    frozen = {g.id: FrozenNet(g.tm.spec, g.tm.backbone, g.tm.head)
              for g in pop.members}
    t = 0
    while t < budget:
        g = pop.members[int(rng.integers(len(pop.members)))]
        eps = epsilon_schedule(t, budget, cfg.eps_start, cfg.eps_end,
                               cfg.ego_epsf)
        slots = [SlotPolicy(ego.spec, ego.backbone, head, eps_greedy(eps))] * n_ego
        ep = rollout(env, slots + g.tm_slots(n_tm), rng, cfg.frame_stack)
        bufs[g.id].add(ep)
        t += ep.length
        for _ in range(cfg.ego_upr):
            _, grads, _ = td_gradients(
                [ego_net] * n_ego + [frozen[g.id]] * n_tm,
                bufs[g.id].sample(rng), cfg.gamma)
            gb, gh = grads[id(ego_net)]
            ego_net.apply_grads(gb, gh, cfg.target_update_interval)
    return ego


def run_baseline(kind: str, cfg: MacopConfig, out_dir: str | None = None) -> RunArtifacts:
    """Train one of the comparison methods end to end."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    if kind in ("finetune", "single_head", "random_head", "ewc", "clear"):
        return macop_train(cfg, out_dir, ego_mode=kind)
    if kind.startswith("macop_no"):
        zeroed = {"macop_no_incom": {"alpha_incom": 0.0},
                  "macop_no_div": {"alpha_div": 0.0},
                  "macop_no_incom_div": {"alpha_incom": 0.0, "alpha_div": 0.0},
                  "macop_no_reg": {"alpha_reg": 0.0}}[kind]
        return macop_train(replace(cfg, **zeroed), out_dir, ego_mode="multi_head")

    # two-stage methods: pretrain a fixed population, then one best-response ego
    env = make_run_env(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cfg.save(os.path.join(out_dir, "config.json"))
    rng = np.random.default_rng(cfg.seed)
    id_gen = IdGen()
    pop_cfg = replace(cfg, n_p=cfg.baseline_pop_size)
    pop = new_population(env, pop_cfg, rng, id_gen)
    per_group = max(1, cfg.pop_budget // cfg.baseline_pop_size)
    n_ego = env.spec.n_ego

    if kind == "fcp":
        train_population(env, pop, pop_cfg, rng, per_group,
                         alpha_incom=0.0, alpha_div=0.0)
    elif kind == "trajedi":
        train_population(env, pop, pop_cfg, rng, per_group, alpha_incom=0.0)
    elif kind == "lipo":
        def random_partner(g):
            others = [o for o in pop.members if o.id != g.id]
            o = others[int(rng.integers(len(others)))] if others else g
            return o.tm_slots(n_ego)
        train_population(env, pop, pop_cfg, rng, per_group,
                         partner_slots_fn=random_partner, alpha_div=0.0)

    ego = _best_response_ego(env, pop, cfg, rng, cfg.ego_budget)
    art = RunArtifacts(cfg, out_dir, ego, pop,
                       run_id=f"{kind}_{cfg.env}_s{cfg.seed}")
    wall_start = time.perf_counter()
    c, stats = stopping_criterion(ego, pop, env, cfg, rng, "multi_head")
    for g in pop.members:
        _archive_group(art, 1, g)
    art.iterations = 1
    art.stopped_early = True  # single-shot method: resume must not iterate
    wall = time.perf_counter() - wall_start
    _append_log(art, [{"iteration": 1, "member_id": g.id,
                       "sp_mean": stats[g.id][0], "sp_std": stats[g.id][1],
                       "xp_mean": stats[g.id][2], "xp_std": stats[g.id][3],
                       "C": c, "head_count": ego.n_heads,
                       "archive_size": len(art.archive), "wall_seconds": wall}
                      for g in pop.members])
    _save_state(art, rng, id_gen, "single_head")
    return art
