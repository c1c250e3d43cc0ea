"""Experiment configuration: one flat record, two budget profiles.

The "desk" profile is sized so a full run fits on a laptop CPU; "paper"
keeps the original large step budgets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .envs import ENV_NAMES

PROFILES = {
    "desk": dict(t_tm=20_000, t_ego=10_000, n_p=4, n_min=3, n_max=6),
    "paper": dict(t_tm=500_000, t_ego=125_000, n_p=4, n_min=4, n_max=10),
}


@dataclass
class MacopConfig:
    env: str = "lbf4"
    profile: str = "desk"
    seed: int = 0

    # outer loop
    n_p: int = 4
    n_min: int = 3
    n_max: int = 6
    t_tm: int = 20_000
    t_ego: int = 10_000
    pretrain_steps: int = 20_000
    xi: float = 0.5

    # objective weights
    alpha_div: float = 0.1
    alpha_incom: float = 0.1
    alpha_reg: float = 10.0
    lam: float = 0.0
    reg_p: float = 2.0

    # learner
    hidden_dims: tuple = (64, 64)
    gamma: float = 0.99
    lr: float = 5e-4
    buffer_capacity: int = 512
    batch_size: int = 32
    target_update_interval: int = 200
    updates_per_round: int = 1
    frame_stack: int = 1
    softmax_temperature: float = 1.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5

    # ego-phase overrides (0 or negative -> use the shared learner value)
    ego_updates_per_round: int = 0
    ego_buffer_capacity: int = 0
    ego_eps_fraction: float = -1.0

    # evaluation episode counts
    n_eval_select: int = 8
    meta_episodes_per_head: int = 4
    expand_eval_episodes: int = 8
    test_episodes: int = 32
    alpha_eval_episodes: int = 8
    record_alpha: bool = False
    record_alpha_tilde: bool = False

    # baselines
    baseline_pop_size: int = 6
    baseline_pop_budget: int = 0   # 0 -> 3 * t_tm
    baseline_ego_budget: int = 0   # 0 -> n_min * n_p * t_ego
    ewc_mu: float = 1.0

    # environment overrides
    horizon: int = 0               # 0 -> scenario default

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.env not in ENV_NAMES:
            raise ValueError(f"unknown env {self.env!r}; choose from {ENV_NAMES}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.n_min > self.n_max:
            raise ValueError("need n_min <= n_max")
        if min(self.t_tm, self.t_ego, self.pretrain_steps) <= 0:
            raise ValueError("step budgets must be positive")
        for name in ("alpha_div", "alpha_incom", "alpha_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_p < 1:
            raise ValueError("population size must be >= 1")

    @property
    def ego_upr(self) -> int:
        return self.ego_updates_per_round if self.ego_updates_per_round > 0 \
            else self.updates_per_round

    @property
    def ego_buf(self) -> int:
        return self.ego_buffer_capacity if self.ego_buffer_capacity > 0 \
            else self.buffer_capacity

    @property
    def ego_epsf(self) -> float:
        return self.ego_eps_fraction if self.ego_eps_fraction >= 0 \
            else self.eps_fraction

    @property
    def pop_budget(self) -> int:
        return self.baseline_pop_budget or 3 * self.t_tm

    @property
    def ego_budget(self) -> int:
        return self.baseline_ego_budget or self.n_min * self.n_p * self.t_ego

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def make(cls, env: str = "lbf4", profile: str = "desk", **overrides) -> "MacopConfig":
        kw = dict(PROFILES[profile], env=env, profile=profile)
        kw["pretrain_steps"] = kw["t_tm"]
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_dict(cls, obj: dict) -> "MacopConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = dict(PROFILES[obj.get("profile", "desk")])
        base["pretrain_steps"] = base["t_tm"]
        base.update(obj)
        return cls(**base)

    @classmethod
    def load(cls, path) -> "MacopConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
