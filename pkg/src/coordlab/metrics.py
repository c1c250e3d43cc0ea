"""Evaluation sets, continual-learning transfer metrics, cross-play matrices
and the rank-sum significance test."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .evolution import TeammateGroup, load_group
from .marl import GREEDY, empirical_return


@dataclass
class EvalEntry:
    run_id: str
    group_id: int
    group: TeammateGroup

    @property
    def label(self) -> str:
        return f"{self.run_id}/{self.group_id}"


def build_eval_set(artifact_dirs) -> list:
    """Union of the teammate archives under the given run directories,
    deduplicated by (run id, group id)."""
    entries = []
    seen = set()
    for d in artifact_dirs:
        manifest = os.path.join(d, "archive", "manifest.json")
        if not os.path.exists(manifest):
            raise FileNotFoundError(f"no archive manifest under {d!r}")
        with open(manifest) as f:
            obj = json.load(f)
        run_id = obj.get("run_id") or os.path.basename(os.path.normpath(d))
        for e in obj["entries"]:
            key = (run_id, e["group_id"])
            if key in seen:
                continue
            seen.add(key)
            group = load_group(os.path.join(d, "archive", e["file"]))
            entries.append(EvalEntry(run_id, e["group_id"], group))
    if not entries:
        raise ValueError("evaluation set is empty")
    return entries


def eval_set_from_artifacts(artifacts) -> list:
    """Same protocol for in-memory run artifacts (no directories needed)."""
    entries = []
    seen = set()
    for art in artifacts:
        for _, g in art.archive:
            key = (art.run_id, g.id)
            if key in seen:
                continue
            seen.add(key)
            entries.append(EvalEntry(art.run_id, g.id, g))
    if not entries:
        raise ValueError("evaluation set is empty")
    return entries


def evaluate_overall(ego, eval_set, env, cfg, rng, episodes_per_pair: int = 32,
                     ego_mode: str = "multi_head"):
    """Greedy returns of the ego against every evaluation-set entry, with the
    test-time head choice made per entry. Returns (per-entry rows, grand mean);
    rows are (label, mean, std)."""
    from .orchestrator import crossplay_return
    if episodes_per_pair < 1:
        raise ValueError("need at least one episode per pairing")
    rows = []
    for e in eval_set:
        mean, std = crossplay_return(ego, env, e.group, cfg, rng, ego_mode,
                                     n_episodes=episodes_per_pair)
        rows.append((e.label, mean, std))
    grand = float(np.mean([r[1] for r in rows]))
    return rows, grand


def anchor_rescale(grand_means: dict, anchor: str = "finetune") -> dict:
    """Express every method's grand mean relative to the anchor method's."""
    if anchor not in grand_means:
        raise KeyError(f"anchor method {anchor!r} missing")
    a = grand_means[anchor]
    if a == 0.0:
        raise ZeroDivisionError("anchor grand mean is zero")
    return {k: v / a for k, v in grand_means.items()}


@dataclass
class AlphaMatrix:
    """alpha[k][j]: return against group j after adapting to groups 0..k
    (lower-triangular, 0-indexed); alpha_tilde[j]: return of a freshly
    initialized ego adapted only to group j."""

    alpha: list
    alpha_tilde: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.alpha)

    def __post_init__(self):
        for k, row in enumerate(self.alpha):
            if len(row) < k + 1:
                raise ValueError(f"row {k} must measure groups 0..{k}")


def continual_metrics(matrix: AlphaMatrix):
    """Backward transfer: how much adapting to later groups changed earlier
    scores. Forward transfer: how much the accumulated policy beats a
    from-scratch ego on each new group (measured including the group just
    trained, matching the asymmetric definition). Returns (BWT, FWT); FWT is
    None when the from-scratch references were not recorded."""
    K = matrix.K
    if K < 2:
        raise ValueError("need at least two adaptation phases")
    a = matrix.alpha
    bwt = 0.0
    for k in range(2, K + 1):
        bwt += sum(a[k - 1][j - 1] - a[j - 1][j - 1]
                   for j in range(1, k)) / (k - 1)
    bwt /= K - 1
    if not matrix.alpha_tilde:
        return bwt, None
    at = matrix.alpha_tilde
    if len(at) < K:
        raise ValueError("need one from-scratch reference per phase")
    fwt = 0.0
    for k in range(2, K + 1):
        fwt += sum(a[j - 1][j - 1] - at[j - 1] for j in range(2, k + 1)) / (k - 1)
    fwt /= K - 1
    return bwt, fwt


def crossplay_matrix(groups, env, cfg, rng, n_eval: int | None = None):
    """values[i][j] = greedy return of group i's teammate slots paired with
    group j's complementary ego slots; the diagonal is self-play."""
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    n_ego = env.spec.n_ego
    n_tm = env.spec.n_agents - n_ego
    n_eval = n_eval or cfg.n_eval_select
    n = len(groups)
    values = np.zeros((n, n))
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            values[i, j], _ = empirical_return(
                env, gj.comp_slots(n_ego) + gi.tm_slots(n_tm), n_eval, rng,
                cfg.frame_stack)
    labels = [str(g.id) for g in groups]
    return values, labels


def offdiag_ratio(values: np.ndarray) -> float:
    """Mean off-diagonal over mean diagonal of a square return matrix."""
    n = len(values)
    diag = float(np.trace(values)) / n
    off = float(values.sum() - np.trace(values)) / (n * n - n)
    if abs(diag) <= 1e-12:
        return float("inf")
    return off / diag


def write_matrix_csv(path, labels, values):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + list(labels))
        for lab, row in zip(labels, values):
            w.writerow([lab] + [float(v) for v in row])


def _norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def wilcoxon_rank_sum(sample_a, sample_b):
    """Two-sided rank-sum test with normal approximation and tie correction.

    Returns (z statistic, p value, verdict) where the verdict is "~" when the
    samples are statistically indistinguishable at the 0.05 level and "!="
    otherwise. Identical samples give p = 1 by convention.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 3 or len(b) < 3:
        raise ValueError("both samples need at least 3 observations")
    n1, n2 = len(a), len(b)
    n = n1 + n2
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(n)
    sorted_vals = combined[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank for ties
        i = j + 1
    w = float(ranks[:n1].sum())
    mu = n1 * (n + 1) / 2.0
    tie_term = 0.0
    for v in np.unique(sorted_vals):
        t = int(np.sum(sorted_vals == v))
        tie_term += t ** 3 - t
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0.0:
        return 0.0, 1.0, "~"
    z = (w - mu) / math.sqrt(var)
    p = 2.0 * (1.0 - _norm_cdf(abs(z)))
    p = min(1.0, p)
    return z, p, ("!=" if p < 0.05 else "~")
