"""Non-collaborative baseline: every user explores alone with its own reward.

Each user runs the empirical visitation explorer on its own copy of the
shared dynamics and sees its reward only at cells it has visited; unvisited
cells count as zero, as in the collaborative reconstruction.  At checkpoints
spaced by a factor ``sqrt(2)`` the user's plan on its estimated model and
observed rewards is scored against the DP oracle; the user's cost is the
first checkpoint at which it is ``epsilon``-optimal.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import rng as rngmod
from .instances import TabularInstance
from .mdp import backward_induction, deterministic_values
from .reports import RunReport, config_hash
from .reward_free import VisitationExplorer


@dataclass(frozen=True)
class BaselineConfig:
    epsilon: float = 0.05
    seed: int = 0
    first_checkpoint: int = 16
    max_episodes: int = 2_000_000


def checkpoints(first: int, last: int) -> list[int]:
    out, k = [], 0
    while True:
        c = int(round(first * math.sqrt(2) ** k))
        if c > last:
            break
        if not out or c > out[-1]:
            out.append(c)
        k += 1
    if not out or out[-1] != last:
        out.append(last)
    return out


def run_baseline(instance: TabularInstance, cfg: BaselineConfig, record_timing: bool = True) -> RunReport:
    mdp, users = instance.mdp, instance.rewards
    N = users.num_users
    rewards = users.all_user_rewards()
    _, v_opt = backward_induction(mdp.transitions, mdp.init_dist, rewards)
    t0 = time.perf_counter()
    explorer = VisitationExplorer(mdp, N, rngmod.stream(cfg.seed, "baseline", "explore"))
    owner = np.arange(N)  # explorer slot -> user
    cost = np.full(N, -1, dtype=np.int64)
    gap_at_stop = np.zeros(N)
    for k in explorer.run(cfg.max_episodes, checkpoints(cfg.first_checkpoint, cfg.max_episodes)):
        P, init, _ = explorer.estimates()
        seen = np.where(explorer.visits > 0, rewards[owner], 0.0)
        acts, _ = backward_induction(P, init, seen)
        gaps = v_opt[owner] - deterministic_values(mdp, rewards[owner], acts)
        done = gaps <= cfg.epsilon
        cost[owner[done]] = k
        gap_at_stop[owner[done]] = gaps[done]
        if done.all():
            break
        explorer.keep(~done)
        owner = owner[~done]
    unfinished = cost < 0
    if unfinished.any():
        cost[unfinished] = cfg.max_episodes
    rep = RunReport(cfg.seed, "baseline", config_hash({"cfg": asdict(cfg), "instance": asdict(instance.params)}))
    rep.phase_trajectories["baseline"] = int(cost.sum())
    rep.user_subopt = gap_at_stop.tolist()
    rep.wall_ms["baseline"] = (time.perf_counter() - t0) * 1e3 if record_timing else 0.0
    rep.extra.update({"per_user_trajectories": cost.tolist(), "unfinished_users": int(unfinished.sum()),
                      "epsilon": cfg.epsilon})
    if unfinished.any():
        rep.status = "failed:budget"
    return rep
