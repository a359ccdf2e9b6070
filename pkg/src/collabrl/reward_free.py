"""Reward-free exploration backends.

A fitted :class:`RFModel` answers planning queries for any reward in [0, 1]
without further interaction.  Two backends exist: ``exact`` copies the true
dynamics (a zero-error oracle) and ``empirical`` estimates them from
trajectories gathered by a greedy visitation-maximizing explorer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InstanceError
from .mdp import (RewardFunction, TabularMDP, TabularPolicy, backward_induction,
                  deterministic_values, sample_paths)

MAX_LEVELS = 8
REACH_FLOOR = 0.1


@dataclass(frozen=True)
class RFModel:
    mode: str
    num_states: int
    num_actions: int
    horizon: int
    est_transitions: np.ndarray  # (H-1, S*A, S)
    est_init: np.ndarray
    visit_counts: np.ndarray  # (H, S, A)
    trajectories_used: int
    unvisited: np.ndarray  # (H-1, S*A) rows that fell back to uniform
    low_confidence: bool = False

    def plan_actions(self, rewards: np.ndarray):
        """Batched planning: ``rewards`` ``(..., H, S, A)`` -> (actions, values)."""
        return backward_induction(self.est_transitions, self.est_init, rewards)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "est_transitions": self.est_transitions.tolist(),
            "est_init": self.est_init.tolist(),
            "visit_counts": self.visit_counts.astype(int).tolist(),
            "trajectories_used": self.trajectories_used,
            "unvisited": self.unvisited.astype(int).tolist(),
            "low_confidence": self.low_confidence,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RFModel":
        S, A, H = doc["num_states"], doc["num_actions"], doc["horizon"]
        return cls(doc["mode"], S, A, H,
                   np.array(doc["est_transitions"], dtype=float).reshape(H - 1, S * A, S),
                   np.array(doc["est_init"], dtype=float),
                   np.array(doc["visit_counts"], dtype=int).reshape(H, S, A),
                   int(doc["trajectories_used"]),
                   np.array(doc["unvisited"], dtype=bool).reshape(H - 1, S * A),
                   bool(doc["low_confidence"]))


class UserMixtureSampler:
    """Trajectory oracle that serves each rollout from a uniformly random user.

    The users share dynamics, so the user draw only matters for bookkeeping;
    it is drawn anyway so the stream consumption matches the protocol.
    """

    def __init__(self, mdp: TabularMDP, num_users: int, rng: np.random.Generator):
        self.mdp = mdp
        self.num_users = num_users
        self.rng = rng
        self.trajectories = 0

    def rollout(self, kernels: np.ndarray, n: int):
        users = self.rng.integers(0, self.num_users, size=n)
        states, actions = sample_paths(self.mdp, kernels, n, self.rng)
        self.trajectories += n
        return users, states, actions


def exact_model(mdp: TabularMDP) -> RFModel:
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    return RFModel("exact", S, A, H, mdp.transitions, mdp.init_dist,
                   np.zeros((H, S, A), dtype=int), 0, np.zeros((H - 1, S * A), dtype=bool))


class VisitationExplorer:
    """Batch of independent greedy explorers sharing one set of dynamics.

    Explorer ``b`` keeps its own counts; ``step`` plans an indicator reward
    on the least-visited cells each explorer can still reach, then rolls the
    plan out.  Re-planning happens on a geometric cadence so the planning
    cost grows only logarithmically with the number of episodes.
    """

    def __init__(self, mdp: TabularMDP, batch: int, rng: np.random.Generator, replan_fraction=0.1):
        S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
        self.mdp, self.batch, self.rng = mdp, batch, rng
        self.replan_fraction = replan_fraction
        self.visits = np.zeros((batch, H, S, A), dtype=np.int64)
        self.moves = np.zeros((batch, max(H - 1, 0), S * A, S), dtype=np.int64)
        self.starts = np.zeros((batch, S), dtype=np.int64)
        self.episodes = 0

    def estimates(self):
        S = self.mdp.num_states
        totals = self.moves.sum(axis=-1, keepdims=True)
        unvisited = totals[..., 0] == 0
        P = np.where(totals > 0, self.moves / np.maximum(totals, 1), 1.0 / S)
        init_tot = self.starts.sum(axis=-1, keepdims=True)
        init = np.where(init_tot > 0, self.starts / np.maximum(init_tot, 1), 1.0 / S)
        return P, init, unvisited

    def _exploration_policy(self):
        P, init, _ = self.estimates()
        B, H, S, A = self.visits.shape
        flat = self.visits.reshape(B, -1)
        levels = np.sort(flat, axis=1)
        picks = np.unique(np.linspace(0, flat.shape[1] - 1, MAX_LEVELS).astype(int))
        thresholds = levels[:, picks]  # (B, L)
        rewards = (self.visits[:, None] <= thresholds[:, :, None, None, None]).astype(float)
        actions, values = backward_induction(P[:, None], init[:, None], rewards)
        ok = values >= REACH_FLOOR
        choice = np.where(ok.any(axis=1), ok.argmax(axis=1), len(picks) - 1)
        chosen = actions[np.arange(B), choice]  # (B, H, S)
        return np.eye(A)[chosen]

    def run(self, episodes: int, stop_at=None):
        """Advance every explorer by ``episodes`` episodes.

        ``stop_at`` is an optional sorted list of episode counts at which the
        caller wants control back; the method yields at each of them.
        """
        target = self.episodes + episodes
        marks = [m for m in (stop_at or []) if self.episodes < m <= target] + [target]
        for mark in marks:
            while self.episodes < mark:
                chunk = max(1, int(self.episodes * self.replan_fraction))
                chunk = min(chunk, mark - self.episodes)
                kernels = self._exploration_policy()
                self._roll(kernels, chunk)
            yield self.episodes

    def keep(self, which: np.ndarray):
        """Drop the explorers where ``which`` is False."""
        self.visits = self.visits[which]
        self.moves = self.moves[which]
        self.starts = self.starts[which]
        self.batch = int(self.visits.shape[0])

    def _roll(self, kernels: np.ndarray, n: int):
        B, H, S, A = self.visits.shape
        per = np.repeat(kernels, n, axis=0)  # (B*n, H, S, A)
        states, actions = sample_paths(self.mdp, per, B * n, self.rng)
        owner = np.repeat(np.arange(B), n)
        for h in range(H):
            np.add.at(self.visits, (owner, h, states[:, h], actions[:, h]), 1)
            if h < H - 1:
                np.add.at(self.moves, (owner, h, states[:, h] * A + actions[:, h], states[:, h + 1]), 1)
        np.add.at(self.starts, (owner, states[:, 0]), 1)
        self.episodes += n

    def model(self, b: int = 0) -> RFModel:
        P, init, unvisited = self.estimates()
        H, S, A = self.mdp.horizon, self.mdp.num_states, self.mdp.num_actions
        return RFModel("empirical", S, A, H, P[b], init[b], self.visits[b].copy(),
                       self.episodes, unvisited[b], bool(self.episodes == 0 or unvisited[b].any()))


def rf_fit(mdp: TabularMDP, K: int, backend: str, rng: np.random.Generator,
           num_users: int = 1) -> RFModel:
    """Fit a reward-free model.

    ``exact`` ignores ``K`` and copies the dynamics.  ``empirical`` consumes
    exactly ``K`` trajectories.
    """
    if backend == "exact":
        return exact_model(mdp)
    if backend != "empirical":
        raise InstanceError(f"unknown reward-free backend {backend!r}")
    if K < 0:
        raise InstanceError("trajectory budget must be non-negative")
    # users share dynamics, so which user serves a rollout cannot change the fit
    explorer = VisitationExplorer(mdp, 1, rng)
    for _ in explorer.run(K):
        pass
    return explorer.model(0)


def rf_plan(model: RFModel, reward: RewardFunction | np.ndarray) -> tuple[TabularPolicy, float]:
    values = reward.values if isinstance(reward, RewardFunction) else np.asarray(reward, dtype=float)
    if values.min(initial=0.0) < 0 or values.max(initial=0.0) > 1:
        raise ContractViolation("planning rewards must lie in [0, 1]")
    if values.shape != (model.horizon, model.num_states, model.num_actions):
        raise InstanceError("reward shape does not match the model")
    actions, value = model.plan_actions(values)
    return TabularPolicy.deterministic(actions, model.num_actions), float(value)


def contract_error(model: RFModel, mdp: TabularMDP, rewards: np.ndarray) -> tuple[float, float]:
    """Measured reward-free errors over a batch of rewards ``(B, H, S, A)``.

    Returns ``(max |V_hat - V_true| of the planned policy, max suboptimality)``.
    """
    actions, v_hat = model.plan_actions(rewards)
    v_true = deterministic_values(mdp, rewards, actions)
    _, v_opt = backward_induction(mdp.transitions, mdp.init_dist, rewards)
    return float(np.max(np.abs(v_hat - v_true))), float(np.max(v_opt - v_true))
