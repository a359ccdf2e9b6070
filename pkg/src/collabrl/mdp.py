"""Finite episodic MDPs, trajectory sampling and exact dynamic-programming oracles.

Conventions used throughout the package:

* steps are 0-based in code (``h = 0 .. H-1``);
* a state-action pair ``(s, a)`` is flattened to the column index ``s * A + a``;
* ``transitions[h]`` has shape ``(S*A, S)`` and moves step ``h`` to step ``h + 1``,
  so there are ``H - 1`` of them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InstanceError

PROB_TOL = 1e-12


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


def _check_stochastic(rows: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(rows)):
        raise InstanceError(f"{what} contains non-finite entries")
    if np.any(rows < 0):
        raise InstanceError(f"{what} has negative entries (min {rows.min():.3g})")
    sums = rows.sum(axis=-1)
    err = np.max(np.abs(sums - 1.0)) if sums.size else 0.0
    if err > PROB_TOL:
        raise InstanceError(f"{what} rows do not sum to 1 (max error {err:.3g})")
    # rows already within a few ulps stay untouched, so save/load round trips are exact
    off = np.abs(sums - 1.0) > 8 * np.finfo(float).eps
    return np.where(off[..., None], rows / sums[..., None], rows)


@dataclass(frozen=True)
class TabularMDP:
    num_states: int
    num_actions: int
    horizon: int
    transitions: np.ndarray
    init_dist: np.ndarray

    def __post_init__(self):
        S, A, H = self.num_states, self.num_actions, self.horizon
        if min(S, A, H) < 1:
            raise InstanceError("num_states, num_actions and horizon must be positive")
        P = np.asarray(self.transitions, dtype=float)
        if P.size == 0 and H == 1:
            P = P.reshape(0, S * A, S)
        if P.shape != (H - 1, S * A, S):
            raise InstanceError(f"transitions must have shape {(H - 1, S * A, S)}, got {P.shape}")
        mu = np.asarray(self.init_dist, dtype=float)
        if mu.shape != (S,):
            raise InstanceError(f"init_dist must have shape ({S},), got {mu.shape}")
        object.__setattr__(self, "transitions", _frozen(_check_stochastic(P, "transitions")))
        object.__setattr__(self, "init_dist", _frozen(_check_stochastic(mu, "init_dist")))

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "init_dist": self.init_dist.tolist(),
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMDP":
        try:
            S, A, H = int(doc["num_states"]), int(doc["num_actions"]), int(doc["horizon"])
            P = np.array(doc["transitions"], dtype=float).reshape(H - 1, S * A, S)
            return cls(S, A, H, P, np.array(doc["init_dist"], dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise InstanceError(f"malformed MDP document: {exc}") from exc

    def dumps(self) -> str:
        return dumps(self.to_dict())


@dataclass(frozen=True)
class RewardFunction:
    """Deterministic rewards ``values[h, s, a]`` in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.values, dtype=float)
        if R.ndim != 3:
            raise InstanceError(f"reward values must be (H, S, A), got shape {R.shape}")
        if not np.all(np.isfinite(R)) or R.min(initial=0.0) < 0 or R.max(initial=0.0) > 1:
            raise InstanceError("reward values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(R))

    @classmethod
    def constant(cls, mdp: TabularMDP, c: float) -> "RewardFunction":
        return cls(np.full((mdp.horizon, mdp.num_states, mdp.num_actions), float(c)))


@dataclass(frozen=True)
class TabularPolicy:
    """Per-step action kernels ``kernels[h, s, a] = pi_h(a | s)``."""

    kernels: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.kernels, dtype=float)
        if K.ndim != 3:
            raise InstanceError(f"policy kernels must be (H, S, A), got shape {K.shape}")
        object.__setattr__(self, "kernels", _frozen(_check_stochastic(K, "policy kernels")))

    @classmethod
    def deterministic(cls, actions: np.ndarray, num_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(num_actions)[actions])

    @classmethod
    def uniform(cls, mdp: TabularMDP) -> "TabularPolicy":
        S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
        return cls(np.full((H, S, A), 1.0 / A))


@dataclass(frozen=True)
class Trajectory:
    steps: tuple  # ((state, action, reward), ...) of length H

    @property
    def states(self) -> np.ndarray:
        return np.array([s for s, _, _ in self.steps], dtype=int)

    @property
    def actions(self) -> np.ndarray:
        return np.array([a for _, a, _ in self.steps], dtype=int)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r for _, _, r in self.steps], dtype=float)


@dataclass(frozen=True)
class OccupancyProfile:
    """``dists[h, s, a]`` is the probability of visiting ``(s, a)`` at step ``h``."""

    dists: np.ndarray

    @property
    def pair_dists(self) -> np.ndarray:
        """Same masses flattened to shape ``(H, S*A)``."""
        H = self.dists.shape[0]
        return self.dists.reshape(H, -1)

    @property
    def state_dists(self) -> np.ndarray:
        return self.dists.sum(axis=-1)


def _check_dims(mdp: TabularMDP, arr: np.ndarray, what: str):
    want = (mdp.horizon, mdp.num_states, mdp.num_actions)
    if arr.shape[-3:] != want:
        raise InstanceError(f"{what} has shape {arr.shape[-3:]}, MDP expects {want}")


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # number of cdf entries strictly below u; clipped so round-off never overflows
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_paths(mdp: TabularMDP, kernels: np.ndarray, n: int, rng: np.random.Generator):
    """Draw ``n`` independent state/action paths under per-step kernels.

    Each path consumes exactly ``2 H`` uniforms in the order
    ``s_1, a_1, s_2, a_2, ...`` so the draw is a pure function of the stream.
    ``kernels`` may be ``(H, S, A)`` or per-path ``(n, H, S, A)``.

    Returns
    -------
    states, actions : ndarray of int, shape ``(n, H)``
    """
    S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
    kernels = np.asarray(kernels, dtype=float)
    _check_dims(mdp, kernels, "policy kernels")
    per_path = kernels.ndim == 4
    u = rng.random((n, 2 * H))
    states = np.empty((n, H), dtype=int)
    actions = np.empty((n, H), dtype=int)
    rows = np.arange(n)
    s = _inverse_cdf(np.broadcast_to(np.cumsum(mdp.init_dist), (n, S)), u[:, 0])
    for h in range(H):
        states[:, h] = s
        pk = kernels[rows, h, s] if per_path else kernels[h, s]
        a = _inverse_cdf(np.cumsum(pk, axis=1), u[:, 2 * h + 1])
        actions[:, h] = a
        if h < H - 1:
            nxt = mdp.transitions[h][s * A + a]
            s = _inverse_cdf(np.cumsum(nxt, axis=1), u[:, 2 * h + 2])
    return states, actions


def sample_trajectory(mdp: TabularMDP, reward: RewardFunction, policy: TabularPolicy,
                      rng: np.random.Generator) -> Trajectory:
    _check_dims(mdp, reward.values, "reward")
    states, actions = sample_paths(mdp, policy.kernels, 1, rng)
    return Trajectory(tuple(
        (int(s), int(a), float(reward.values[h, s, a]))
        for h, (s, a) in enumerate(zip(states[0], actions[0]))
    ))


def occupancy_array(transitions: np.ndarray, init_dist: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Forward pass returning ``(..., H, S, A)`` occupancies; leading dims broadcast."""
    H, S, A = kernels.shape[-3:]
    state = np.asarray(init_dist, dtype=float)
    out = []
    for h in range(H):
        d = state[..., :, None] * kernels[..., h, :, :]
        out.append(d)
        if h < H - 1:
            flat = d.reshape(d.shape[:-2] + (S * A,))
            state = (flat[..., None, :] @ transitions[..., h, :, :])[..., 0, :]
    return np.stack(out, axis=-3)


def occupancy(mdp: TabularMDP, policy: TabularPolicy) -> OccupancyProfile:
    _check_dims(mdp, policy.kernels, "policy kernels")
    return OccupancyProfile(_frozen(occupancy_array(mdp.transitions, mdp.init_dist, policy.kernels)))


def exact_value(mdp: TabularMDP, reward: RewardFunction, policy: TabularPolicy) -> float:
    _check_dims(mdp, reward.values, "reward")
    occ = occupancy(mdp, policy)
    return float(np.sum(occ.dists * reward.values))


def backward_induction(transitions: np.ndarray, init_dist: np.ndarray, rewards: np.ndarray):
    """Optimal deterministic actions and values by backward induction.

    Works on batches: leading dimensions of ``transitions`` ``(..., H-1, S*A, S)``,
    ``init_dist`` ``(..., S)`` and ``rewards`` ``(..., H, S, A)`` broadcast together.
    Ties go to the lowest action index.

    Returns ``(actions, values)`` with shapes ``(..., H, S)`` and ``(...)``.
    """
    rewards = np.asarray(rewards, dtype=float)
    H, S, A = rewards.shape[-3:]
    V = None
    acts = []
    for h in range(H - 1, -1, -1):
        Q = rewards[..., h, :, :]
        if V is not None:
            cont = (transitions[..., h, :, :] @ V[..., :, None])[..., 0]
            Q = Q + cont.reshape(cont.shape[:-1] + (S, A))
        acts.append(np.argmax(Q, axis=-1))
        V = np.max(Q, axis=-1)
    actions = np.stack(acts[::-1], axis=-2)
    return actions, np.sum(V * init_dist, axis=-1)


def optimal_policy(mdp: TabularMDP, reward: RewardFunction) -> tuple[TabularPolicy, float]:
    _check_dims(mdp, reward.values, "reward")
    actions, value = backward_induction(mdp.transitions, mdp.init_dist, reward.values)
    return TabularPolicy.deterministic(actions, mdp.num_actions), float(value)


def deterministic_values(mdp: TabularMDP, rewards: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """True values of deterministic policies ``actions[..., H, S]`` for rewards ``(..., H, S, A)``."""
    kernels = np.eye(mdp.num_actions)[actions]
    occ = occupancy_array(mdp.transitions, mdp.init_dist, kernels)
    return np.sum(occ * rewards, axis=(-3, -2, -1))


def dumps(doc) -> str:
    """JSON text with shortest round-trip float formatting and sorted keys."""
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
