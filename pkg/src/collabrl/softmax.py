"""Softmax policies over the reward and transition embeddings, and finite nets of them.

A policy step is parameterized by ``(u, v)`` with logits
``<psi(s, a), u> + <phi(s, a), v>``.  ``psi`` rows have l2 norm at most one
and ``phi`` rows l1 norm at most one, so logits move by at most
``||du||_2 + ||dv||_inf`` when the parameters move; this is what the
total-variation bound :func:`tv_bound` rests on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ContractViolation
from .instances import LinearMDPSpec


def softmax_kernels(spec: LinearMDPSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Policy kernels ``(..., H, S, A)`` for parameters ``u, v`` of shape ``(..., H, d)``."""
    logits = np.asarray(u) @ spec.psi.T + np.asarray(v) @ spec.phi.T
    logits = logits.reshape(logits.shape[:-1] + (spec.num_states, spec.num_actions))
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def tv_bound(du: np.ndarray, dv: np.ndarray) -> float:
    """Upper bound on the action-distribution TV distance of two parameter pairs.

    ``du`` is the change of the ``psi`` parameter, ``dv`` that of the ``phi``
    parameter.
    """
    shift = float(np.linalg.norm(du)) + float(np.max(np.abs(dv), initial=0.0))
    return 0.5 * (math.exp(2 * shift) - 1)


def tv_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


@dataclass(frozen=True)
class SoftmaxPolicy:
    u: np.ndarray  # (H, d), paired with psi
    v: np.ndarray  # (H, d), paired with phi
    radius: float

    def __post_init__(self):
        for name in ("u", "v"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ContractViolation("u and v must both be (H, d)")
        top = max(np.linalg.norm(self.u, axis=1).max(initial=0.0), np.linalg.norm(self.v, axis=1).max(initial=0.0))
        if top > self.radius * (1 + 1e-12):
            raise ContractViolation(f"parameter norm {top:.4g} exceeds radius {self.radius:g}")

    def kernels(self, spec: LinearMDPSpec) -> np.ndarray:
        return softmax_kernels(spec, self.u, self.v)

    @classmethod
    def center(cls, horizon: int, dim: int, radius: float = 1.0) -> "SoftmaxPolicy":
        """The zero-parameter policy, uniform over actions."""
        z = np.zeros((horizon, dim))
        return cls(z, z, radius)


def ball_points(count: int, dim: int, radius: float, seed: int = 0) -> np.ndarray:
    """``count`` low-discrepancy points in the radius-``radius`` l2 ball of ``R^dim``.

    A scrambled Halton point in ``[0, 1]^(dim + 1)`` gives a direction through
    the normal quantile function and a radius ``radius * w^(1/dim)`` from its
    last coordinate, which maps uniform cube points to uniform ball points.
    """
    from scipy.stats import norm, qmc

    if count <= 0:
        return np.zeros((0, dim))
    pts = qmc.Halton(dim + 1, scramble=True, seed=seed).random(count)
    z = norm.ppf(np.clip(pts[:, :dim], 1e-12, 1 - 1e-12))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * (radius * pts[:, dim:] ** (1.0 / dim))


@dataclass(frozen=True)
class PolicyNet:
    """Product net: step ``h`` chooses one of ``size_per_step`` parameter pairs.

    ``u[h, k]`` and ``v[h, k]`` hold the ``k``-th candidate at step ``h``;
    index 0 is always the center.
    """

    eta: float
    radius: float
    u: np.ndarray  # (H, m, d)
    v: np.ndarray  # (H, m, d)
    covering_radius: float
    covers: bool

    @property
    def size_per_step(self) -> int:
        return self.u.shape[1]

    @property
    def cardinality(self) -> int:
        return self.size_per_step ** self.u.shape[0]

    @property
    def log_cardinality(self) -> float:
        return self.u.shape[0] * math.log(self.size_per_step)

    @property
    def measured_D(self) -> float:
        """``log |net| / log(1 / eta)``; infinite when ``eta >= 1``."""
        if self.eta >= 1:
            return 0.0 if self.cardinality == 1 else math.inf
        return self.log_cardinality / math.log(1 / self.eta)

    def step_kernels(self, spec: LinearMDPSpec, h: int) -> np.ndarray:
        """``(m, S, A)`` kernels of every candidate at step ``h``."""
        return _step_kernels(spec, self.u[h], self.v[h])

    def policy(self, choice) -> SoftmaxPolicy:
        """Policy picking candidate ``choice[h]`` at step ``h`` (missing steps use the center)."""
        H, _, d = self.u.shape
        idx = np.zeros(H, dtype=int)
        idx[: len(choice)] = choice
        return SoftmaxPolicy(self.u[np.arange(H), idx], self.v[np.arange(H), idx], self.radius)


def _step_kernels(spec: LinearMDPSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    logits = u @ spec.psi.T + v @ spec.phi.T
    logits = logits.reshape(-1, spec.num_states, spec.num_actions)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def build_policy_net(spec: LinearMDPSpec, eta: float, radius: float, budget: int, seed: int = 0,
                     probes: int = 2000) -> PolicyNet:
    """Deterministic low-discrepancy net over the per-step parameter balls.

    Each step gets ``floor(budget^(1/H))`` candidates (the center first).
    ``eta >= 1`` is coarser than the diameter of the policy distance, so the
    center alone suffices.  The covering radius is the largest, over
    ``probes`` uniform parameter draws, of the smallest :func:`tv_bound` to a
    net member; ``covers`` records whether it reaches ``eta``.
    """
    if not eta > 0:
        raise ContractViolation("net resolution must be positive")
    if budget < 1 or radius < 0:
        raise ContractViolation("budget must be positive and radius non-negative")
    H, d = spec.horizon, spec.dim
    if eta >= 1:
        z = np.zeros((H, 1, d))
        return PolicyNet(eta, radius, z, z, 0.0, True)
    m = max(1, int(math.floor(budget ** (1.0 / H) + 1e-9)))
    us, vs = [], []
    for h in range(H):
        pts = ball_points(m - 1, 2 * d, 1.0, seed=seed * 1000 + h)
        # split the 2d-ball point into two d-vectors, each rescaled into its own ball
        u = np.vstack([np.zeros(d), _into_ball(pts[:, :d], radius)])
        v = np.vstack([np.zeros(d), _into_ball(pts[:, d:], radius)])
        us.append(u)
        vs.append(v)
    U, V = np.stack(us), np.stack(vs)
    cover = _covering_radius(U, V, radius, probes, rngmod.stream(seed, "net", "probe"))
    return PolicyNet(eta, radius, U, V, cover, cover <= eta)


def _into_ball(x: np.ndarray, radius: float) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x * radius / np.maximum(n, 1.0)


def _covering_radius(U: np.ndarray, V: np.ndarray, radius: float, probes: int, g: np.random.Generator) -> float:
    H, m, d = U.shape
    worst = 0.0
    for h in range(H):
        pu = _uniform_ball(g, probes, d, radius)
        pv = _uniform_ball(g, probes, d, radius)
        du = np.linalg.norm(pu[:, None, :] - U[h][None], axis=2)
        dv = np.max(np.abs(pv[:, None, :] - V[h][None]), axis=2)
        shift = np.min(du + dv, axis=1)
        worst = max(worst, float(np.max(0.5 * (np.exp(2 * shift) - 1))))
    return worst


def _uniform_ball(g: np.random.Generator, n: int, d: int, radius: float) -> np.ndarray:
    x = g.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * radius * g.random((n, 1)) ** (1.0 / d)


def softmax_tail_fraction(scores: np.ndarray, beta: float, margin: float, draws: int,
                          g: np.random.Generator) -> float:
    """Fraction of actions sampled from ``softmax(beta * scores)`` scoring below ``max - margin``."""
    logits = beta * (scores - scores.max())
    p = np.exp(logits)
    p /= p.sum()
    picks = g.choice(scores.size, size=draws, p=p)
    return float(np.mean(scores[picks] < scores.max() - margin))
