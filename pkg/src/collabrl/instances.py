"""Synthetic multi-user instances: tabular and linear MDPs with low-rank user rewards."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import DegenerateInputError, GenerationError, InstanceError
from .mdp import RewardFunction, TabularMDP, dumps

RANK_TOL = 1e-10


@dataclass(frozen=True)
class CoherenceReport:
    mu0: float
    mu1: float
    rank: int
    mu_rows: float = 0.0
    mu_cols: float = 0.0


def subspace_coherence(basis: np.ndarray) -> float:
    """``n/r * max_i ||P e_i||^2`` for an orthonormal ``n x r`` basis."""
    n, r = basis.shape
    return float(n / r * np.max(np.sum(basis**2, axis=1)))


def coherence(M: np.ndarray, r: int) -> CoherenceReport:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DegenerateInputError("coherence expects a matrix")
    if r < 1 or r > min(M.shape):
        raise DegenerateInputError(f"rank {r} out of range for shape {M.shape}")
    if not np.any(M):
        raise DegenerateInputError("coherence of the zero matrix is undefined")
    U, sv, Vt = np.linalg.svd(M, full_matrices=False)
    if r < len(sv) and sv[r] > RANK_TOL * max(1.0, sv[0]):
        raise DegenerateInputError(f"matrix has rank above {r} (singular value {sv[r]:.3g})")
    U, V = U[:, :r], Vt[:r].T
    n1, n2 = M.shape
    mu_u, mu_v = subspace_coherence(U), subspace_coherence(V)
    mu1 = float(np.max(np.abs(U @ V.T)) * np.sqrt(n1 * n2 / r))
    return CoherenceReport(max(mu_u, mu_v), mu1, r, mu_u, mu_v)


def numerical_rank(M: np.ndarray, tol: float = RANK_TOL) -> int:
    sv = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * max(1.0, sv[0])))


# ---------------------------------------------------------------- tabular


@dataclass(frozen=True)
class RewardMatrixSet:
    """Per-step user reward matrices ``matrices[h]`` of shape ``(N, S*A)``.

    ``left[h] @ right[h].T`` reproduces ``matrices[h]``.
    """

    num_states: int
    num_actions: int
    rank: int
    matrices: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        R = np.array(self.matrices, dtype=float)
        if R.ndim != 3 or R.shape[2] != self.num_states * self.num_actions:
            raise InstanceError(f"reward matrices have bad shape {R.shape}")
        if R.min() < 0 or R.max() > 1:
            raise InstanceError("reward entries must lie in [0, 1]")
        R.setflags(write=False)
        object.__setattr__(self, "matrices", R)
        for name in ("left", "right"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_users(self) -> int:
        return self.matrices.shape[1]

    @property
    def horizon(self) -> int:
        return self.matrices.shape[0]

    def user_rewards(self, user: int) -> RewardFunction:
        H = self.horizon
        return RewardFunction(self.matrices[:, user, :].reshape(H, self.num_states, self.num_actions))

    def all_user_rewards(self) -> np.ndarray:
        """Array ``(N, H, S, A)`` of every user's rewards."""
        H, N, _ = self.matrices.shape
        return self.matrices.transpose(1, 0, 2).reshape(N, H, self.num_states, self.num_actions)


@dataclass(frozen=True)
class TabularInstanceParams:
    num_users: int
    num_states: int
    num_actions: int
    horizon: int
    rank: int
    seed: int = 0
    coherence_target: float | None = None
    dirichlet_alpha: float = 1.0
    redundant_fraction: float = 0.0
    redundant_mass: float = 1e-4


@dataclass(frozen=True)
class TabularInstance:
    params: TabularInstanceParams
    mdp: TabularMDP
    rewards: RewardMatrixSet
    redundant_states: tuple = ()
    coherences: tuple = field(default=())


def check_rank_assumption(r: int, N: int, cols: int):
    if r < 1 or 2 * r > min(N, cols):
        raise GenerationError(
            f"rank r={r} violates the low-rank assumption r <= min(N, columns)/2 = {min(N, cols) / 2:g}"
        )


def _dirichlet_rows(g: np.random.Generator, n: int, k: int, alpha: float) -> np.ndarray:
    x = g.gamma(alpha, size=(n, k))
    x = np.maximum(x, 1e-300)
    return x / x.sum(axis=1, keepdims=True)


def _tabular_dynamics(p: TabularInstanceParams):
    S, A, H = p.num_states, p.num_actions, p.horizon
    g = rngmod.stream(p.seed, "instances", "dynamics")
    P = np.stack([_dirichlet_rows(g, S * A, S, p.dirichlet_alpha) for _ in range(H - 1)]) if H > 1 \
        else np.zeros((0, S * A, S))
    init = _dirichlet_rows(g, 1, S, 4.0)[0]
    n_red = int(np.floor(p.redundant_fraction * S))
    redundant = tuple(range(S - n_red, S))
    if n_red:
        keep = np.ones(S, dtype=bool)
        keep[list(redundant)] = False
        P[:, :, ~keep] = p.redundant_mass / n_red
        P[:, :, keep] *= (1 - p.redundant_mass) / P[:, :, keep].sum(axis=2, keepdims=True)
        init[~keep] = 0.0
        init /= init.sum()
    return TabularMDP(S, A, H, P, init), redundant


def _low_rank_unit_matrix(g: np.random.Generator, n1: int, n2: int, r: int, blend: float):
    """Rank-r matrix with entries in [0, 1]: ``0.5 + A B^T / (2 (r - 1))``.

    Factor entries are bounded by 1, so the fixed scale keeps every entry in
    [0, 1] whatever the matrix size.  ``blend`` in [0, 1] pulls each factor
    column toward a coordinate spike, which makes the singular subspaces
    more coherent.
    """
    left = [np.ones((n1, 1))]
    right = [np.full((n2, 1), 0.5)]
    if r > 1:
        k = r - 1
        A = g.uniform(-1.0, 1.0, size=(n1, k))
        B = g.uniform(-1.0, 1.0, size=(n2, k))
        if blend > 0:
            spikeA = np.zeros((n1, k))
            spikeB = np.zeros((n2, k))
            spikeA[g.choice(n1, k, replace=False), np.arange(k)] = 1.0
            spikeB[g.choice(n2, k, replace=False), np.arange(k)] = 1.0
            A = (1 - blend) * A + blend * spikeA
            B = (1 - blend) * B + blend * spikeB
        scale = 0.5 / k * (1 - 1e-9)  # keep entries strictly inside [0, 1]
        left.append(A * scale)
        right.append(B)
    U, V = np.hstack(left), np.hstack(right)
    M = np.clip(U @ V.T, 0.0, 1.0)  # clip only guards round-off
    return M, U, V


def gen_tabular_instance(p: TabularInstanceParams) -> TabularInstance:
    N, S, A, H, r = p.num_users, p.num_states, p.num_actions, p.horizon, p.rank
    if min(N, S, A, H) < 1:
        raise GenerationError("instance sizes must be positive")
    check_rank_assumption(r, N, S * A)
    mdp, redundant = _tabular_dynamics(p)
    mats, lefts, rights, cohs = [], [], [], []
    for h in range(H):
        g = rngmod.stream(p.seed, "instances", "rewards", N, h)
        blend = 0.0
        lo, hi = 0.0, 1.0
        for attempt in range(50):
            M, U, V = _low_rank_unit_matrix(g, N, S * A, r, blend)
            if numerical_rank(M) != r:
                continue
            rep = coherence(M, r)
            if p.coherence_target is None:
                break
            target = p.coherence_target
            if target / 2 <= rep.mu0 <= 2 * target:
                break
            if rep.mu0 < target / 2:
                lo = blend
            else:
                hi = blend
            blend = 0.5 * (lo + hi)
        else:
            raise GenerationError(
                f"could not reach coherence target {p.coherence_target} at h={h} after 50 redraws"
            )
        mats.append(M)
        lefts.append(U)
        rights.append(V)
        cohs.append(rep)
    rewards = RewardMatrixSet(S, A, r, np.stack(mats), np.stack(lefts), np.stack(rights))
    return TabularInstance(p, mdp, rewards, redundant, tuple(cohs))


# ---------------------------------------------------------------- linear


@dataclass(frozen=True)
class LinearMDPSpec:
    """Feature tables ``phi``/``psi`` of shape ``(S*A, d)`` and measures ``mu[h]`` of shape ``(d, S)``."""

    num_states: int
    num_actions: int
    horizon: int
    phi: np.ndarray
    psi: np.ndarray
    mu: np.ndarray
    c_mu: float = 1.0

    def __post_init__(self):
        for name in ("phi", "psi", "mu"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        SA = self.num_states * self.num_actions
        d = self.dim
        if self.phi.shape != (SA, d) or self.psi.shape != (SA, d):
            raise InstanceError("phi and psi must both be (S*A, d)")
        if self.mu.shape != (self.horizon - 1, d, self.num_states):
            raise InstanceError(f"mu must be (H-1, d, S), got {self.mu.shape}")
        if np.max(np.abs(self.phi).sum(axis=1)) > 1 + 1e-12:
            raise InstanceError("phi rows must have l1 norm <= 1")
        if np.max(np.linalg.norm(self.psi, axis=1)) > 1 + 1e-12:
            raise InstanceError("psi rows must have l2 norm <= 1")

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    def transitions(self) -> np.ndarray:
        return np.einsum("pd,hds->hps", self.phi, self.mu)

    def features(self, which: str = "phi") -> np.ndarray:
        """Feature table reshaped to ``(S, A, d)``."""
        tab = self.phi if which == "phi" else self.psi
        return tab.reshape(self.num_states, self.num_actions, self.dim)

    def reconstruction_error(self, mdp: TabularMDP) -> float:
        if self.horizon == 1:
            return 0.0
        return float(np.max(np.abs(mdp.transitions - self.transitions()).sum(axis=2)))

    def to_dict(self) -> dict:
        return {"phi": self.phi.tolist(), "psi": self.psi.tolist(), "mu": self.mu.tolist(),
                "c_mu": self.c_mu}


@dataclass(frozen=True)
class ThetaSet:
    thetas: np.ndarray  # (H, N, d)
    rank: int

    def __post_init__(self):
        arr = np.array(self.thetas, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "thetas", arr)

    @property
    def num_users(self) -> int:
        return self.thetas.shape[1]

    def reward_matrices(self, spec: LinearMDPSpec) -> np.ndarray:
        """``(H, N, S*A)`` rewards ``<theta_hu, psi(s, a)>``."""
        return self.thetas @ spec.psi.T

    def user_rewards(self, spec: LinearMDPSpec) -> np.ndarray:
        """``(N, H, S, A)`` rewards."""
        R = self.reward_matrices(spec)
        H, N, _ = R.shape
        return R.transpose(1, 0, 2).reshape(N, H, spec.num_states, spec.num_actions)


@dataclass(frozen=True)
class LinearInstanceParams:
    num_users: int
    dim: int
    horizon: int
    rank: int
    num_states: int
    num_actions: int
    seed: int = 0
    embedding: str = "random"  # "random" | "coordinate"
    deficient: bool = False
    phi_mix: float = 0.3
    psi_bias: float = 0.5
    dirichlet_alpha: float = 1.0


@dataclass(frozen=True)
class LinearInstance:
    params: LinearInstanceParams
    mdp: TabularMDP
    spec: LinearMDPSpec
    theta: ThetaSet


def _unit_rows(g: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = g.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _linear_features(p: LinearInstanceParams, g: np.random.Generator):
    S, A, d = p.num_states, p.num_actions, p.dim
    SA = S * A
    if p.embedding == "coordinate":
        if d != A:
            raise GenerationError("coordinate embedding needs dim == num_actions")
        feat = np.tile(np.eye(A), (S, 1))
        return feat.copy(), feat.copy(), np.ones(d)
    if p.embedding != "random":
        raise GenerationError(f"unknown embedding {p.embedding!r}")
    # phi: mostly one coordinate per pair plus a Dirichlet spread, on the simplex
    live = d - 1 if p.deficient else d
    if live < 1:
        raise GenerationError("deficient instance needs dim >= 2")
    anchor = np.zeros((SA, d))
    anchor[np.arange(SA), np.arange(SA) % live] = 1.0
    spread = np.zeros((SA, d))
    spread[:, :live] = _dirichlet_rows(g, SA, live, 1.0)
    phi = (1 - p.phi_mix) * anchor + p.phi_mix * spread
    # psi: a constant bias coordinate plus spread directions in the remaining ones
    kappa = p.psi_bias
    if not 0 < kappa < 1:
        raise GenerationError("psi_bias must lie in (0, 1)")
    psi = np.zeros((SA, d))
    psi[:, 0] = kappa
    if d > 1:
        radius = np.sqrt(1 - kappa**2) * g.uniform(0.5, 1.0, size=(SA, 1))
        psi[:, 1:] = radius * _unit_rows(g, SA, d - 1)
    ones_dir = np.zeros(d)
    ones_dir[0] = 1.0 / kappa
    return phi, psi, ones_dir


def gen_linear_instance(p: LinearInstanceParams) -> LinearInstance:
    N, d, H, r, S, A = p.num_users, p.dim, p.horizon, p.rank, p.num_states, p.num_actions
    if min(N, d, H, S, A) < 1:
        raise GenerationError("instance sizes must be positive")
    check_rank_assumption(r, N, d)
    if d > S * A:
        raise GenerationError("dim must not exceed S*A")
    g = rngmod.stream(p.seed, "instances", "linear", "features")
    phi, psi, ones_dir = _linear_features(p, g)
    if np.max(np.abs(psi @ ones_dir - 1.0)) > 1e-10:
        raise GenerationError("constant reward direction is not representable by psi")
    mu = np.stack([_dirichlet_rows(g, d, S, p.dirichlet_alpha) for _ in range(H - 1)]) if H > 1 \
        else np.zeros((0, d, S))
    spec = LinearMDPSpec(S, A, H, phi, psi, mu, 1.0)
    mdp = TabularMDP(S, A, H, spec.transitions() if H > 1 else np.zeros((0, S * A, S)),
                     np.full(S, 1.0 / S))

    thetas = []
    for h in range(H):
        gh = rngmod.stream(p.seed, "instances", "linear", "theta", N, h)
        base = 0.5 * np.outer(np.ones(N), ones_dir)
        if r == 1:
            thetas.append(base)
            continue
        Af = gh.standard_normal((N, r - 1))
        Bf = gh.standard_normal((d, r - 1))
        prod = Af @ Bf.T
        peak = np.max(np.abs(prod @ psi.T))
        if peak < 1e-8:
            raise GenerationError("reward-range normalization infeasible: factors invisible through psi")
        scale = 0.5 / peak * (1 - 1e-9)
        for _ in range(60):
            theta = base + scale * prod
            if np.max(np.linalg.norm(theta, axis=1)) <= np.sqrt(d):
                break
            scale *= 0.8
        else:
            raise GenerationError("reward-range normalization infeasible: theta norms exceed sqrt(d)")
        thetas.append(theta)
    theta = ThetaSet(np.stack(thetas), r)
    R = theta.reward_matrices(spec)
    if R.min() < -1e-12 or R.max() > 1 + 1e-12:
        raise GenerationError("reward-range normalization infeasible")
    return LinearInstance(p, mdp, spec, theta)


# -------------------------------------------------------- planted isotropic


@dataclass(frozen=True)
class IsotropicInstanceParams:
    dim: int
    num_states: int
    horizon: int
    seed: int = 0
    junk_actions: int | None = None  # default: 2 * dim
    junk_logit: float = 3.0
    num_users: int = 8
    rank: int = 1


@dataclass(frozen=True)
class IsotropicInstance:
    mdp: TabularMDP
    spec: LinearMDPSpec
    theta: ThetaSet
    planted_u: np.ndarray  # (H, d) paired with psi
    planted_v: np.ndarray  # (H, d) paired with phi
    params: IsotropicInstanceParams


def gen_isotropic_instance(p: IsotropicInstanceParams) -> IsotropicInstance:
    """Instance whose planted softmax policy makes psi(S_h, A_h) uniform over +-e_i.

    Every state offers ``2 d`` "signal" actions with ``psi = +-e_i`` and
    ``junk`` actions with ``psi = e_1``.  Signal actions carry ``phi = e_k``
    for ``k < d`` and junk actions ``phi = e_d``, so the planted parameter
    ``v = -junk_logit * e_d`` suppresses the junk uniformly in every state.
    """
    d, S, H = p.dim, p.num_states, p.horizon
    if d < 2:
        raise GenerationError("isotropic instance needs dim >= 2")
    J = 2 * d if p.junk_actions is None else p.junk_actions
    A = 2 * d + J
    g = rngmod.stream(p.seed, "instances", "isotropic")
    signal = np.vstack([np.eye(d), -np.eye(d)])
    psi = np.zeros((S, A, d))
    phi = np.zeros((S, A, d))
    for s in range(S):
        psi[s, : 2 * d] = signal[g.permutation(2 * d)]
        phi[s, np.arange(2 * d), g.integers(0, d - 1, size=2 * d)] = 1.0
    psi[:, 2 * d:, 0] = 1.0
    phi[:, 2 * d:, d - 1] = 1.0
    mu = np.stack([_dirichlet_rows(g, d, S, 1.0) for _ in range(H - 1)]) if H > 1 else np.zeros((0, d, S))
    spec = LinearMDPSpec(S, A, H, phi.reshape(S * A, d), psi.reshape(S * A, d), mu, 1.0)
    mdp = TabularMDP(S, A, H, spec.transitions() if H > 1 else np.zeros((0, S * A, S)), np.full(S, 1.0 / S))
    # rewards 0.5 + 0.5 <w, psi> stay in [0, 1] only with a bias coordinate;
    # psi has none here, so use theta = 0 (measurement tests supply their own)
    theta = ThetaSet(np.zeros((H, p.num_users, d)), p.rank)
    v = np.zeros((H, d))
    v[:, d - 1] = -p.junk_logit
    return IsotropicInstance(mdp, spec, theta, np.zeros((H, d)), v, p)


# ---------------------------------------------------------------- bundles


def tabular_bundle(inst: TabularInstance) -> dict:
    return {
        "kind": "tabular",
        "params": asdict(inst.params),
        "mdp": inst.mdp.to_dict(),
        "rank": inst.rewards.rank,
        "seed": inst.params.seed,
        "rewards": inst.rewards.matrices.tolist(),
        "left": inst.rewards.left.tolist(),
        "right": inst.rewards.right.tolist(),
        "redundant_states": list(inst.redundant_states),
    }


def linear_bundle(inst: LinearInstance) -> dict:
    return {
        "kind": "linear",
        "params": asdict(inst.params),
        "mdp": inst.mdp.to_dict(),
        "rank": inst.theta.rank,
        "seed": inst.params.seed,
        "theta": inst.theta.thetas.tolist(),
        **inst.spec.to_dict(),
    }


def save_bundle(inst, path) -> str:
    doc = tabular_bundle(inst) if isinstance(inst, TabularInstance) else linear_bundle(inst)
    text = dumps(doc)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def bundle_from_dict(doc: dict):
    try:
        kind = doc["kind"]
        mdp = TabularMDP.from_dict(doc["mdp"])
        if kind == "tabular":
            params = TabularInstanceParams(**doc["params"])
            H = mdp.horizon
            R = np.array(doc["rewards"], dtype=float).reshape(H, params.num_users, mdp.num_pairs)
            rewards = RewardMatrixSet(mdp.num_states, mdp.num_actions, int(doc["rank"]), R,
                                      np.array(doc["left"]), np.array(doc["right"]))
            cohs = tuple(coherence(R[h], rewards.rank) for h in range(H))
            return TabularInstance(params, mdp, rewards, tuple(doc.get("redundant_states", ())), cohs)
        if kind == "linear":
            params = LinearInstanceParams(**doc["params"])
            H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
            d = params.dim
            spec = LinearMDPSpec(S, A, H, np.array(doc["phi"]).reshape(S * A, d),
                                 np.array(doc["psi"]).reshape(S * A, d),
                                 np.array(doc["mu"], dtype=float).reshape(H - 1, d, S), float(doc["c_mu"]))
            theta = ThetaSet(np.array(doc["theta"], dtype=float).reshape(H, params.num_users, d),
                             int(doc["rank"]))
            return LinearInstance(params, mdp, spec, theta)
    except (KeyError, TypeError, ValueError) as exc:
        raise InstanceError(f"malformed instance bundle: {exc}") from exc
    raise InstanceError(f"unknown bundle kind {doc.get('kind')!r}")


def load_bundle(path):
    with open(path, encoding="utf-8") as fh:
        return bundle_from_dict(json.load(fh))
