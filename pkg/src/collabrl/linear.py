"""Collaborative pipeline for linear MDPs.

Phases after reward-free exploration:

* the well-conditioned sampler collects transition features until every
  step's Grammian dominates ``kappa^2 I``;
* from that data, operator estimates predict the law of the reward features
  at step ``h`` under any softmax policy, and a net search picks the policy
  whose reward features look most isotropic;
* the row-wise estimator recovers every step's reward matrix from rollouts
  of that policy;
* each user plans on the recovered rewards.

Expectations under a policy are written in state-weight form: an operator
for step ``j`` turns a vector ``nu`` into weights ``w`` over states, and the
expectation of ``g`` is ``sum_s w[s] sum_a pi(a|s) g(s, a)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import (ContractViolation, DeficiencyError, FitFailure, InfeasibleSearchError,
                     NonTerminationError, PhaseFailure)
from .instances import LinearInstance, LinearMDPSpec
from .mdp import TabularMDP, backward_induction, deterministic_values, occupancy_array, sample_paths
from .reports import RunReport, config_hash
from .reward_free import RFModel, rf_fit
from .rowwise import RolloutOracle, RowwiseConfig, direction_set, run_estimator
from .softmax import PolicyNet, SoftmaxPolicy, build_policy_net

CLIP_WARN = 1e-6


# ------------------------------------------------------------- f functional


def f_values(psi: np.ndarray, X: np.ndarray, xi: float) -> np.ndarray:
    """``|<x, psi>| sqrt(d) - xi d <x, psi>^2`` for every row of ``psi`` and of ``X``."""
    d = psi.shape[-1]
    ip = psi @ X.T
    return np.abs(ip) * math.sqrt(d) - xi * d * ip**2


def f_eval(spec: LinearMDPSpec, s: int, a: int, x: np.ndarray, xi: float) -> float:
    x = np.asarray(x, dtype=float)
    if abs(np.linalg.norm(x) - 1) > 1e-9:
        raise ContractViolation("f is defined for unit directions only")
    return float(f_values(spec.psi[s * spec.num_actions + a], x[None], xi)[0])


# ------------------------------------------------------- Grammian sampler


@dataclass
class GrammianData:
    """Sampler output: for step ``k`` the features ``phi[k]`` and the next states."""

    kappa: float
    T: int
    num_states: int
    phi: list = field(default_factory=list)  # per step (T, d)
    next_states: list = field(default_factory=list)  # per step (T,)
    grams: list = field(default_factory=list)  # per step (d, d)
    init_states: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    users: list = field(default_factory=list)
    replans: list = field(default_factory=list)

    @property
    def min_eigenvalues(self) -> list[float]:
        return [float(np.linalg.eigvalsh(G)[0]) for G in self.grams]

    def init_weights(self) -> np.ndarray:
        return np.bincount(self.init_states, minlength=self.num_states) / max(len(self.init_states), 1)

    def transfer(self, k: int) -> np.ndarray:
        """``G^-1 B`` with ``B = sum_t phi_t e_{s'_t}^T``; ``nu @ transfer`` gives state weights."""
        B = np.zeros((self.grams[k].shape[0], self.num_states))
        np.add.at(B.T, self.next_states[k], self.phi[k])
        return np.linalg.solve(self.grams[k], B)


def reachability_gamma(transitions: np.ndarray, init_dist: np.ndarray, spec: LinearMDPSpec,
                       directions: np.ndarray) -> np.ndarray:
    """Per step, ``min_x max_policy E <phi(S_h, A_h), x>^2`` over the direction set.

    The inner maximum is a planning problem with reward only at step ``h``,
    solved exactly by backward induction for every direction at once.
    """
    H, S, A = spec.horizon, spec.num_states, spec.num_actions
    sq = ((spec.phi @ directions.T) ** 2).T.reshape(-1, S, A)  # (M, S, A)
    gam = np.empty(H)
    for h in range(H):
        rewards = np.zeros((len(directions), H, S, A))
        rewards[:, h] = sq
        _, values = backward_induction(transitions, init_dist, rewards)
        gam[h] = values.min()
    return gam


def sampler_T(d: int, kappa: float, gamma: float, epsilon: float = 0.0, C: float = 1.0) -> int:
    """Trajectories per step: ``C d kappa^2 / (gamma - eps)^2 log(d kappa / (gamma - eps))``."""
    gap = gamma - epsilon
    if gap <= 0 or kappa <= 0:
        raise ContractViolation("sizing needs gamma > epsilon and kappa > 0")
    return int(math.ceil(C * d * kappa**2 / gap**2 * math.log(max(d * kappa / gap, math.e))))


def _projector_plan(rf: RFModel, spec: LinearMDPSpec, Q: np.ndarray, k: int) -> np.ndarray:
    S, A, H = spec.num_states, spec.num_actions, spec.horizon
    rewards = np.zeros((H, S, A))
    rewards[k] = np.sum((spec.phi @ Q) ** 2, axis=1).reshape(S, A)
    actions, _ = rf.plan_actions(np.clip(rewards, 0.0, 1.0))
    return np.eye(A)[actions]


def _low_space(G: np.ndarray, kappa: float):
    w, V = np.linalg.eigh(G)
    low = V[:, w < kappa**2]
    return low @ low.T, w, V


def run_well_conditioned_sampler(mdp: TabularMDP, spec: LinearMDPSpec, rf: RFModel, num_users: int,
                                 kappa: float, T: int, rng: np.random.Generator) -> GrammianData:
    """Collect ``T`` trajectories per step so that every Grammian dominates ``kappa^2 I``.

    The rollout policy maximizes the projected reward ``||Q phi||^2`` at the
    current step, where ``Q`` projects on the eigenspace of the Grammian
    below ``kappa^2``; ``Q`` and the plan are refreshed after each sample
    while that eigenspace is non-empty.  Once it is empty the plan is fixed
    and the remaining trajectories are drawn in one batch.

    Raises :class:`DeficiencyError` naming the weakest eigen-direction if a
    Grammian ends below ``kappa^2``.
    """
    if T < 1 or kappa <= 0:
        raise ContractViolation("sampler needs T >= 1 and kappa > 0")
    H, d = spec.horizon, spec.dim
    data = GrammianData(kappa, T, spec.num_states)
    for k in range(H - 1):
        Q = np.eye(d)
        kernels = _projector_plan(rf, spec, Q, k)
        G = np.zeros((d, d))
        phis = np.empty((T, d))
        nxt = np.empty(T, dtype=int)
        firsts = np.empty(T, dtype=int)
        users = rng.integers(0, num_users, size=T)
        replans = 1
        t = 0
        while t < T:
            states, actions = sample_paths(mdp, kernels, 1, rng)
            phis[t] = spec.phi[states[0, k] * spec.num_actions + actions[0, k]]
            nxt[t], firsts[t] = states[0, k + 1], states[0, 0]
            G += np.outer(phis[t], phis[t])
            t += 1
            Qn, _, _ = _low_space(G, kappa)
            if not Qn.any():
                break
            if not np.allclose(Qn, Q, atol=1e-12):
                Q = Qn
                kernels = _projector_plan(rf, spec, Q, k)
                replans += 1
        if t < T:
            states, actions = sample_paths(mdp, kernels, T - t, rng)
            phis[t:] = spec.phi[states[:, k] * spec.num_actions + actions[:, k]]
            nxt[t:], firsts[t:] = states[:, k + 1], states[:, 0]
            G = phis.T @ phis
        w, V = np.linalg.eigh(G)
        if w[0] < kappa**2:
            raise DeficiencyError(f"step {k}: Grammian eigenvalue {w[0]:.4g} < kappa^2 = {kappa**2:.4g}",
                                  k, V[:, 0].copy(), float(w[0]))
        data.phi.append(phis)
        data.next_states.append(nxt)
        data.grams.append(G)
        data.users.append(users)
        data.replans.append(replans)
        if k == 0:
            data.init_states = firsts
    if H == 1:
        states, _ = sample_paths(mdp, np.full((1, spec.num_states, spec.num_actions), 1.0 / spec.num_actions),
                                 T, rng)
        data.init_states = states[:, 0]
    return data


# ------------------------------------------------------------- operators


class Operators:
    """State-weight maps for every step: ``first`` for step 0, ``transfers[j-1]`` for step ``j``."""

    def __init__(self, first: np.ndarray, transfers: list[np.ndarray], spec: LinearMDPSpec):
        self.first = np.asarray(first, dtype=float)
        self.transfers = transfers
        self.spec = spec

    def weights(self, j: int, nu) -> np.ndarray:
        if j == 0:
            return self.first
        return np.asarray(nu, dtype=float) @ self.transfers[j - 1]

    def apply(self, g: np.ndarray, nu, kernel: np.ndarray, j: int) -> np.ndarray:
        """Expectation of ``g`` ``(S, A, ...)`` at step ``j`` given ``nu`` and the step's kernel."""
        per_state = np.einsum("sa,sa...->s...", kernel, g)
        return np.tensordot(self.weights(j, nu), per_state, axes=(0, 0))


def estimated_operators(data: GrammianData, spec: LinearMDPSpec) -> Operators:
    return Operators(data.init_weights(), [data.transfer(k) for k in range(len(data.grams))], spec)


def exact_operators(mdp: TabularMDP, spec: LinearMDPSpec) -> Operators:
    return Operators(mdp.init_dist, [spec.mu[k] for k in range(spec.horizon - 1)], spec)


def estimate_T_hat(g: np.ndarray, nu, kernel: np.ndarray, data: GrammianData, h: int) -> np.ndarray:
    """Sample-average estimate of ``E g(S_h, A_h)`` given ``nu``, term by term.

    Step 0 averages over the stored initial states; later steps weight each
    stored next state by ``alpha_t = phi_t^T G^-1 nu``.
    """
    per_state = np.einsum("sa,sa...->s...", kernel, g)
    if h == 0:
        return per_state[data.init_states].mean(axis=0)
    alpha = data.phi[h - 1] @ np.linalg.solve(data.grams[h - 1], np.asarray(nu, dtype=float))
    return np.tensordot(alpha, per_state[data.next_states[h - 1]], axes=(0, 0))


def exact_T(g: np.ndarray, nu, kernel: np.ndarray, spec: LinearMDPSpec, mdp: TabularMDP, h: int) -> np.ndarray:
    return exact_operators(mdp, spec).apply(g, nu, kernel, h)


def alphas(data: GrammianData, h: int, nu) -> np.ndarray:
    return data.phi[h - 1] @ np.linalg.solve(data.grams[h - 1], np.asarray(nu, dtype=float))


def _project_ball(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1.0)


def greedy_chain(ops: Operators, kernels: np.ndarray, upto: int):
    """Forward chain ``nu_j = proj(T_j(phi, nu_{j-1}, pi_j))`` for ``j <= upto``.

    Returns the list of chain points and the summed l1 projection residuals.
    """
    phi = ops.spec.features("phi")
    nus, resid = [], 0.0
    prev = None
    for j in range(upto + 1):
        raw = ops.apply(phi, prev, kernels[j], j)
        cur = _project_ball(raw)
        resid += float(np.abs(raw - cur).sum())
        nus.append(cur)
        prev = cur
    return nus, resid


def chain_objective(ops: Operators, kernels: np.ndarray, chain: list, nu) -> float:
    """``F(Pi, nu_1..nu_{h-1}, nu)`` for an explicit chain of ``h - 1`` points."""
    phi = ops.spec.features("phi")
    pts = list(chain) + [np.asarray(nu, dtype=float)]
    total, prev = 0.0, None
    for j, target in enumerate(pts):
        total += float(np.abs(ops.apply(phi, prev, kernels[j], j) - target).sum())
        prev = target
    return total


def e_hat(kernels: np.ndarray, nu, h: int, ops: Operators) -> float:
    """Forward-greedy value of ``F`` for reaching ``nu`` at step ``h``.

    The chain through steps ``0..h-1`` follows the operators exactly, so the
    only slack comes from projections onto the unit ball; the result upper
    bounds the infimum over chains and equals it when no projection binds.
    """
    if h == 0:
        return chain_objective(ops, kernels, [], nu)
    chain, _ = greedy_chain(ops, kernels, h - 1)
    return chain_objective(ops, kernels, chain, nu)


# ---------------------------------------------------------- policy search


@dataclass
class SearchResult:
    h: int
    policy: SoftmaxPolicy
    nu_hat: np.ndarray | None
    certified: float
    constraint: float
    choice: tuple
    evaluated: int
    feasible: int


def _step_tables(net: PolicyNet, spec: LinearMDPSpec, j: int, F: np.ndarray | None):
    K = net.step_kernels(spec, j)  # (m, S, A)
    pphi = np.einsum("ksa,sad->ksd", K, spec.features("phi"))
    pf = None if F is None else np.einsum("ksa,sax->ksx", K, F)
    return pphi, pf


def policy_search_fh(h: int, ops: Operators, net: PolicyNet, xi: float, eta0: float,
                     directions: np.ndarray, chunk: int = 4096) -> SearchResult:
    """Net policy maximizing the estimated worst-direction ``E f(S_h, A_h; x)``.

    Every combination of candidates for steps ``0..h`` is scored.  Steps
    before ``h`` are followed through the greedy chain; the chain endpoint is
    the estimated feature mean ``nu_hat`` at step ``h - 1`` and combinations
    whose projection slack exceeds ``eta0`` are infeasible.
    """
    spec = ops.spec
    S, A = spec.num_states, spec.num_actions
    F = f_values(spec.psi, directions, xi).reshape(S, A, -1)
    # chain over steps 0..h-1, combinations in lexicographic order
    nus = np.zeros((1, spec.dim))
    resid = np.zeros(1)
    for j in range(h):
        pphi, _ = _step_tables(net, spec, j, None)
        if j == 0:
            raw = np.einsum("s,ksd->kd", ops.first, pphi)
        else:
            w = nus @ ops.transfers[j - 1]  # (c, S)
            raw = np.einsum("cs,ksd->ckd", w, pphi).reshape(-1, spec.dim)
            resid = np.repeat(resid, pphi.shape[0])
        proj = _project_ball(raw)
        resid = resid + np.abs(raw - proj).sum(axis=1)
        nus = proj
    _, pf = _step_tables(net, spec, h, F)
    m = pf.shape[0]
    if h == 0:
        w = ops.first[None]
    else:
        w = nus @ ops.transfers[h - 1]
    best_val, best_idx = -np.inf, None
    feasible_mask = resid <= eta0
    for lo in range(0, w.shape[0], max(1, chunk // m)):
        hi = min(w.shape[0], lo + max(1, chunk // m))
        vals = np.einsum("cs,ksx->ckx", w[lo:hi], pf).min(axis=2)  # (c, m)
        vals[~feasible_mask[lo:hi]] = -np.inf
        i = int(np.argmax(vals))
        if vals.flat[i] > best_val:
            best_val, best_idx = float(vals.flat[i]), (lo + i // m, i % m)
    n_feasible = int(feasible_mask.sum())
    if n_feasible == 0 or best_idx is None or not np.isfinite(best_val):
        raise InfeasibleSearchError(f"step {h}: no net policy keeps the chain slack within eta0 = {eta0:g}")
    combo, last = best_idx
    msize = net.size_per_step
    choice = [int(c) for c in np.unravel_index(combo, (msize,) * h)] if h else []
    choice.append(int(last))
    return SearchResult(h, net.policy(choice), None if h == 0 else nus[combo].copy(), best_val,
                        float(resid[combo]), tuple(choice), int(w.shape[0] * m), n_feasible * m)


# ------------------------------------------------------------- diagnostics


@dataclass(frozen=True)
class DistPropReport:
    zeta_margin: float  # min_x sqrt(d) E|<psi, x>| / zeta, needs >= 1
    xi_margin: float  # lambda_max(E psi psi^T) d xi^2, needs <= 1
    norm_ok: bool
    worst_direction: np.ndarray

    @property
    def passed(self) -> bool:
        return self.norm_ok and self.zeta_margin >= 1 and self.xi_margin <= 1


def pair_law(kernels: np.ndarray, mdp: TabularMDP, h: int) -> np.ndarray:
    return occupancy_array(mdp.transitions, mdp.init_dist, kernels)[h].reshape(-1)


def dist_prop_check(kernels: np.ndarray, spec: LinearMDPSpec, mdp: TabularMDP, h: int, zeta: float, xi: float,
                    directions: np.ndarray | None = None) -> DistPropReport:
    """Exact check of the isotropy conditions for ``psi(S_h, A_h)`` under a policy."""
    d = spec.dim
    X = direction_set(d) if directions is None else directions
    p = pair_law(kernels, mdp, h)
    absmean = np.abs(spec.psi @ X.T).T @ p
    i = int(np.argmin(absmean))
    second = (spec.psi * p[:, None]).T @ spec.psi
    lam = float(np.linalg.eigvalsh(second)[-1])
    norm_ok = bool(np.max(np.linalg.norm(spec.psi[p > 0], axis=1), initial=0.0) <= 1 + 1e-12)
    return DistPropReport(math.sqrt(d) * float(absmean[i]) / zeta, lam * d * xi**2, norm_ok, X[i].copy())


def j_functional(kernels: np.ndarray, spec: LinearMDPSpec, mdp: TabularMDP, h: int, xi: float,
                 directions: np.ndarray | None = None) -> float:
    """Exact ``min_x E f(S_h, A_h; x)`` over the direction set."""
    X = direction_set(spec.dim) if directions is None else directions
    p = pair_law(kernels, mdp, h)
    return float(np.min(p @ f_values(spec.psi, X, xi)))


# --------------------------------------------------------------- planning


def plan_users_linear(theta_hat: np.ndarray, rf: RFModel, spec: LinearMDPSpec):
    """Plan every user on rewards ``<theta_hat_hu, psi>`` clipped into [0, 1].

    Returns ``(actions (N, H, S), planned values (N,), clip amount)``; the clip
    amount is the largest distance any reward moved when clipped.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    H, N, _ = theta_hat.shape
    raw = (theta_hat @ spec.psi.T).transpose(1, 0, 2).reshape(N, H, spec.num_states, spec.num_actions)
    clipped = np.clip(raw, 0.0, 1.0)
    actions, values = rf.plan_actions(clipped)
    return actions, values, float(np.max(np.abs(raw - clipped), initial=0.0))


# --------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class LinearPipelineConfig:
    epsilon: float = 0.05
    delta: float = 0.1
    xi: float = 0.1
    zeta: float | None = None  # target for reporting; the search certifies its own value
    kappa: float = 5.0
    T: int | None = None  # None: sampler_T with the measured reachability
    T_const: float = 1.0
    eta: float = 0.5
    eta0: float = 0.05
    radius: float = 3.0
    net_budget: int = 4096
    x_directions: int = 512
    rowwise_C: float = 0.25
    rf_backend: str = "exact"
    rf_budget: int = 0
    seed: int = 0


def _search_rows(results: list[SearchResult], zeta: float | None, net: PolicyNet, M: int) -> list[dict]:
    return [{"h": r.h + 1, "certified_value": r.certified,
             "zeta_over_2_target": float("nan") if zeta is None else zeta / 2,
             "constraint_value": r.constraint, "net_size": net.size_per_step ** (r.h + 1),
             "x_directions": M} for r in results]


def run_linear_pipeline(instance: LinearInstance, cfg: LinearPipelineConfig, record_timing: bool = True) -> RunReport:
    mdp, spec, theta = instance.mdp, instance.spec, instance.theta
    H, d, N = spec.horizon, spec.dim, theta.num_users
    rep = RunReport(cfg.seed, "linear", config_hash({"cfg": asdict(cfg), "instance": asdict(instance.params)}))

    def stamp(name, t0):
        rep.wall_ms[name] = (time.perf_counter() - t0) * 1e3 if record_timing else 0.0

    t0 = time.perf_counter()
    rf = rf_fit(mdp, cfg.rf_budget, cfg.rf_backend, rngmod.stream(cfg.seed, "linear", "rf"))
    rep.phase_trajectories["phase1"] = rf.trajectories_used
    stamp("phase1", t0)

    t0 = time.perf_counter()
    X = direction_set(d, cfg.x_directions, seed=cfg.seed)
    gamma = reachability_gamma(rf.est_transitions, rf.est_init, spec, X)
    sizing_gamma = float(gamma[: max(H - 1, 1)].min())
    T = cfg.T if cfg.T is not None else sampler_T(d, cfg.kappa, sizing_gamma, C=cfg.T_const)
    try:
        data = run_well_conditioned_sampler(mdp, spec, rf, N, cfg.kappa, T,
                                            rngmod.stream(cfg.seed, "linear", "grammian"))
    except DeficiencyError as exc:
        rep.status = "failed:grammian"
        rep.extra.update({"deficient_step": exc.h, "deficient_direction": exc.direction,
                          "deficient_eigenvalue": exc.eigenvalue})
        raise PhaseFailure("grammian", exc, rep) from exc
    rep.phase_trajectories["phase2"] = T * max(H - 1, 1)
    ops = estimated_operators(data, spec)
    net = build_policy_net(spec, cfg.eta, cfg.radius, cfg.net_budget, seed=cfg.seed)
    results = []
    try:
        for h in range(H):
            results.append(policy_search_fh(h, ops, net, cfg.xi, cfg.eta0, X))
    except InfeasibleSearchError as exc:
        rep.status = "failed:search"
        raise PhaseFailure("search", exc, rep) from exc
    stamp("phase2", t0)
    rep.extra.update({"gamma": gamma, "T": T, "kappa": cfg.kappa, "grammian_min_eig": data.min_eigenvalues,
                      "replans": data.replans, "net_per_step": net.size_per_step,
                      "net_covering_radius": net.covering_radius, "net_covers": net.covers,
                      "certified": [r.certified for r in results],
                      "search": _search_rows(results, cfg.zeta, net, len(X))})
    if min(r.certified for r in results) <= 0:
        rep.status = "failed:search"
        raise PhaseFailure("search", InfeasibleSearchError("no net policy certifies a positive isotropy value"),
                           rep)

    t0 = time.perf_counter()
    theta_hat = np.zeros((H, N, d))
    queries, rounds = 0, []
    margins = []
    for h, res in enumerate(results):
        kernels = res.policy.kernels(spec)
        margins.append(dist_prop_check(kernels, spec, mdp, h, res.certified, cfg.xi, X))
        oracle = RolloutOracle(mdp, spec, theta.thetas[h], kernels, h, rngmod.stream(cfg.seed, "linear", "rows", h))
        rcfg = RowwiseConfig(res.certified, cfg.xi, cfg.delta, cfg.rowwise_C, seed=cfg.seed * 100 + h)
        try:
            est, state, _ = run_estimator(oracle, N, d, theta.rank, rcfg)
        except (NonTerminationError, FitFailure) as exc:
            rep.phase_trajectories["phase3"] = queries + oracle.queries
            rep.status = "failed:rowwise"
            raise PhaseFailure("rowwise", exc, rep) from exc
        theta_hat[h] = est
        queries += oracle.queries
        rounds.append(state.history)
    rep.phase_trajectories["phase3"] = queries
    rep.recovery_errors = [float(np.max(np.abs(theta_hat[h] - theta.thetas[h]))) for h in range(H)]
    stamp("phase3", t0)

    t0 = time.perf_counter()
    actions, _, clip = plan_users_linear(theta_hat, rf, spec)
    true_rewards = theta.user_rewards(spec)
    _, v_opt = backward_induction(mdp.transitions, mdp.init_dist, true_rewards)
    rep.user_subopt = (v_opt - deterministic_values(mdp, true_rewards, actions)).tolist()
    stamp("phase4", t0)
    rep.extra.update({"rowwise_rounds": rounds, "clip_amount": clip, "clip_warning": clip > CLIP_WARN,
                      "dist_prop": [{"zeta_margin": m.zeta_margin, "xi_margin": m.xi_margin, "passed": m.passed}
                                    for m in margins],
                      "all_users_eps_optimal": bool(rep.max_subopt <= cfg.epsilon)})
    return rep
