"""Collaborative learning pipeline for tabular MDPs with low-rank user rewards.

Phases: reward-free fit, uniform-mask reward querying, per-step completion of
the queried columns, and per-user planning on the zero-filled reconstruction.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .completion import RECOVERY_TOL, MaskedMatrix, complete_fixed_rank
from .errors import ContractViolation, NonTerminationError, PhaseFailure, RecoveryError
from .instances import RewardMatrixSet, TabularInstance
from .mdp import TabularMDP, backward_induction, deterministic_values, sample_paths
from .reports import RunReport, config_hash
from .reward_free import RFModel, rf_fit


@dataclass(frozen=True)
class PipelineConfig:
    epsilon: float = 0.05
    delta: float = 0.1
    mask_rate: float | None = None  # None: derive from the sample-size formula
    const_multiplier: float = 1.0
    seed: int = 0
    rf_backend: str = "exact"
    rf_budget: int = 0
    safety_factor: float = 10.0
    completion_restarts: int = 5
    coherence_mode: str = "measured"  # or "ideal" (mu0 = mu1 = 1)

    def __post_init__(self):
        if self.epsilon <= 0 or not 0 < self.delta < 1:
            raise ContractViolation("epsilon must be positive and delta in (0, 1)")
        if self.mask_rate is not None and not 0 < self.mask_rate <= 0.5:
            raise ContractViolation("mask_rate must lie in (0, 1/2]")


def mask_rate_from_theorem(N: int, S: int, A: int, r: int, mu0: float, mu1: float, H: int,
                           delta: float, C: float) -> tuple[float, bool]:
    """Sampling rate ``C max(mu1^2, mu0) r (N + SA) log^2(SA) log(H/delta) / (N SA)``.

    Returns ``(p, clamped)`` with ``p`` clamped into ``(0, 1/2]``; a
    non-positive value is returned as 0 with the flag set and must not be used.
    """
    SA = S * A
    p = C * max(mu1**2, mu0) * r * (N + SA) * math.log(SA) ** 2 * math.log(H / delta) / (N * SA)
    if p <= 0:
        return 0.0, True
    if p > 0.5:
        return 0.5, True
    return p, False


def quota(N: int, p: float) -> int:
    """Observations per column: ``ceil(N p)`` with a guard against round-off."""
    return max(1, math.ceil(N * p - 1e-9))


class AuditedRewards:
    """Query access to user rewards that records every entry read."""

    def __init__(self, rewards: RewardMatrixSet):
        self._R = rewards.matrices
        self.reads = np.zeros(self._R.shape, dtype=np.int64)

    def query(self, h: int, user: int, col: int) -> float:
        self.reads[h, user, col] += 1
        return float(self._R[h, user, col])


@dataclass
class ActiveSets:
    active: np.ndarray  # (H, S*A) bool
    history_sizes: list = field(default_factory=list)

    def indicator(self, S: int, A: int) -> np.ndarray:
        H = self.active.shape[0]
        return self.active.reshape(H, S, A).astype(float)


@dataclass
class PartialRewardMatrix:
    values: np.ndarray  # (H, N, S*A); meaningful only where observed
    observed: np.ndarray  # (H, N, S*A) bool, False plays the role of the unknown sentinel
    counts: np.ndarray  # (H, S*A)
    quota: int


@dataclass
class MaskSamplerResult:
    active: ActiveSets
    partial: PartialRewardMatrix
    trajectories: int
    users_drawn: list
    replans: int
    final_value: float


def run_mask_sampler(rf: RFModel, users: RewardMatrixSet | AuditedRewards, mdp: TabularMDP, epsilon: float,
                     p: float, rng: np.random.Generator, safety_factor: float = 10.0,
                     batch: int = 64) -> MaskSamplerResult:
    """Query a uniform mask of user rewards, steering exploration to active cells.

    While the planned value of visiting an active cell exceeds ``epsilon/2``,
    draw a uniform user, roll the plan for the indicator of active cells and
    record any unseen entry met on an active cell.  A cell leaves its active
    set once ``ceil(N p)`` users have been recorded there.

    Paths are drawn in small batches under the current plan; when a cell
    leaves an active set the rest of the batch is discarded unseen, so every
    counted trajectory follows the plan for the active sets it started with.
    """
    audit = users if isinstance(users, AuditedRewards) else AuditedRewards(users)
    H, N, SA = audit._R.shape
    S, A = mdp.num_states, mdp.num_actions
    q = quota(N, p)
    if q > N:
        raise ContractViolation("quota exceeds the number of users")
    active = ActiveSets(np.ones((H, SA), dtype=bool))
    values = np.zeros((H, N, SA))
    observed = np.zeros((H, N, SA), dtype=bool)
    counts = np.zeros((H, SA), dtype=np.int64)
    cap = safety_factor * 16 * N * p * SA * H / epsilon
    actions, value = rf.plan_actions(active.indicator(S, A))
    value = float(value)
    replans = 1
    t = 0
    users_drawn = []
    while value > epsilon / 2:
        if t >= cap:
            raise NonTerminationError(
                f"mask sampler exceeded {cap:.0f} trajectories",
                {"trajectories": t, "planned_value": value, "active": active.active.sum(axis=1).tolist(),
                 "counts_min": int(counts.min())})
        n = int(min(batch, max(1, cap - t)))
        drawn = rng.integers(0, N, size=n)
        kernels = np.eye(A)[actions]
        states, acts = sample_paths(mdp, kernels, n, rng)
        cols = states * A + acts
        changed = False
        for i in range(n):
            u = int(drawn[i])
            t += 1
            users_drawn.append(u)
            for h in range(H):
                c = cols[i, h]
                if active.active[h, c] and not observed[h, u, c]:
                    values[h, u, c] = audit.query(h, u, c)
                    observed[h, u, c] = True
                    counts[h, c] += 1
                    if counts[h, c] >= q:
                        active.active[h, c] = False
                        changed = True
            if changed:
                break
        if changed:
            active.history_sizes.append(active.active.sum(axis=1).tolist())
            actions, value = rf.plan_actions(active.indicator(S, A))
            value = float(value)
            replans += 1
    partial = PartialRewardMatrix(values, observed, counts, q)
    return MaskSamplerResult(active, partial, t, users_drawn, replans, value)


def terminal_reach(mdp: TabularMDP, active: ActiveSets) -> float:
    """``sup over policies of sum_h P(S_h, A_h in G_h)`` under the true dynamics."""
    _, v = backward_induction(mdp.transitions, mdp.init_dist, active.indicator(mdp.num_states, mdp.num_actions))
    return float(v)


@dataclass
class CompletedStep:
    columns: np.ndarray  # indices of completed columns (complement of the active set)
    matrix: np.ndarray  # (N, len(columns))
    residual: float
    identifiable: bool


def complete_rewards(partial: PartialRewardMatrix, active: ActiveSets, r: int, restarts: int = 5,
                     seed: int = 0) -> list[CompletedStep]:
    H, N, SA = partial.values.shape
    out = []
    failures = {}
    for h in range(H):
        cols = np.flatnonzero(~active.active[h])
        if cols.size and np.any(partial.observed[h][:, cols].sum(axis=0) != partial.counts[h, cols]):
            raise ContractViolation(f"observation counts out of sync at step {h}")
        if cols.size and np.any(partial.counts[h, cols] != partial.quota):
            raise ContractViolation(f"completed columns at step {h} lack the full quota")
        mask = partial.observed[h][:, cols]
        vals = partial.values[h][:, cols]
        if cols.size == 0:
            out.append(CompletedStep(cols, np.zeros((N, 0)), 0.0, True))
            continue
        if mask.all():
            out.append(CompletedStep(cols, vals.copy(), 0.0, True))
            continue
        rank = min(r, N, cols.size)
        res = complete_fixed_rank(MaskedMatrix(vals, mask), rank, restarts=restarts,
                                  seed=int(rngmod.stream(seed, "tabular", "completion", h).integers(2**31)))
        step = CompletedStep(cols, res.completed, res.residual, bool(res.identifiable))
        out.append(step)
        if not res.converged or not res.identifiable:
            failures[h] = {"residual": res.residual, "identifiable": bool(res.identifiable)}
    if failures:
        detail = ", ".join(f"h={h + 1}: residual {f['residual']:.3g}, identifiable={f['identifiable']}"
                           for h, f in failures.items())
        err = RecoveryError(f"completion not certified ({detail})", failures)
        err.steps = out
        raise err
    return out


def assemble_rewards(completed: list[CompletedStep], active: ActiveSets, N: int, S: int, A: int) -> np.ndarray:
    """Zero-filled reconstruction, returned per user as ``(N, H, S, A)`` clipped to [0, 1]."""
    H = active.active.shape[0]
    Rbar = np.zeros((H, N, S * A))
    for h, step in enumerate(completed):
        Rbar[h][:, step.columns] = step.matrix
    Rbar = np.clip(Rbar, 0.0, 1.0)
    return Rbar.transpose(1, 0, 2).reshape(N, H, S, A)


def assemble_and_plan(completed: list[CompletedStep], active: ActiveSets, rf: RFModel, N: int):
    """Plan every user on the reconstruction; returns ``(actions (N, H, S), values (N,))``."""
    rewards = assemble_rewards(completed, active, N, rf.num_states, rf.num_actions)
    return rf.plan_actions(rewards)


def user_suboptimality(mdp: TabularMDP, rewards: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """True optimal value minus true value of each user's planned policy."""
    _, v_opt = backward_induction(mdp.transitions, mdp.init_dist, rewards)
    return v_opt - deterministic_values(mdp, rewards, actions)


def run_tabular_pipeline(instance: TabularInstance, cfg: PipelineConfig, record_timing: bool = True) -> RunReport:
    mdp, users = instance.mdp, instance.rewards
    N, S, A, H, r = users.num_users, mdp.num_states, mdp.num_actions, mdp.horizon, users.rank
    report = RunReport(cfg.seed, "tabular", config_hash({"cfg": asdict(cfg), "instance": asdict(instance.params)}))
    clock = time.perf_counter

    def stamp(name, t0):
        report.wall_ms[name] = (clock() - t0) * 1e3 if record_timing else 0.0

    t0 = clock()
    rf = rf_fit(mdp, cfg.rf_budget, cfg.rf_backend, rngmod.stream(cfg.seed, "tabular", "phase1"), N)
    report.phase_trajectories["phase1"] = rf.trajectories_used
    stamp("phase1", t0)

    if cfg.mask_rate is not None:
        p, clamped = cfg.mask_rate, False
    else:
        if cfg.coherence_mode == "ideal":
            mu0 = mu1 = 1.0
        else:
            mu0 = max(c.mu0 for c in instance.coherences)
            mu1 = max(c.mu1 for c in instance.coherences)
        p, clamped = mask_rate_from_theorem(N, S, A, r, mu0, mu1, H, cfg.delta, cfg.const_multiplier)
        if p <= 0:
            raise PhaseFailure("phase2", ContractViolation("mask rate evaluates to 0"), report)
    report.extra.update({"mask_rate": p, "mask_rate_clamped": clamped, "quota": quota(N, p)})

    t0 = clock()
    audit = AuditedRewards(users)
    try:
        ms = run_mask_sampler(rf, audit, mdp, cfg.epsilon, p, rngmod.stream(cfg.seed, "tabular", "phase2"),
                              cfg.safety_factor)
    except NonTerminationError as exc:
        report.status = "failed:phase2"
        raise PhaseFailure("phase2", exc, report) from exc
    report.phase_trajectories["phase2"] = ms.trajectories
    report.extra.update({
        "bound_phase2": 16 * N * p * S * A * H / cfg.epsilon,
        "terminal_reach": terminal_reach(mdp, ms.active),
        "planned_reach": ms.final_value,
        "active_sizes": ms.active.active.sum(axis=1).tolist(),
        "replans": ms.replans,
        "unqueried_reads": int(audit.reads[~ms.partial.observed].sum()),
        "max_reads_per_entry": int(audit.reads.max()),
    })
    stamp("phase2", t0)

    t0 = clock()
    try:
        completed = complete_rewards(ms.partial, ms.active, r, cfg.completion_restarts, cfg.seed)
    except RecoveryError as exc:
        report.status = "failed:phase3"
        report.extra["recovery_failures"] = {str(h + 1): v for h, v in exc.failures.items()}
        stamp("phase3", t0)
        raise PhaseFailure("phase3", exc, report) from exc
    truth = users.matrices
    for h, step in enumerate(completed):
        err = float(np.max(np.abs(step.matrix - truth[h][:, step.columns]))) if step.columns.size else 0.0
        report.recovery_errors.append(err)
        report.fit_residuals.append(step.residual)
    report.extra["recovered"] = bool(max(report.recovery_errors) <= RECOVERY_TOL)
    stamp("phase3", t0)

    t0 = clock()
    actions, v_hat = assemble_and_plan(completed, ms.active, rf, N)
    gaps = user_suboptimality(mdp, users.all_user_rewards(), actions)
    report.user_subopt = gaps.tolist()
    report.extra["all_users_eps_optimal"] = bool(gaps.max() <= cfg.epsilon)
    stamp("phase4", t0)
    return report
