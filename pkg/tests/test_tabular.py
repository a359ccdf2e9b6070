import math

import numpy as np
import pytest

from collabrl import rng as rngmod
from collabrl.errors import ContractViolation, PhaseFailure, RecoveryError
from collabrl.instances import RewardMatrixSet, TabularInstanceParams, gen_tabular_instance
from collabrl.mdp import TabularMDP, backward_induction
from collabrl.reward_free import exact_model
from collabrl.tabular import (ActiveSets, AuditedRewards, PartialRewardMatrix, PipelineConfig,
                              assemble_and_plan, complete_rewards, mask_rate_from_theorem, quota,
                              run_mask_sampler, run_tabular_pipeline, terminal_reach)

from conftest import random_mdp


def test_mask_rate_arithmetic():
    # same formula evaluated with log(32) = 5 log 2 and log(H / delta) = log 30
    C = 1e-3
    expected = C * 2 * 96 * 25 * math.log(2) ** 2 * math.log(30) / 2048
    p, clamped = mask_rate_from_theorem(64, 8, 4, 2, 1.0, 1.0, 3, 0.1, C)
    assert p == pytest.approx(expected, rel=1e-12)
    assert not clamped


def test_mask_rate_clamps():
    assert mask_rate_from_theorem(64, 8, 4, 2, 1.0, 1.0, 3, 0.1, 1.0) == (0.5, True)
    assert mask_rate_from_theorem(64, 8, 4, 2, 1.0, 1.0, 3, 0.1, 1e6) == (0.5, True)
    assert mask_rate_from_theorem(64, 8, 4, 2, 1.0, 1.0, 3, 0.1, 0.0) == (0.0, True)


def test_zero_rate_fails_on_use():
    inst = gen_tabular_instance(TabularInstanceParams(8, 2, 2, 2, 1, seed=0))
    with pytest.raises(PhaseFailure):
        run_tabular_pipeline(inst, PipelineConfig(const_multiplier=0.0))


def test_quota_rounds_up():
    assert quota(64, 0.4) == 26
    assert quota(10, 0.3) == 3
    assert quota(100, 0.25) == 25


def test_config_rejects_rates_above_half():
    with pytest.raises(ContractViolation):
        PipelineConfig(mask_rate=0.6)


def test_large_epsilon_returns_immediately():
    inst = gen_tabular_instance(TabularInstanceParams(8, 3, 2, 2, 1, seed=0))
    res = run_mask_sampler(exact_model(inst.mdp), inst.rewards, inst.mdp, 2 * 2, 0.5, rngmod.stream(0))
    assert res.trajectories == 0
    assert res.active.active.all()


def test_single_cell_coupon_process():
    mdp = TabularMDP(1, 1, 1, np.zeros((0, 1, 1)), np.ones(1))
    R = np.random.default_rng(0).random((1, 10, 1))
    users = RewardMatrixSet(1, 1, 1, R, np.ones((1, 10, 1)), np.ones((1, 1, 1)))
    for seed in range(10):
        res = run_mask_sampler(exact_model(mdp), users, mdp, 0.05, 0.3, rngmod.stream(seed, "coupon"))
        seen, stop = set(), None
        for t, u in enumerate(res.users_drawn):
            seen.add(u)
            if len(seen) == 3:
                stop = t + 1
                break
        assert res.trajectories == stop
        obs = res.partial.observed[0, :, 0]
        assert obs.sum() == 3
        assert np.array_equal(res.partial.values[0, obs, 0], R[0, obs, 0])


@pytest.fixture(scope="module")
def desk_run():
    inst = gen_tabular_instance(TabularInstanceParams(32, 6, 3, 3, 2, seed=4))
    audit = AuditedRewards(inst.rewards)
    res = run_mask_sampler(exact_model(inst.mdp), audit, inst.mdp, 0.05, 0.4, rngmod.stream(4, "mask"))
    return inst, audit, res


def test_observed_entries_are_exact(desk_run):
    inst, audit, res = desk_run
    obs = res.partial.observed
    assert np.array_equal(res.partial.values[obs], inst.rewards.matrices[obs])
    assert audit.reads[~obs].sum() == 0
    assert audit.reads.max() <= 1


def test_counts_respect_quota(desk_run):
    _, _, res = desk_run
    q = res.partial.quota
    assert np.array_equal(res.partial.observed.sum(axis=1), res.partial.counts)
    assert res.partial.counts.max() <= q
    assert np.all(res.partial.counts[~res.active.active] == q)


def test_active_sets_shrink(desk_run):
    _, _, res = desk_run
    sizes = np.array(res.active.history_sizes)
    assert np.all(np.diff(sizes, axis=0) <= 0)


def test_terminal_reach_bound(desk_run):
    inst, _, res = desk_run
    assert terminal_reach(inst.mdp, res.active) <= 5 * 0.05 / 8
    assert res.trajectories <= 16 * 32 * 0.4 * 18 * 3 / 0.05


def _partial_from(M, mask, q):
    H = 1
    N, n = M.shape
    return (PartialRewardMatrix(np.where(mask, M, 0)[None], mask[None], mask.sum(axis=0)[None], q),
            ActiveSets(np.zeros((H, n), dtype=bool)))


def test_fully_observed_columns_unchanged():
    M = np.random.default_rng(1).random((6, 4))
    partial, active = _partial_from(M, np.ones((6, 4), dtype=bool), 6)
    out = complete_rewards(partial, active, 2)
    assert np.array_equal(out[0].matrix, M)


def test_rank_one_half_mask_recovered():
    g = np.random.default_rng(2)
    N, n = 20, 16
    M = np.outer(g.uniform(0.2, 1, N), g.uniform(0.2, 1, n))
    mask = np.zeros((N, n), dtype=bool)
    for j in range(n):
        mask[g.choice(N, N // 2, replace=False), j] = True
    partial, active = _partial_from(M, mask, N // 2)
    out = complete_rewards(partial, active, 1)
    assert np.max(np.abs(out[0].matrix - M)) <= 1e-6


def test_coherent_spike_is_reported():
    N = 20
    M = np.zeros((N, N))
    M[0, 0] = 1.0
    g = np.random.default_rng(3)
    mask = np.zeros((N, N), dtype=bool)
    for j in range(N):
        mask[g.choice(np.arange(1, N), 4, replace=False), j] = True  # row 0 never observed
    partial, active = _partial_from(M, mask, 4)
    with pytest.raises(RecoveryError) as err:
        complete_rewards(partial, active, 1)
    assert 0 in err.value.failures


def test_empty_active_sets_plan_true_optima():
    inst = gen_tabular_instance(TabularInstanceParams(10, 3, 2, 2, 2, seed=1))
    H, N, SA = inst.rewards.matrices.shape
    partial = PartialRewardMatrix(inst.rewards.matrices.copy(), np.ones((H, N, SA), dtype=bool),
                                  np.full((H, SA), N), N)
    active = ActiveSets(np.zeros((H, SA), dtype=bool))
    completed = complete_rewards(partial, active, 2)
    _, v = assemble_and_plan(completed, active, exact_model(inst.mdp), N)
    _, v_opt = backward_induction(inst.mdp.transitions, inst.mdp.init_dist, inst.rewards.all_user_rewards())
    assert np.allclose(v, v_opt, atol=1e-12)


def test_all_active_gives_zero_plan():
    inst = gen_tabular_instance(TabularInstanceParams(10, 3, 2, 2, 2, seed=1))
    H, N, SA = inst.rewards.matrices.shape
    partial = PartialRewardMatrix(np.zeros((H, N, SA)), np.zeros((H, N, SA), dtype=bool),
                                  np.zeros((H, SA), dtype=int), 3)
    active = ActiveSets(np.ones((H, SA), dtype=bool))
    _, v = assemble_and_plan(complete_rewards(partial, active, 2), active, exact_model(inst.mdp), N)
    assert np.all(v == 0)


def test_tiny_instance_half_rate_is_exact():
    # rank 1: at this size a rank-2 row often gets a single observation and is not identifiable
    inst = gen_tabular_instance(TabularInstanceParams(20, 3, 2, 2, 1, seed=0))
    rep = run_tabular_pipeline(inst, PipelineConfig(mask_rate=0.5, seed=0))
    assert rep.status == "ok"
    assert rep.max_subopt <= 1e-12
    assert max(rep.recovery_errors) <= 1e-6


def test_fixed_seed_gives_identical_report():
    inst = gen_tabular_instance(TabularInstanceParams(20, 3, 2, 2, 1, seed=0))
    cfg = PipelineConfig(mask_rate=0.5, seed=0)
    a = run_tabular_pipeline(inst, cfg, record_timing=False)
    b = run_tabular_pipeline(inst, cfg, record_timing=False)
    assert a.to_json() == b.to_json()
    assert a.total_trajectories == sum(a.phase_trajectories.values())


def test_failed_run_keeps_identical_partial_report():
    # seed 2 at p=0.4 leaves a column without a certificate
    inst = gen_tabular_instance(TabularInstanceParams(20, 3, 2, 2, 1, seed=2))
    cfg = PipelineConfig(mask_rate=0.4, seed=2)
    parts = []
    for _ in range(2):
        with pytest.raises(PhaseFailure) as err:
            run_tabular_pipeline(inst, cfg, record_timing=False)
        assert err.value.phase == "phase3"
        parts.append(err.value.partial)
    assert parts[0].status == "failed:phase3"
    assert parts[0].to_json() == parts[1].to_json()
