import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabrl import rng as rngmod
from collabrl.errors import ContractViolation, DegenerateInputError, NonTerminationError
from collabrl.instances import IsotropicInstanceParams, gen_isotropic_instance
from collabrl.linear import pair_law
from collabrl.rowwise import (RolloutOracle, RowwiseConfig, SyntheticOracle, dist_constants, fit_rank_r_zero_loss,
                              kt_schedule, max_rounds, measure_dist_constants, run_estimator, signed_basis_sampler,
                              sphere_sampler, verify_rows)
from collabrl.softmax import softmax_kernels


def low_rank_rows(N, d, r, seed):
    g = np.random.default_rng(seed)
    T = g.standard_normal((N, r)) @ g.standard_normal((r, d))
    return T / np.linalg.norm(T, axis=1).max()


def test_schedule_value():
    # 25301.7496... total samples over 100 rows
    assert kt_schedule(100, 20, 3, 0.5, 0.5, 0.1, 100, 1.0) == 254


def test_schedule_zero_constant():
    assert kt_schedule(10, 4, 1, 0.5, 0.5, 0.1, 10, 0.0) == 0
    oracle = SyntheticOracle(np.zeros((4, 4)), sphere_sampler(), rngmod.stream(0))
    with pytest.raises(DegenerateInputError):
        run_estimator(oracle, 4, 4, 1, RowwiseConfig(0.5, 0.5, C=0.0))


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ContractViolation):
        kt_schedule(0, 4, 1, 0.5, 0.5, 0.1, 10, 1.0)
    with pytest.raises(ContractViolation):
        kt_schedule(3, 4, 1, 0.5, 0.5, 1.5, 10, 1.0)


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 200), d=st.integers(2, 30), r=st.integers(1, 5), zeta=st.floats(0.1, 1.0),
       xi=st.floats(0.1, 1.0), C=st.floats(0.01, 5.0))
def test_doubling_constant_doubles_budget(m, d, r, zeta, xi, C):
    # ceil(2x) is 2 ceil(x) or one less
    K = kt_schedule(m, d, r, zeta, xi, 0.1, 100, C)
    K2 = kt_schedule(m, d, r, zeta, xi, 0.1, 100, 2 * C)
    assert K2 in (2 * K - 1, 2 * K)


def test_zero_matrix_finishes_in_one_round():
    oracle = SyntheticOracle(np.zeros((6, 4)), sphere_sampler(), rngmod.stream(1))
    theta, state, _ = run_estimator(oracle, 6, 4, 1, RowwiseConfig(0.5, 0.5))
    assert state.t == 1 and np.all(theta == 0)


def test_single_row_fit_is_least_squares():
    g = np.random.default_rng(2)
    theta = g.standard_normal((1, 5))
    psi = g.standard_normal((1, 12, 5))
    y = np.einsum("mkd,md->mk", psi, theta)
    fit = fit_rank_r_zero_loss(psi, y, 1)
    assert np.max(np.abs(fit.theta - theta)) <= 1e-8


def test_rank_one_fit_reaches_zero_loss():
    theta = low_rank_rows(20, 6, 1, 3)
    g = np.random.default_rng(3)
    psi = g.standard_normal((20, 8, 6))
    fit = fit_rank_r_zero_loss(psi, np.einsum("mkd,md->mk", psi, theta), 1)
    assert fit.loss <= 1e-12
    assert np.max(np.abs(fit.theta - theta)) <= 1e-6


def test_verify_accepts_truth():
    theta = low_rank_rows(10, 5, 2, 4)
    oracle = SyntheticOracle(theta, sphere_sampler(), rngmod.stream(4))
    ok, bad, err = verify_rows(theta, oracle, np.arange(10), 7)
    assert ok.size == 10 and bad.size == 0 and np.all(err == 0)


def test_verify_rejection_rate_under_axis_measurements():
    d, K, n = 5, 4, 400
    theta = np.zeros((n, d))
    cand = theta.copy()
    cand[:, 0] = 0.1
    oracle = SyntheticOracle(theta, signed_basis_sampler(), rngmod.stream(5, "verify"))
    _, bad, _ = verify_rows(cand, oracle, np.arange(n), K)
    p = 1 - (1 - 1 / d) ** K  # the error shows only when some draw hits +-e1
    assert abs(bad.size / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_verify_needs_a_sample():
    oracle = SyntheticOracle(np.zeros((2, 2)), sphere_sampler(), rngmod.stream(0))
    with pytest.raises(ContractViolation):
        verify_rows(np.zeros((2, 2)), oracle, np.arange(2), 0)


@pytest.fixture(scope="module")
def estimator_run():
    N, d, r = 60, 12, 2
    theta = low_rank_rows(N, d, r, 6)
    oracle = SyntheticOracle(theta, sphere_sampler(), rngmod.stream(6, "est"))
    zeta, xi = measure_dist_constants(sphere_sampler(), d, 20_000, rngmod.stream(6, "measure"))
    out = run_estimator(oracle, N, d, r, RowwiseConfig(zeta, xi, seed=6))
    return theta, oracle, out


def test_estimator_recovers_every_row(estimator_run):
    theta, _, (theta_hat, state, _) = estimator_run
    assert state.recovered.all() and state.unknown.size == 0
    assert np.max(np.abs(theta_hat - theta)) <= 1e-6


def test_unknown_sets_are_nested(estimator_run):
    _, _, (_, state, _) = estimator_run
    hist = state.history
    for a, b in zip(hist, hist[1:]):
        assert b["unknown_rows"] == a["rejected"] <= a["unknown_rows"]
    assert hist[-1]["rejected"] == 0
    assert len(hist) <= max_rounds(60)


def test_sample_accounting(estimator_run):
    _, oracle, (_, state, total) = estimator_run
    assert total == oracle.queries == state.history[-1]["cumulative_samples"]
    assert total == sum(2 * h["unknown_rows"] * h["K_t"] for h in state.history)


def test_rank_assumption_enforced():
    oracle = SyntheticOracle(np.zeros((4, 4)), sphere_sampler(), rngmod.stream(0))
    with pytest.raises(ContractViolation):
        run_estimator(oracle, 4, 4, 3, RowwiseConfig(0.5, 0.5))


def test_signed_basis_constants_in_two_dimensions():
    zeta, xi = measure_dist_constants(signed_basis_sampler(), 2, 20_000, rngmod.stream(7))
    # E|<psi, e1>| = 1/2 with standard error 1/(2 sqrt(n))
    assert zeta == pytest.approx(1 / math.sqrt(2), abs=3 * math.sqrt(2) * 0.5 / math.sqrt(20_000))
    assert xi == pytest.approx(1.0, abs=0.03)


def test_point_mass_has_no_spread():
    point = lambda g, n, d: np.tile(np.eye(d)[0], (n, 1))
    zeta, xi = measure_dist_constants(point, 3, 1000)
    assert zeta == pytest.approx(0.0, abs=1e-12)
    assert xi == pytest.approx(1 / math.sqrt(3))


def test_scaling_moves_constants_inversely():
    z1, x1 = measure_dist_constants(sphere_sampler(1.0), 4, 5000, rngmod.stream(8))
    z2, x2 = measure_dist_constants(sphere_sampler(0.5), 4, 5000, rngmod.stream(8))
    assert z2 == pytest.approx(z1 / 2, rel=1e-12)
    assert x2 == pytest.approx(2 * x1, rel=1e-12)


def test_measurement_needs_enough_trials():
    with pytest.raises(ContractViolation):
        measure_dist_constants(sphere_sampler(), 3, 999)


def test_rollout_oracle_recovers_planted_rewards():
    inst = gen_isotropic_instance(IsotropicInstanceParams(dim=3, num_states=4, horizon=2, seed=0))
    K = softmax_kernels(inst.spec, inst.planted_u, inst.planted_v)
    theta = low_rank_rows(8, 3, 1, 9)
    zeta, xi = dist_constants(inst.spec.psi, pair_law(K, inst.mdp, 1))
    oracle = RolloutOracle(inst.mdp, inst.spec, theta, K, 1, rngmod.stream(9, "rollout"))
    theta_hat, state, total = run_estimator(oracle, 8, 3, 1, RowwiseConfig(zeta, xi, seed=9))
    assert np.max(np.abs(theta_hat - theta)) <= 1e-6
    assert total == oracle.queries


def test_round_shrinkage_in_the_reference_regime():
    # unknown rows drop tenfold in most rounds: N=100, d=20, r=3 on the sphere
    rounds, shrunk = 0, 0
    for seed in range(5):
        theta = low_rank_rows(100, 20, 3, seed)
        oracle = SyntheticOracle(theta, sphere_sampler(), rngmod.stream(seed, "shrink"))
        zeta, xi = measure_dist_constants(sphere_sampler(), 20, 20_000, rngmod.stream(seed, "measure"))
        _, state, _ = run_estimator(oracle, 100, 20, 3, RowwiseConfig(zeta, xi, seed=seed))
        for h in state.history:
            rounds += 1
            shrunk += h["rejected"] <= h["unknown_rows"] / 10
    assert shrunk >= 0.9 * rounds


def test_understated_rank_hits_the_round_cap():
    theta = low_rank_rows(8, 6, 3, 11)
    oracle = SyntheticOracle(theta, sphere_sampler(), rngmod.stream(11))
    with pytest.raises(NonTerminationError) as err:
        run_estimator(oracle, 8, 6, 1, RowwiseConfig(0.8, 0.9))
    shrink = err.value.diagnostics["shrink_factors"]
    assert len(shrink) == max_rounds(8)
