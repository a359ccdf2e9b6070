import numpy as np
import pytest

from collabrl import rng as rngmod
from collabrl.errors import ContractViolation, InstanceError
from collabrl.mdp import RewardFunction, optimal_policy
from collabrl.reward_free import RFModel, contract_error, exact_model, rf_fit, rf_plan

from conftest import chain_mdp, random_mdp


def test_exact_backend_is_zero_error():
    mdp = random_mdp(5, 3, 3, seed=2)
    model = rf_fit(mdp, 0, "exact", rngmod.stream(0))
    assert np.array_equal(model.est_transitions, mdp.transitions)
    R = np.random.default_rng(0).random((10, 3, 5, 3))
    err, gap = contract_error(model, mdp, R)
    assert err == pytest.approx(0.0, abs=1e-12) and gap == pytest.approx(0.0, abs=1e-12)
    for Rk in R:
        _, v = rf_plan(model, RewardFunction(Rk))
        assert v == pytest.approx(optimal_policy(mdp, RewardFunction(Rk))[1], abs=1e-10)


def test_zero_reward_plans_to_zero():
    mdp = random_mdp(3, 2, 2, seed=0)
    _, v = rf_plan(exact_model(mdp), np.zeros((2, 3, 2)))
    assert v == 0.0


def test_deterministic_chain_learned_exactly():
    mdp = chain_mdp()
    model = rf_fit(mdp, 50, "empirical", rngmod.stream(1, "rf"))
    seen = ~model.unvisited
    assert seen.any()
    assert np.array_equal(model.est_transitions[seen], mdp.transitions[seen])
    assert model.trajectories_used == 50


def test_empirical_contract_at_desk_budget():
    mdp = random_mdp(6, 3, 3, seed=4)
    model = rf_fit(mdp, 5000, "empirical", rngmod.stream(4, "rf"))
    R = np.random.default_rng(4).random((20, 3, 6, 3))
    err, gap = contract_error(model, mdp, R)
    assert err <= 0.05
    assert gap <= 0.05


def test_contract_error_shrinks_with_budget():
    medians, noise = [], []
    for K in (1000, 2000, 4000):
        errs = []
        for seed in range(12):
            mdp = random_mdp(6, 3, 3, seed=seed)
            model = rf_fit(mdp, K, "empirical", rngmod.stream(seed, "rf", K))
            errs.append(contract_error(model, mdp, np.random.default_rng(seed).random((20, 3, 6, 3)))[0])
        medians.append(np.median(errs))
        noise.append(np.std(errs) / np.sqrt(len(errs)))
    for k in range(2):
        assert medians[k + 1] <= medians[k] + 2 * max(noise[k], noise[k + 1])


def test_zero_budget_falls_back_to_uniform():
    mdp = random_mdp(3, 2, 3, seed=1)
    model = rf_fit(mdp, 0, "empirical", rngmod.stream(0))
    assert model.low_confidence
    assert np.allclose(model.est_transitions, 1 / 3)
    assert np.allclose(model.est_transitions.sum(axis=-1), 1.0, atol=1e-12)


def test_plan_rejects_rewards_outside_unit_interval():
    model = exact_model(random_mdp(2, 2, 2))
    with pytest.raises(ContractViolation):
        rf_plan(model, np.full((2, 2, 2), 1.2))


def test_unknown_backend():
    with pytest.raises(InstanceError):
        rf_fit(random_mdp(2, 2, 2), 10, "oracle", rngmod.stream(0))


def test_model_round_trip():
    mdp = random_mdp(4, 2, 3, seed=3)
    model = rf_fit(mdp, 200, "empirical", rngmod.stream(3))
    back = RFModel.from_dict(model.to_dict())
    assert np.array_equal(back.est_transitions, model.est_transitions)
    assert np.array_equal(back.visit_counts, model.visit_counts)
    assert back.trajectories_used == 200 and back.mode == "empirical"
