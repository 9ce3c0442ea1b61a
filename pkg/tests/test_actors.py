import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaywm.actors import (
    ActorSpec,
    Strategy,
    TrainConfig,
    actor_key,
    agnostic_pipeline,
    evaluate_actor,
    exact_start_value,
    latent_act,
    random_spec,
    solve_extended_optimal,
    solve_latent_optimal,
    solve_memoryless_optimal,
    spec_from_extended_table,
    spec_from_memoryless_table,
    train_actor_critic_imagination,
    train_for_delay,
    uniform_value,
)
from delaywm.core import TabularMdp, value_iteration
from delaywm.delay import DelaySchedule, ReplayBuffer, encode_extended, extend_mdp
from delaywm.envs import A1, A2, S1, Fig2Params, MaskedObsConfig, fig2_mdp, masked_pomdp, random_instance, switching_track
from delaywm.errors import EnumerationLimitError
from delaywm.worldmodel import TabularWorldModel, one_hot

HARD = Fig2Params(0.5, 0.9)


def bandit(rewards=(0.0, 0.5, 1.0)):
    return TabularMdp.from_entries(1, len(rewards), [(0, a, 0, r, 1.0) for a, r in enumerate(rewards)], 0.9)


class TestExactSolvers:
    @pytest.mark.parametrize("seed", range(4))
    def test_zero_delay_is_undelayed_optimum(self, seed):
        mdp = random_instance(seed, 3, 2, 1).mdp
        V, _ = value_iteration(mdp, 1e-11)
        _, Vext = solve_extended_optimal(mdp, 0, 1e-11)
        assert Vext[mdp.initial_state] == pytest.approx(V[mdp.initial_state], abs=1e-8)
        assert solve_memoryless_optimal(mdp, 0, 1e-11)[1] == pytest.approx(V[mdp.initial_state], abs=1e-8)

    def test_hardness_mdp_one_step(self):
        mdp = fig2_mdp(HARD)
        table, V = solve_extended_optimal(mdp, 1, 1e-11)
        x1 = encode_extended(S1, (A1,), 2)
        assert V[x1] == pytest.approx(1 / 0.55, abs=1e-8)
        assert table.action(x1) == A1

    @pytest.mark.parametrize("gamma", [0.5, 0.9])
    def test_no_slip_costs_nothing(self, gamma):
        mdp = fig2_mdp(Fig2Params(0.0, gamma))
        _, V = solve_extended_optimal(mdp, 1, 1e-12)
        assert V[extend_mdp(mdp, 1).initial_state] * (1 - gamma) == pytest.approx(1.0, abs=1e-9)

    def test_memoryless_on_hardness_mdp(self):
        mdp = fig2_mdp(HARD)
        assert solve_memoryless_optimal(mdp, 1)[1] <= 1 / 0.55 + 1e-8

    @given(st.integers(0, 1000), st.integers(0, 2))
    @settings(max_examples=8)
    def test_policy_class_containment(self, seed, d):
        mdp = random_instance(seed, 3, 2, 1, sparsity=0.5).mdp
        v_ext = solve_extended_optimal(mdp, d, 1e-11)[1][extend_mdp(mdp, d).initial_state]
        v_mem = solve_memoryless_optimal(mdp, d, 1e-11)[1]
        v_lat = solve_latent_optimal(mdp, d, 1e-11)[1]
        v_rnd = uniform_value(mdp, d, 1e-11)
        assert v_ext >= v_lat - 1e-8 and v_ext >= v_mem - 1e-8 and v_mem >= v_rnd - 1e-8

    @pytest.mark.parametrize("delta", [0.0, 0.1, 0.25, 0.4, 0.5])
    @pytest.mark.parametrize("d", [1, 2])
    def test_predicted_belief_is_sufficient_on_hardness_family(self, delta, d):
        mdp = fig2_mdp(Fig2Params(delta, 0.9))
        v_ext = solve_extended_optimal(mdp, d, 1e-11)[1][extend_mdp(mdp, d).initial_state]
        assert solve_latent_optimal(mdp, d, 1e-11)[1] == pytest.approx(v_ext, abs=1e-8)

    def test_enumeration_guard(self):
        with pytest.raises(EnumerationLimitError):
            solve_memoryless_optimal(random_instance(0, 6, 3, 1).mdp, 0, max_policies=100)

    def test_table_specs_score_like_tables(self):
        mdp = fig2_mdp(HARD)
        table, V = solve_extended_optimal(mdp, 1, 1e-11)
        spec = spec_from_extended_table(mdp, 1, table)
        assert exact_start_value(spec, mdp, 1e-11) == pytest.approx(V[extend_mdp(mdp, 1).initial_state], abs=1e-8)
        mem, v = solve_memoryless_optimal(mdp, 1, 1e-11)
        assert exact_start_value(spec_from_memoryless_table(mdp, 1, mem), mdp, 1e-11) == pytest.approx(v, abs=1e-8)


class TestLatentAct:
    def spec(self, strategy, d=1):
        # belief keys at 3 decimals; a1 iff s1 is at least as likely as s2
        keys = {(1.0, 0.0, 0.0): [1.0, 0.0], (0.5, 0.5, 0.0): [1.0, 0.0], (0.0, 1.0, 0.0): [0.0, 1.0]}
        return ActorSpec(strategy, d, 2, {k: np.array(v) for k, v in keys.items()})

    def test_prediction_through_queue(self):
        model = TabularWorldModel.exact(fig2_mdp(HARD))
        spec = self.spec(Strategy.LATENT_DETERMINISTIC)
        assert actor_key(spec, model, one_hot(3, S1), [A1]) == (0.5, 0.5, 0.0)
        assert latent_act(spec, model, one_hot(3, S1), [A1], np.random.default_rng(0)) == A1

    def test_zero_delay_reads_belief_directly(self):
        model = TabularWorldModel.exact(fig2_mdp(HARD))
        spec = self.spec(Strategy.LATENT_DETERMINISTIC, d=0)
        assert latent_act(spec, model, one_hot(3, 1), [], np.random.default_rng(0)) == A2

    def test_modes_coincide_when_deterministic(self):
        model = TabularWorldModel.exact(fig2_mdp(Fig2Params(0.0, 0.9)))
        det, smp = self.spec(Strategy.LATENT_DETERMINISTIC, 2), self.spec(Strategy.LATENT_SAMPLED, 2)
        rng = np.random.default_rng(0)
        for q in ([A1, A1], [A2, A2], [A1, A2]):
            m = one_hot(3, S1)
            assert actor_key(det, model, m, q) == actor_key(smp, model, m, q, rng)

    def test_queue_length_mismatch(self):
        model = TabularWorldModel.exact(fig2_mdp(HARD))
        with pytest.raises(ValueError, match="d=1"):
            latent_act(self.spec(Strategy.LATENT_DETERMINISTIC), model, one_hot(3, S1), [], np.random.default_rng(0))

    def test_non_latent_strategy(self):
        model = TabularWorldModel.exact(fig2_mdp(HARD))
        with pytest.raises(ValueError):
            latent_act(self.spec(Strategy.MEMORYLESS), model, one_hot(3, S1), [A1], np.random.default_rng(0))

    def test_sampled_mode_needs_rng(self):
        model = TabularWorldModel.exact(fig2_mdp(HARD))
        with pytest.raises(ValueError):
            actor_key(self.spec(Strategy.LATENT_SAMPLED), model, one_hot(3, S1), [A1])


class TestTraining:
    @pytest.mark.parametrize(
        "strategy", [Strategy.EXTENDED, Strategy.MEMORYLESS, Strategy.LATENT_DETERMINISTIC, Strategy.LATENT_SAMPLED, Strategy.AGNOSTIC]
    )
    def test_bandit_converges(self, strategy):
        mdp = bandit()
        spec = train_for_delay(mdp, strategy, 1, TrainConfig(updates=500, seed=3, horizon=4))
        # one state, so every learned key carries the same decision
        for key in spec.policy:
            probs = spec.probs(key)
            assert int(np.argmax(probs)) == 2 and probs[2] > 0.8

    def test_empty_buffer(self):
        model = TabularWorldModel.exact(fig2_mdp())
        with pytest.raises(ValueError, match="empty"):
            train_actor_critic_imagination(model, ActorSpec(Strategy.EXTENDED, 1, 2), ReplayBuffer(1), TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_guard(self):
        mdp = bandit((0.0, 1e308))
        with pytest.raises(FloatingPointError):
            train_for_delay(mdp, Strategy.MEMORYLESS, 0, TrainConfig(updates=50, seed=0, actor_lr=1e10))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(horizon=0)
        with pytest.raises(ValueError):
            TrainConfig(actor_lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lam=1.5)

    def test_extended_learns_hardness_optimum(self):
        mdp = fig2_mdp(HARD)
        spec = train_for_delay(mdp, Strategy.EXTENDED, 1, TrainConfig(updates=1500, seed=0))
        assert exact_start_value(spec, mdp) == pytest.approx(1 / 0.55, rel=0.05)

    def test_seeded_training_is_bitwise_reproducible(self):
        mdp = fig2_mdp(HARD)
        cfg = TrainConfig(updates=100, seed=7)
        a = train_for_delay(mdp, Strategy.LATENT_SAMPLED, 1, cfg)
        b = train_for_delay(mdp, Strategy.LATENT_SAMPLED, 1, cfg)
        assert a.to_json() == b.to_json()

    def test_additive_parameterization_on_masked_process(self):
        pomdp = masked_pomdp(switching_track(), MaskedObsConfig(0.5))
        spec = train_for_delay(pomdp, Strategy.EXTENDED, 3, TrainConfig(updates=100, seed=0))
        assert spec.parameterization == "additive"
        assert {k[0] for k in spec.policy} == {"belief", "slot"}
        # slot blocks are indexed by queue position and action only
        assert all(k[1] < 3 and k[2] < 3 for k in spec.policy if k[0] == "slot")
        back = ActorSpec.from_dict(json.loads(spec.to_json()))
        key = (next(k[1] for k in spec.policy if k[0] == "belief"), (0, 1, 2))
        assert np.array_equal(back.probs(key), spec.probs(key))

    def test_additive_rejected_for_other_strategies(self):
        with pytest.raises(ValueError):
            ActorSpec(Strategy.MEMORYLESS, 1, 2, parameterization="additive")


class TestAgnostic:
    def test_zero_delay_is_the_undelayed_pipeline(self):
        mdp = fig2_mdp(HARD)
        cfg = TrainConfig(updates=200, seed=1)
        rec = agnostic_pipeline(mdp, 0, cfg, episodes=50, horizon=20)
        spec = train_for_delay(mdp, Strategy.LATENT_DETERMINISTIC, 0, cfg)
        assert rec.spec.policy.keys() == spec.policy.keys()
        assert all(np.array_equal(rec.spec.policy[k], spec.policy[k]) for k in spec.policy)
        assert (rec.mean, rec.stderr) == evaluate_actor(mdp, DelaySchedule(0), spec, 50, 20, 1)

    def test_deterministic_process_does_not_degrade(self):
        mdp = fig2_mdp(Fig2Params(0.0, 0.9))
        spec = train_for_delay(mdp, Strategy.AGNOSTIC, 0, TrainConfig(updates=300, seed=0))
        base = exact_start_value(spec, mdp)
        for d in range(1, 5):
            assert exact_start_value(spec.with_delay(d), mdp) >= base - 1e-9

    def test_degrades_with_delay_on_average(self):
        mdp = fig2_mdp(HARD)
        delays, seeds = (0, 1, 2, 3), range(5)
        means = np.zeros((len(seeds), len(delays)))
        ses = np.zeros_like(means)
        for i, s in enumerate(seeds):
            spec = train_for_delay(mdp, Strategy.AGNOSTIC, 0, TrainConfig(updates=300, seed=s))
            for j, d in enumerate(delays):
                means[i, j], ses[i, j] = evaluate_actor(mdp, DelaySchedule(d), spec, 300, 40, 100 + s)
        avg = means.mean(axis=0)
        se = np.sqrt((ses**2).sum(axis=0)) / len(seeds)
        assert all(avg[j + 1] <= avg[j] + 3 * np.hypot(se[j], se[j + 1]) for j in range(len(delays) - 1))
        assert avg[-1] < avg[0]


class TestEvaluation:
    def test_random_on_zero_rewards(self):
        mdp = TabularMdp.from_entries(2, 2, [(s, a, 1 - s, 0.0, 1.0) for s in range(2) for a in range(2)], 0.9)
        assert evaluate_actor(mdp, DelaySchedule(2), random_spec(2, 2), 20, 10, 0) == (0.0, 0.0)

    def test_dp_policy_monte_carlo(self):
        mdp = fig2_mdp(HARD)
        table, _ = solve_extended_optimal(mdp, 1)
        spec = spec_from_extended_table(mdp, 1, table)
        mean, se = evaluate_actor(mdp, DelaySchedule(1), spec, 10_000, 60, 0, warmup="agent")
        assert abs(mean - 1 / 0.55) <= 3 * se

    def test_undelayed_optimum_monte_carlo(self):
        mdp = random_instance(2, 3, 2, 1).mdp
        V, _ = value_iteration(mdp, 1e-11)
        table, _ = solve_extended_optimal(mdp, 0)
        mean, se = evaluate_actor(mdp, DelaySchedule(0), spec_from_extended_table(mdp, 0, table), 3000, 80, 1)
        assert abs(mean - V[mdp.initial_state]) <= 3 * se + 0.9**80 * mdp.reward_bound / 0.1

    def test_needs_an_episode(self):
        with pytest.raises(ValueError):
            evaluate_actor(fig2_mdp(), DelaySchedule(0), random_spec(2), 0, 5, 0)

    def test_seeded_evaluation_is_reproducible(self):
        pomdp = random_instance(1, 3, 2, 2)
        spec = train_for_delay(pomdp, Strategy.LATENT_DETERMINISTIC, 1, TrainConfig(updates=30, seed=0))
        a = evaluate_actor(pomdp, DelaySchedule(1), spec, 40, 15, 3)
        assert a == evaluate_actor(pomdp, DelaySchedule(1), spec, 40, 15, 3)


class TestSerialization:
    def test_json_schema_and_round_trip(self):
        mdp = fig2_mdp(HARD)
        spec = train_for_delay(mdp, Strategy.LATENT_DETERMINISTIC, 2, TrainConfig(updates=40, seed=0))
        d = json.loads(spec.to_json())
        assert {"strategy", "d", "policy", "critic", "config"} <= set(d)
        back = ActorSpec.from_dict(d)
        assert back.strategy is spec.strategy and back.d == 2 and back.config == spec.config
        for k in spec.policy:
            assert np.array_equal(back.policy[k], spec.policy[k])
        assert back.critic == spec.critic

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ActorSpec(Strategy.LATENT_DETERMINISTIC, 1, 2, mode="greedy")

    def test_warmup_length(self):
        with pytest.raises(ValueError):
            ActorSpec(Strategy.EXTENDED, 2, 2, warmup=(0,))
