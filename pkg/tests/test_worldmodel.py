import copy
import json
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaywm.core import TabularMdp, TabularPomdp
from delaywm.delay import DUMMY, DelayedPomdp, collect_buffer, is_dummy
from delaywm.envs import A1, A2, S1, S2, Fig2Params, fig2_mdp, random_instance
from delaywm.errors import ModelMismatchError
from delaywm.worldmodel import (
    TabularWorldModel,
    WorldModelState,
    belief_update,
    congruence_check,
    fit_tabular_model,
    imagine_branches,
    imagine_step,
    make_delayed,
    observation_probs,
    observe,
    one_hot,
    perturb_model,
    predict_belief,
    prior,
)


def coin(noise=0.8):
    # two states that reshuffle uniformly, seen through a noisy sensor
    mdp = TabularMdp.from_entries(2, 1, [(s, 0, n, 0.0, 0.5) for s in range(2) for n in range(2)], 0.9)
    return TabularPomdp(mdp, np.array([[noise, 1 - noise], [1 - noise, noise]]))


pomdps = st.builds(
    lambda seed, S, O: random_instance(seed, S, 2, O),
    st.integers(0, 5000),
    st.integers(2, 4),
    st.integers(1, 3),
)


class TestBeliefUpdate:
    def test_identity_observation_gives_point_mass(self):
        model = TabularWorldModel.exact(TabularPomdp.fully_observed(fig2_mdp()))
        b = belief_update(model, prior(model), A1, S2)
        assert b.belief.tolist() == [0.0, 1.0, 0.0]

    def test_uninformative_observation_is_push_forward(self):
        mdp = fig2_mdp(Fig2Params(0.25, 0.9))
        model = TabularWorldModel.exact(TabularPomdp(mdp, np.ones((3, 1))))
        b = belief_update(model, prior(model), A1, 0)
        assert np.allclose(b.belief, mdp.transition[S1, A1])

    def test_noisy_sensor(self):
        model = TabularWorldModel.exact(coin(0.8))
        b = belief_update(model, WorldModelState(np.array([0.5, 0.5])), 0, 0)
        assert np.allclose(b.belief, [0.8, 0.2])

    def test_predict_hardness_mdp(self):
        model = TabularWorldModel.exact(fig2_mdp(Fig2Params(0.5, 0.9)))
        assert predict_belief(model, one_hot(3, S1), A1).belief.tolist() == [0.5, 0.5, 0.0]

    def test_impossible_observation(self):
        model = TabularWorldModel.exact(TabularPomdp.fully_observed(fig2_mdp(Fig2Params(0.0, 0.9))))
        with pytest.raises(ModelMismatchError):
            belief_update(model, prior(model), A1, S2)

    def test_reward_sharpens_the_posterior(self):
        # Leaving s1 with a1 pays 1 either way; only the reward-free branches differ.
        mdp = fig2_mdp(Fig2Params(0.5, 0.9))
        model = TabularWorldModel.exact(TabularPomdp(mdp, np.ones((3, 1))))
        b = WorldModelState(np.array([0.5, 0.5, 0.0]))
        assert np.allclose(belief_update(model, b, A1, 0, r=1.0).belief, [0.5, 0.5, 0.0])
        assert np.allclose(belief_update(model, b, A1, 0, r=0.0).belief, [0.0, 0.0, 1.0])

    @given(pomdps, st.data())
    def test_marginalizes_to_prediction(self, pomdp, data):
        model = TabularWorldModel.exact(pomdp)
        b = WorldModelState(np.random.default_rng(data.draw(st.integers(0, 99))).dirichlet(np.ones(pomdp.n_states)))
        a = data.draw(st.integers(0, 1))
        po = observation_probs(model, b, a)
        total = np.zeros(pomdp.n_states)
        for o in np.flatnonzero(po > 0):
            total += po[o] * belief_update(model, b, a, int(o)).belief
        assert np.allclose(total, predict_belief(model, b, a).belief, atol=1e-12)

    @given(pomdps, st.integers(0, 9999))
    @settings(max_examples=25)
    def test_filter_matches_path_enumeration(self, pomdp, seed):
        rng = np.random.default_rng(seed)
        mdp, O = pomdp.mdp, pomdp.obs_matrix
        k = 3
        actions = rng.integers(2, size=k)
        # sample a feasible observation record from the real process
        s = mdp.initial_state
        obs = [int(rng.choice(pomdp.n_obs, p=O[s]))]
        for a in actions:
            s = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
            obs.append(int(rng.choice(pomdp.n_obs, p=O[s])))
        post = np.zeros(mdp.n_states)
        for path in product(range(mdp.n_states), repeat=k):
            w, prev = O[mdp.initial_state, obs[0]], mdp.initial_state
            for i, s2 in enumerate(path):
                w *= mdp.transition[prev, actions[i], s2] * O[s2, obs[i + 1]]
                prev = s2
            post[prev] += w
        post /= post.sum()
        model = TabularWorldModel.exact(pomdp)
        b = observe(model, prior(model), obs[0])
        for i, a in enumerate(actions):
            b = belief_update(model, b, int(a), obs[i + 1])
        assert np.allclose(b.belief, post, atol=1e-12)


class TestImagination:
    def test_deterministic_chain(self):
        model = TabularWorldModel.exact(fig2_mdp(Fig2Params(0.0, 0.9)))
        rng = np.random.default_rng(0)
        b, r = imagine_step(model, prior(model), A1, rng)
        assert b.belief.tolist() == [1.0, 0.0, 0.0] and r == 1.0
        b, r = imagine_step(model, one_hot(3, S2), A2, rng)
        assert b.belief.tolist() == [1.0, 0.0, 0.0] and r == 0.0

    def test_branches_sum_to_one(self):
        model = TabularWorldModel.exact(random_instance(3, 3, 2, 2))
        branches = imagine_branches(model, prior(model), 1)
        assert sum(p for p, _, _ in branches) == pytest.approx(1.0)

    def test_monte_carlo_reward(self):
        pomdp = random_instance(11, 3, 2, 2)
        model = TabularWorldModel.exact(pomdp)
        b = WorldModelState(np.array([0.2, 0.3, 0.5]))
        rng = np.random.default_rng(5)
        n = 20000
        rs = np.array([imagine_step(model, b, 0, rng)[1] for _ in range(n)])
        exact = float(b.belief @ pomdp.mdp.expected_reward[:, 0])
        assert abs(rs.mean() - exact) < 4 * rs.std() / np.sqrt(n) + 1e-12


class TestFitting:
    def test_large_sample_recovers_dynamics(self):
        pomdp = TabularPomdp.fully_observed(random_instance(8, 3, 2, 1).mdp)
        buf = collect_buffer(pomdp, 0, 100, 1000, 0)
        model = fit_tabular_model(buf, 3, 2, 3, alpha=0.0)
        tv = 0.5 * np.abs(model.marginal - np.transpose(pomdp.mdp.transition, (1, 0, 2))).sum(axis=2)
        assert tv.max() < 0.05

    def test_unvisited_row_is_uniform(self):
        pomdp = TabularPomdp.fully_observed(fig2_mdp(Fig2Params(0.0, 0.9)))
        buf = collect_buffer(pomdp, 0, 2, 10, 0, agent=lambda t, o, r, q, rng: A1)
        model = fit_tabular_model(buf, 3, 2, 3, alpha=1.0)
        assert np.allclose(model.mdp.transition[S2, A2], 1 / 3)
        # a1 from s1 was seen 18 times, always back to s1
        assert model.mdp.transition[S1, A1].tolist() == pytest.approx([19 / 21, 1 / 21, 1 / 21])

    def test_no_smoothing_gives_point_mass(self):
        pomdp = TabularPomdp.fully_observed(fig2_mdp(Fig2Params(0.0, 0.9)))
        buf = collect_buffer(pomdp, 0, 2, 10, 0, agent=lambda t, o, r, q, rng: A1)
        model = fit_tabular_model(buf, 3, 2, 3, alpha=0.0)
        assert model.mdp.transition[S1, A1].tolist() == [1.0, 0.0, 0.0]
        assert model.mdp.expected_reward[S1, A1] == 1.0

    def test_empty_buffer(self):
        from delaywm.delay import ReplayBuffer

        with pytest.raises(ValueError):
            fit_tabular_model(ReplayBuffer(0), 2, 2, 2)

    def test_json_round_trip(self):
        model = TabularWorldModel.exact(random_instance(2, 2, 2, 2))
        back = TabularWorldModel.from_dict(json.loads(model.to_json()))
        assert back.pomdp.mdp.kernel == model.pomdp.mdp.kernel


class TestDelayedModel:
    def test_first_d_outputs_are_dummies(self):
        dm = make_delayed(TabularWorldModel.exact(random_instance(0, 3, 2, 2)), 3)
        rng = np.random.default_rng(0)
        dm.reset_imagination(rng)
        outs = [dm.imagine(int(rng.integers(2)), rng) for _ in range(5)]
        assert all(is_dummy(m) and r == 0.0 for m, r in outs[:3])
        assert not is_dummy(outs[3][0])

    def test_one_step_shift(self):
        model = TabularWorldModel.exact(fig2_mdp(Fig2Params(0.0, 0.9)))
        dm = make_delayed(model, 1)
        rng = np.random.default_rng(0)
        dm.reset_imagination(start=prior(model))
        shown, r = dm.imagine(A1, rng)
        assert is_dummy(shown) and r == 0.0
        shown, r = dm.imagine(A1, rng)
        assert shown == prior(model) and r == 1.0

    def test_read_before_reset(self):
        dm = make_delayed(TabularWorldModel.exact(fig2_mdp()), 1)
        with pytest.raises(RuntimeError):
            dm.exposed
        with pytest.raises(RuntimeError):
            dm.imagine(0, np.random.default_rng(0))

    def test_interaction_rejects_early_observation(self):
        dm = make_delayed(TabularWorldModel.exact(fig2_mdp()), 2)
        dm.reset_interaction()
        with pytest.raises(ValueError):
            dm.feed(0)

    def test_copies_branch_independently(self):
        dm = make_delayed(TabularWorldModel.exact(random_instance(0, 3, 2, 2)), 1)
        rng = np.random.default_rng(0)
        dm.reset_imagination(rng)
        twin = copy.copy(dm)
        dm.imagine(0, rng)
        assert twin.t == 0 and dm.t == 1

    def test_interaction_filters_delayed_stream(self):
        model = TabularWorldModel.exact(TabularPomdp.fully_observed(fig2_mdp(Fig2Params(0.0, 0.9))))
        dm = make_delayed(model, 1)
        dm.reset_interaction()
        assert is_dummy(dm.feed(DUMMY))
        dm.take(A2)
        assert dm.feed(S1).belief.tolist() == [1.0, 0.0, 0.0]
        dm.take(A1)
        # a2 from s1 moves to s3 deterministically when delta is 0
        assert dm.feed(2, 0.0).belief.tolist() == [0.0, 0.0, 1.0]


class TestCongruence:
    @given(st.integers(0, 300), st.integers(0, 2), st.lists(st.integers(0, 1), min_size=3, max_size=3))
    @settings(max_examples=20)
    def test_exact_model_is_congruent(self, seed, d, actions):
        pomdp = random_instance(seed, 3, 2, 2)
        rep = congruence_check(make_delayed(TabularWorldModel.exact(pomdp), d), DelayedPomdp(pomdp, d), actions, 3)
        assert rep.passed and rep.tv_distance <= 1e-9

    def test_perturbed_model_is_detected(self):
        pomdp = random_instance(4, 3, 2, 2)
        bad = perturb_model(TabularWorldModel.exact(pomdp), pomdp.mdp.initial_state, 0)
        rep = congruence_check(bad, pomdp, [0, 1, 0], 3)
        assert not rep.passed and rep.tv_distance > 0.01

    def test_perturbation_is_bounded(self):
        pomdp = random_instance(4, 3, 2, 2)
        bad = perturb_model(TabularWorldModel.exact(pomdp), 0, 0, amount=0.1)
        tv = 0.5 * np.abs(bad.mdp.transition[0, 0] - pomdp.mdp.transition[0, 0]).sum()
        assert 0 < tv <= 0.1 + 1e-12

    def test_delay_mismatch(self):
        pomdp = random_instance(0, 2, 2, 2)
        with pytest.raises(ValueError):
            congruence_check(make_delayed(TabularWorldModel.exact(pomdp), 1), DelayedPomdp(pomdp, 2), [0, 0], 2)

    def test_report_json(self):
        pomdp = random_instance(0, 2, 2, 2)
        rep = congruence_check(TabularWorldModel.exact(pomdp), pomdp, [0, 1], 2)
        assert set(rep.to_json()) == {"tv_distance", "horizon", "d", "pass"}
