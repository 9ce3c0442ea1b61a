"""
Imagination that agrees with reality
====================================

A belief-state world model can be run two ways: filtered on the real
(delayed) observation stream, or rolled forward in imagination.  For an exact
model the two produce the same joint law over (latent, reward) sequences.
The check enumerates both laws and reports their total-variation distance.
"""

from delaywm import DelayedPomdp, TabularWorldModel, congruence_check, make_delayed, random_instance
from delaywm.worldmodel import perturb_model

pomdp = random_instance(seed=4, n_states=3, n_actions=2, n_obs=2)
model = TabularWorldModel.exact(pomdp)
actions = [0, 1, 1, 0]

# %%
# The exact model is congruent at every delay; the distance is rounding noise.
for d in (0, 1, 2):
    rep = congruence_check(make_delayed(model, d), DelayedPomdp(pomdp, d), actions, horizon=4)
    print(f"d={d}: TV={rep.tv_distance:.2e} passed={rep.passed}")

# %%
# Move 20% of one transition row's mass and the check notices.
bad = perturb_model(model, pomdp.mdp.initial_state, actions[0])
print(congruence_check(bad, pomdp, actions, horizon=4).to_json())
