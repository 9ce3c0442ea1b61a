"""
What one step of delay costs
============================

A three-state process where the reward-earning action in ``s1`` slips to
``s2`` with probability ``delta``, and the wrong action anywhere falls into an
absorbing zero-reward state.  Knowing the current state is worth a lot here:
with one step of delay the agent must commit before it learns about the slip.
"""

import numpy as np

from delaywm import Fig2Params, extend_mdp, fig2_closed_forms, fig2_mdp, value_iteration

# %%
# Solve the undelayed process and its one-step extended version exactly.
# The extended state is the last observed state plus the one pending action.
for delta in (0.0, 0.1, 0.25, 0.5):
    p = Fig2Params(delta, gamma=0.9)
    mdp = fig2_mdp(p)
    ext = extend_mdp(mdp, 1)
    v0 = value_iteration(mdp)[0][mdp.initial_state]
    v1 = value_iteration(ext)[0][ext.initial_state]
    print(f"delta={delta:<5} undelayed={v0:7.4f}  delayed={v1:7.4f}  ratio={v1 / v0:.4f}")

# %%
# The ratio has a closed form; it reaches (1 - gamma) / (1 - gamma/2)^2 at
# delta = 1/2, which vanishes as gamma approaches 1.
for gamma in (0.5, 0.9, 0.99):
    _, _, worst = fig2_closed_forms(Fig2Params(0.5, gamma))
    print(f"gamma={gamma}: worst-case ratio {worst:.4f}")

# %%
# Scan the ratio on a grid to see it fall monotonically from 1.
grid = np.linspace(0.0, 0.5, 6)
print(np.round([fig2_closed_forms(Fig2Params(float(d), 0.9))[2] for d in grid], 4))
