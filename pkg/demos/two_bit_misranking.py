"""Build a reward under which a lagged model prefers the worse action.

Two bits are drawn either perfectly correlated (action 0) or independent
(action 1).  A model that keeps only the per-bit marginals cannot see the
correlation, and a reward mixing "bits agree" with the first bit makes it
rank the actions the wrong way round.

    python3 demos/two_bit_misranking.py
"""

import numpy as np

from instadep.planning import consistency_check, evaluate_policy, laggedize, value_iteration
from instadep.theorylab import alpha_beta, construct_dr_reward, two_bit_mdp

mdp = two_bit_mdp(p_one=0.6)
lag = laggedize(mdp)

ab = alpha_beta(mdp, lag, 0, 0, 1)
print(f"reward 1{{s1 = s2}}: alpha = {ab.alpha:.3f}, beta = {ab.beta:.3f}")

dr = construct_dr_reward(mdp, lag, 0, 0, 1)
print(f"new reward = 1{{s1 = s2}} + ({dr.x:.2f}) * s1 over outcomes 00, 01, 10, 11: {np.round(dr.next_reward, 3)}")
print(f"alpha = {dr.ab.alpha:.3f}, beta = {dr.ab.beta:.3f}, misranked: {dr.ab.in_dr()}")

mt, ml = mdp.with_reward(next_reward=dr.next_reward), lag.with_reward(next_reward=dr.next_reward)
pt, pl = value_iteration(mt), value_iteration(ml)
print("true-optimal action:", pt.policy[0], " lagged-optimal action:", pl.policy[0])
print("witnesses:", consistency_check(mt, ml, [0]))
print(f"return lost by trusting the lagged model: "
      f"{evaluate_policy(mt, pt.policy)[0] - evaluate_policy(mt, pl.policy)[0]:.3f}")
