# %% [markdown]
# # A whole line of optimal solutions
#
# With soft labels the pairwise loss only pins down the *ratio* of the two
# trained probabilities: any `(q_w, q_l)` with `q_w = eta * q_l` reaches zero
# excess loss. This demo walks through the standard small example
# (`eps = 1/11`, `beta = 1`, reference probabilities 0.02 and 0.01) and then
# maps the loss over the probability plane with a brute-force grid.

# %%
import numpy as np

from prefclass import oracle

inst = oracle.WORKED_EXAMPLE
print(f"eta = {oracle.eta(inst)!r}")

# %% [markdown]
# ## Candidate optima
#
# Two candidates from the literature plus one corrected point. The second
# candidate has ratio 5, so it is not on the line; `(0.004, 0.0002)` is, and it
# lowers both probabilities below the reference.

# %%
for c in oracle.verify_remark3(inst):
    print(f"({c['q_w']}, {c['q_l']}): ratio {c['ratio']:.6g}, on line={c['consistent']}, "
          f"winner up={c['winner_up']}, loser up={c['loser_up']}, "
          f"excess loss={oracle.soft_label_kl(inst, c['q_w'], c['q_l']):.3g}")

# %% [markdown]
# ## Brute force over the plane
#
# A 1000 x 1000 log-spaced grid on the feasible triangle. Every point within
# 1e-6 of the minimum lies on the line, yet the set stretches across several
# orders of magnitude in `q_w`: the loss alone cannot say whether the winner
# should go up or down.

# %%
res = oracle.grid_solve(inst, resolution=1000, tol=1e-6)
ratios = res.near_optimal[:, 0] / res.near_optimal[:, 1]
print(f"{len(ratios)} near-optimal grid points")
print(f"q_w ranges over [{res.near_optimal[:, 0].min():.3g}, {res.near_optimal[:, 0].max():.3g}]"
      f" = {res.q_w_decades():.2f} decades")
print(f"largest relative distance from the line: {np.max(np.abs(ratios / 20 - 1)):.4f}")
below = np.mean(res.near_optimal[:, 0] < inst.ref_w)
print(f"fraction of optimal points where the winner falls below the reference: {below:.2f}")
