# %% [markdown]
# # Preference losses as classifiers
#
# Every objective in `prefclass.losses` scores the responses of a record by
# their implicit reward `beta * (log pi_theta - log pi_ref)` and turns the
# scores into a class distribution with a softmax. What tells the algorithms
# apart is the target distribution and the loss comparing the two.
#
# Run with `python demos/01_preference_losses_as_classifiers.py`.

# %%
import math

import numpy as np

from prefclass import losses
from prefclass.data import Pair, RankedList, ScoredPair
from prefclass.model import ModelPair, PolicyModel

rng = np.random.default_rng(0)
ref_logits = rng.normal(size=(1, 5))
pair = ModelPair(PolicyModel.tabular(ref_logits + rng.normal(size=(1, 5))),
                 PolicyModel.tabular(ref_logits))
beta = 0.7
ratio = pair.theta.probs()[0] / pair.ref.probs()[0]
print("pi_theta / pi_ref per response:", np.round(ratio, 4))

# %% [markdown]
# ## The class distribution for one pair
#
# For a pair the winner's class probability is `a_w^beta / (a_w^beta + a_l^beta)`
# with `a = pi_theta / pi_ref`. The partition function of the policy never
# shows up because it cancels inside the ratio.

# %%
rec = Pair(0, 1, 3)
p = losses.classifier_prob_pair(pair, beta, rec)
naive = ratio[1] ** beta / (ratio[1] ** beta + ratio[3] ** beta)
print(f"classifier p_w = {p.p_w:.12f}, from explicit ratios = {naive:.12f}")

# %% [markdown]
# ## Six presets, one recipe
#
# Each preset is a (labels, loss, record variant) triple. Below, each value is
# checked against the closed form a practitioner would write by hand.

# %%
eps = 0.1
a_w, a_l = ratio[1], ratio[3]
scored = ScoredPair(0, 1, 3, 0.8, -0.4)
d = scored.score_w - scored.score_l
q = 1 / (1 + (a_l / a_w) ** beta)
b = 1 / (1 + math.exp(-d))
ranking = RankedList(0, (1, 3, 0, 4))
powered = ratio[list(ranking.ranking)] ** beta

hand = {
    "dpo": math.log1p((a_l / a_w) ** beta),
    "cdpo": (1 - eps) * math.log1p((a_l / a_w) ** beta) + eps * math.log1p((a_w / a_l) ** beta),
    "ipo": beta**2 * (math.log(a_w / a_l) - 1 / (2 * beta)) ** 2,
    "dpo_pl": -sum(math.log(powered[n] / powered[n:].sum()) for n in range(3)),
    "rpo": -(b * math.log(q) + (1 - b) * math.log(1 - q)),
    "distilled_dpo": (beta * math.log(a_w / a_l) - d) ** 2,
}
records = {"dpo": rec, "cdpo": rec, "ipo": rec, "dpo_pl": ranking, "rpo": scored,
           "distilled_dpo": scored}
for name, want in hand.items():
    spec = losses.preset(name, eps)
    got = losses.preset_loss(pair, beta, records[name], spec)
    print(f"{name:14s} labels={spec.labels.kind:6s} loss={spec.loss:3s} "
          f"value={got:.10f} closed form={want:.10f}")

# %% [markdown]
# ## Soft labels never reach zero cross-entropy
#
# With targets `(1 - eps, eps)` the cross-entropy bottoms out at the target
# entropy. `ce_excess` subtracts it, leaving the KL divergence, which is zero
# exactly when the model's log-odds equal `log((1 - eps) / eps)`.

# %%
target = losses.make_labels(losses.LabelSpec.soft(eps), None)
print(f"target entropy = {target.entropy():.6f}")
print(f"CE at the current model = {losses.ce_loss(p, target):.6f}, "
      f"excess = {losses.ce_excess(p, target):.6f}")
