import numpy as np
import pytest

from prefclass.model import ModelPair, PolicyModel


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def tabular_pair_from_probs(theta_probs, ref_probs):
    """Single-prompt ModelPair whose probabilities are exactly the given rows."""
    return ModelPair(PolicyModel.tabular(np.log([theta_probs])),
                     PolicyModel.tabular(np.log([ref_probs])))


def worked_pair(theta_w=0.4, theta_l=0.02, ref_w=0.02, ref_l=0.01):
    """K=3 prompt with the pair probabilities of the worked example; response 2 takes the rest."""
    return tabular_pair_from_probs([theta_w, theta_l, 1 - theta_w - theta_l],
                                   [ref_w, ref_l, 1 - ref_w - ref_l])
