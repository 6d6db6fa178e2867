import numpy as np
import pytest

from ipdhet.harness import replicate_stream
from ipdhet.simulate import generate_dataset, scenario_config


@pytest.fixture(scope="session")
def sc1_data():
    """One generated dataset from the smallest scenario (4 trials, no het)."""
    return generate_dataset(scenario_config(1), replicate_stream(11, 1, 0))


@pytest.fixture(scope="session")
def sc3_data():
    """One generated dataset with high heterogeneity (4 trials)."""
    return generate_dataset(scenario_config(3), replicate_stream(11, 3, 0))


@pytest.fixture(scope="session")
def sc1_saturated(sc1_data):
    """sc1 with trial 2 thinned to one participant per treatment-subgroup cell.

    Four participants covering the four cells make the trial regression
    saturated: the constant, interaction and main-effect columns already span
    the four final-visit rows, so baseline is collinear and after pruning
    there are no residual degrees of freedom left.
    """
    data = sc1_data
    trial = int(data.trial_ids[1])
    sub = data.for_trial(trial)
    keep = [
        int(np.unique(sub.id[(sub.a == a) & (sub.z == z)])[0])
        for a in (0, 1)
        for z in (0, 1)
    ]
    return data.subset((data.trial != trial) | np.isin(data.id, keep))


@pytest.fixture(scope="session")
def sc1_no_subgroup(sc1_data):
    """sc1 with every subgroup member removed from trial 2.

    The subgroup indicator is then constant in that trial, so the
    interaction contrast cannot be estimated trial-locally at all.
    """
    data = sc1_data
    trial = int(data.trial_ids[1])
    return data.subset((data.trial != trial) | (data.z == 0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240229)
