import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from custom_types import Point
from errors import ConditioningViolationError, ParameterError
from percolation import (
    Configuration,
    PartiallyPeriodic,
    Periodic,
    SpaceTimeBox,
    SpinBoundary,
    build_clusters,
    sample_percolation,
)
from rc_sampler import (
    assign_spins,
    chain_mean,
    importance_estimate,
    initial_state,
    iterate_chain,
    run_chain,
    spins_consistent,
    sw_sweep,
)


def test_assign_spins_constant_on_clusters():
    box = SpaceTimeBox.slit_box(m=2, L=1, beta=3.0)
    labelling = build_clusters(box, sample_percolation(box, 1.0, 1.0, 5), PartiallyPeriodic())
    sigma = assign_spins(labelling, seed=9)

    assert spins_consistent(labelling, sigma.spins)
    assert set(np.unique(sigma.spins)) <= {-1, 1}


def test_assign_spins_potts_values():
    box = SpaceTimeBox.slit_box(m=2, L=1, beta=3.0)
    labelling = build_clusters(box, sample_percolation(box, 1.0, 1.0, 5), PartiallyPeriodic())
    sigma = assign_spins(labelling, seed=9, q=3)

    assert set(np.unique(sigma.spins)) <= {1, 2, 3}

    with pytest.raises(ParameterError):
        assign_spins(labelling, seed=9, q=1)


def test_assign_spins_respects_pinned_labels():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)
    labelling = build_clusters(box, Configuration.empty(box), SpinBoundary.all_plus(box))

    for seed in range(10):
        sigma = assign_spins(labelling, seed)

        assert sigma.at(Point(-1, 0.3)) == 1
        assert sigma.at(Point(1, -0.3)) == 1


def test_assign_spins_refuses_conflicts():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)
    conf = Configuration.empty(box).with_bridge(box, -1, 0.5).with_bridge(box, 0, 0.5)
    labelling = build_clusters(box, conf, SpinBoundary(line_labels=((-1, 1), (1, -1))))

    with pytest.raises(ConditioningViolationError):
        assign_spins(labelling, seed=0)


def test_initial_state_gives_up_on_impossible_conditioning():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)
    rule = SpinBoundary(line_labels=((box.x_min, 1), (box.x_max, -1)))

    with pytest.raises(ConditioningViolationError):
        initial_state(box, 50.0, 0.01, rule, seed=0, max_rejections=5)


def test_sweep_keeps_spins_on_clusters():
    box = SpaceTimeBox.slit_box(m=2, L=2, beta=4.0)
    state = initial_state(box, 1.0, 1.0, PartiallyPeriodic(), seed=1)

    for _ in range(20):
        state = sw_sweep(state, 1.0, 1.0)
        state.configuration.validate(box)

        assert spins_consistent(state.labelling, state.spins.spins)

    assert state.sweep == 20


def test_sweeps_are_reproducible():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)

    def upper(state):
        return state.spins.upper

    first = run_chain(box, 1.0, 1.0, PartiallyPeriodic(), 4, sweeps=15, burn_in=5, observe=upper)
    second = run_chain(box, 1.0, 1.0, PartiallyPeriodic(), 4, sweeps=15, burn_in=5, observe=upper)

    assert first == second
    assert len(first) == 15


def test_thinning_picks_every_nth_state():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)

    def sweep_number(state):
        return state.sweep

    assert run_chain(box, 1.0, 1.0, PartiallyPeriodic(), 0, sweeps=4, burn_in=3, thin=2,
                     observe=sweep_number) == [5, 7, 9, 11]


def test_iterate_chain_matches_explicit_sweeps():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)
    start = initial_state(box, 0.5, 1.0, PartiallyPeriodic(), seed=2)

    explicit = sw_sweep(sw_sweep(start, 0.5, 1.0), 0.5, 1.0)
    chain = iterate_chain(start, 0.5, 1.0)
    next(chain)

    assert next(chain).configuration == explicit.configuration


def test_slit_agreement_without_bridges():
    # A single slit line: the two slit ends share a cluster only with no death anywhere,
    # which under the q=2 weighting happens with probability exp(-2 delta beta)
    delta, beta = 1.0, 0.5
    box = SpaceTimeBox.slit_box(m=0, L=0, beta=beta)

    agree = run_chain(box, 0.0, delta, PartiallyPeriodic(), 12, sweeps=4000, burn_in=100,
                      observe=lambda state: state.spins.upper == state.spins.lower)

    back = math.exp(-2 * delta * beta)
    assert np.mean(agree) == pytest.approx(back + (1 - back) / 2, abs=0.05)


def test_chain_mean_of_constant_functional():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)
    mean, se = chain_mean(box, 1.0, 1.0, PartiallyPeriodic(), lambda labelling: 1.0,
                          sweeps=40, seed=0, burn_in=2, num_batches=4)

    assert mean == 1.0
    assert se == 0.0


def test_importance_weights_vanish_for_percolation():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)
    estimate = importance_estimate(box, 1.0, 1.0, 1.0, lambda labelling: labelling.k, trials=50, seed=3)

    assert estimate.ess == pytest.approx(50)
    assert not estimate.unreliable


def test_importance_reweighting_favours_many_clusters():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)

    def count(labelling):
        return labelling.k

    plain = importance_estimate(box, 1.0, 1.0, 1.0, count, trials=300, seed=3, rule=Periodic())
    weighted = importance_estimate(box, 1.0, 1.0, 2.0, count, trials=300, seed=3, rule=Periodic())

    assert weighted.estimate > plain.estimate
    assert weighted.ess < plain.ess


def test_cluster_weighting_lowers_increasing_functionals():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)

    def bridges(labelling):
        return labelling.configuration.num_bridges

    def fewer_deaths(labelling):
        return -labelling.configuration.num_deaths

    for f in (bridges, fewer_deaths):
        percolation = importance_estimate(box, 1.0, 1.0, 1.0, f, trials=400, seed=8)
        clusters = importance_estimate(box, 1.0, 1.0, 2.0, f, trials=400, seed=8)

        assert clusters.estimate <= percolation.estimate + 3 * math.hypot(clusters.se, percolation.se)


def test_chain_law_is_stable_under_longer_burn_in():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)

    def observe(state):
        return state.k, state.configuration.num_bridges

    short = np.array(run_chain(box, 1.0, 1.0, PartiallyPeriodic(), 21, sweeps=2000, burn_in=50, observe=observe))
    long = np.array(run_chain(box, 1.0, 1.0, PartiallyPeriodic(), 22, sweeps=2000, burn_in=100, observe=observe))

    for column in range(2):
        assert ks_2samp(short[:, column], long[:, column]).statistic < 0.12


def test_importance_rejects_small_q():
    box = SpaceTimeBox.slit_box(m=1, L=1, beta=2.0)

    with pytest.raises(ParameterError):
        importance_estimate(box, 1.0, 1.0, 0.5, lambda labelling: 0.0, trials=10, seed=0)
