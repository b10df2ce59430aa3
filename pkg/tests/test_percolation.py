import bisect
import math

import networkx as nx
import numpy as np
import pytest

from conftest import make_configuration
from custom_types import Point
from errors import DomainError, ParameterError, ValidityError
from percolation import (
    Configuration,
    External,
    Free,
    LineIntervals,
    MergedSet,
    PartiallyPeriodic,
    Periodic,
    PeriodicWired,
    SpaceTimeBox,
    SpinBoundary,
    Wired,
    build_clusters,
    cluster_counts,
    connected,
    connectivity_scan,
    estimate_connectivity,
    sample_percolation,
)


def test_box_rejects_empty_extent():
    with pytest.raises(DomainError):
        SpaceTimeBox(x_min=2, x_max=1, t_min=0.0, t_max=1.0)

    with pytest.raises(DomainError):
        SpaceTimeBox(x_min=0, x_max=1, t_min=1.0, t_max=1.0)


def test_box_rejects_slit_outside():
    with pytest.raises(DomainError):
        SpaceTimeBox(x_min=0, x_max=1, t_min=-1.0, t_max=1.0, slit_len=3)

    with pytest.raises(DomainError):
        SpaceTimeBox(x_min=0, x_max=1, t_min=0.5, t_max=1.0, slit_len=0)


def test_slit_box_geometry():
    box = SpaceTimeBox.slit_box(m=2, L=3, beta=4.0)

    assert (box.x_min, box.x_max, box.t_min, box.t_max) == (-2, 5, -2.0, 2.0)
    assert box.num_lines == 8
    assert box.num_pairs == 7
    assert box.time_identification
    assert [x for x in box.sites if box.is_slit_site(x)] == [0, 1, 2, 3]


@pytest.mark.parametrize("cuts, circle, expected", [
    ((), False, 1),
    ((), True, 1),
    ((-0.5, 0.2, 0.7), False, 4),
    ((-0.5, 0.2, 0.7), True, 3),
    ((0.3,), True, 1),
])
def test_line_interval_count(cuts, circle, expected):
    line = LineIntervals(x=0, cuts=np.array(cuts), circle=circle, offset=0, t_min=-1.0, t_max=1.0)

    assert line.count == expected


def test_circle_wraps_last_interval_through_seam():
    line = LineIntervals(x=0, cuts=np.array([-0.5, 0.5]), circle=True, offset=10, t_min=-1.0, t_max=1.0)

    assert line.locate(0.0) == 10
    assert line.locate(0.9) == 11
    assert line.locate(-0.9) == 11
    assert line.bottom == line.top == 11


def test_counts_on_empty_box(unit_box):
    counts = cluster_counts(unit_box, Configuration.empty(unit_box))

    assert (counts.free, counts.p, counts.w) == (2, 2, 1)
    assert counts.pp is None and counts.pw is None


def test_bridge_joins_lines(unit_box):
    conf = Configuration.empty(unit_box).with_bridge(unit_box, 0, 0.5)
    counts = cluster_counts(unit_box, conf)

    assert (counts.free, counts.p, counts.w) == (1, 1, 1)


def test_death_splits_line_until_periodic_heals_it(unit_box):
    conf = Configuration.empty(unit_box).with_death(unit_box, 0, 0.0)
    counts = cluster_counts(unit_box, conf)

    assert (counts.free, counts.p, counts.w) == (3, 2, 1)


def test_single_slit_line_counts():
    box = SpaceTimeBox.slit_box(m=0, L=0, beta=2.0)
    conf = make_configuration([[0.5]], [])
    counts = cluster_counts(box, conf)

    assert (counts.free, counts.p, counts.w, counts.pp, counts.pw) == (2, 1, 1, 2, 1)


@pytest.mark.parametrize("seed", range(40))
def test_cluster_count_ordering(seed):
    box = SpaceTimeBox.slit_box(m=2, L=2, beta=3.0)
    counts = cluster_counts(box, sample_percolation(box, 1.0, 1.0, seed))

    assert counts.free >= counts.pp >= counts.p >= counts.w
    assert counts.pp >= counts.pw


def count_tuple(box, configuration):
    counts = cluster_counts(box, configuration)

    return np.array([counts.free, counts.p, counts.w, counts.pp, counts.pw])


@pytest.mark.parametrize("seed", range(20))
def test_counts_are_monotone_under_one_extra_event(seed):
    box = SpaceTimeBox.slit_box(m=2, L=2, beta=3.0)
    conf = sample_percolation(box, 1.0, 1.0, seed)
    rng = np.random.default_rng(seed)
    before = count_tuple(box, conf)

    bridged = conf.with_bridge(box, box.x_min + int(rng.integers(box.num_pairs)), rng.uniform(box.t_min, box.t_max))
    cut = conf.with_death(box, box.x_min + int(rng.integers(box.num_lines)), rng.uniform(box.t_min, box.t_max))

    assert np.all(count_tuple(box, bridged) <= before)
    assert np.all(count_tuple(box, cut) >= before)


@pytest.mark.parametrize("seed", range(20))
def test_free_clusters_match_graph_components(seed):
    box = SpaceTimeBox(x_min=-3, x_max=3, t_min=-2.0, t_max=2.0)
    conf = sample_percolation(box, 0.8, 1.2, seed)

    graph = nx.Graph()

    for i, deaths in enumerate(conf.deaths):
        graph.add_nodes_from((i, j) for j in range(deaths.size + 1))

    for i, times in enumerate(conf.bridges):
        for t in times:
            left = bisect.bisect_right(list(conf.deaths[i]), t)
            right = bisect.bisect_right(list(conf.deaths[i + 1]), t)
            graph.add_edge((i, left), (i + 1, right))

    assert build_clusters(box, conf, Free()).k == nx.number_connected_components(graph)


def test_validate_rejects_time_outside_box(unit_box):
    conf = make_configuration([[1.5], []], [[]])

    with pytest.raises(ValidityError):
        conf.validate(unit_box)


def test_validate_rejects_unsorted_times(unit_box):
    conf = make_configuration([[0.5, -0.5], []], [[]])

    with pytest.raises(ValidityError):
        conf.validate(unit_box)


def test_validate_rejects_death_on_slit():
    box = SpaceTimeBox.slit_box(m=0, L=0, beta=2.0)

    with pytest.raises(ValidityError):
        Configuration.empty(box).with_death(box, 0, 0.0)


def test_validate_rejects_bridge_on_death(unit_box):
    conf = Configuration.empty(unit_box).with_death(unit_box, 1, 0.25)

    with pytest.raises(ValidityError):
        conf.with_bridge(unit_box, 0, 0.25)


def test_slit_rules_need_slit_box(unit_box):
    with pytest.raises(DomainError):
        build_clusters(unit_box, Configuration.empty(unit_box), PartiallyPeriodic())


def test_point_on_slit_needs_side():
    box = SpaceTimeBox.slit_box(m=0, L=0, beta=2.0)
    labelling = build_clusters(box, make_configuration([[0.5]], []), PartiallyPeriodic())

    with pytest.raises(DomainError):
        labelling.cluster_of(Point(0, 0.0))

    assert not connected(labelling, Point(0, 0.0, 1), Point(0, 0.0, -1))
    assert connected(build_clusters(box, labelling.configuration, PeriodicWired()),
                     Point(0, 0.0, 1), Point(0, 0.0, -1))


def test_merged_set_joins_designated_points():
    box = SpaceTimeBox.slit_box(m=0, L=0, beta=2.0)
    conf = make_configuration([[0.5]], [])
    rule = MergedSet(points=(Point(0, 0.0, 1), Point(0, 0.0, -1)))

    assert build_clusters(box, conf, PartiallyPeriodic()).k == 2
    assert build_clusters(box, conf, rule).k == 1


def test_spin_boundary_pins_outer_lines():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)
    conf = Configuration.empty(box)
    labelling = build_clusters(box, conf, SpinBoundary.all_plus(box))

    assert build_clusters(box, conf, PartiallyPeriodic()).k == 3
    assert labelling.k == 2
    assert labelling.pinned == {labelling.cluster_of(Point(-1, 0.5)): 1}
    assert labelling.cluster_of(Point(-1, 0.5)) == labelling.cluster_of(Point(1, 0.5))
    assert not labelling.conflicts


def test_spin_boundary_flags_conflicting_cluster():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)
    conf = Configuration.empty(box).with_bridge(box, -1, 0.5).with_bridge(box, 0, 0.5)
    labelling = build_clusters(box, conf, SpinBoundary(line_labels=((-1, 1), (1, -1))))

    assert labelling.k == 1
    assert labelling.conflicts == frozenset({0})


def test_external_configuration_joins_through_outside():
    inner = SpaceTimeBox(x_min=0, x_max=1, t_min=-1.0, t_max=1.0)
    outer = SpaceTimeBox(x_min=0, x_max=1, t_min=-2.0, t_max=2.0)
    conf = Configuration.empty(inner)

    joined = External(outer_box=outer, tau=make_configuration([[], []], [[1.5]]))
    cut = External(outer_box=outer, tau=make_configuration([[1.2], []], [[1.5]]))

    assert build_clusters(inner, conf, Free()).k == 2
    assert build_clusters(inner, conf, joined).k == 1
    assert build_clusters(inner, conf, cut).k == 2


def test_external_configuration_must_stay_outside():
    inner = SpaceTimeBox(x_min=0, x_max=1, t_min=-1.0, t_max=1.0)
    outer = SpaceTimeBox(x_min=0, x_max=1, t_min=-2.0, t_max=2.0)
    rule = External(outer_box=outer, tau=make_configuration([[0.5], []], [[]]))

    with pytest.raises(ValidityError):
        build_clusters(inner, Configuration.empty(inner), rule)


def test_sampling_is_reproducible():
    box = SpaceTimeBox.slit_box(m=2, L=1, beta=3.0)

    assert sample_percolation(box, 1.0, 1.0, 7) == sample_percolation(box, 1.0, 1.0, 7)
    assert sample_percolation(box, 1.0, 1.0, 7) != sample_percolation(box, 1.0, 1.0, 8)


def test_sampled_configuration_is_admissible():
    box = SpaceTimeBox.slit_box(m=2, L=2, beta=3.0)

    for seed in range(10):
        sample_percolation(box, 2.0, 2.0, seed).validate(box)


def test_death_count_matches_intensity():
    box = SpaceTimeBox.square(2)
    totals = [sample_percolation(box, 0.0, 1.5, seed).num_deaths for seed in range(200)]
    expected = 1.5 * box.height * box.num_lines

    assert np.mean(totals) == pytest.approx(expected, abs=4 * math.sqrt(expected / 200))


def test_negative_rate_rejected(unit_box):
    with pytest.raises(ParameterError):
        sample_percolation(unit_box, -1.0, 1.0, 0)


def test_connectivity_at_zero_radius_is_certain():
    estimate = estimate_connectivity(1.0, 1.0, 0, trials=5, seed=0)

    assert estimate.probability == 1.0
    assert estimate.se == 0.0


def test_connectivity_without_bridges_matches_closed_form():
    m, delta = 2, 1.0
    exposed = math.exp(-delta * (m - 0.5))
    expected = 2 * exposed - exposed ** 2

    estimate = estimate_connectivity(0.0, delta, m, trials=2000, seed=3)

    assert abs(estimate.probability - expected) < 4 * estimate.se


@pytest.mark.parametrize("stronger, weaker", [
    ((0.5, 1.0), (0.25, 1.0)),
    ((0.5, 1.0), (0.5, 2.0)),
    ((0.25, 1.0), (0.1, 2.0)),
])
def test_connectivity_is_monotone_in_rates(stronger, weaker):
    high = estimate_connectivity(*stronger, 2, trials=300, seed=5)
    low = estimate_connectivity(*weaker, 2, trials=300, seed=5)

    assert high.probability >= low.probability - 3 * math.hypot(high.se, low.se)


def test_connectivity_scan_decreases_in_subcritical_regime():
    scan = connectivity_scan(0.1, 1.0, [1, 3], trials=400, seed=11)

    assert [estimate.m for estimate in scan] == [1, 3]
    assert scan[0].probability > scan[1].probability
