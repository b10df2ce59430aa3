import math

import pytest

from custom_types import Point
from errors import DomainError, InsufficientDataError, ParameterError
from experiment_application import slit_agrees
from mixing import (
    SeparatorGeometry,
    boundary_influence,
    boundary_influence_scan,
    factorization_ratio,
    finite_energy_check,
    ratio_mixing_bound,
    t_quantities,
)
from percolation import SpaceTimeBox


def test_ratio_mixing_bound():
    assert ratio_mixing_bound(0.0, 0.0) == 0.0
    assert ratio_mixing_bound(0.01, 0.01) == pytest.approx(2 * (0.03 + 0.02 / 0.97))
    assert ratio_mixing_bound(0.5, 0.3) is None
    assert ratio_mixing_bound(0.2, 0.1) is None


def test_equator_separates_slit_ends():
    geometry = SeparatorGeometry.equator(1, 2, 4.0)

    assert geometry.separates()
    assert not geometry.box.time_identification
    assert len(geometry.inner) == len(geometry.outer) == 3


def test_equator_margin_trims_readout():
    geometry = SeparatorGeometry.equator(1, 4, 4.0, K=1)

    assert [point.x for point in geometry.inner] == [1, 2, 3]


def test_parallelogram_separates_slit_from_outer_lines():
    geometry = SeparatorGeometry.parallelogram(7, 1, 20.0)

    assert geometry.margin == 3
    assert geometry.separates()


def test_missing_separator_does_not_separate():
    equator = SeparatorGeometry.equator(1, 2, 4.0)
    empty = SeparatorGeometry(variant="none", box=equator.box, segments=(), inner=equator.inner,
                              outer=equator.outer)

    assert not empty.separates()


def test_geometry_domain_errors():
    with pytest.raises(DomainError):
        SeparatorGeometry.equator(1, 2, 4.0, K=2)

    with pytest.raises(DomainError):
        SeparatorGeometry.parallelogram(2, 1, 20.0)

    with pytest.raises(DomainError):
        SeparatorGeometry.parallelogram(7, 1, 4.0)


def test_t_quantities_vanish_without_bridges():
    geometry = SeparatorGeometry.equator(1, 0, 2.0)
    result = t_quantities(geometry, 0.0, 1.0, sweeps=50, trials=20, seed=0, burn_in=5)

    assert result.t1 == result.t2_sq == 0.0
    assert result.t1_percolation == result.t2_sq_percolation == 0.0
    assert result.bound == 0.0


def test_t_quantities_dominated_by_percolation_and_symmetric_on_equator():
    geometry = SeparatorGeometry.equator(1, 2, 2.0)
    result = t_quantities(geometry, 1.0, 1.0, sweeps=3000, trials=400, seed=2, burn_in=100)

    assert result.t1 <= result.t1_percolation + 3 * math.hypot(result.t1_se, result.t1_percolation_se)
    assert result.t2_sq <= result.t2_sq_percolation + 3 * math.hypot(result.t2_sq_se, result.t2_sq_percolation_se)
    assert abs(result.t1 - result.t2_sq) <= 3 * math.hypot(result.t1_se, result.t2_sq_se)


def test_factorization_of_single_slit_line():
    # Upper and lower ends agree with probability (1 + e^{-2 delta beta}) / 2 and have
    # uniform marginals, so every cell is off by e^{-2 delta beta}
    result = factorization_ratio(0, 0, 0.5, 0.0, 1.0, sweeps=8000, chains=1, seed=1, burn_in=50)

    assert result.K == 0
    assert len(result.cells) == 4
    assert result.excluded == 0
    assert result.max_deviation == pytest.approx(math.exp(-1.0), abs=0.08)


def test_factorization_needs_counts():
    with pytest.raises(InsufficientDataError):
        factorization_ratio(0, 0, 0.5, 0.0, 1.0, sweeps=10, chains=1, seed=1, burn_in=5)


def test_finite_energy_inequality_holds():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)
    report = finite_energy_check(box, [Point(-1, 0.5)], Point(1, 0.5), 1.0, 1.0,
                                 sweeps=2000, trials=200, seed=4, burn_in=50)

    assert report.floor == pytest.approx(1 / 3)
    assert 0.0 < report.non_connection <= 1.0
    assert report.rows
    assert report.passed


def test_finite_energy_point_outside_set():
    box = SpaceTimeBox.slit_box(m=1, L=0, beta=2.0)

    with pytest.raises(ParameterError):
        finite_energy_check(box, [Point(1, 0.5)], Point(1, 0.5), 1.0, 1.0, sweeps=10, trials=10, seed=0)


def test_boundary_has_no_influence_without_bridges():
    estimate = boundary_influence(1, 0, 0.5, 0.0, 1.0, slit_agrees, sweeps=4000, seed=2, burn_in=50)

    assert estimate.deviation < 0.08
    assert estimate.acceptance == 1.0
    assert estimate.regime_warning


def test_boundary_influence_needs_observed_event():
    with pytest.raises(InsufficientDataError):
        boundary_influence(1, 0, 0.5, 1.0, 1.0, lambda upper, lower: False, sweeps=100, seed=0, burn_in=5)


def test_boundary_influence_scan_rows():
    scan = boundary_influence_scan([0, 1], 0, 0.0, 1.0, slit_agrees, seed=3,
                                   beta_rule=lambda m, L: 0.5, sweeps=400, burn_in=20)

    assert [row.m for row in scan.rows] == [0, 1]
    assert scan.fit is None
