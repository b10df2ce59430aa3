import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from bounds import DecayFit, fit_decay_rate
from custom_types import FloatArray, Point, SlitEvent
from errors import DomainError, FitError, InsufficientDataError, ParameterError
from estimators import DEFAULT_BATCHES, estimate_slit_histogram, slit_index, slit_spins
from percolation import (
    BoundaryRule,
    ClusterLabelling,
    Free,
    PartiallyPeriodic,
    SpaceTimeBox,
    SpinBoundary,
    build_clusters,
    clusters_meeting,
    sample_percolation,
)
from rc_sampler import DEFAULT_BURN_IN, ChainState, run_chain
from utils import CHAIN_STREAM, TRIAL_STREAM, batch_means, binomial_se, derive_seed

logger = logging.getLogger(__name__)

MIN_EXPECTED_COUNT = 25


def _run_chains(box: SpaceTimeBox,
                lam: float,
                delta: float,
                rule: BoundaryRule,
                observe: Callable[[ChainState], object],
                *,
                sweeps: int,
                chains: int,
                seed: int,
                burn_in: int,
                workers: int) -> list[list]:
    """
    Runs independent chains, chain ``c`` seeded by ``derive_seed(seed, CHAIN_STREAM, c)``.
    """
    return Parallel(n_jobs=workers)(
        delayed(run_chain)(
            box, lam, delta, rule, derive_seed(seed, CHAIN_STREAM, chain),
            sweeps=sweeps, burn_in=burn_in, observe=observe,
        )
        for chain in range(chains)
    )


@dataclass(frozen=True, kw_only=True)
class SeparatorGeometry:
    """
    A linear set ``D`` in a box, with the sets ``Delta`` and ``Gamma`` it is meant to separate.

    :param variant: ``"equator"`` or ``"parallelogram"``.
    :param box: the box.
    :param segments: the pieces ``(x, t_low, t_high)`` of ``D``; a point is a segment of length 0.
    :param inner: the points of ``Delta``.
    :param outer: the points of ``Gamma``.
    :param outer_lines: sites whose whole time-line belongs to ``Gamma``.
    :param margin: ``K`` for the equator, ``k`` for the parallelogram.
    """
    variant: str
    box: SpaceTimeBox
    segments: tuple[tuple[int, float, float], ...]
    inner: tuple[Point, ...]
    outer: tuple[Point, ...] = ()
    outer_lines: tuple[int, ...] = ()
    margin: int = 0

    @classmethod
    def equator(cls, m: int, L: int, beta: float, K: int = 0):
        """
        The points ``(x, 0)`` off the slit, separating the upper slit ends ``x+`` from the
        lower ends ``x-`` for ``K <= x <= L - K``. The box keeps free time ends, since glued
        ends would join the two halves around the time circle.
        """
        if not 0 <= K <= L / 2:
            raise DomainError(f"Margin K={K} must lie in [0, L/2] for L={L}.")

        box = SpaceTimeBox.slit_box(m=m, L=L, beta=beta, time_identification=False)
        sites = [x for x in box.sites if not box.is_slit_site(x)]

        return cls(
            variant="equator",
            box=box,
            segments=tuple((x, 0.0, 0.0) for x in sites),
            inner=tuple(Point(x, 0.0, +1) for x in range(K, L - K + 1)),
            outer=tuple(Point(x, 0.0, -1) for x in range(K, L - K + 1)),
            margin=K,
        )

    @classmethod
    def parallelogram(cls, m: int, L: int, beta: float):
        """
        A circuit around the slit from ``(-k, 0)`` to ``(L + k, 0)`` and back, with
        ``k = floor(3m/7)``, made of vertical steps of height 2 and unit horizontal steps.
        It separates the slit ends from the outermost time-lines of the slit box.

        :raises:
            DomainError: if ``k < 1`` or the circuit does not fit in the box.
        """
        k = (3 * m) // 7

        if k < 1:
            raise DomainError(f"The parallelogram needs floor(3m/7) >= 1, got m={m}.")

        box = SpaceTimeBox.slit_box(m=m, L=L, beta=beta)
        segments = []

        for x in range(-k, L + k + 1):
            h = 2.0 * min(x + k, L + k - x)

            if h + 2 >= box.t_max:
                raise DomainError(f"The parallelogram does not fit below t={box.t_max}; increase beta.")

            segments += [(x, h, h + 2), (x, -h - 2, -h)]

        return cls(
            variant="parallelogram",
            box=box,
            segments=tuple(segments),
            inner=tuple(Point(x, 0.0, side) for x in range(L + 1) for side in (1, -1)),
            outer_lines=(box.x_min, box.x_max),
            margin=k,
        )

    def wired_rule(self) -> SpinBoundary:
        """
        :return: the rule counting every cluster meeting ``Delta`` or ``Gamma`` as one.
        """
        base = PartiallyPeriodic() if self.box.time_identification else Free()
        points = self.inner + self.outer

        return SpinBoundary(
            line_labels=tuple((x, 1) for x in self.outer_lines),
            point_labels=tuple((point, 1) for point in points),
            base=base,
        )

    def _pieces(self) -> list[tuple[int, float, float]]:
        box = self.box
        pieces = []

        for x in box.sites:
            blocked = sorted((low, high) for site, low, high in self.segments if site == x)

            if box.is_slit_site(x):
                blocked = sorted(blocked + [(0.0, 0.0)])

            free, start = [], box.t_min

            for low, high in blocked:
                if low > start:
                    free.append((start, low))

                start = max(start, high)

            if start < box.t_max:
                free.append((start, box.t_max))

            if box.time_identification and len(free) > 1 and free[0][0] == box.t_min and free[-1][1] == box.t_max:
                first, last = free.pop(0), free.pop()
                free.append((last[0], first[1] + box.height))

            pieces += [(x, low, high) for low, high in free]

        return pieces

    def separates(self) -> bool:
        """
        Checks that every path from ``Delta`` to ``Gamma`` meets ``D``: the free pieces of
        the time-lines (lines minus ``D`` and the slit) are joined along a line and across
        adjacent lines where they overlap in time, and no component may hold both sets.
        """
        box = self.box
        pieces = self._pieces()
        rows, cols = [], []

        def overlaps(a, b) -> bool:
            shifts = (0.0, box.height, -box.height) if box.time_identification else (0.0,)
            return any(min(a[2], b[2] + s) > max(a[1], b[1] + s) for s in shifts)

        for i, a in enumerate(pieces):
            for j, b in enumerate(pieces):
                if b[0] == a[0] + 1 and overlaps(a, b):
                    rows.append(i)
                    cols.append(j)

        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(pieces), len(pieces)))
        _, labels = connected_components(graph, directed=False)

        def piece_of(point: Point) -> int:
            t = point.t + (1e-9 * point.side if point.t == 0.0 and box.is_slit_site(point.x) else 0.0)

            for index, (x, low, high) in enumerate(pieces):
                if x == point.x and (low < t < high or low < t + box.height < high):
                    return index

            raise DomainError(f"Point {tuple(point)} lies on the separator.")

        inner = {labels[piece_of(point)] for point in self.inner}
        outer = {labels[piece_of(point)] for point in self.outer}
        outer |= {labels[i] for i, piece in enumerate(pieces) if piece[0] in self.outer_lines}

        return not inner & outer

    def clusters(self, labelling: ClusterLabelling) -> tuple[set[int], set[int], set[int]]:
        """
        :return: the clusters meeting ``Delta``, ``D`` and ``Gamma``.
        """
        inner = {labelling.cluster_of(point) for point in self.inner}
        separator = set()

        for x, low, high in self.segments:
            separator.update(int(c) for c in clusters_meeting(labelling, x, low, high))

        outer = {labelling.cluster_of(point) for point in self.outer}

        for x in self.outer_lines:
            outer.update(int(c) for c in np.unique(labelling.labels[labelling.lines[labelling.box.line_index(x)].ids]))

        return inner, separator, outer


def ratio_mixing_bound(t1: float, t2: float) -> float | None:
    """
    :return: ``2 (t1 + 2 t2 + (t1 + t2) / (1 - t1 - 2 t2))``, or ``None`` when it exceeds 1.
    """
    if t1 + 2 * t2 >= 1:
        return None

    bound = 2 * (t1 + 2 * t2 + (t1 + t2) / (1 - t1 - 2 * t2))

    return bound if bound <= 1 else None


@dataclass(frozen=True, kw_only=True)
class TQuantities:
    """
    Connection probabilities under the measure wired at ``Delta`` and ``Gamma``, with the
    same probabilities under percolation, which dominates it.

    :param t1: ``P(Delta <-> D)``.
    :param t2_sq: ``P(D <-> Gamma)``.
    :param bound: :func:`ratio_mixing_bound` of ``(t1, sqrt(t2_sq))``.
    """
    t1: float
    t1_se: float
    t2_sq: float
    t2_sq_se: float
    t1_percolation: float
    t1_percolation_se: float
    t2_sq_percolation: float
    t2_sq_percolation_se: float
    bound: float | None
    rejections: int


def _separator_hits(geometry: SeparatorGeometry, labelling: ClusterLabelling) -> tuple[bool, bool]:
    inner, separator, outer = geometry.clusters(labelling)

    return bool(inner & separator), bool(separator & outer)


def t_quantities(geometry: SeparatorGeometry,
                 lam: float,
                 delta: float,
                 *,
                 sweeps: int,
                 trials: int,
                 seed: int,
                 chains: int = 1,
                 burn_in: int = DEFAULT_BURN_IN,
                 workers: int = 1) -> TQuantities:
    """
    Estimates ``t1`` and ``t2**2`` from chains of the wired measure and from ``trials``
    percolation samples. Connections are read off the configuration itself, not the
    wiring.
    """
    box = geometry.box

    def observe(state: ChainState) -> tuple[bool, bool, int]:
        hits = _separator_hits(geometry, build_clusters(box, state.configuration, Free()))
        return hits[0], hits[1], state.rejections

    runs = _run_chains(box, lam, delta, geometry.wired_rule(), observe, sweeps=sweeps, chains=chains,
                       seed=seed, burn_in=burn_in, workers=workers)
    observed = np.array([row for run in runs for row in run], dtype=np.float64)
    t1, t1_se = batch_means(observed[:, 0], DEFAULT_BATCHES)
    t2_sq, t2_sq_se = batch_means(observed[:, 1], DEFAULT_BATCHES)

    percolation = np.array([
        _separator_hits(geometry, build_clusters(
            box, sample_percolation(box, lam, delta, derive_seed(seed, TRIAL_STREAM, trial)), Free()
        ))
        for trial in range(trials)
    ], dtype=np.float64).reshape(-1, 2)
    p1, p2 = percolation.mean(axis=0) if trials else (math.nan, math.nan)

    return TQuantities(
        t1=t1,
        t1_se=t1_se,
        t2_sq=t2_sq,
        t2_sq_se=t2_sq_se,
        t1_percolation=float(p1),
        t1_percolation_se=binomial_se(float(p1), trials),
        t2_sq_percolation=float(p2),
        t2_sq_percolation_se=binomial_se(float(p2), trials),
        bound=ratio_mixing_bound(t1, math.sqrt(t2_sq)),
        rejections=int(sum(run[0][2] for run in runs if run)),
    )


@dataclass(frozen=True, kw_only=True)
class FactorizationCell:
    plus: tuple[int, ...]
    minus: tuple[int, ...]
    deviation: float
    se: float
    expected: float


@dataclass(frozen=True, kw_only=True)
class FactorizationResult:
    """
    The largest ``|P(e+, e-) / (P(e+) P(e-)) - 1|`` over well-sampled readouts of the
    middle sites ``K..L-K``.

    :param excluded: cells left out for an expected count under 25.
    """
    m: int
    L: int
    K: int
    beta: float
    max_deviation: float
    se: float
    cells: tuple[FactorizationCell, ...]
    excluded: int
    bound_form: str = "C*exp(-gamma*K/2)"


def _reduced_counts(counts: np.ndarray, L: int, K: int) -> np.ndarray:
    d = counts.shape[0]
    middle = L - 2 * K
    to_middle = np.array([slit_index(slit_spins(i, L)[K:L - K + 1]) for i in range(d)])
    reduced = np.zeros((1 << (middle + 1), 1 << (middle + 1)), dtype=np.int64)
    np.add.at(reduced, (to_middle[:, None], to_middle[None, :]), counts)

    return reduced


def _deviations(counts: np.ndarray) -> tuple[FloatArray, FloatArray]:
    total = counts.sum()
    joint = counts / total
    plus, minus = joint.sum(axis=1), joint.sum(axis=0)
    product = np.outer(plus, minus)

    with np.errstate(divide="ignore", invalid="ignore"):
        deviation = np.where(product > 0, joint / product - 1, np.nan)

    return deviation, product * total


def factorization_ratio(m: int,
                        L: int,
                        beta: float,
                        lam: float,
                        delta: float,
                        *,
                        K: int | None = None,
                        **chain_options) -> FactorizationResult:
    """
    Measures how far the upper and lower slit readouts on ``K..L-K`` are from independent.

    ``K`` defaults to ``ceil(ln L)`` (0 for ``L <= 1``), capped at ``L // 2``. Errors are
    jackknifed over the chain batches.

    :raises:
        InsufficientDataError: if every cell has an expected count under 25.
    """
    if K is None:
        K = math.ceil(math.log(L)) if L > 1 else 0

    K = min(K, L // 2)
    histogram = estimate_slit_histogram(m, L, beta, lam, delta, **chain_options)
    counts = _reduced_counts(histogram.counts, L, K)
    deviation, expected = _deviations(counts)

    batches = [_reduced_counts(batch, L, K) for batch in histogram.batch_counts]
    leave_one_out = np.array([_deviations(counts - batch)[0] for batch in batches])
    b = len(batches)
    se = np.sqrt((b - 1) / b * np.nansum((leave_one_out - np.nanmean(leave_one_out, axis=0)) ** 2, axis=0))

    middle = L - 2 * K
    cells = []
    excluded = 0

    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            if expected[i, j] < MIN_EXPECTED_COUNT or np.isnan(deviation[i, j]):
                excluded += 1
                continue

            cells.append(FactorizationCell(
                plus=slit_spins(i, middle),
                minus=slit_spins(j, middle),
                deviation=float(abs(deviation[i, j])),
                se=float(se[i, j]),
                expected=float(expected[i, j]),
            ))

    if not cells:
        raise InsufficientDataError("Every readout cell has an expected count under 25.")

    worst = max(cells, key=lambda cell: cell.deviation)

    if excluded:
        logger.info("Factorization at K=%d: %d under-sampled cell(s) excluded", K, excluded)

    return FactorizationResult(
        m=m,
        L=L,
        K=K,
        beta=beta,
        max_deviation=worst.deviation,
        se=worst.se,
        cells=tuple(cells),
        excluded=excluded,
    )


@dataclass(frozen=True, kw_only=True)
class FiniteEnergyRow:
    pattern: tuple[int, ...]
    alpha: int
    joint: float
    joint_se: float
    lower_bound: float
    lower_bound_se: float
    holds: bool


@dataclass(frozen=True, kw_only=True)
class FiniteEnergyReport:
    """
    Checks ``P(sigma_S = e, sigma_x = a) >= 1/2 P(sigma_S = e) P(x not connected to S)``.

    :param non_connection: the percolation estimate of ``P(x not connected to S)``.
    :param floor: ``delta / (2 lam + delta)``, the chance the first event above ``x`` is a death.
    :param skipped: patterns with too little mass to test.
    """
    non_connection: float
    non_connection_se: float
    floor: float
    rows: tuple[FiniteEnergyRow, ...]
    skipped: int

    @property
    def violations(self) -> tuple[FiniteEnergyRow, ...]:
        return tuple(row for row in self.rows if not row.holds)

    @property
    def passed(self) -> bool:
        return not self.violations


def finite_energy_check(box: SpaceTimeBox,
                        S: Sequence[Point],
                        x: Point,
                        lam: float,
                        delta: float,
                        *,
                        sweeps: int,
                        trials: int,
                        seed: int,
                        rule: BoundaryRule = Free(),
                        burn_in: int = DEFAULT_BURN_IN) -> FiniteEnergyReport:
    """
    Tests the finite-energy inequality with spins from one chain and ``P(x not connected
    to S)`` from independent percolation samples.

    :raises:
        ParameterError: if ``x`` is one of ``S``.
    """
    S = tuple(Point(*point) for point in S)
    x = Point(*x)

    if x in S:
        raise ParameterError(f"Point {tuple(x)} must not belong to S.")

    observed = np.array(
        run_chain(box, lam, delta, rule, derive_seed(seed, CHAIN_STREAM), sweeps=sweeps, burn_in=burn_in,
                  observe=lambda state: tuple(state.spins.at(point) for point in S + (x,))),
        dtype=np.int64,
    ).reshape(sweeps, len(S) + 1)

    apart = 0

    for trial in range(trials):
        labelling = build_clusters(box, sample_percolation(box, lam, delta, derive_seed(seed, TRIAL_STREAM, trial)), rule)
        apart += labelling.cluster_of(x) not in {labelling.cluster_of(point) for point in S}

    p = apart / trials
    p_se = binomial_se(p, trials)
    rows = []
    skipped = 0

    for pattern in {tuple(row) for row in observed[:, :-1].tolist()}:
        on_pattern = np.all(observed[:, :-1] == pattern, axis=1)

        if on_pattern.sum() < MIN_EXPECTED_COUNT:
            skipped += 1
            continue

        marginal, marginal_se = batch_means(on_pattern.astype(np.float64), DEFAULT_BATCHES)

        for alpha in (-1, 1):
            joint, joint_se = batch_means((on_pattern & (observed[:, -1] == alpha)).astype(np.float64), DEFAULT_BATCHES)
            bound = 0.5 * marginal * p
            bound_se = 0.5 * math.sqrt((marginal_se * p) ** 2 + (marginal * p_se) ** 2)
            rows.append(FiniteEnergyRow(
                pattern=pattern,
                alpha=alpha,
                joint=joint,
                joint_se=joint_se,
                lower_bound=bound,
                lower_bound_se=bound_se,
                holds=joint >= bound - 3 * math.hypot(joint_se, bound_se),
            ))

    report = FiniteEnergyReport(
        non_connection=p,
        non_connection_se=p_se,
        floor=delta / (2 * lam + delta),
        rows=tuple(sorted(rows, key=lambda row: (row.pattern, row.alpha))),
        skipped=skipped,
    )

    if report.violations:
        logger.warning("Finite-energy inequality failed for %d pattern(s)", len(report.violations))

    return report


@dataclass(frozen=True, kw_only=True)
class InfluenceEstimate:
    """
    ``|P_eta(A) / P(A) - 1|`` for the all-plus spin boundary ``eta``.

    :param acceptance: the share of chain starts accepted under the boundary conditioning.
    :param regime_warning: if ``beta < 4(m + L + 1)``.
    """
    m: int
    L: int
    beta: float
    p_free: float
    p_free_se: float
    p_boundary: float
    p_boundary_se: float
    ratio: float
    deviation: float
    se: float
    acceptance: float
    regime_warning: bool = False


def _event_probability(box, lam, delta, rule, event, **options) -> tuple[float, float, int]:
    def observe(state: ChainState) -> tuple[float, int]:
        return float(event(state.spins.upper, state.spins.lower)), state.rejections

    runs = _run_chains(box, lam, delta, rule, observe, **options)
    values = np.array([value for run in runs for value, _ in run])
    rejections = sum(run[0][1] for run in runs if run)
    mean, se = batch_means(values, DEFAULT_BATCHES)

    return mean, se, rejections


def boundary_influence(m: int,
                       L: int,
                       beta: float,
                       lam: float,
                       delta: float,
                       event: SlitEvent,
                       *,
                       sweeps: int,
                       chains: int = 1,
                       seed: int,
                       burn_in: int = DEFAULT_BURN_IN,
                       workers: int = 1) -> InfluenceEstimate:
    """
    Compares the probability of a slit event with and without ``+1`` spins on the two
    outermost lines of the slit box.

    :raises:
        InsufficientDataError: if ``P(A)`` is not above five standard errors.
    """
    regime_warning = beta < 4 * (m + L + 1)

    if regime_warning:
        logger.warning("beta=%g is below 4(m+L+1)=%d", beta, 4 * (m + L + 1))

    box = SpaceTimeBox.slit_box(m=m, L=L, beta=beta)
    options = dict(sweeps=sweeps, chains=chains, burn_in=burn_in, workers=workers)
    p_free, free_se, _ = _event_probability(box, lam, delta, PartiallyPeriodic(), event,
                                            seed=derive_seed(seed, 0), **options)
    p_eta, eta_se, rejections = _event_probability(box, lam, delta, SpinBoundary.all_plus(box), event,
                                                   seed=derive_seed(seed, 1), **options)

    if not p_free > 5 * free_se:
        raise InsufficientDataError(f"Event probability {p_free:.3g} is not above 5 SE ({free_se:.3g}).")

    ratio = p_eta / p_free
    se = ratio * math.hypot(eta_se / p_eta if p_eta > 0 else 0.0, free_se / p_free)

    return InfluenceEstimate(
        m=m,
        L=L,
        beta=beta,
        p_free=p_free,
        p_free_se=free_se,
        p_boundary=p_eta,
        p_boundary_se=eta_se,
        ratio=ratio,
        deviation=abs(ratio - 1),
        se=se,
        acceptance=chains / (chains + rejections),
        regime_warning=regime_warning,
    )


@dataclass(frozen=True, kw_only=True)
class InfluenceScan:
    rows: tuple[InfluenceEstimate, ...]
    fit: DecayFit | None


def boundary_influence_scan(m_list: Sequence[int],
                            L: int,
                            lam: float,
                            delta: float,
                            event: SlitEvent,
                            *,
                            seed: int,
                            beta_rule: Callable[[int, int], float] = lambda m, L: 4.0 * (m + L + 1),
                            **chain_options) -> InfluenceScan:
    """
    Runs :func:`boundary_influence` for each ``m`` and fits the decay of the deviation.
    """
    rows = tuple(
        boundary_influence(m, L, beta_rule(m, L), lam, delta, event, seed=derive_seed(seed, m), **chain_options)
        for m in m_list
    )

    try:
        fit = fit_decay_rate([(row.m, row.deviation, row.se) for row in rows])
    except FitError as error:
        logger.warning("No boundary influence fit: %s", error)
        fit = None

    return InfluenceScan(rows=rows, fit=fit)
