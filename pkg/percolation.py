import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from custom_types import FloatArray, IntArray, Point, Rates
from errors import DomainError, ParameterError, ValidityError
from utils import BRIDGE_STREAM, DEATH_STREAM, TRIAL_STREAM, binomial_se, derive_seed, make_rng

logger = logging.getLogger(__name__)

# Redraws allowed when a Poisson draw lands on an inadmissible time (probability zero)
_MAX_REDRAWS = 64


@dataclass(frozen=True, kw_only=True)
class SpaceTimeBox:
    """
    A box ``[x_min, x_max] x [t_min, t_max]`` of time-lines.

    :param x_min: the leftmost site.
    :param x_max: the rightmost site.
    :param t_min: the bottom of every time-line.
    :param t_max: the top of every time-line.
    :param slit_len: if given, the sites ``0..slit_len`` are cut at ``t = 0`` with no
        connection between the upper end ``x+`` and the lower end ``x-``.
    :param time_identification: if the top and bottom of every line are glued, making
        each line a circle.
    """
    x_min: int
    x_max: int
    t_min: float
    t_max: float
    slit_len: int | None = None
    time_identification: bool = False

    def __post_init__(self):
        """
        :raises:
            DomainError: if the box is empty or the slit does not fit inside it.
        """
        if self.x_min > self.x_max:
            raise DomainError(f"Box has x_min ({self.x_min}) greater than x_max ({self.x_max}).")

        if not (math.isfinite(self.t_min) and math.isfinite(self.t_max) and self.t_min < self.t_max):
            raise DomainError(f"Box needs finite t_min < t_max, got [{self.t_min}, {self.t_max}].")

        if self.slit_len is not None:
            if self.slit_len < 0:
                raise DomainError(f"Slit length must be non-negative, got {self.slit_len}.")

            if not (self.x_min <= 0 and self.slit_len <= self.x_max and self.t_min < 0 < self.t_max):
                raise DomainError("The slit [0, L] x {0} must lie inside the box.")

    @classmethod
    def slit_box(cls, *, m: int, L: int, beta: float, time_identification: bool = True):
        """
        :return: the slit box ``[-m, m+L] x [-beta/2, beta/2]`` with slit ``[0, L]``.
        """
        return cls(
            x_min=-m,
            x_max=m + L,
            t_min=-beta / 2,
            t_max=beta / 2,
            slit_len=L,
            time_identification=time_identification,
        )

    @classmethod
    def square(cls, m: int):
        """
        :return: the box ``[-m, m] x [-m, m]`` with free time ends.
        """
        return cls(x_min=-m, x_max=m, t_min=float(-m), t_max=float(m))

    @property
    def num_lines(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def num_pairs(self) -> int:
        return self.num_lines - 1

    @property
    def height(self) -> float:
        return self.t_max - self.t_min

    @property
    def sites(self) -> range:
        return range(self.x_min, self.x_max + 1)

    @property
    def has_slit(self) -> bool:
        return self.slit_len is not None

    def is_slit_site(self, x: int) -> bool:
        """
        :return: if ``x`` is one of the sites ``0..L`` cut by the slit.
        """
        return self.slit_len is not None and 0 <= x <= self.slit_len

    def line_index(self, x: int) -> int:
        """
        :param x: a site.
        :return: the position of the time-line of ``x`` within the box.
        :raises:
            DomainError: if ``x`` is not a site of the box.
        """
        if not self.x_min <= x <= self.x_max:
            raise DomainError(f"Site {x} lies outside [{self.x_min}, {self.x_max}].")

        return x - self.x_min

    def contains(self, point: Point) -> bool:
        return self.x_min <= point.x <= self.x_max and self.t_min <= point.t <= self.t_max


def _frozen(times) -> FloatArray:
    array = np.array(times, dtype=np.float64).reshape(-1)
    array.flags.writeable = False

    return array


@dataclass(frozen=True, kw_only=True, eq=False)
class Configuration:
    """
    A finite set of deaths and bridges.

    :param deaths: for each time-line of the box (left to right), the sorted death times.
    :param bridges: for each pair of adjacent lines ``(x, x+1)``, the sorted bridge times.
    """
    deaths: tuple[FloatArray, ...]
    bridges: tuple[FloatArray, ...]

    def __post_init__(self):
        object.__setattr__(self, "deaths", tuple(_frozen(times) for times in self.deaths))
        object.__setattr__(self, "bridges", tuple(_frozen(times) for times in self.bridges))

    @classmethod
    def empty(cls, box: SpaceTimeBox):
        return cls(
            deaths=tuple(() for _ in range(box.num_lines)),
            bridges=tuple(() for _ in range(box.num_pairs)),
        )

    @property
    def num_deaths(self) -> int:
        return sum(times.size for times in self.deaths)

    @property
    def num_bridges(self) -> int:
        return sum(times.size for times in self.bridges)

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented

        return (
            len(self.deaths) == len(other.deaths)
            and len(self.bridges) == len(other.bridges)
            and all(np.array_equal(a, b) for a, b in zip(self.deaths, other.deaths))
            and all(np.array_equal(a, b) for a, b in zip(self.bridges, other.bridges))
        )

    __hash__ = None

    def validate(self, box: SpaceTimeBox):
        """
        Checks that the configuration is admissible for ``box``.

        :raises:
            ValidityError: if a time lies outside the box, a sequence is not strictly
                increasing, a death coincides with a bridge endpoint, or an event sits on the slit.
        """
        if len(self.deaths) != box.num_lines or len(self.bridges) != box.num_pairs:
            raise ValidityError(
                f"Configuration has {len(self.deaths)} death lines and {len(self.bridges)} bridge pairs, "
                f"box needs {box.num_lines} and {box.num_pairs}."
            )

        for label, sequences in (("death", self.deaths), ("bridge", self.bridges)):
            for index, times in enumerate(sequences):
                if times.size == 0:
                    continue

                if not np.all(np.isfinite(times)) or times[0] <= box.t_min or times[-1] >= box.t_max:
                    raise ValidityError(f"A {label} time on line {box.x_min + index} lies outside the box.")

                if np.any(np.diff(times) <= 0):
                    raise ValidityError(f"The {label} times on line {box.x_min + index} are not strictly increasing.")

        for index, x in enumerate(box.sites):
            if box.is_slit_site(x) and np.any(self.deaths[index] == 0.0):
                raise ValidityError(f"Death placed on the slit point of site {x}.")

        for index in range(box.num_pairs):
            bridge_times = self.bridges[index]

            if np.intersect1d(bridge_times, self.deaths[index]).size \
                    or np.intersect1d(bridge_times, self.deaths[index + 1]).size:
                raise ValidityError(f"A bridge between sites {box.x_min + index} and {box.x_min + index + 1} "
                                    f"coincides with a death.")

            x = box.x_min + index
            if (box.is_slit_site(x) or box.is_slit_site(x + 1)) and np.any(bridge_times == 0.0):
                raise ValidityError(f"Bridge at the slit time between sites {x} and {x + 1}.")

    def with_death(self, box: SpaceTimeBox, x: int, t: float):
        """
        :return: a copy with one extra death at ``(x, t)``, validated against ``box``.
        """
        index = box.line_index(x)
        deaths = list(self.deaths)
        deaths[index] = np.sort(np.append(deaths[index], t))
        configuration = Configuration(deaths=tuple(deaths), bridges=self.bridges)
        configuration.validate(box)

        return configuration

    def with_bridge(self, box: SpaceTimeBox, x: int, t: float):
        """
        :return: a copy with one extra bridge between ``x`` and ``x+1`` at time ``t``.
        """
        index = box.line_index(x)

        if index >= box.num_pairs:
            raise DomainError(f"Site {x} has no right neighbour in the box.")

        bridges = list(self.bridges)
        bridges[index] = np.sort(np.append(bridges[index], t))
        configuration = Configuration(deaths=self.deaths, bridges=tuple(bridges))
        configuration.validate(box)

        return configuration


def line_rates(rate: Rates, count: int, name: str) -> FloatArray:
    """
    Broadcasts a scalar or per-line rate to ``count`` entries.

    :raises:
        ParameterError: if a rate is negative or non-finite, or the length does not match.
    """
    rates = np.asarray(rate, dtype=np.float64)

    if rates.ndim == 0:
        rates = np.full(count, float(rates))
    elif rates.shape != (count,):
        raise ParameterError(f"Expected {count} values for '{name}', got {rates.size}.")

    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise ParameterError(f"Rate '{name}' must be finite and non-negative.")

    return rates


def poisson_times(box: SpaceTimeBox,
                  rate: float,
                  seed: int,
                  stream: Sequence[int],
                  *,
                  avoid_zero: bool = False,
                  forbidden: FloatArray | None = None) -> FloatArray:
    """
    Draws a Poisson process of intensity ``rate`` on ``(t_min, t_max)``.

    A draw with a repeated time, a time on the box edge, a time at 0 (when
    ``avoid_zero``) or a time in ``forbidden`` is discarded and redrawn from the next
    attempt stream.

    :param box: the box giving the time extent.
    :param rate: the intensity per unit time.
    :param seed: the run seed.
    :param stream: the stream coordinates identifying this process.
    :return: the sorted event times.
    :raises:
        ValidityError: if no admissible draw is found.
    """
    for attempt in range(_MAX_REDRAWS):
        rng = make_rng(seed, *stream, attempt)
        count = rng.poisson(rate * box.height)
        times = np.sort(rng.uniform(box.t_min, box.t_max, size=count))

        if times.size and (times[0] <= box.t_min or np.any(np.diff(times) <= 0)):
            continue

        if avoid_zero and np.any(times == 0.0):
            continue

        if forbidden is not None and np.intersect1d(times, forbidden).size:
            continue

        return times

    raise ValidityError(f"No admissible Poisson draw for stream {tuple(stream)} after {_MAX_REDRAWS} attempts.")


def sample_percolation(box: SpaceTimeBox, lam: Rates, delta: Rates, seed: int) -> Configuration:
    """
    Samples the continuum percolation measure: deaths at rate ``delta`` on every line and
    bridges at rate ``lam`` between every pair of adjacent lines.

    Line ``i`` uses the stream ``(DEATH_STREAM, i)`` and pair ``i`` the stream
    ``(BRIDGE_STREAM, i)``, so every process is reproducible on its own.

    :param box: the box to sample on.
    :param lam: the bridge rate, shared or per pair.
    :param delta: the death rate, shared or per line.
    :param seed: the run seed.
    :return: the sampled configuration.
    :raises:
        ParameterError: if a rate is negative.
    """
    death_rates = line_rates(delta, box.num_lines, "delta")
    bridge_rates = line_rates(lam, box.num_pairs, "lambda")

    deaths = tuple(
        poisson_times(box, death_rates[i], seed, (DEATH_STREAM, i), avoid_zero=box.is_slit_site(x))
        for i, x in enumerate(box.sites)
    )

    bridges = tuple(
        poisson_times(
            box,
            bridge_rates[i],
            seed,
            (BRIDGE_STREAM, i),
            avoid_zero=box.is_slit_site(x) or box.is_slit_site(x + 1),
            forbidden=np.concatenate((deaths[i], deaths[i + 1])),
        )
        for i, x in enumerate(box.sites[:-1])
    )

    return Configuration(deaths=deaths, bridges=bridges)


@dataclass(frozen=True, kw_only=True)
class LineIntervals:
    """
    The maximal death-free intervals of one time-line.

    Intervals are numbered bottom to top. On a circle, interval ``j`` starts at cut
    ``j`` and the last interval wraps through the top/bottom seam.

    :param x: the site of the line.
    :param cuts: the sorted cut times (deaths, plus ``0`` on a slit line).
    :param circle: if the line's ends are glued.
    :param offset: the global index of the line's first interval.
    """
    x: int
    cuts: FloatArray
    circle: bool
    offset: int
    t_min: float
    t_max: float
    slit: bool = False

    @property
    def count(self) -> int:
        if self.circle:
            return max(self.cuts.size, 1)

        return self.cuts.size + 1

    @property
    def ids(self) -> IntArray:
        return np.arange(self.offset, self.offset + self.count)

    def locate(self, times) -> IntArray:
        """
        :param times: times on this line, not equal to a cut.
        :return: the global index of the interval holding each time.
        """
        times = np.asarray(times, dtype=np.float64)
        position = np.searchsorted(self.cuts, times, side="right")

        if not self.circle:
            return self.offset + position

        if self.cuts.size == 0:
            return np.full(times.shape, self.offset)

        position = position - 1

        return self.offset + np.where(position < 0, self.cuts.size - 1, position)

    @property
    def bottom(self) -> int:
        return int(self.locate(self.t_min))

    @property
    def top(self) -> int:
        return int(self.locate(self.t_max))

    def slit_end(self, side: int) -> int:
        """
        :param side: ``+1`` for the interval starting at the slit, ``-1`` for the one ending there.
        :return: the global index of that interval.
        """
        if not self.slit:
            raise DomainError(f"Site {self.x} is not cut by the slit.")

        k = int(np.searchsorted(self.cuts, 0.0, side="left"))

        if self.circle:
            local = k if side > 0 else (k - 1) % self.cuts.size
        else:
            local = k + 1 if side > 0 else k

        return self.offset + local

    def bounds(self) -> tuple[FloatArray, FloatArray]:
        """
        :return: per interval, its lower and upper time. A wrapping interval on a circle has
            ``lower > upper`` and covers ``[lower, t_max]`` and ``[t_min, upper]``.
        """
        if not self.circle:
            return np.concatenate(([self.t_min], self.cuts)), np.concatenate((self.cuts, [self.t_max]))

        if self.cuts.size == 0:
            return np.array([self.t_min]), np.array([self.t_max])

        return self.cuts.copy(), np.roll(self.cuts, -1)

    def representatives(self) -> FloatArray:
        """
        :return: one time strictly inside each interval.
        """
        lower, upper = self.bounds()

        if not self.circle or self.cuts.size == 0:
            return (lower + upper) / 2

        height = self.t_max - self.t_min
        upper = np.where(upper <= lower, upper + height, upper)
        middle = (lower + upper) / 2

        return np.where(middle >= self.t_max, middle - height, middle)


def decompose(box: SpaceTimeBox, configuration: Configuration) -> tuple[LineIntervals, ...]:
    """
    Cuts every line of ``box`` at its deaths (and at the slit).

    :return: the intervals of every line, numbered consecutively across lines.
    """
    lines: list[LineIntervals] = []
    offset = 0

    for index, x in enumerate(box.sites):
        cuts = configuration.deaths[index]
        slit = box.is_slit_site(x)

        if slit:
            cuts = np.sort(np.append(cuts, 0.0))

        line = LineIntervals(
            x=x,
            cuts=cuts,
            circle=box.time_identification,
            offset=offset,
            t_min=box.t_min,
            t_max=box.t_max,
            slit=slit,
        )
        lines.append(line)
        offset += line.count

    return tuple(lines)


def _bridge_edges(configuration: Configuration, lines: Sequence[LineIntervals]) -> tuple[IntArray, IntArray]:
    left = [lines[i].locate(times) for i, times in enumerate(configuration.bridges)]
    right = [lines[i + 1].locate(times) for i, times in enumerate(configuration.bridges)]

    if not left:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)

    return np.concatenate(left).astype(np.int64), np.concatenate(right).astype(np.int64)


def _chain(ids: Iterable[int]) -> tuple[IntArray, IntArray]:
    """
    :return: edges joining consecutive members of ``ids`` into one class.
    """
    ids = np.asarray(list(ids), dtype=np.int64)

    return ids[:-1], ids[1:]


def _end_edges(lines: Sequence[LineIntervals]) -> tuple[IntArray, IntArray]:
    return (np.array([line.bottom for line in lines], dtype=np.int64),
            np.array([line.top for line in lines], dtype=np.int64))


def _slit_heal_edges(lines: Sequence[LineIntervals]) -> tuple[IntArray, IntArray]:
    slit_lines = [line for line in lines if line.slit]

    return (np.array([line.slit_end(+1) for line in slit_lines], dtype=np.int64),
            np.array([line.slit_end(-1) for line in slit_lines], dtype=np.int64))


def _slit_ends(lines: Sequence[LineIntervals]) -> list[int]:
    return [line.slit_end(side) for line in lines if line.slit for side in (+1, -1)]


def _components(num_intervals: int, edges: Sequence[tuple[IntArray, IntArray]]) -> tuple[int, IntArray]:
    rows = np.concatenate([edge[0] for edge in edges] or [np.empty(0, dtype=np.int64)])
    cols = np.concatenate([edge[1] for edge in edges] or [np.empty(0, dtype=np.int64)])
    graph = csr_matrix((np.ones(rows.size), (rows, cols)), shape=(num_intervals, num_intervals))
    k, labels = connected_components(graph, directed=False)

    return int(k), labels.astype(np.int64)


class BoundaryRule:
    """
    A counting rule: which intervals are identified on top of the bridges.
    """
    requires_slit = False

    def identifications(self, box: SpaceTimeBox, lines: Sequence[LineIntervals]) -> list[tuple[IntArray, IntArray]]:
        return []

    def anchors(self, box: SpaceTimeBox, lines: Sequence[LineIntervals]) -> list[tuple[IntArray, int]]:
        """
        :return: pairs ``(interval ids, spin label)`` pinned by the rule.
        """
        return []

    def check(self, box: SpaceTimeBox):
        """
        :raises:
            DomainError: if the rule needs a slit and ``box`` has none.
        """
        if self.requires_slit and not box.has_slit:
            raise DomainError(f"Rule {type(self).__name__} requires a slit box.")

    def label(self,
              box: SpaceTimeBox,
              configuration: Configuration,
              lines: Sequence[LineIntervals]) -> tuple[int, IntArray]:
        """
        :return: the cluster count and the cluster label of every interval.
        """
        num_intervals = sum(line.count for line in lines)
        edges = [_bridge_edges(configuration, lines), *self.identifications(box, lines)]

        return _components(num_intervals, edges)


@dataclass(frozen=True)
class Free(BoundaryRule):
    pass


@dataclass(frozen=True)
class Periodic(BoundaryRule):
    """Each line's top glued to its bottom; the slit, if any, is healed."""

    def identifications(self, box, lines):
        return [_end_edges(lines), _slit_heal_edges(lines)]


@dataclass(frozen=True)
class Wired(BoundaryRule):
    """All top and bottom ends in one class; the slit, if any, is healed."""

    def identifications(self, box, lines):
        ends = [line.bottom for line in lines] + [line.top for line in lines]

        return [_chain(ends), _slit_heal_edges(lines)]


@dataclass(frozen=True)
class PartiallyPeriodic(BoundaryRule):
    """Each line's top glued to its bottom; the slit stays cut."""
    requires_slit = True

    def identifications(self, box, lines):
        return [_end_edges(lines)]


@dataclass(frozen=True)
class PeriodicWired(BoundaryRule):
    """Partially periodic, plus every slit end ``x+``, ``x-`` in one class."""
    requires_slit = True

    def identifications(self, box, lines):
        return [_end_edges(lines), _chain(_slit_ends(lines))]


def _interval_at(box: SpaceTimeBox, lines: Sequence[LineIntervals], point: Point) -> int:
    point = Point(*point)

    if not box.contains(point):
        raise DomainError(f"Point {tuple(point)} lies outside the box.")

    line = lines[box.line_index(point.x)]

    if line.slit and point.t == 0.0:
        if point.side not in (-1, 1):
            raise DomainError(f"Point {tuple(point)} sits on the slit; designate side +1 or -1.")

        return line.slit_end(point.side)

    return int(line.locate(point.t))


@dataclass(frozen=True)
class MergedSet(BoundaryRule):
    """
    The base rule plus one class holding every designated point (wiring at a set).

    :param points: the points to wire together.
    :param base: the rule applied before wiring.
    """
    points: tuple[Point, ...]
    base: BoundaryRule = PartiallyPeriodic()

    @property
    def requires_slit(self):
        return self.base.requires_slit

    def identifications(self, box, lines):
        ids = [_interval_at(box, lines, point) for point in self.points]

        return [*self.base.identifications(box, lines), _chain(ids)]


@dataclass(frozen=True)
class SpinBoundary(BoundaryRule):
    """
    Spin labels on boundary parts. Parts with the same label form one class, and
    clusters meeting a labelled part carry its label.

    :param line_labels: pairs ``(site, label)`` labelling every interval of a line.
    :param point_labels: pairs ``(point, label)`` labelling the interval of a point.
    :param base: the rule applied before the labelled parts are joined.
    """
    line_labels: tuple[tuple[int, int], ...] = ()
    point_labels: tuple[tuple[Point, int], ...] = ()
    base: BoundaryRule = PartiallyPeriodic()

    @classmethod
    def all_plus(cls, box: SpaceTimeBox, base: BoundaryRule = PartiallyPeriodic()):
        """
        :return: the rule labelling the two outermost lines of ``box`` with ``+1``.
        """
        return cls(line_labels=((box.x_min, 1), (box.x_max, 1)), base=base)

    @property
    def requires_slit(self):
        return self.base.requires_slit

    def anchors(self, box, lines):
        anchors = [(lines[box.line_index(x)].ids, label) for x, label in self.line_labels]
        anchors += [(np.array([_interval_at(box, lines, point)]), label) for point, label in self.point_labels]

        return anchors

    def identifications(self, box, lines):
        edges = list(self.base.identifications(box, lines))
        by_label: dict[int, list[int]] = {}

        for ids, label in self.anchors(box, lines):
            by_label.setdefault(label, []).extend(int(i) for i in ids)

        edges += [_chain(ids) for ids in by_label.values()]

        return edges


@dataclass(frozen=True, eq=False)
class External(BoundaryRule):
    """
    A random-cluster boundary condition: a configuration ``tau`` off the box.

    Clusters are formed on ``outer_box`` from the union of the box configuration and
    ``tau``; only clusters meeting the box are counted.

    :param outer_box: a box containing the box, with the same slit and time gluing.
    :param tau: a configuration on ``outer_box`` with no event inside the box.
    :param base: the rule applied on ``outer_box``.
    """
    outer_box: SpaceTimeBox
    tau: Configuration
    base: BoundaryRule = Free()

    def check(self, box):
        outer = self.outer_box

        if not (outer.x_min <= box.x_min and box.x_max <= outer.x_max
                and outer.t_min <= box.t_min and box.t_max <= outer.t_max):
            raise DomainError("The external box must contain the box.")

        if outer.slit_len != box.slit_len:
            raise DomainError("The external box must carry the same slit as the box.")

        if box.time_identification and (not outer.time_identification
                                         or (outer.t_min, outer.t_max) != (box.t_min, box.t_max)):
            raise DomainError("A time-identified box needs an external box with the same time extent.")

        self.base.check(outer)
        self.tau.validate(outer)

        for x in box.sites:
            deaths = self.tau.deaths[outer.line_index(x)]

            if np.any((deaths >= box.t_min) & (deaths <= box.t_max)):
                raise ValidityError(f"External configuration has a death inside the box on site {x}.")

        for x in box.sites[:-1]:
            bridges = self.tau.bridges[outer.line_index(x)]

            if np.any((bridges >= box.t_min) & (bridges <= box.t_max)):
                raise ValidityError(f"External configuration has a bridge inside the box at site {x}.")

    def _combined(self, box: SpaceTimeBox, configuration: Configuration) -> Configuration:
        outer = self.outer_box
        deaths = list(self.tau.deaths)
        bridges = list(self.tau.bridges)

        for index, x in enumerate(box.sites):
            j = outer.line_index(x)
            deaths[j] = np.sort(np.concatenate((deaths[j], configuration.deaths[index])))

            if index < box.num_pairs:
                bridges[j] = np.sort(np.concatenate((bridges[j], configuration.bridges[index])))

        combined = Configuration(deaths=tuple(deaths), bridges=tuple(bridges))
        combined.validate(outer)

        return combined

    def label(self, box, configuration, lines):
        outer = self.outer_box
        combined = self._combined(box, configuration)
        outer_lines = decompose(outer, combined)
        _, outer_labels = self.base.label(outer, combined, outer_lines)

        inner_to_outer = np.concatenate([
            outer_lines[outer.line_index(line.x)].locate(line.representatives()) for line in lines
        ])
        _, labels = np.unique(outer_labels[inner_to_outer], return_inverse=True)
        labels = labels.astype(np.int64)

        return int(labels.max()) + 1, labels


@dataclass(frozen=True, kw_only=True)
class ClusterCounts:
    """
    The cluster count of one configuration under each counting rule.

    ``pp`` and ``pw`` are ``None`` on a box without a slit.
    """
    free: int
    p: int
    w: int
    pp: int | None = None
    pw: int | None = None


@dataclass(frozen=True, kw_only=True, eq=False)
class ClusterLabelling:
    """
    The clusters of a configuration under one rule.

    :param box: the box.
    :param configuration: the configuration the labelling derives from.
    :param rule: the counting rule.
    :param lines: the interval decomposition, line by line.
    :param labels: the cluster label (``0..k-1``) of every interval.
    :param k: the number of clusters under the rule.
    :param pinned: cluster label to spin label, for clusters meeting a labelled part.
    :param conflicts: clusters meeting parts with different labels.
    """
    box: SpaceTimeBox
    configuration: Configuration
    rule: BoundaryRule
    lines: tuple[LineIntervals, ...]
    labels: IntArray
    k: int
    pinned: dict[int, int]
    conflicts: frozenset[int] = frozenset()

    @property
    def num_intervals(self) -> int:
        return int(self.labels.size)

    def interval_of(self, point: Point) -> int:
        """
        :raises:
            DomainError: if the point is outside the box or sits on the slit without a side.
        """
        return _interval_at(self.box, self.lines, point)

    def cluster_of(self, point: Point) -> int:
        return int(self.labels[self.interval_of(point)])

    @cached_property
    def interval_sites(self) -> IntArray:
        return np.concatenate([np.full(line.count, line.x) for line in self.lines])

    @cached_property
    def interval_bounds(self) -> tuple[FloatArray, FloatArray]:
        pieces = [line.bounds() for line in self.lines]

        return np.concatenate([lower for lower, _ in pieces]), np.concatenate([upper for _, upper in pieces])

    @cached_property
    def counts(self) -> ClusterCounts:
        return _counts_from(self.box, self.configuration, self.lines)


def build_clusters(box: SpaceTimeBox, configuration: Configuration, rule: BoundaryRule = Free()) -> ClusterLabelling:
    """
    Labels the clusters of ``configuration`` under ``rule``.

    :param box: the box.
    :param configuration: the deaths and bridges.
    :param rule: the counting rule.
    :return: the labelling, with ``k`` the number of clusters under the rule.
    :raises:
        ValidityError: if the configuration is malformed.
        DomainError: if the rule does not apply to the box.
    """
    configuration.validate(box)
    rule.check(box)

    lines = decompose(box, configuration)
    k, labels = rule.label(box, configuration, lines)

    pinned: dict[int, int] = {}
    conflicts: set[int] = set()

    for ids, spin in rule.anchors(box, lines):
        for cluster in np.unique(labels[ids]):
            cluster = int(cluster)

            if pinned.setdefault(cluster, spin) != spin:
                conflicts.add(cluster)

    return ClusterLabelling(
        box=box,
        configuration=configuration,
        rule=rule,
        lines=lines,
        labels=labels,
        k=k,
        pinned=pinned,
        conflicts=frozenset(conflicts),
    )


def _counts_from(box: SpaceTimeBox, configuration: Configuration, lines: Sequence[LineIntervals]) -> ClusterCounts:
    num_intervals = sum(line.count for line in lines)
    bridges = _bridge_edges(configuration, lines)

    def count(rule: BoundaryRule) -> int:
        return _components(num_intervals, [bridges, *rule.identifications(box, lines)])[0]

    if not box.has_slit:
        return ClusterCounts(free=count(Free()), p=count(Periodic()), w=count(Wired()))

    return ClusterCounts(
        free=count(Free()),
        p=count(Periodic()),
        w=count(Wired()),
        pp=count(PartiallyPeriodic()),
        pw=count(PeriodicWired()),
    )


def cluster_counts(box: SpaceTimeBox, configuration: Configuration) -> ClusterCounts:
    """
    Counts clusters under every rule from one interval decomposition.

    :raises:
        ValidityError: if the configuration is malformed.
    """
    configuration.validate(box)

    return _counts_from(box, configuration, decompose(box, configuration))


def connected(labelling: ClusterLabelling, p: Point, q: Point) -> bool:
    """
    :return: if ``p`` and ``q`` lie in the same cluster.
    :raises:
        DomainError: if a point lies outside the box, or on the slit without a side.
    """
    return labelling.cluster_of(p) == labelling.cluster_of(q)


def cluster_extent(labelling: ClusterLabelling, clusters, origin: Point) -> tuple[int, float]:
    """
    Measures how far a union of clusters reaches from ``origin``.

    :param labelling: the labelling.
    :param clusters: the cluster labels to measure.
    :param origin: the reference point.
    :return: the largest site distance and the largest time distance from ``origin``.
    """
    mask = np.isin(labelling.labels, np.asarray(list(clusters), dtype=np.int64))

    if not np.any(mask):
        return 0, 0.0

    lower, upper = labelling.interval_bounds
    lower, upper = lower[mask], upper[mask]
    wraps = upper <= lower
    box = labelling.box

    reach = np.maximum(np.abs(lower - origin.t), np.abs(upper - origin.t))
    reach = np.where(wraps, max(box.t_max - origin.t, origin.t - box.t_min), reach)
    dx = np.abs(labelling.interval_sites[mask] - origin.x)

    return int(dx.max()), float(reach.max())


def clusters_meeting(labelling: ClusterLabelling, x: int, t_low: float, t_high: float) -> IntArray:
    """
    :return: the labels of clusters meeting the segment ``{x} x [t_low, t_high]``.
    """
    line = labelling.lines[labelling.box.line_index(x)]
    lower, upper = line.bounds()
    wraps = upper <= lower
    overlap = np.where(wraps, (upper >= t_low) | (lower <= t_high), (upper >= t_low) & (lower <= t_high))

    return np.unique(labelling.labels[line.ids[overlap]])


@dataclass(frozen=True, kw_only=True)
class ConnectivityEstimate:
    """
    A Monte Carlo estimate of ``P(I <-> boundary of the box of radius m)``.
    """
    lam: float
    delta: float
    m: int
    trials: int
    hits: int
    probability: float
    se: float


def estimate_connectivity(lam: float, delta: float, m: int, trials: int, seed: int) -> ConnectivityEstimate:
    """
    Estimates the probability that the unit segment ``I = {0} x [-1/2, 1/2]`` is joined
    to the boundary of ``[-m, m] x [-m, m]``.

    Trial ``i`` samples with the seed ``derive_seed(seed, TRIAL_STREAM, i)``.

    :param lam: the bridge rate.
    :param delta: the death rate.
    :param m: the box radius.
    :param trials: the number of independent samples.
    :param seed: the run seed.
    :return: the frequency with its binomial standard error.
    :raises:
        ParameterError: if ``m`` or ``trials`` is out of range.
    """
    if m < 0 or trials < 1:
        raise ParameterError(f"Need m >= 0 and trials >= 1, got m={m}, trials={trials}.")

    if m == 0:
        return ConnectivityEstimate(lam=lam, delta=delta, m=m, trials=trials, hits=trials, probability=1.0, se=0.0)

    box = SpaceTimeBox.square(m)
    origin = Point(0, 0.0)
    hits = 0

    for trial in range(trials):
        configuration = sample_percolation(box, lam, delta, derive_seed(seed, TRIAL_STREAM, trial))
        labelling = build_clusters(box, configuration, Free())
        sources = clusters_meeting(labelling, 0, -0.5, 0.5)
        dx, dt = cluster_extent(labelling, sources, origin)

        hits += dx >= m or dt >= m

    probability = hits / trials
    logger.debug("Connectivity at m=%d: %d/%d", m, hits, trials)

    return ConnectivityEstimate(
        lam=lam,
        delta=delta,
        m=m,
        trials=trials,
        hits=hits,
        probability=probability,
        se=binomial_se(probability, trials),
    )


def connectivity_scan(lam: float, delta: float, m_list: Sequence[int], trials: int, seed: int) -> list[ConnectivityEstimate]:
    """
    Runs :func:`estimate_connectivity` for each radius with independent derived seeds.
    """
    estimates = []

    for m in m_list:
        estimates.append(estimate_connectivity(lam, delta, m, trials, derive_seed(seed, m)))
        logger.info("lambda=%g delta=%g m=%d: p=%.4g", lam, delta, m, estimates[-1].probability)

    return estimates
