import logging
import math
from collections import deque
from collections.abc import Callable, Generator, Iterator
from dataclasses import dataclass
from itertools import islice
from typing import TypeVar

import numpy as np

from custom_types import FloatArray, IntArray, Point, Rates, SpinVector
from errors import ConditioningViolationError, ContractError, ParameterError
from percolation import (
    BoundaryRule,
    ClusterLabelling,
    Configuration,
    LineIntervals,
    Periodic,
    SpaceTimeBox,
    build_clusters,
    line_rates,
    poisson_times,
    sample_percolation,
)
from utils import (
    BRIDGE_STREAM,
    CHAIN_STREAM,
    DEATH_STREAM,
    SPIN_STREAM,
    SWEEP_STREAM,
    TRIAL_STREAM,
    batch_means,
    derive_seed,
    make_rng,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_BURN_IN = 1000


def _burn_in(chain: Iterator["ChainState"], sweeps: int):
    """
    Advances ``chain`` by ``sweeps`` states without keeping them.
    """
    deque(islice(chain, sweeps), maxlen=0)


@dataclass(frozen=True, kw_only=True, eq=False)
class SpinConfiguration:
    """
    Spins on the intervals of a labelling, constant on its clusters.

    :param labelling: the labelling the spins were assigned on.
    :param spins: one spin per interval of the labelling.
    """
    labelling: ClusterLabelling
    spins: IntArray

    def at(self, point: Point) -> int:
        return int(self.spins[self.labelling.interval_of(point)])

    def slit_readout(self, side: int) -> SpinVector:
        """
        :param side: ``+1`` for the upper ends ``x+``, ``-1`` for the lower ends ``x-``.
        :return: the spins at the slit ends of the sites ``0..L``.
        """
        box = self.labelling.box

        return tuple(
            int(self.spins[self.labelling.lines[box.line_index(x)].slit_end(side)])
            for x in range(box.slit_len + 1)
        )

    @property
    def upper(self) -> SpinVector:
        return self.slit_readout(+1)

    @property
    def lower(self) -> SpinVector:
        return self.slit_readout(-1)


def spins_consistent(labelling: ClusterLabelling, spins: IntArray) -> bool:
    """
    :return: if ``spins`` is constant on every cluster and agrees with every pinned label.
    """
    lowest = np.full(labelling.k, np.iinfo(np.int64).max)
    highest = np.full(labelling.k, np.iinfo(np.int64).min)
    np.minimum.at(lowest, labelling.labels, spins)
    np.maximum.at(highest, labelling.labels, spins)

    if not np.array_equal(lowest, highest):
        return False

    return all(lowest[cluster] == label for cluster, label in labelling.pinned.items())


def assign_spins(labelling: ClusterLabelling, seed: int, *, q: int = 2) -> SpinConfiguration:
    """
    Gives every cluster an independent uniform spin; clusters meeting a labelled
    boundary part take its label.

    For ``q == 2`` the spins are ``-1`` and ``+1``; for larger ``q`` they are ``1..q``.

    :param labelling: the labelling, carrying its rule.
    :param seed: the seed of the spin draw.
    :param q: the number of spin states.
    :return: the spin configuration.
    :raises:
        ConditioningViolationError: if a cluster joins differently labelled boundary parts.
    """
    if labelling.conflicts:
        raise ConditioningViolationError(
            f"{len(labelling.conflicts)} cluster(s) join boundary parts with different spin labels."
        )

    if q < 2:
        raise ParameterError(f"Need at least two spin states, got q={q}.")

    rng = make_rng(seed, SPIN_STREAM)

    if q == 2:
        values = 2 * rng.integers(0, 2, size=labelling.k) - 1
    else:
        values = rng.integers(1, q + 1, size=labelling.k)

    for cluster, label in labelling.pinned.items():
        values[cluster] = label

    return SpinConfiguration(labelling=labelling, spins=values[labelling.labels])


def _flip_points(line: LineIntervals, spins: IntArray) -> FloatArray:
    """
    :return: the cuts of ``line`` where the spin changes, the slit point excluded.
    """
    if line.cuts.size == 0:
        return line.cuts

    if line.circle:
        flips = line.cuts[spins != np.roll(spins, 1)]
    else:
        flips = line.cuts[spins[:-1] != spins[1:]]

    if line.slit:
        flips = flips[flips != 0.0]

    return flips


def resample_given_spins(box: SpaceTimeBox, sigma: SpinConfiguration, lam: Rates, delta: Rates, seed: int) -> Configuration:
    """
    Draws deaths and bridges from their law given the spins.

    Deaths are the spin-change points plus a fresh Poisson process at rate ``delta``.
    Bridges are a Poisson process at rate ``lam`` thinned to the times where the two
    neighbouring spins agree.

    :param box: the box.
    :param sigma: the spins, piecewise constant on the intervals of its labelling.
    :param lam: the bridge rate.
    :param delta: the death rate.
    :param seed: the seed of this resampling.
    :return: a configuration on which ``sigma`` is constant per cluster.
    """
    labelling = sigma.labelling
    death_rates = line_rates(delta, box.num_lines, "delta")
    bridge_rates = line_rates(lam, box.num_pairs, "lambda")

    deaths = []

    for i, line in enumerate(labelling.lines):
        forced = _flip_points(line, sigma.spins[line.ids])
        fresh = poisson_times(box, death_rates[i], seed, (DEATH_STREAM, i), avoid_zero=line.slit, forbidden=forced)
        deaths.append(np.union1d(forced, fresh))

    bridges = []

    for i in range(box.num_pairs):
        left, right = labelling.lines[i], labelling.lines[i + 1]
        candidates = poisson_times(
            box,
            bridge_rates[i],
            seed,
            (BRIDGE_STREAM, i),
            avoid_zero=left.slit or right.slit,
            forbidden=np.concatenate((deaths[i], deaths[i + 1])),
        )
        agree = sigma.spins[left.locate(candidates)] == sigma.spins[right.locate(candidates)]
        bridges.append(candidates[agree])

    return Configuration(deaths=tuple(deaths), bridges=tuple(bridges))


def carry_spins(sigma: SpinConfiguration, labelling: ClusterLabelling) -> SpinConfiguration:
    """
    Re-expresses the spin function ``sigma`` on the intervals of a new labelling of the same box.
    """
    old_lines = sigma.labelling.lines
    spins = np.concatenate([
        sigma.spins[old_lines[i].locate(line.representatives())] for i, line in enumerate(labelling.lines)
    ])

    return SpinConfiguration(labelling=labelling, spins=spins)


@dataclass(frozen=True, kw_only=True, eq=False)
class ChainState:
    """
    One state of the coupled cluster/spin chain.

    :param box: the box.
    :param rule: the counting rule of the target measure.
    :param configuration: the current deaths and bridges.
    :param labelling: the clusters of ``configuration`` under ``rule``.
    :param spins: spins constant on those clusters.
    :param sweep: the number of sweeps done.
    :param seed: the chain seed; sweep ``s`` draws from ``derive_seed(seed, SWEEP_STREAM, s)``.
    :param rejections: initial draws rejected by the spin boundary conditioning.
    """
    box: SpaceTimeBox
    rule: BoundaryRule
    configuration: Configuration
    labelling: ClusterLabelling
    spins: SpinConfiguration
    sweep: int
    seed: int
    rejections: int = 0

    @property
    def k(self) -> int:
        return self.labelling.k


def initial_state(box: SpaceTimeBox,
                  lam: Rates,
                  delta: Rates,
                  rule: BoundaryRule,
                  seed: int,
                  *,
                  max_rejections: int = 1000) -> ChainState:
    """
    Starts a chain from a percolation sample, redrawn until it satisfies the spin
    boundary conditioning of ``rule``.

    :raises:
        ConditioningViolationError: if every draw up to ``max_rejections`` violates it.
    """
    for attempt in range(max_rejections + 1):
        configuration = sample_percolation(box, lam, delta, derive_seed(seed, CHAIN_STREAM, attempt))
        labelling = build_clusters(box, configuration, rule)

        if not labelling.conflicts:
            break
    else:
        raise ConditioningViolationError(f"No admissible start found after {max_rejections} rejections.")

    if attempt:
        logger.debug("Chain start accepted after %d rejection(s)", attempt)

    return ChainState(
        box=box,
        rule=rule,
        configuration=configuration,
        labelling=labelling,
        spins=assign_spins(labelling, derive_seed(seed, CHAIN_STREAM, attempt, SPIN_STREAM)),
        sweep=0,
        seed=seed,
        rejections=attempt,
    )


def sw_sweep(state: ChainState, lam: Rates, delta: Rates, rule: BoundaryRule | None = None) -> ChainState:
    """
    One sweep: fresh spins per cluster, then deaths and bridges given those spins.

    :param state: the current state.
    :param lam: the bridge rate.
    :param delta: the death rate.
    :param rule: the counting rule; defaults to the state's.
    :return: the next state.
    :raises:
        ContractError: if the new spins are not constant on the new clusters.
    """
    rule = state.rule if rule is None else rule
    sweep_seed = derive_seed(state.seed, SWEEP_STREAM, state.sweep)

    sigma = assign_spins(state.labelling, derive_seed(sweep_seed, SPIN_STREAM))
    configuration = resample_given_spins(state.box, sigma, lam, delta, derive_seed(sweep_seed, TRIAL_STREAM))
    labelling = build_clusters(state.box, configuration, rule)
    spins = carry_spins(sigma, labelling)

    if not spins_consistent(labelling, spins.spins):
        raise ContractError(f"Spins are not constant on clusters after sweep {state.sweep + 1}.")

    return ChainState(
        box=state.box,
        rule=rule,
        configuration=configuration,
        labelling=labelling,
        spins=spins,
        sweep=state.sweep + 1,
        seed=state.seed,
        rejections=state.rejections,
    )


def iterate_chain(state: ChainState, lam: Rates, delta: Rates) -> Generator[ChainState, None, None]:
    """
    :return: an endless generator of the states after each successive sweep.
    """
    while True:
        state = sw_sweep(state, lam, delta)
        yield state


def run_chain(box: SpaceTimeBox,
              lam: Rates,
              delta: Rates,
              rule: BoundaryRule,
              seed: int,
              *,
              sweeps: int,
              observe: Callable[[ChainState], T],
              burn_in: int = DEFAULT_BURN_IN,
              thin: int = 1) -> list[T]:
    """
    Runs one chain and observes it after burn-in.

    :param sweeps: the number of retained observations.
    :param observe: maps a state to the recorded value.
    :param burn_in: the sweeps discarded first.
    :param thin: the sweeps between retained observations.
    :return: the observations, in order.
    """
    chain = iterate_chain(initial_state(box, lam, delta, rule, seed), lam, delta)
    _burn_in(chain, burn_in)

    return [observe(state) for state in islice(chain, thin - 1, sweeps * thin, thin)]


def chain_mean(box: SpaceTimeBox,
               lam: Rates,
               delta: Rates,
               rule: BoundaryRule,
               f: Callable[[ClusterLabelling], float],
               *,
               sweeps: int,
               seed: int,
               burn_in: int = DEFAULT_BURN_IN,
               num_batches: int = 20) -> tuple[float, float]:
    """
    :return: the long-run average of ``f`` along one chain with its batch-means standard error.
    """
    values = run_chain(box, lam, delta, rule, seed, sweeps=sweeps, burn_in=burn_in,
                       observe=lambda state: float(f(state.labelling)))

    return batch_means(np.asarray(values), num_batches)


@dataclass(frozen=True, kw_only=True)
class ImportanceEstimate:
    """
    A self-normalized importance-sampling estimate of a random-cluster expectation.

    :param estimate: the weighted mean.
    :param se: its delta-method standard error.
    :param ess: the effective sample size.
    :param trials: the number of percolation samples.
    :param unreliable: if the effective sample size is below 10.
    """
    estimate: float
    se: float
    ess: float
    trials: int
    unreliable: bool


def importance_estimate(box: SpaceTimeBox,
                        lam: Rates,
                        delta: Rates,
                        q: float,
                        f: Callable[[ClusterLabelling], float],
                        trials: int,
                        seed: int,
                        *,
                        rule: BoundaryRule = Periodic()) -> ImportanceEstimate:
    """
    Estimates ``E[f]`` under the random-cluster measure by reweighting percolation
    samples with ``q ** k``.

    :param f: a bounded functional; it receives the labelling, whose ``configuration``
        is the sample.
    :param rule: the rule defining ``k``.
    :raises:
        ParameterError: if ``q < 1`` or ``trials < 1``.
    """
    if q < 1 or trials < 1:
        raise ParameterError(f"Need q >= 1 and trials >= 1, got q={q}, trials={trials}.")

    values = np.empty(trials)
    counts = np.empty(trials)

    for trial in range(trials):
        configuration = sample_percolation(box, lam, delta, derive_seed(seed, TRIAL_STREAM, trial))
        labelling = build_clusters(box, configuration, rule)
        values[trial] = f(labelling)
        counts[trial] = labelling.k

    log_weights = counts * math.log(q)
    weights = np.exp(log_weights - log_weights.max())
    total = np.sum(weights)
    estimate = float(np.sum(weights * values) / total)
    se = float(np.sqrt(np.sum(weights ** 2 * (values - estimate) ** 2)) / total)
    ess = float(total ** 2 / np.sum(weights ** 2))

    if ess < 10:
        logger.warning("Importance estimate has effective sample size %.1f (< 10)", ess)

    return ImportanceEstimate(estimate=estimate, se=se, ess=ess, trials=trials, unreliable=ess < 10)
