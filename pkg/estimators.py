import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from bounds import DecayFit, EntropyBoundInputs, entropy_bound_pipeline, fit_decay_rate
from custom_types import FloatArray, IntArray, SpinVector
from errors import (
    FitError,
    InsufficientDataError,
    ParameterError,
    PipelineInapplicableError,
    SizeError,
    UnreliableNormalizerError,
)
from percolation import PartiallyPeriodic, SpaceTimeBox
from quantum_oracle import (
    MAX_SPINS,
    DensityMatrix,
    entropy,
    op_norm_diff,
    reduced_ground_state,
    reduced_thermal_state,
)
from rc_sampler import DEFAULT_BURN_IN, ChainState, run_chain
from utils import CHAIN_STREAM, binomial_se, derive_seed

logger = logging.getLogger(__name__)

MAX_HISTOGRAM_L = 4
DEFAULT_BATCHES = 20


def slit_index(spins: SpinVector) -> int:
    """
    Encodes slit spins as a basis index: site ``x`` of ``0..L`` is bit ``L - x`` and a
    ``+1`` spin is a 0 bit, matching the ordering of :mod:`quantum_oracle`.
    """
    L = len(spins) - 1
    index = 0

    for x, spin in enumerate(spins):
        index |= ((1 - spin) // 2) << (L - x)

    return index


def slit_spins(index: int, L: int) -> SpinVector:
    return tuple(1 - 2 * ((index >> (L - x)) & 1) for x in range(L + 1))


@dataclass(frozen=True, kw_only=True, eq=False)
class SlitHistogram:
    """
    Joint counts of the upper and lower slit readouts ``(sigma+, sigma-)``.

    :param counts: ``counts[i, j]`` is the number of sweeps with upper readout ``i`` and
        lower readout ``j`` (see :func:`slit_index`).
    :param batch_counts: the same counts split into contiguous batches of each chain.
    :param sweeps: the retained sweeps over all chains.
    :param seeds: the seed of every chain.
    :param regime_warning: if ``beta <= 2m + L``.
    """
    m: int
    L: int
    beta: float
    lam: float
    delta: float
    counts: IntArray
    batch_counts: IntArray
    sweeps: int
    seeds: tuple[int, ...]
    burn_in: int = DEFAULT_BURN_IN
    regime_warning: bool = False

    def __post_init__(self):
        """
        :raises:
            ParameterError: if the counts are negative or have the wrong shape.
        """
        d = 1 << (self.L + 1)

        if self.counts.shape != (d, d) or self.batch_counts.shape[1:] != (d, d):
            raise ParameterError(f"Slit histogram for L={self.L} needs {d} x {d} counts.")

        if np.any(self.counts < 0) or np.any(self.batch_counts < 0):
            raise ParameterError("Histogram counts must be non-negative.")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def chains(self) -> int:
        return len(self.seeds)

    @property
    def dimension(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "SlitHistogram") -> "SlitHistogram":
        """
        :return: the histogram of both runs.
        :raises:
            ParameterError: if the runs differ in model or geometry.
        """
        key = (self.m, self.L, self.beta, self.lam, self.delta)

        if key != (other.m, other.L, other.beta, other.lam, other.delta):
            raise ParameterError(f"Cannot merge histograms of {key} and {(other.m, other.L, other.beta, other.lam, other.delta)}.")

        return SlitHistogram(
            m=self.m,
            L=self.L,
            beta=self.beta,
            lam=self.lam,
            delta=self.delta,
            counts=self.counts + other.counts,
            batch_counts=np.concatenate((self.batch_counts, other.batch_counts)),
            sweeps=self.sweeps + other.sweeps,
            seeds=self.seeds + other.seeds,
            burn_in=self.burn_in,
            regime_warning=self.regime_warning,
        )


def _readout(state: ChainState) -> tuple[int, int]:
    return slit_index(state.spins.upper), slit_index(state.spins.lower)


def _chain_histogram(box: SpaceTimeBox,
                     lam: float,
                     delta: float,
                     seed: int,
                     sweeps: int,
                     burn_in: int,
                     batches: int) -> IntArray:
    """
    Runs one chain and returns its counts split into ``batches`` contiguous batches.
    """
    readouts = np.array(
        run_chain(box, lam, delta, PartiallyPeriodic(), seed, sweeps=sweeps, burn_in=burn_in, observe=_readout),
        dtype=np.int64,
    ).reshape(-1, 2)
    d = 1 << (box.slit_len + 1)
    counts = np.zeros((batches, d, d), dtype=np.int64)

    for batch, chunk in enumerate(np.array_split(readouts, batches)):
        np.add.at(counts[batch], (chunk[:, 0], chunk[:, 1]), 1)

    logger.debug("Chain %d finished %d sweeps", seed, sweeps)

    return counts


def estimate_slit_histogram(m: int,
                            L: int,
                            beta: float,
                            lam: float,
                            delta: float,
                            *,
                            sweeps: int,
                            chains: int,
                            seed: int,
                            burn_in: int = DEFAULT_BURN_IN,
                            batches: int = DEFAULT_BATCHES,
                            workers: int = 1) -> SlitHistogram:
    """
    Samples the slit readouts of the random-cluster measure on the slit box with its time
    ends glued and the slit kept cut.

    Chain ``c`` runs with ``derive_seed(seed, CHAIN_STREAM, c)``, so the histogram does
    not depend on ``workers``.

    :param sweeps: the retained sweeps per chain.
    :param chains: the number of independent chains.
    :param batches: the batches per chain used for error estimates.
    :param workers: the joblib worker count.
    :raises:
        SizeError: if ``L`` exceeds the histogram guard.
        ParameterError: if ``sweeps``, ``chains`` or ``batches`` is not positive.
    """
    if L > MAX_HISTOGRAM_L:
        raise SizeError(f"Full slit histograms are limited to L <= {MAX_HISTOGRAM_L}, got L={L}.")

    if sweeps < 1 or chains < 1 or batches < 1:
        raise ParameterError("sweeps, chains and batches must all be positive.")

    regime_warning = beta <= 2 * m + L

    if regime_warning:
        logger.warning("beta=%g is not above 2m+L=%d; the slit box is outside the factorization regime", beta, 2 * m + L)

    box = SpaceTimeBox.slit_box(m=m, L=L, beta=beta)
    seeds = tuple(derive_seed(seed, CHAIN_STREAM, chain) for chain in range(chains))

    per_chain = Parallel(n_jobs=workers)(
        delayed(_chain_histogram)(box, lam, delta, chain_seed, sweeps, burn_in, min(batches, sweeps))
        for chain_seed in seeds
    )
    batch_counts = np.concatenate(per_chain)

    return SlitHistogram(
        m=m,
        L=L,
        beta=beta,
        lam=lam,
        delta=delta,
        counts=batch_counts.sum(axis=0),
        batch_counts=batch_counts,
        sweeps=sweeps * chains,
        seeds=seeds,
        burn_in=burn_in,
        regime_warning=regime_warning,
    )


def estimate_a(histogram: SlitHistogram) -> tuple[float, float]:
    """
    :return: the probability that the two slit readouts agree, with its binomial error.
    :raises:
        InsufficientDataError: if the histogram is empty.
    """
    total = histogram.total

    if total == 0:
        raise InsufficientDataError("The slit histogram is empty.")

    a = float(np.trace(histogram.counts)) / total

    return a, binomial_se(a, total)


@dataclass(frozen=True, kw_only=True, eq=False)
class RdmEstimate:
    """
    A reduced density matrix estimated from slit readouts.

    :param rho: the estimate, projected to the positive cone.
    :param se: the batch-means standard error of every entry.
    :param a: the agreement probability normalizing the estimate.
    :param a_se: its standard error.
    :param trace_drift: the trace of the unprojected estimate minus 1.
    :param entropy: the entropy of ``rho``.
    :param entropy_se: its jackknife error over batches.
    """
    m: int
    L: int
    beta: float
    rho: DensityMatrix
    se: FloatArray
    a: float
    a_se: float
    trace_drift: float
    entropy: float
    entropy_se: float
    regime_warning: bool = False

    @property
    def min_eigenvalue(self) -> float:
        return self.rho.min_eigenvalue

    @property
    def raw_eigenvalues(self) -> FloatArray:
        return self.rho.raw_eigenvalues


def _unprojected(counts: IntArray) -> FloatArray | None:
    total = counts.sum()
    diagonal = np.trace(counts)

    if total == 0 or diagonal == 0:
        return None

    raw = counts.T / diagonal

    return (raw + raw.T) / 2


def rdm_from_histogram(histogram: SlitHistogram) -> RdmEstimate:
    """
    Builds ``rho[e-, e+] = P(sigma+ = e+, sigma- = e-) / a``, symmetrizes it and projects it
    to the positive trace-one cone.

    :raises:
        UnreliableNormalizerError: if ``a`` is within three standard errors of 0.
    """
    a, a_se = estimate_a(histogram)

    if a - 3 * a_se <= 0:
        raise UnreliableNormalizerError(f"Normalizer a={a:.3g} is within 3 SE ({a_se:.3g}) of zero.")

    symmetric = _unprojected(histogram.counts)
    rho = DensityMatrix.from_matrix(symmetric, project=True)

    per_batch = [_unprojected(batch) for batch in histogram.batch_counts]
    per_batch = np.array([matrix for matrix in per_batch if matrix is not None])

    if per_batch.shape[0] >= 2:
        se = per_batch.std(axis=0, ddof=1) / math.sqrt(per_batch.shape[0])
    else:
        se = np.full(symmetric.shape, math.inf)

    leave_one_out = []

    for batch in histogram.batch_counts:
        rest = _unprojected(histogram.counts - batch)

        if rest is not None:
            leave_one_out.append(entropy(DensityMatrix.from_matrix(rest, project=True)))

    if len(leave_one_out) >= 2:
        values = np.array(leave_one_out)
        entropy_se = math.sqrt((values.size - 1) / values.size * np.sum((values - values.mean()) ** 2))
    else:
        entropy_se = math.inf

    return RdmEstimate(
        m=histogram.m,
        L=histogram.L,
        beta=histogram.beta,
        rho=rho,
        se=se,
        a=a,
        a_se=a_se,
        trace_drift=float(np.trace(symmetric) - 1),
        entropy=entropy(rho),
        entropy_se=entropy_se,
        regime_warning=histogram.regime_warning,
    )


def estimate_rdm(m: int, L: int, beta: float, lam: float, delta: float, **chain_options) -> RdmEstimate:
    """
    :return: :func:`rdm_from_histogram` of :func:`estimate_slit_histogram`.
    """
    return rdm_from_histogram(estimate_slit_histogram(m, L, beta, lam, delta, **chain_options))


def combined_se(*estimates: RdmEstimate) -> float:
    """
    :return: a standard error for a norm of a difference of the estimates, from the
        root sum of squares of their entry errors.
    """
    return float(math.sqrt(sum(np.sum(estimate.se ** 2) for estimate in estimates)))


@dataclass(frozen=True, kw_only=True)
class CauchyStep:
    beta: float
    distance: float
    se: float


@dataclass(frozen=True, kw_only=True, eq=False)
class Extrapolation:
    """
    :param estimate: the accepted estimate.
    :param beta: the inverse temperature it was taken at.
    :param converged: if two consecutive levels agreed within tolerance.
    :param steps: the distance between each level and the previous one.
    """
    estimate: RdmEstimate
    beta: float
    converged: bool
    steps: tuple[CauchyStep, ...]


def beta_extrapolate(m: int,
                     L: int,
                     lam: float,
                     delta: float,
                     betas: Sequence[float],
                     tol: float,
                     **chain_options) -> Extrapolation:
    """
    Estimates the reduced state at increasing ``beta`` until two consecutive levels are
    within ``tol + 3 se`` in operator norm.

    Level ``i`` uses the seed ``derive_seed(seed, i)``.

    :param betas: the increasing schedule.
    :param tol: the tolerance; ``inf`` accepts the first level.
    :return: the first accepted level, or the last level with ``converged=False``.
    :raises:
        ParameterError: if the schedule is empty or not increasing.
    """
    betas = list(betas)

    if not betas or any(b >= c for b, c in zip(betas, betas[1:])):
        raise ParameterError(f"The beta schedule must be non-empty and increasing, got {betas}.")

    seed = chain_options.pop("seed")
    previous = estimate_rdm(m, L, betas[0], lam, delta, seed=derive_seed(seed, 0), **chain_options)

    if math.isinf(tol):
        return Extrapolation(estimate=previous, beta=betas[0], converged=True, steps=())

    steps = []

    for level, beta in enumerate(betas[1:], start=1):
        current = estimate_rdm(m, L, beta, lam, delta, seed=derive_seed(seed, level), **chain_options)
        step = CauchyStep(beta=beta, distance=op_norm_diff(previous.rho, current.rho), se=combined_se(previous, current))
        steps.append(step)
        logger.info("beta=%g: distance to previous level %.4g (se %.2g)", beta, step.distance, step.se)

        if step.distance < tol + 3 * step.se:
            return Extrapolation(estimate=current, beta=beta, converged=True, steps=tuple(steps))

        previous = current

    logger.warning("beta schedule exhausted without convergence (last distance %.4g)", steps[-1].distance if steps else math.nan)

    return Extrapolation(estimate=previous, beta=betas[-1], converged=False, steps=tuple(steps))


def chain_gap(theta: float, delta: float = 1.0) -> float:
    """
    :return: the spectral gap ``2 delta |1 - theta/2|`` of the infinite chain.
    """
    return 2 * delta * abs(1 - theta / 2)


def default_beta(m: int, L: int, theta: float, delta: float = 1.0) -> float:
    """
    :return: ``max(4(m + L + 1), 40 / gap)``, falling back to ``4(m + L + 1)`` at zero gap.
    """
    floor = 4.0 * (m + L + 1)
    gap = chain_gap(theta, delta)

    if gap <= 0:
        logger.warning("theta=%g has no gap; using beta=%g", theta, floor)
        return floor

    return max(floor, 40.0 / gap)


BetaRule = Callable[[int, int, float], float]


@dataclass(frozen=True, kw_only=True)
class NormDecayRow:
    theta: float
    L: int
    m: int
    n: int
    norm: float
    se: float
    censored: bool


@dataclass(frozen=True, kw_only=True)
class NormDecayResult:
    rows: tuple[NormDecayRow, ...]
    fit: DecayFit | None


def _fit_rows(rows: Sequence[NormDecayRow]) -> DecayFit | None:
    try:
        return fit_decay_rate([(row.m, row.norm, row.se) for row in rows if row.m != row.n and not row.censored])
    except FitError as error:
        logger.warning("No decay fit: %s", error)
        return None


def _check_m_list(m_list: Sequence[int]) -> list[int]:
    m_list = list(m_list)

    if not m_list or any(m < 0 for m in m_list) or any(a >= b for a, b in zip(m_list, m_list[1:])):
        raise ParameterError(f"m values must be non-negative and ascending, got {m_list}.")

    return m_list


def norm_decay_experiment(theta: float,
                          L: int,
                          m_list: Sequence[int],
                          *,
                          beta_rule: BetaRule = default_beta,
                          **chain_options) -> NormDecayResult:
    """
    Estimates ``||rho_m - rho_n||`` with ``n = max(m_list)``, ``delta = 1`` and ``lam = theta``.

    Every ``m`` runs independent chains seeded by ``derive_seed(seed, m)``. Rows whose norm
    is within three standard errors of 0 are censored and left out of the fit.
    """
    m_list = _check_m_list(m_list)
    seed = chain_options.pop("seed")
    n = m_list[-1]

    estimates = {
        m: estimate_rdm(m, L, beta_rule(m, L, theta), theta, 1.0, seed=derive_seed(seed, m), **chain_options)
        for m in m_list
    }
    reference = estimates[n]
    rows = []

    for m in m_list:
        if m == n:
            rows.append(NormDecayRow(theta=theta, L=L, m=m, n=n, norm=0.0, se=0.0, censored=False))
            continue

        norm = op_norm_diff(estimates[m].rho, reference.rho)
        se = combined_se(estimates[m], reference)
        censored = norm <= 3 * se

        if censored:
            logger.warning("m=%d: norm %.3g is below the noise floor (se %.3g)", m, norm, se)

        rows.append(NormDecayRow(theta=theta, L=L, m=m, n=n, norm=norm, se=se, censored=censored))
        logger.info("theta=%g L=%d m=%d: norm %.4g", theta, L, m, norm)

    return NormDecayResult(rows=tuple(rows), fit=_fit_rows(rows))


def _exact_state(m: int, L: int, theta: float, beta: float | None) -> DensityMatrix:
    if beta is None:
        return reduced_ground_state(m, L, theta, 1.0)

    return reduced_thermal_state(m, L, theta, 1.0, beta)


def exact_norm_decay(theta: float, L: int, m_list: Sequence[int], *, beta: float | None = None) -> NormDecayResult:
    """
    The oracle counterpart of :func:`norm_decay_experiment`: ground states by default,
    thermal states when ``beta`` is given.

    :raises:
        SizeError: if ``2 max(m_list) + L + 1`` exceeds the dense guard.
    """
    m_list = _check_m_list(m_list)
    n = m_list[-1]

    if 2 * n + L + 1 > MAX_SPINS:
        raise SizeError(f"Exact norms need 2n+L+1 <= {MAX_SPINS} spins, got {2 * n + L + 1}.")

    reference = _exact_state(n, L, theta, beta)
    rows = tuple(
        NormDecayRow(
            theta=theta,
            L=L,
            m=m,
            n=n,
            norm=op_norm_diff(_exact_state(m, L, theta, beta), reference) if m != n else 0.0,
            se=0.0,
            censored=False,
        )
        for m in m_list
    )

    return NormDecayResult(rows=rows, fit=_fit_rows(rows))


@dataclass(frozen=True, kw_only=True)
class BoundConstants:
    """
    Empirical constants of ``||rho_m - rho_n|| <= C L**alpha exp(-gamma m)`` fitted on
    exact norm decay; ``C`` is raised so the curve covers every fitted point.
    """
    gamma: float
    alpha: float
    C: float
    n_points: int


def fit_bound_constants(theta: float, L_list: Sequence[int], m_list: Sequence[int]) -> BoundConstants:
    """
    :raises:
        FitError: if fewer than 3 non-zero norms or fewer than 2 block sizes are usable.
    """
    points = []

    for L in L_list:
        usable = [m for m in m_list if 2 * m + L + 1 <= MAX_SPINS]

        if len(usable) < 2:
            continue

        for row in exact_norm_decay(theta, L, usable).rows:
            if row.norm > 1e-12:
                points.append((math.log(L), row.m, math.log(row.norm)))

    points = np.array(points).reshape(-1, 3)

    if points.shape[0] < 3 or np.unique(points[:, 0]).size < 2:
        raise FitError("Fitting the bound constants needs 3 non-zero norms over at least 2 block sizes.")

    log_L, m, y = points.T
    design = np.column_stack((np.ones_like(m), log_L, -m))
    (_, alpha, gamma), *_ = np.linalg.lstsq(design, y, rcond=None)
    log_C = float(np.max(y - alpha * log_L + gamma * m))

    return BoundConstants(gamma=float(gamma), alpha=float(alpha), C=math.exp(log_C), n_points=points.shape[0])


@dataclass(frozen=True, kw_only=True)
class EntropyRow:
    theta: float
    L: int
    m: int
    beta: float | None
    S_mc: float | None
    se: float | None
    S_exact: float | None
    bound: float | None


def entropy_scaling_experiment(theta: float,
                               L_list: Sequence[int],
                               *,
                               m_rule: Callable[[int], int] = lambda L: L,
                               beta_rule: BetaRule = default_beta,
                               constants: BoundConstants | None = None,
                               sweeps: int = 0,
                               **chain_options) -> list[EntropyRow]:
    """
    Tabulates the block entropy against ``L``.

    The Monte Carlo column is filled when ``sweeps > 0`` and ``L`` is within the histogram
    guard, the exact column when the chain fits the dense guard, and the bound column
    when ``constants`` make the entropy bound applicable.
    """
    rows = []
    seed = chain_options.pop("seed", 0)

    for L in L_list:
        m = m_rule(L)
        beta = s_mc = se = s_exact = bound = None

        if sweeps > 0 and L <= MAX_HISTOGRAM_L:
            beta = beta_rule(m, L, theta)
            estimate = estimate_rdm(m, L, beta, theta, 1.0, sweeps=sweeps, seed=derive_seed(seed, L), **chain_options)
            s_mc, se = estimate.entropy, estimate.entropy_se

        if 2 * m + L + 1 <= MAX_SPINS:
            s_exact = entropy(reduced_ground_state(m, L, theta, 1.0))

        if constants is not None:
            try:
                inputs = EntropyBoundInputs(gamma=constants.gamma, alpha=constants.alpha, C=constants.C, L=L)
                bound = entropy_bound_pipeline(inputs, m).bound
            except (PipelineInapplicableError, ParameterError) as error:
                logger.warning("No entropy bound at L=%d: %s", L, error)

        rows.append(EntropyRow(theta=theta, L=L, m=m, beta=beta, S_mc=s_mc, se=se, S_exact=s_exact, bound=bound))
        logger.info("theta=%g L=%d m=%d: S_exact=%s S_mc=%s", theta, L, m, s_exact, s_mc)

    return rows
