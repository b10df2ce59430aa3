import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from custom_types import FloatArray, IntArray
from errors import (
    ContractError,
    DomainError,
    FitError,
    ParameterError,
    PipelineInapplicableError,
    SupercriticalError,
)
from quantum_oracle import DensityMatrix, op_norm_diff, weyl_gap
from utils import TRIAL_STREAM, make_rng

logger = logging.getLogger(__name__)

BISECTION_TOLERANCE = 1e-8
MAX_GENERATIONS = 10_000
MAX_PROGENY = 10 ** 12
ZERO_EIGENVALUE = 1e-12
LN2 = math.log(2.0)
RATE_LADDER_STEP = 1 / 64
MAX_EXPONENT = 700.0


@dataclass(frozen=True, kw_only=True)
class BranchingParams:
    """
    The branching process dominating a percolation cluster: every individual lives for
    the sum of two exponential times of rate ``delta`` and has children at rate ``2 * lam``.

    :param lam: the bridge rate.
    :param delta: the death rate.
    """
    lam: float
    delta: float

    def __post_init__(self):
        """
        :raises:
            ParameterError: if ``lam < 0`` or ``delta <= 0``.
        """
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ParameterError(f"Bridge rate must be finite and non-negative, got lambda={self.lam}.")

        if not (math.isfinite(self.delta) and self.delta > 0):
            raise ParameterError(f"Death rate must be finite and positive, got delta={self.delta}.")

    @property
    def mean_offspring(self) -> float:
        return 4 * self.lam / self.delta

    def require_subcritical(self):
        """
        :raises:
            SupercriticalError: if the mean offspring is at least 1.
        """
        if self.mean_offspring >= 1:
            raise SupercriticalError(
                f"Mean offspring 4*lambda/delta = {self.mean_offspring:.6g} is not below 1; "
                "the comparison gives no exponential tail."
            )


def offspring_pgf(params: BranchingParams, s: float) -> float:
    """
    :return: ``G(s) = (delta / (delta - 2 lam (s - 1)))**2``.
    :raises:
        DomainError: if ``s`` is at or beyond the pole.
    """
    denominator = params.delta - 2 * params.lam * (s - 1)

    if denominator <= 0:
        raise DomainError(f"s={s} lies beyond the pole of the offspring generating function.")

    return (params.delta / denominator) ** 2


def offspring_pmf(params: BranchingParams, k) -> FloatArray:
    """
    :return: ``P(N = k) = (k + 1) r**2 (1 - r)**k`` with ``r = delta / (delta + 2 lam)``.
    """
    k = np.asarray(k)
    r = params.delta / (params.delta + 2 * params.lam)

    return (k + 1) * r ** 2 * (1 - r) ** k


def sample_offspring(params: BranchingParams, size: int, seed: int) -> IntArray:
    """
    Draws offspring counts directly: a lifetime ``Gamma(2, 1/delta)`` then Poisson children.
    """
    rng = make_rng(seed, TRIAL_STREAM)
    lifetimes = rng.gamma(2.0, 1.0 / params.delta, size=size)

    return rng.poisson(2 * params.lam * lifetimes)


@dataclass(frozen=True, kw_only=True, eq=False)
class BranchingSample:
    """
    :param progeny: the total progeny ``M`` of each trial, the progenitor included.
    :param lifetime: the aggregate lifetime ``U`` of each trial.
    :param truncated: trials cut at the generation or progeny cap.
    """
    progeny: IntArray
    lifetime: FloatArray
    truncated: np.ndarray

    def tail(self, thresholds: Sequence[float]) -> tuple[FloatArray, FloatArray]:
        """
        :return: the empirical ``P(M > m)`` and ``P(U > m)`` at each threshold.
        """
        thresholds = np.asarray(thresholds, dtype=np.float64)

        return (
            (self.progeny[None, :] > thresholds[:, None]).mean(axis=1),
            (self.lifetime[None, :] > thresholds[:, None]).mean(axis=1),
        )


def simulate_branching(params: BranchingParams,
                       trials: int,
                       seed: int,
                       *,
                       max_generations: int = MAX_GENERATIONS) -> BranchingSample:
    """
    Simulates the branching process generation by generation, all trials at once.

    A generation of ``g`` individuals lives for a total ``Gamma(2g, 1/delta)`` time and
    has ``Poisson(2 lam * total)`` children.

    :param params: the process.
    :param trials: the number of independent trees.
    :param seed: the run seed.
    :param max_generations: trees still alive after this many generations are cut and flagged.
    :return: the progeny and lifetimes.
    """
    if trials < 1:
        raise ParameterError(f"Need at least one trial, got {trials}.")

    rng = make_rng(seed, TRIAL_STREAM)
    alive = np.ones(trials, dtype=np.int64)
    progeny = np.zeros(trials, dtype=np.int64)
    lifetime = np.zeros(trials)
    generation = 0

    while np.any(alive > 0) and generation < max_generations:
        living = alive > 0
        durations = np.zeros(trials)
        durations[living] = rng.gamma(2.0 * alive[living], 1.0 / params.delta)

        progeny += alive
        lifetime += durations
        alive = rng.poisson(2 * params.lam * durations)
        alive[progeny >= MAX_PROGENY] = 0
        generation += 1

    truncated = (alive > 0) | (progeny >= MAX_PROGENY)

    if np.any(truncated):
        logger.warning("%d of %d branching trials truncated", int(truncated.sum()), trials)

    return BranchingSample(progeny=progeny, lifetime=lifetime, truncated=truncated)


def _bisect_largest(feasible, low: float, high: float) -> float:
    """
    :return: the largest point of ``[low, high]`` where ``feasible`` holds, given it holds
        at ``low`` and fails at ``high``.
    """
    while high - low > BISECTION_TOLERANCE * max(1.0, abs(low)):
        middle = (low + high) / 2

        if feasible(middle):
            low = middle
        else:
            high = middle

    return low


def progeny_tail_exponent(params: BranchingParams) -> float:
    """
    Computes ``nu``, the exponential rate of ``P(M > m)``.

    The total progeny generating function solves ``Phi(s) = s G(Phi(s))``. It is finite up
    to the largest ``s`` for which the equation has a real root; ``nu`` is the log of that
    radius. The radius is found by bisection, with the root's existence decided by
    minimizing ``s G(y) - y`` over ``y`` below the pole.

    :return: ``nu``, infinite when ``lam == 0``.
    :raises:
        SupercriticalError: if the mean offspring is at least 1.
    """
    params.require_subcritical()

    if params.lam == 0:
        return math.inf

    pole = 1 + params.delta / (2 * params.lam)

    def feasible(s: float) -> bool:
        result = minimize_scalar(
            lambda y: s * offspring_pgf(params, y) - y,
            bounds=(0.0, pole * (1 - 1e-12)),
            method="bounded",
            options={"xatol": 1e-12},
        )

        return result.fun <= 0

    high = 2.0

    while feasible(high):
        high *= 2

    return math.log(_bisect_largest(feasible, 1.0, high))


def lifetime_tail_exponent(params: BranchingParams) -> float:
    """
    Computes ``u*``, the abscissa of convergence of ``E[exp(u U)]`` for the aggregate
    lifetime ``U``.

    The transform ``Psi`` solves ``Psi (c - 2 lam Psi)**2 = delta**2`` with
    ``c = delta - u + 2 lam``; ``u*`` is the largest ``u`` with a real root.

    :raises:
        SupercriticalError: if the mean offspring is at least 1.
    """
    params.require_subcritical()

    if params.lam == 0:
        return params.delta

    b = 2 * params.lam

    def feasible(u: float) -> bool:
        c = params.delta - u + b

        if c <= 0:
            return False

        result = minimize_scalar(
            lambda psi: -psi * (c - b * psi) ** 2,
            bounds=(0.0, c / b),
            method="bounded",
            options={"xatol": 1e-12},
        )

        return -result.fun >= params.delta ** 2

    return _bisect_largest(feasible, 0.0, params.delta + b)


@dataclass(frozen=True, kw_only=True)
class DecayRateBound:
    """
    :param nu: the progeny tail exponent.
    :param u_star: the lifetime tail exponent.
    :param gamma_lower: ``min(nu, u_star)``, the decay rate the comparison certifies.
    """
    lam: float
    delta: float
    mean_offspring: float
    nu: float
    u_star: float
    gamma_lower: float


def decay_rate_bound(lam: float, delta: float) -> DecayRateBound:
    """
    Bounds the decay rate of ``P(I <-> boundary of radius m)`` through
    ``P(M >= m) + P(U >= m)``.

    :raises:
        SupercriticalError: if ``4 lam / delta >= 1``.
    """
    params = BranchingParams(lam=lam, delta=delta)
    nu = progeny_tail_exponent(params)
    u_star = lifetime_tail_exponent(params)

    return DecayRateBound(
        lam=lam,
        delta=delta,
        mean_offspring=params.mean_offspring,
        nu=nu,
        u_star=u_star,
        gamma_lower=min(nu, u_star),
    )


def simulated_tail_slope(progeny: IntArray, thresholds: Sequence[int]) -> float:
    """
    Estimates ``nu`` from simulated progeny by regressing ``ln P(M > m) + 1.5 ln m`` on ``m``.

    :return: the negated slope.
    :raises:
        FitError: if fewer than two thresholds have a non-empty tail.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    tail = (np.asarray(progeny)[None, :] > thresholds[:, None]).mean(axis=1)
    keep = (tail > 0) & (thresholds > 0)

    if keep.sum() < 2:
        raise FitError("Need at least two thresholds with a non-empty progeny tail.")

    slope, _ = np.polyfit(thresholds[keep], np.log(tail[keep]) + 1.5 * np.log(thresholds[keep]), 1)

    return float(-slope)


@dataclass(frozen=True, kw_only=True)
class EntropyBoundInputs:
    """
    :param gamma: the decay rate of ``||rho_m - rho_n||``.
    :param alpha: the power of ``L`` in the prefactor.
    :param C: the prefactor constant.
    :param L: the block size.
    """
    gamma: float
    alpha: float
    C: float
    L: int

    def __post_init__(self):
        if not (self.gamma > 0 and self.alpha > 0 and self.C > 0):
            raise ParameterError("gamma, alpha and C must all be positive.")

        if self.L < 1:
            raise ParameterError(f"Block size must be at least 1, got L={self.L}.")

    @property
    def applicable(self) -> bool:
        return self.gamma > 4 * LN2


@dataclass(frozen=True, kw_only=True)
class EntropyBound:
    """
    The entropy bound for one ``m`` with every intermediate quantity.

    ``K``, ``c0``, ``c0_prime``, ``xi``, ``nu``, ``s1`` and ``s2`` are evaluated at the
    input rate and the smallest split ``K``; ``tail = s1 + s2``.

    :param bound: the bound on ``S(rho_m^L)``.
    :param uniform_bound: ``max(2K, S1 + S2)``, valid for every ``m``.
    :param small_m: if ``m <= K`` and the bound is ``2m``.
    :param rate: the rate the bound was reached at, at most ``gamma``.
    :param split: the split the bound was reached at, between ``K`` and ``m - 1``.
    """
    m: int
    K: int
    c0: float
    c0_prime: float
    xi: float
    nu: int
    s1: float
    s2: float
    tail: float
    bound: float
    uniform_bound: float
    small_m: bool
    rate: float
    split: int


def _split_at(log_prefactor: float, gamma: float) -> int:
    return max(math.ceil(log_prefactor / gamma), 0)


def _tail_terms(gamma: float, K: int) -> tuple[float, float, float, int, float, float]:
    """
    :return: ``(c0, c0', xi, nu, S1, S2)`` for the spectrum split at ``nu = ceil(exp(gamma (K + 1)))``.
    """
    c0 = 1 / (1 - math.exp(-gamma))
    c0_prime = c0 * math.exp(gamma * (K + 1))
    xi = gamma / (2 * LN2)
    nu = math.ceil(math.exp(gamma * (K + 1)))
    s1 = math.log2(nu)
    s2 = c0_prime * nu ** (1 - xi) / (xi - 1) * (
        abs(math.log2(c0_prime)) + xi * math.log2(nu) + xi / ((xi - 1) * LN2)
    )

    return c0, c0_prime, xi, nu, s1, s2


def _admissible_rates(gamma: float) -> list[float]:
    """
    :return: ``gamma`` followed by the ladder rates in ``(4 ln 2, gamma)``, descending.
    """
    lowest = math.floor(4 * LN2 / RATE_LADDER_STEP) + 1
    highest = math.ceil(gamma / RATE_LADDER_STEP) - 1

    return [gamma] + [k * RATE_LADDER_STEP for k in range(highest, lowest - 1, -1)]


def _tightest_tail(log_prefactor: float, gamma: float, m: int) -> tuple[float, float, int]:
    """
    Minimizes ``S1 + S2`` over the rates ``g <= gamma`` and the splits ``K(g) <= k < m``.

    A decay at rate ``gamma`` is also a decay at every smaller rate, and every split past
    ``K(g)`` keeps ``eps(r) <= exp(-g r)``, so each pair gives a valid bound.

    :return: the smallest tail, its rate and its split.
    """
    best, best_rate, best_split = math.inf, gamma, _split_at(log_prefactor, gamma)

    for rate in _admissible_rates(gamma):
        for split in range(_split_at(log_prefactor, rate), m):
            # S1 grows with the split and S2 is positive
            if rate * (split + 1) > MAX_EXPONENT or rate * (split + 1) / LN2 >= best:
                break

            *_, s1, s2 = _tail_terms(rate, split)

            if s1 + s2 < best:
                best, best_rate, best_split = s1 + s2, rate, split

    return best, best_rate, best_split


def entropy_bound_pipeline(inputs: EntropyBoundInputs, m: int) -> EntropyBound:
    """
    Evaluates the entropy bound.

    With ``K = ceil(ln(C L**alpha) / gamma)`` (at least 0), the bound is ``2m`` for
    ``m <= K``. Otherwise the spectrum splits at ``nu = ceil(exp(gamma (K + 1)))``: the
    head contributes at most ``log2 nu``, and the tail, whose eigenvalues are below
    ``c0' j**-xi``, at most the integral bound
    ``c0' nu**(1-xi) / (xi-1) * (|log2 c0'| + xi log2 nu + xi / ((xi-1) ln 2))``.

    The reported bound is the smallest of ``2m`` and these tails over every smaller rate
    on a ladder of step ``1/64`` and every later split, which makes it non-decreasing in
    ``L`` and ``C`` and non-increasing in ``gamma`` over the ladder rates.

    :raises:
        PipelineInapplicableError: if ``gamma <= 4 ln 2``.
        ParameterError: if ``m < 0``.
    """
    if not inputs.applicable:
        raise PipelineInapplicableError(
            f"The entropy bound needs gamma > 4 ln 2 ({4 * LN2:.6f}), got {inputs.gamma}."
        )

    if m < 0:
        raise ParameterError(f"m must be non-negative, got {m}.")

    log_prefactor = math.log(inputs.C * inputs.L ** inputs.alpha)
    K = _split_at(log_prefactor, inputs.gamma)
    c0, c0_prime, xi, nu, s1, s2 = _tail_terms(inputs.gamma, K)
    tail = s1 + s2
    small_m = m <= K

    if small_m:
        bound, rate, split = 2.0 * m, inputs.gamma, K
    else:
        bound, rate, split = _tightest_tail(log_prefactor, inputs.gamma, m)
        bound = min(bound, 2.0 * m)

    return EntropyBound(
        m=m,
        K=K,
        c0=c0,
        c0_prime=c0_prime,
        xi=xi,
        nu=nu,
        s1=s1,
        s2=s2,
        tail=tail,
        bound=bound,
        uniform_bound=max(2.0 * K, tail),
        small_m=small_m,
        rate=rate,
        split=split,
    )


@dataclass(frozen=True, kw_only=True)
class TailViolation:
    case: str
    r: int
    j: int
    value: float
    bound: float


@dataclass(frozen=True, kw_only=True)
class TailCheckReport:
    """
    :param eps: ``||rho_{K+l} - rho_{K+l+1}||`` for each consecutive pair.
    :param weyl_gaps: the per-step eigenvalue gaps, each at most its ``eps``.
    :param ranks: the numerical rank of each matrix.
    :param rate_ratios: ``eps[l] * exp(gamma l)``, bounded when the decay rate holds.
    :param violations: the failed comparisons.
    """
    K: int
    gamma: float
    eps: tuple[float, ...]
    weyl_gaps: tuple[float, ...]
    ranks: tuple[int, ...]
    rate_ratios: tuple[float, ...]
    violations: tuple[TailViolation, ...] = field(default=())

    @property
    def passed(self) -> bool:
        return not self.violations


def eigenvalue_tail_check(rho_list: Sequence[DensityMatrix], gamma: float, K: int) -> TailCheckReport:
    """
    Checks the eigenvalue cascade on exact reduced states ``rho_K, rho_{K+1}, ...``.

    For ``rho_{K+r}`` and a (1-based) index ``j``:

    - ``j <= 4**K``: ``lambda_j <= lambda_j(rho_K) + sum of eps[0..r-1]``;
    - ``4**(K+s) < j <= 4**(K+s+1) <= 4**(K+r)``: ``lambda_j <= sum of eps[s..r-1]``;
    - ``j > 4**(K+r)``: ``lambda_j == 0`` (within ``1e-12``).

    :param rho_list: reduced ground states of one block at consecutive ``m`` from ``K``.
    :param gamma: the decay rate the ratios are reported against.
    :param K: the ``m`` of the first matrix.
    :return: the report; nothing is raised on failure.
    """
    if len(rho_list) < 2:
        raise ParameterError("Need at least two consecutive reduced states.")

    spectra = [rho.eigenvalues() for rho in rho_list]
    eps = [op_norm_diff(a, b) for a, b in zip(rho_list, rho_list[1:])]
    weyl = []
    violations = []

    for a, b, e in zip(rho_list, rho_list[1:], eps):
        try:
            weyl.append(weyl_gap(a, b))
        except ContractError:
            weyl.append(float(np.abs(a.eigenvalues() - b.eigenvalues()).max()))
            violations.append(TailViolation(case="weyl", r=len(weyl), j=0, value=weyl[-1], bound=e))

    slack = 1e-9

    for r in range(1, len(rho_list)):
        values = spectra[r]
        cap = 4 ** (K + r)

        for j, value in enumerate(values, start=1):
            if j <= 4 ** K:
                case, bound = "i", spectra[0][j - 1] + sum(eps[:r]) + slack
            elif j <= cap:
                s = 0

                while j > 4 ** (K + s + 1):
                    s += 1

                case, bound = "ii", sum(eps[s:r]) + slack
            else:
                case, bound = "iii", ZERO_EIGENVALUE

            if value > bound:
                violations.append(TailViolation(case=case, r=r, j=j, value=float(value), bound=float(bound)))

    if violations:
        logger.warning("Eigenvalue cascade check found %d violation(s)", len(violations))

    return TailCheckReport(
        K=K,
        gamma=gamma,
        eps=tuple(eps),
        weyl_gaps=tuple(weyl),
        ranks=tuple(int(np.sum(values > ZERO_EIGENVALUE)) for values in spectra),
        rate_ratios=tuple(e * math.exp(gamma * l) for l, e in enumerate(eps)),
        violations=tuple(violations),
    )


@dataclass(frozen=True, kw_only=True)
class DecayFit:
    """
    A weighted least-squares fit of ``ln value = intercept - gamma * m``.

    :param gamma: the fitted decay rate.
    :param gamma_se: its standard error.
    :param residuals: the weighted residuals.
    :param chi2: the sum of squared weighted residuals.
    :param decaying: if ``gamma`` exceeds twice its standard error.
    """
    gamma: float
    gamma_se: float
    intercept: float
    intercept_se: float
    n_points: int
    residuals: tuple[float, ...]
    chi2: float
    decaying: bool


def fit_decay_rate(rows: Sequence[tuple[float, float, float]]) -> DecayFit:
    """
    Fits an exponential decay to ``(m, value, se)`` rows on the log scale.

    Rows are weighted by ``(value / se)**2``. When every ``se`` is 0 the rows get unit
    weights and the standard errors come from the residual scatter. In a table mixing
    exact and noisy rows, the exact ones (``m = 0`` or saturated estimates) are left out.

    :raises:
        FitError: if fewer than 3 rows have a positive value above ``3 se``, or the fit
            is not finite.
    """
    data = np.array([row for row in rows if row[1] > 0 and row[1] > 3 * row[2]], dtype=np.float64).reshape(-1, 3)
    exact_rows = data[:, 2] == 0

    if np.any(exact_rows) and not np.all(exact_rows):
        logger.warning("Leaving %d rows with zero standard error out of the weighted fit", int(exact_rows.sum()))
        data = data[~exact_rows]

    if data.shape[0] < 3:
        raise FitError(f"A decay fit needs at least 3 points above the noise floor, got {data.shape[0]}.")

    m, value, se = data.T
    y = np.log(value)
    design = np.column_stack((np.ones_like(m), m))
    exact = np.all(se == 0)
    weights = np.ones_like(m) if exact else (value / se) ** 2

    normal = design.T @ (weights[:, None] * design)

    try:
        covariance = np.linalg.inv(normal)
    except np.linalg.LinAlgError as error:
        raise FitError(f"The decay fit is singular: {error}") from error

    coefficients = covariance @ design.T @ (weights * y)
    residuals = np.sqrt(weights) * (y - design @ coefficients)
    chi2 = float(residuals @ residuals)

    if exact:
        covariance = covariance * (chi2 / max(data.shape[0] - 2, 1))

    if not (np.all(np.isfinite(coefficients)) and np.all(np.isfinite(covariance))):
        raise FitError(f"The decay fit is not finite on {data.shape[0]} points.")

    gamma = float(-coefficients[1])
    gamma_se = float(math.sqrt(max(covariance[1, 1], 0.0)))

    return DecayFit(
        gamma=gamma,
        gamma_se=gamma_se,
        intercept=float(coefficients[0]),
        intercept_se=float(math.sqrt(max(covariance[0, 0], 0.0))),
        n_points=int(data.shape[0]),
        residuals=tuple(float(r) for r in residuals),
        chi2=chi2,
        decaying=gamma > 2 * gamma_se,
    )
