import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from custom_types import FloatArray, Point
from errors import ConfigError, DomainError, ParameterError
from percolation import Free, SpaceTimeBox, build_clusters, cluster_extent, clusters_meeting, sample_percolation
from utils import BRIDGE_STREAM, DEATH_STREAM, TRIAL_STREAM, binomial_se, derive_seed, make_rng

logger = logging.getLogger(__name__)

BETA_CAP = 1e3
TIME_CAP = 500.0

# Parameter names of each supported distribution
DISTRIBUTIONS = {
    "constant": ("value",),
    "uniform": ("low", "high"),
    "lognormal": ("mean", "sigma"),
    "exponential": ("scale",),
    "gamma": ("shape", "scale"),
}


@dataclass(frozen=True, kw_only=True)
class DistributionSpec:
    """
    A named distribution on ``(0, inf)``.

    :param name: one of ``constant``, ``uniform``, ``lognormal``, ``exponential``, ``gamma``.
    :param params: the parameters named in ``DISTRIBUTIONS``; ``lognormal`` takes the mean
        and standard deviation of the log.
    """
    name: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        """
        :raises:
            ConfigError: if the distribution is unknown, a parameter is missing, or the
                support leaves ``(0, inf)``.
        """
        if self.name not in DISTRIBUTIONS:
            raise ConfigError(f"Unsupported distribution '{self.name}'; expected one of {sorted(DISTRIBUTIONS)}.")

        missing = [key for key in DISTRIBUTIONS[self.name] if key not in self.params]

        if missing:
            raise ConfigError(f"Distribution '{self.name}' is missing parameter(s) {missing}.")

        object.__setattr__(self, "params", {key: float(self.params[key]) for key in DISTRIBUTIONS[self.name]})
        p = self.params

        valid = {
            "constant": lambda: p["value"] > 0,
            "uniform": lambda: 0 < p["low"] < p["high"],
            "lognormal": lambda: p["sigma"] >= 0,
            "exponential": lambda: p["scale"] > 0,
            "gamma": lambda: p["shape"] > 0 and p["scale"] > 0,
        }[self.name]()

        if not valid:
            raise ConfigError(f"Parameters {dict(p)} do not define a positive '{self.name}' distribution.")

    @classmethod
    def constant(cls, value: float):
        return cls(name="constant", params={"value": value})

    def sample(self, rng: np.random.Generator, size: int) -> FloatArray:
        p = self.params

        if self.name == "constant":
            return np.full(size, p["value"])
        if self.name == "uniform":
            return rng.uniform(p["low"], p["high"], size=size)
        if self.name == "lognormal":
            return rng.lognormal(p["mean"], p["sigma"], size=size)
        if self.name == "exponential":
            return rng.exponential(p["scale"], size=size)

        return rng.gamma(p["shape"], p["scale"], size=size)

    def support(self) -> tuple[float, float]:
        """
        :return: the infimum and supremum of the support.
        """
        p = self.params

        if self.name == "constant":
            return p["value"], p["value"]
        if self.name == "uniform":
            return p["low"], p["high"]
        if self.name == "lognormal" and p["sigma"] == 0:
            return math.exp(p["mean"]), math.exp(p["mean"])

        return 0.0, math.inf

    def to_json(self) -> dict[str, object]:
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True, kw_only=True, eq=False)
class Environment:
    """
    Quenched rates on the sites ``x_min..x_max``.

    :param delta: the death rate of every site.
    :param lam: the bridge rate of every edge ``(x, x+1)``, from ``x_min``.
    """
    x_min: int
    x_max: int
    delta: FloatArray
    lam: FloatArray
    lambda_spec: DistributionSpec
    delta_spec: DistributionSpec
    seed: int | None = None

    def __post_init__(self):
        """
        :raises:
            DomainError: if the lengths do not match the sites.
            ParameterError: if a field or a coupling is not positive.
        """
        n = self.x_max - self.x_min + 1

        if n < 1 or len(self.delta) != n or len(self.lam) != n - 1:
            raise DomainError(f"An environment on [{self.x_min}, {self.x_max}] needs {n} fields and {n - 1} couplings.")

        delta, lam = np.array(self.delta, dtype=np.float64), np.array(self.lam, dtype=np.float64)

        if np.any(delta <= 0) or np.any(lam <= 0) or not (np.all(np.isfinite(delta)) and np.all(np.isfinite(lam))):
            raise ParameterError("Environment fields and couplings must be finite and positive.")

        delta.flags.writeable = False
        lam.flags.writeable = False
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "lam", lam)

    def covers(self, x_min: int, x_max: int) -> bool:
        return self.x_min <= x_min and x_max <= self.x_max

    def delta_at(self, x: int) -> float:
        return float(self.delta[x - self.x_min])

    def lam_at(self, x: int) -> float:
        """
        :return: the rate of the edge ``(x, x+1)``.
        """
        return float(self.lam[x - self.x_min])

    def box_rates(self, box: SpaceTimeBox) -> tuple[FloatArray, FloatArray]:
        """
        :return: the per-pair bridge rates and per-line death rates of ``box``.
        :raises:
            DomainError: if the environment does not cover the box.
        """
        if not self.covers(box.x_min, box.x_max):
            raise DomainError(f"Environment [{self.x_min}, {self.x_max}] does not cover [{box.x_min}, {box.x_max}].")

        start = box.x_min - self.x_min

        return self.lam[start:start + box.num_pairs], self.delta[start:start + box.num_lines]

    @property
    def ratio_bound(self) -> float:
        """
        :return: ``sup lambda / inf delta`` over the distribution supports.
        """
        _, lam_sup = self.lambda_spec.support()
        delta_inf, _ = self.delta_spec.support()

        return lam_sup / delta_inf if delta_inf > 0 else math.inf

    def bounded_ratio(self, theta: float) -> bool:
        """
        :return: if ``lambda_{x,x+1} / delta_x <= theta`` holds surely.
        """
        return self.ratio_bound <= theta


def sample_environment(lambda_spec: DistributionSpec,
                       delta_spec: DistributionSpec,
                       x_min: int,
                       x_max: int,
                       seed: int) -> Environment:
    """
    Draws iid couplings and fields, each from its own stream of ``seed``.
    """
    if x_min > x_max:
        raise DomainError(f"Empty site range [{x_min}, {x_max}].")

    n = x_max - x_min + 1

    return Environment(
        x_min=x_min,
        x_max=x_max,
        delta=delta_spec.sample(make_rng(seed, DEATH_STREAM), n),
        lam=lambda_spec.sample(make_rng(seed, BRIDGE_STREAM), n - 1),
        lambda_spec=lambda_spec,
        delta_spec=delta_spec,
        seed=seed,
    )


def dq_distance(x: int, s: float, y: int, t: float, q: float = 1.0) -> float:
    """
    :return: ``max(|x - y|, (ln+ |s - t|)**q)`` with ``ln+ = max(ln, 0)``.
    :raises:
        ParameterError: if ``q < 1``.
    """
    if q < 1:
        raise ParameterError(f"q must be at least 1, got {q}.")

    gap = abs(s - t)
    log_plus = math.log(gap) if gap > 1 else 0.0

    return max(abs(x - y), log_plus ** q)


@dataclass(frozen=True, kw_only=True)
class XLResult:
    """
    :param sites: the sites of the two margins ``0..K-1`` and ``L-K+1..L``.
    :param z: ``Z_x = ln(1 + (lambda_{x,x-1} + lambda_{x,x+1}) / delta_x)`` per site.
    """
    L: int
    K: int
    x_l: float
    log_x_l: float
    sites: tuple[int, ...]
    z: tuple[float, ...]


def margin_k(L: int) -> int:
    return math.ceil(math.log(L))


def compute_XL(env: Environment, L: int, K: int | None = None) -> XLResult:
    """
    Computes ``ln X_L = -2 sum Z_x`` over the margins of the slit.

    :raises:
        ParameterError: if ``L < 8``.
        DomainError: if the environment does not cover ``[-1, L + 1]``.
    """
    if L < 8:
        raise ParameterError(f"X_L is defined for L >= 8, got L={L}.")

    if not env.covers(-1, L + 1):
        raise DomainError(f"Environment [{env.x_min}, {env.x_max}] does not cover [-1, {L + 1}].")

    K = margin_k(L) if K is None else K
    sites = tuple(range(0, K)) + tuple(range(L - K + 1, L + 1))
    z = tuple(math.log1p((env.lam_at(x - 1) + env.lam_at(x)) / env.delta_at(x)) for x in sites)
    log_x_l = -2 * math.fsum(z)

    return XLResult(L=L, K=K, x_l=math.exp(log_x_l), log_x_l=log_x_l, sites=sites, z=z)


def b_event(x_l: float, L: int, rho: float) -> bool:
    """
    :return: if ``X_L >= L**-rho``.
    """
    return x_l >= L ** -rho


@dataclass(frozen=True, kw_only=True)
class EnvironmentEvents:
    """
    The environment events gating the disordered entropy bound, each with the first
    violating site as witness (``None`` when the event holds).
    """
    L: int
    m: int
    K: int
    k: int
    rho: float
    x_l: float
    A: bool
    B: bool
    C: bool
    D: bool
    witness_A: int | None
    witness_C: int | None
    witness_D: int | None

    @property
    def all_hold(self) -> bool:
        return self.A and self.B and self.C and self.D


def _first_violation(radii: Mapping[int, float], sites: range, limit: Callable[[int], float]) -> int | None:
    missing = [x for x in sites if x not in radii]

    if missing:
        raise DomainError(f"No localization radius for site(s) {missing[:5]}.")

    return next((x for x in sites if not radii[x] < limit(x)), None)


def environment_events(env: Environment, L: int, m: int, radii: Mapping[int, float], *, rho: float) -> EnvironmentEvents:
    """
    Evaluates, with ``K = ceil(ln L)`` and ``k = m // 2``:

    - ``A``: ``D_x < min(x, L - x)`` for ``K <= x <= L - K``;
    - ``B``: ``X_L >= L**-rho``;
    - ``C``: ``D_x < min(k + x, L + k - x) / 2`` for ``0 <= x <= L``;
    - ``D``: ``D_x < min(m + x, L + m - x)`` for ``-k <= x <= L + k``.

    :param radii: the localization radius ``D_x`` of every site needed.
    :raises:
        DomainError: if a needed radius is missing.
    """
    K = margin_k(L)
    k = m // 2
    x_l = compute_XL(env, L, K).x_l

    witness_A = _first_violation(radii, range(K, L - K + 1), lambda x: min(x, L - x))
    witness_C = _first_violation(radii, range(0, L + 1), lambda x: min(k + x, L + k - x) / 2)
    witness_D = _first_violation(radii, range(-k, L + k + 1), lambda x: min(m + x, L + m - x))

    return EnvironmentEvents(
        L=L,
        m=m,
        K=K,
        k=k,
        rho=rho,
        x_l=x_l,
        A=witness_A is None,
        B=b_event(x_l, L, rho),
        C=witness_C is None,
        D=witness_D is None,
        witness_A=witness_A,
        witness_C=witness_C,
        witness_D=witness_D,
    )


@dataclass(frozen=True, kw_only=True)
class ScanRow:
    x: int
    r: int
    time_reach: float
    trials: int
    probability: float
    se: float


@dataclass(frozen=True, kw_only=True)
class DisorderScan:
    """
    :param rows: the connectivity ``P((x, 0) reaches d_q-distance r)`` per site and radius.
    :param radii: the empirical localization radius of every scanned site.
    :param censored: sites whose decay never dropped below ``exp(-gamma r)``.
    """
    rows: tuple[ScanRow, ...]
    radii: dict[int, int]
    censored: frozenset[int]
    gamma: float
    q: float


def localization_radius(r_list: Sequence[int], probabilities: Sequence[float], gamma: float) -> int | None:
    """
    :return: the smallest ``r`` such that ``p_r' < exp(-gamma r')`` for every ``r' >= r``,
        or ``None`` if there is none.
    """
    radius = None

    for r, p in sorted(zip(r_list, probabilities), reverse=True):
        if not p < math.exp(-gamma * r):
            break

        radius = r

    return radius


def _site_hits(env: Environment, x: int, r_list: np.ndarray, reach: FloatArray, T: float, trials: int, seed: int):
    r_max = int(r_list[-1])
    box = SpaceTimeBox(x_min=x - r_max, x_max=x + r_max, t_min=-T, t_max=T)
    lam, delta = env.box_rates(box)
    hits = np.zeros(len(r_list), dtype=np.int64)

    for trial in range(trials):
        configuration = sample_percolation(box, lam, delta, derive_seed(seed, TRIAL_STREAM, x - env.x_min, trial))
        labelling = build_clusters(box, configuration, Free())
        dx, dt = cluster_extent(labelling, clusters_meeting(labelling, x, 0.0, 0.0), Point(x, 0.0))
        hits += (dx >= r_list) | (dt >= reach)

    return hits


def disordered_decay_scan(env: Environment,
                          r_list: Sequence[int],
                          *,
                          trials: int,
                          seed: int,
                          gamma: float,
                          q: float = 1.0,
                          sites: Sequence[int] | None = None,
                          time_cap: float = TIME_CAP,
                          workers: int = 1) -> DisorderScan:
    """
    Estimates connectivity from ``(x, 0)`` in the quenched environment.

    For each site a box ``[x - r_max, x + r_max] x [-T, T]`` is sampled ``trials`` times, with
    ``T = min(exp(r_max**(1/q)), time_cap)``. The origin reaches ``d_q``-distance ``r`` when its
    cluster spans ``r`` sites or a time ``min(exp(r**(1/q)), T)``.

    :param sites: the sites to scan; defaults to every site whose box fits in the environment.
    :return: the table and per-site radii; censored sites get ``r_max + 1``.
    """
    r_list = sorted(set(r_list))

    if not r_list or r_list[0] < 1:
        raise ParameterError(f"Radii must be positive, got {r_list}.")

    r_max = r_list[-1]
    T = min(math.exp(r_max ** (1 / q)), time_cap)

    if sites is None:
        sites = range(env.x_min + r_max, env.x_max - r_max + 1)

    reach = np.array([min(math.exp(r ** (1 / q)), T) for r in r_list])
    per_site = Parallel(n_jobs=workers)(
        delayed(_site_hits)(env, x, np.array(r_list), reach, T, trials, seed) for x in sites
    )
    rows, radii, censored = [], {}, set()

    for x, hits in zip(sites, per_site):
        probabilities = hits / trials
        rows += [
            ScanRow(x=x, r=r, time_reach=float(t), trials=trials, probability=float(p), se=binomial_se(float(p), trials))
            for r, t, p in zip(r_list, reach, probabilities)
        ]
        radius = localization_radius(r_list, probabilities, gamma)

        if radius is None:
            censored.add(x)
            radius = r_max + 1

        radii[x] = radius
        logger.debug("Site %d: localization radius %d", x, radius)

    if censored:
        logger.warning("%d site(s) have censored localization radii", len(censored))

    return DisorderScan(rows=tuple(rows), radii=radii, censored=frozenset(censored), gamma=gamma, q=q)


@dataclass(frozen=True, kw_only=True)
class BetaRegime:
    """
    :param required: ``5 exp(m + L/2)``.
    :param beta: the inverse temperature used, capped at ``1e3``.
    :param met: if ``beta`` exceeds the required value.
    """
    required: float
    beta: float
    met: bool


def beta_regime(m: int, L: int, cap: float = BETA_CAP) -> BetaRegime:
    required = 5 * math.exp(m + L / 2)
    beta = min(required + 1.0, cap)
    met = beta > required

    if not met:
        logger.warning("beta=%g is below 5 exp(m + L/2)=%.4g for m=%d, L=%d", beta, required, m, L)

    return BetaRegime(required=required, beta=beta, met=met)


def a_frequency(lambda_spec: DistributionSpec,
                delta_spec: DistributionSpec,
                L_list: Sequence[int],
                radii_of: Callable[[Environment, int], Mapping[int, float]],
                *,
                environments: int,
                seed: int,
                margin: int = 0) -> dict[int, float]:
    """
    :param radii_of: maps an environment on ``[-1 - margin, L + 1 + margin]`` and ``L`` to the
        localization radii of the sites ``K..L-K``.
    :param margin: extra sites drawn on each side, for scans that look past the slit.
    :return: the share of sampled environments in which ``A_L`` holds, per ``L``.
    """
    frequencies = {}

    for L in L_list:
        K = margin_k(L)
        held = 0

        for index in range(environments):
            env = sample_environment(lambda_spec, delta_spec, -1 - margin, L + 1 + margin, derive_seed(seed, L, index))
            held += _first_violation(radii_of(env, L), range(K, L - K + 1), lambda x: min(x, L - x)) is None

        frequencies[L] = held / environments
        logger.info("P(A_%d) ~ %.3f over %d environments", L, frequencies[L], environments)

    return frequencies
