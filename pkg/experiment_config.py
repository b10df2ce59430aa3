import os
from dataclasses import asdict, dataclass, field

from disorder import DistributionSpec
from errors import ConfigError
from rc_sampler import DEFAULT_BURN_IN

COMMANDS = ("decay-scan", "rdm", "norm-decay", "entropy-scan", "mixing-check", "branching", "disorder-scan", "oracle")
BETA_RULES = ("default", "lemma")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
OUTPUT_DIR_VARIABLE = "RC_RUNNER_OUTPUT_DIR"


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_VARIABLE, "results")


@dataclass(frozen=True, kw_only=True)
class ModelParameters:
    """
    A dataclass containing the rates of the uniform chain.

    :param lam: the coupling (bridge rate).
    :param delta: the transverse field (death rate).
    :param theta: the ratio ``lam / delta`` when the model was given as ``theta``.
    """
    lam: float = 1.0
    delta: float = 1.0
    theta: float | None = None

    def __post_init__(self):
        """
        :raises:
            ConfigError: if ``lam`` or ``delta`` is not positive.
        """
        if not (self.lam > 0 and self.delta > 0):
            raise ConfigError(f"Model needs lambda > 0 and delta > 0, got lambda={self.lam}, delta={self.delta}.")

    @classmethod
    def from_theta(cls, theta: float):
        return cls(lam=theta, delta=1.0, theta=theta)


@dataclass(frozen=True, kw_only=True)
class GeometryParameters:
    """
    :param m: the margin around the slit.
    :param n: the chain length of an exact run; defaults to ``2m + L + 1``.
    :param L: the slit length.
    :param beta: the inverse temperature; when absent, ``beta_rule`` picks it.
    :param beta_rule: ``default`` (max of the lemma regime and the gap proxy) or ``lemma`` (``4(m+L+1)``).
    :param K: the factorization margin; defaults to ``ceil(ln L)``.
    """
    m: int | None = None
    n: int | None = None
    L: int | None = None
    beta: float | None = None
    beta_rule: str = "default"
    m_list: tuple[int, ...] = ()
    L_list: tuple[int, ...] = ()
    K: int | None = None

    def __post_init__(self):
        """
        :raises:
            ConfigError: if a size is negative, ``beta`` is not positive or the rule is unknown.
        """
        sizes = [value for value in (self.m, self.n, self.L, self.K) if value is not None]

        if any(value < 0 for value in [*sizes, *self.m_list, *self.L_list]):
            raise ConfigError("Geometry sizes must be non-negative.")

        if self.beta is not None and not self.beta > 0:
            raise ConfigError(f"'geometry.beta' must be positive, got {self.beta}.")

        if self.beta_rule not in BETA_RULES:
            raise ConfigError(f"'geometry.beta_rule' must be one of {BETA_RULES}, got '{self.beta_rule}'.")


@dataclass(frozen=True, kw_only=True)
class ChainParameters:
    """
    :param sweeps: the retained sweeps per chain.
    :param burn_in: the sweeps discarded first.
    :param chains: the number of independent chains.
    :param batches: the batches per chain for batch-means errors.
    :param trials: the independent samples of percolation runs.
    """
    sweeps: int = 1000
    burn_in: int = DEFAULT_BURN_IN
    chains: int = 1
    batches: int = 20
    trials: int = 1000

    def __post_init__(self):
        if self.sweeps < 1 or self.burn_in < 0 or self.chains < 1 or self.batches < 1 or self.trials < 1:
            raise ConfigError("Chain parameters need sweeps, chains, batches, trials >= 1 and burn_in >= 0.")


@dataclass(frozen=True, kw_only=True)
class DisorderParameters:
    """
    :param lambda_dist: the distribution of the couplings.
    :param delta_dist: the distribution of the fields.
    :param x_min: the leftmost site of the environment.
    :param x_max: the rightmost site of the environment.
    :param rho: the exponent of the ``X_L`` event.
    :param gamma: the decay rate defining localization radii.
    :param r_list: the radii of the decay scan.
    :param environments: the environments sampled for ``P(A_L)``.
    :param q: the exponent of the time term of ``d_q``.
    """
    lambda_dist: DistributionSpec = field(default_factory=lambda: DistributionSpec(name="uniform", params={"low": 0.05, "high": 0.2}))
    delta_dist: DistributionSpec = field(default_factory=lambda: DistributionSpec.constant(1.0))
    x_min: int = -8
    x_max: int = 16
    rho: float = 1.0
    gamma: float = 0.5
    r_list: tuple[int, ...] = (1, 2, 3, 4)
    environments: int = 20
    q: float = 1.0

    def __post_init__(self):
        if self.x_min > self.x_max or self.environments < 1 or not self.gamma > 0 or self.q < 1:
            raise ConfigError("Disorder parameters need x_min <= x_max, environments >= 1, gamma > 0 and q >= 1.")


@dataclass(frozen=True, kw_only=True)
class BranchingParameters:
    """
    :param delta_list: the death rates swept at the model's ``lambda``.
    :param thresholds: the progeny sizes the simulated tail is read at.
    """
    delta_list: tuple[float, ...] = (2.0, 4.0, 8.0)
    thresholds: tuple[int, ...] = (2, 4, 8, 16, 32)

    def __post_init__(self):
        if any(not delta > 0 for delta in self.delta_list) or any(t < 1 for t in self.thresholds):
            raise ConfigError("Branching needs positive deltas and thresholds >= 1.")


@dataclass(frozen=True, kw_only=True)
class ExperimentConfig:
    """
    A dataclass containing the fully resolved configuration of one run.

    :param command: the CLI command.
    :param seed: the run seed every stream derives from.
    :param output_dir: the directory the CSV files are written to.
    :param workers: the joblib worker count.
    :param log_level: the root logging level.
    """
    command: str
    seed: int = 0
    output_dir: str = field(default_factory=default_output_dir)
    workers: int = 1
    log_level: str = "WARNING"
    model: ModelParameters = field(default_factory=ModelParameters)
    geometry: GeometryParameters = field(default_factory=GeometryParameters)
    chain: ChainParameters = field(default_factory=ChainParameters)
    disorder: DisorderParameters = field(default_factory=DisorderParameters)
    branching: BranchingParameters = field(default_factory=BranchingParameters)

    def __post_init__(self):
        """
        :raises:
            ConfigError: if the command is unknown, the seed is negative or ``workers`` is 0.
        """
        if self.command not in COMMANDS:
            raise ConfigError(f"Unknown command '{self.command}'; expected one of {COMMANDS}.")

        if self.seed < 0 or self.workers == 0:
            raise ConfigError(f"Need seed >= 0 and workers != 0, got seed={self.seed}, workers={self.workers}.")

        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f"Unknown log level '{self.log_level}'.")

    def to_json(self) -> dict:
        """
        :return: the configuration as plain JSON types, for provenance headers.
        """
        return asdict(self)
