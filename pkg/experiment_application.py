import logging
import math
from pathlib import Path

from bounds import (
    BranchingParams,
    EntropyBoundInputs,
    decay_rate_bound,
    entropy_bound_pipeline,
    fit_decay_rate,
    simulate_branching,
    simulated_tail_slope,
)
from custom_types import SpinVector
from disorder import beta_regime, disordered_decay_scan, environment_events, margin_k, sample_environment
from errors import ConfigError, FitError, InsufficientDataError, PipelineInapplicableError, SupercriticalError
from estimators import (
    MAX_HISTOGRAM_L,
    default_beta,
    entropy_scaling_experiment,
    estimate_rdm,
    exact_norm_decay,
    fit_bound_constants,
    norm_decay_experiment,
)
from experiment_config import ExperimentConfig
from mixing import SeparatorGeometry, boundary_influence, factorization_ratio, t_quantities
from percolation import connectivity_scan
from quantum_oracle import (
    FULL_SPECTRUM_DIMENSION,
    MAX_SPINS,
    block_sites,
    chain_ground_state,
    chain_hamiltonian,
    entropy,
    op_norm_diff,
    reduce,
    reduced_thermal_state,
    spectral_gap,
    spectrum,
)
from serialization import provenance, write_environment, write_table
from utils import derive_seed

logger = logging.getLogger(__name__)


def slit_agrees(upper: SpinVector, lower: SpinVector) -> bool:
    """
    The slit event of the boundary influence check: every site reads the same spin on
    both sides of the slit.
    """
    return upper == lower


def lemma_beta(m: int, L: int, theta: float, delta: float = 1.0) -> float:
    return 4.0 * (m + L + 1)


class ExperimentApplication:
    """
    Runs one experiment command and writes its CSV tables.
    """

    def __init__(self, *, config: ExperimentConfig):
        """
        :param config: the resolved configuration of the run.
        """
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.lam = config.model.lam
        self.delta = config.model.delta
        self.theta = self.lam / self.delta
        self.beta_rule = default_beta if config.geometry.beta_rule == "default" else lemma_beta
        self.artifacts: list[Path] = []

    @property
    def chain_options(self) -> dict:
        chain = self.config.chain

        return dict(
            sweeps=chain.sweeps,
            chains=chain.chains,
            burn_in=chain.burn_in,
            batches=chain.batches,
            workers=self.config.workers,
        )

    def _beta(self, m: int, L: int) -> float:
        if self.config.geometry.beta is not None:
            return self.config.geometry.beta

        return self.beta_rule(m, L, self.theta, self.delta)

    def _write(self, name: str, columns, rows) -> Path:
        header = provenance(self.config.command, self.config.to_json(), {"seed": self.config.seed})
        path = write_table(self.output_dir / name, columns, rows, header)
        self.artifacts.append(path)

        return path

    def run(self) -> list[Path]:
        """
        Runs the configured command to completion.

        :return: the paths of the files written.
        """
        commands = {
            "decay-scan": self.decay_scan,
            "rdm": self.rdm,
            "norm-decay": self.norm_decay,
            "entropy-scan": self.entropy_scan,
            "mixing-check": self.mixing_check,
            "branching": self.branching,
            "disorder-scan": self.disorder_scan,
            "oracle": self.oracle,
        }

        logger.info("Running '%s' with seed %d", self.config.command, self.config.seed)
        commands[self.config.command]()
        logger.info("'%s' wrote %d file(s) to %s", self.config.command, len(self.artifacts), self.output_dir)

        return self.artifacts

    def decay_scan(self):
        geometry, chain = self.config.geometry, self.config.chain
        estimates = connectivity_scan(self.lam, self.delta, geometry.m_list, chain.trials, self.config.seed)

        self._write(
            "decay_scan.csv",
            ("lambda", "delta", "m", "trials", "hits", "probability", "se"),
            [(e.lam, e.delta, e.m, e.trials, e.hits, e.probability, e.se) for e in estimates],
        )

        try:
            fit = fit_decay_rate([(e.m, e.probability, e.se) for e in estimates])
        except FitError as error:
            logger.warning("No decay fit: %s", error)
            fit = None

        try:
            bound = decay_rate_bound(self.lam, self.delta)
        except SupercriticalError as error:
            logger.warning("No decay rate bound: %s", error)
            bound = None

        self._write(
            "decay_fit.csv",
            ("lambda", "delta", "mbar", "gamma_hat", "gamma_se", "n_points", "nu", "u_star", "gamma_lower"),
            [(
                self.lam,
                self.delta,
                4 * self.lam / self.delta,
                fit and fit.gamma,
                fit and fit.gamma_se,
                fit.n_points if fit else 0,
                bound and bound.nu,
                bound and bound.u_star,
                bound and bound.gamma_lower,
            )],
        )

    def rdm(self):
        geometry = self.config.geometry
        m, L = geometry.m, geometry.L
        beta = self._beta(m, L)
        estimate = estimate_rdm(m, L, beta, self.lam, self.delta, seed=self.config.seed, **self.chain_options)
        exact = reduced_thermal_state(m, L, self.lam, self.delta, beta) if 2 * m + L + 1 <= MAX_SPINS else None
        dimension = estimate.rho.dimension
        rows = []

        for i in range(dimension):
            for j in range(dimension):
                value, se = estimate.rho.matrix[i, j], estimate.se[i, j]
                reference = exact.matrix[i, j] if exact is not None else None
                z = (value - reference) / se if reference is not None and se > 0 else None
                rows.append((i, j, value, se, reference, z))

        self._write("rdm.csv", ("row", "col", "rho_hat", "se", "rho_exact", "z"), rows)
        self._write(
            "rdm_summary.csv",
            ("m", "L", "beta", "lambda", "delta", "a", "a_se", "entropy", "entropy_se", "S_exact", "norm_diff",
             "trace_drift", "regime_warning"),
            [(
                m,
                L,
                beta,
                self.lam,
                self.delta,
                estimate.a,
                estimate.a_se,
                estimate.entropy,
                estimate.entropy_se,
                entropy(exact) if exact is not None else None,
                op_norm_diff(estimate.rho, exact) if exact is not None else None,
                estimate.trace_drift,
                estimate.regime_warning,
            )],
        )

    def norm_decay(self):
        geometry = self.config.geometry
        columns = ("theta", "L", "m", "n", "norm", "se", "censored")
        result = norm_decay_experiment(
            self.theta,
            geometry.L,
            geometry.m_list,
            beta_rule=lambda m, L, theta: self._beta(m, L),
            seed=self.config.seed,
            **self.chain_options,
        )
        self._write("norm_decay.csv", columns, [
            (row.theta, row.L, row.m, row.n, row.norm, row.se, row.censored) for row in result.rows
        ])

        if 2 * max(geometry.m_list) + geometry.L + 1 <= MAX_SPINS:
            exact = exact_norm_decay(self.theta, geometry.L, geometry.m_list, beta=geometry.beta)
            self._write("norm_decay_exact.csv", columns, [
                (row.theta, row.L, row.m, row.n, row.norm, row.se, row.censored) for row in exact.rows
            ])

    def entropy_scan(self):
        geometry = self.config.geometry
        constants = None

        if geometry.m_list:
            try:
                constants = fit_bound_constants(self.theta, geometry.L_list, geometry.m_list)
                logger.info("Empirical constants: gamma=%.4g alpha=%.4g C=%.4g",
                            constants.gamma, constants.alpha, constants.C)
            except FitError as error:
                logger.warning("No bound constants: %s", error)

        rows = entropy_scaling_experiment(
            self.theta,
            geometry.L_list,
            m_rule=(lambda L: geometry.m) if geometry.m is not None else (lambda L: L),
            beta_rule=lambda m, L, theta: self._beta(m, L),
            constants=constants,
            seed=self.config.seed,
            **self.chain_options,
        )
        self._write(
            "entropy_scaling.csv",
            ("theta", "L", "m", "beta", "S_mc", "se", "S_exact", "bound"),
            [(r.theta, r.L, r.m, r.beta, r.S_mc, r.se, r.S_exact, r.bound) for r in rows],
        )

        bound_rows = []

        for row in rows:
            if constants is None:
                break

            try:
                inputs = EntropyBoundInputs(gamma=constants.gamma, alpha=constants.alpha, C=constants.C, L=row.L)
                bound = entropy_bound_pipeline(inputs, row.m)
            except PipelineInapplicableError as error:
                logger.warning("Entropy bound not applicable: %s", error)
                break

            bound_rows.append((row.L, inputs.gamma, inputs.alpha, inputs.C, bound.K, bound.nu, bound.uniform_bound))

        self._write("entropy_bound.csv", ("L", "gamma", "alpha", "C", "K", "nu", "bound"), bound_rows)

    def mixing_check(self):
        geometry = self.config.geometry
        m, L = geometry.m, geometry.L
        beta = self._beta(m, L)
        K = geometry.K if geometry.K is not None else (math.ceil(math.log(L)) if L > 1 else 0)
        K = min(K, L // 2)
        seed = self.config.seed
        rows = []

        if L > MAX_HISTOGRAM_L:
            logger.warning("Skipping factorization: L=%d exceeds the histogram guard", L)
        else:
            try:
                result = factorization_ratio(m, L, beta, self.lam, self.delta, K=K, seed=derive_seed(seed, 0),
                                             **self.chain_options)
                rows.append(("factorization", m, L, result.K, beta, result.max_deviation, result.se, result.bound_form))
            except InsufficientDataError as error:
                logger.warning("Skipping factorization: %s", error)

        options = self.chain_options
        options.pop("batches")
        t = t_quantities(SeparatorGeometry.equator(m, L, beta, K), self.lam, self.delta,
                         trials=self.config.chain.trials, seed=derive_seed(seed, 1), **options)
        ratio_form = "2(t1+2t2+(t1+t2)/(1-t1-2t2))"
        rows += [
            ("t1", m, L, K, beta, t.t1, t.t1_se, "wired at separator"),
            ("t2_sq", m, L, K, beta, t.t2_sq, t.t2_sq_se, "wired at separator"),
            ("t1_percolation", m, L, K, beta, t.t1_percolation, t.t1_percolation_se, "q=1 comparison"),
            ("t2_sq_percolation", m, L, K, beta, t.t2_sq_percolation, t.t2_sq_percolation_se, "q=1 comparison"),
            ("ratio_mixing_bound", m, L, K, beta, t.bound, None, ratio_form),
        ]

        try:
            influence = boundary_influence(m, L, beta, self.lam, self.delta, slit_agrees,
                                           seed=derive_seed(seed, 2), **options)
            rows.append(("boundary_influence", m, L, K, beta, influence.deviation, influence.se,
                         "C*exp(-2*gamma*m/7)"))
        except InsufficientDataError as error:
            logger.warning("Skipping boundary influence: %s", error)

        self._write("mixing.csv", ("check", "m", "L", "K", "beta", "value", "se", "bound_form"), rows)

    def branching(self):
        parameters = self.config.branching
        rows = []

        for index, delta in enumerate(parameters.delta_list):
            params = BranchingParams(lam=self.lam, delta=delta)
            sample = simulate_branching(params, self.config.chain.trials, derive_seed(self.config.seed, index))

            try:
                nu_hat = simulated_tail_slope(sample.progeny, parameters.thresholds)
            except FitError as error:
                logger.warning("delta=%g: no simulated tail slope: %s", delta, error)
                nu_hat = None

            try:
                gamma_lower = decay_rate_bound(self.lam, delta).gamma_lower
            except SupercriticalError:
                gamma_lower = None

            rows.append((self.lam, delta, params.mean_offspring, nu_hat, gamma_lower))
            logger.info("lambda=%g delta=%g: nu_hat=%s gamma_lower=%s", self.lam, delta, nu_hat, gamma_lower)

        self._write("branching.csv", ("lambda", "delta", "mbar", "nu_hat", "gamma_lower"), rows)

    def disorder_scan(self):
        geometry, disorder = self.config.geometry, self.config.disorder
        m, L = geometry.m, geometry.L

        if L < 8:
            raise ConfigError(f"'geometry.L' must be at least 8 for the environment events, got {L}.")

        k = m // 2
        r_max = max(disorder.r_list)
        x_min = min(disorder.x_min, -k - r_max - 1)
        x_max = max(disorder.x_max, L + k + r_max + 1)

        if (x_min, x_max) != (disorder.x_min, disorder.x_max):
            logger.info("Widened the environment to [%d, %d] to fit the scan boxes", x_min, x_max)

        env = sample_environment(disorder.lambda_dist, disorder.delta_dist, x_min, x_max, self.config.seed)
        header = provenance(self.config.command, self.config.to_json(), {"seed": self.config.seed})
        self.artifacts.append(write_environment(self.output_dir / "environment.csv", env, header))

        scan = disordered_decay_scan(
            env,
            disorder.r_list,
            trials=self.config.chain.trials,
            seed=derive_seed(self.config.seed, 1),
            gamma=disorder.gamma,
            q=disorder.q,
            sites=range(-k, L + k + 1),
            workers=self.config.workers,
        )
        self._write(
            "disorder_scan.csv",
            ("x", "r", "time_reach", "trials", "probability", "se", "radius", "censored"),
            [
                (row.x, row.r, row.time_reach, row.trials, row.probability, row.se, scan.radii[row.x],
                 row.x in scan.censored)
                for row in scan.rows
            ],
        )

        events = environment_events(env, L, m, scan.radii, rho=disorder.rho)
        regime = beta_regime(m, L)
        logger.info("K=%d: A=%s B=%s C=%s D=%s, beta=%g (regime met: %s)",
                    margin_k(L), events.A, events.B, events.C, events.D, regime.beta, regime.met)
        self._write(
            "disorder_events.csv",
            ("L", "m", "A", "B", "C", "D", "X_L"),
            [(L, m, events.A, events.B, events.C, events.D, events.x_l)],
        )

    def oracle(self):
        geometry = self.config.geometry
        m, L = geometry.m, geometry.L
        n = geometry.n if geometry.n is not None else 2 * m + L + 1

        if n != 2 * m + L + 1:
            raise ConfigError(f"'geometry.n' must equal 2m + L + 1 = {2 * m + L + 1}, got {n}.")

        lam_edges, delta_sites = [self.lam] * (n - 1), [self.delta] * n
        energy, vector = chain_ground_state(n, lam_edges, delta_sites)
        rho = reduce(vector, block_sites(m, L), n)
        rows = [("rdm", index, value) for index, value in enumerate(rho.eigenvalues().tolist())]
        gap = thermal_entropy = None

        if 1 << n <= FULL_SPECTRUM_DIMENSION:
            hamiltonian = chain_hamiltonian(n, self.lam, self.delta)
            energies = spectrum(hamiltonian).values[::-1]
            rows = [("energy", index, value) for index, value in enumerate(energies.tolist())] + rows
            gap = spectral_gap(hamiltonian)

            if geometry.beta is not None:
                thermal_entropy = entropy(reduced_thermal_state(m, L, self.lam, self.delta, geometry.beta))
        else:
            logger.info("n=%d exceeds the dense spectrum guard; writing the ground state only", n)

        self._write("oracle_spectrum.csv", ("kind", "index", "value"), rows)
        self._write(
            "oracle_summary.csv",
            ("n", "m", "L", "lambda", "delta", "E0", "gap", "entropy", "beta", "entropy_thermal"),
            [(n, m, L, self.lam, self.delta, energy, gap, entropy(rho), geometry.beta, thermal_entropy)],
        )
