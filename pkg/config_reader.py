import json
import logging
from collections.abc import Mapping
from typing import Any

from disorder import DistributionSpec
from errors import ConfigError
from experiment_config import (
    BranchingParameters,
    ChainParameters,
    DisorderParameters,
    ExperimentConfig,
    GeometryParameters,
    ModelParameters,
    default_output_dir,
)

logger = logging.getLogger(__name__)

# Flat command line flags and the config keys they override
OVERRIDES = {
    "theta": "model.theta",
    "lam": "model.lambda",
    "delta": "model.delta",
    "m": "geometry.m",
    "n": "geometry.n",
    "L": "geometry.L",
    "beta": "geometry.beta",
    "beta_rule": "geometry.beta_rule",
    "K": "geometry.K",
    "m_list": "geometry.m_list",
    "L_list": "geometry.L_list",
    "sweeps": "chain.sweeps",
    "burn_in": "chain.burn_in",
    "chains": "chain.chains",
    "batches": "chain.batches",
    "trials": "chain.trials",
    "seed": "seed",
    "workers": "workers",
    "output_dir": "output_dir",
    "log_level": "log_level",
}

# Keys each command cannot run without
REQUIRED_KEYS = {
    "decay-scan": ("geometry.m_list",),
    "rdm": ("geometry.m", "geometry.L"),
    "norm-decay": ("geometry.L", "geometry.m_list"),
    "entropy-scan": ("geometry.L_list",),
    "mixing-check": ("geometry.m", "geometry.L"),
    "branching": (),
    "disorder-scan": ("geometry.m", "geometry.L"),
    "oracle": ("geometry.m", "geometry.L"),
}


def _require_key(config: Mapping, key_path: str, command: str, source: str):
    """
    :param key_path: a dotted path such as ``geometry.L``.
    :raises:
        ConfigError: if any key on the path is missing from the merged config.
    """
    node = config

    for key in key_path.split("."):
        if not isinstance(node, Mapping) or key not in node:
            raise ConfigError(f"Command '{command}' needs key '{key_path}', which {source} does not set.")

        node = node[key]


def _set_path(config: dict[str, Any], key_path: str, value: Any):
    *parents, key = key_path.split(".")

    for parent in parents:
        config = config.setdefault(parent, {})

    config[key] = value


def _distribution(value: Any, key_path: str) -> DistributionSpec:
    if not isinstance(value, Mapping) or "name" not in value:
        raise ConfigError(f"'{key_path}' must be an object with a 'name' and 'params'.")

    return DistributionSpec(name=value["name"], params=value.get("params", {}))


class ConfigReader:
    """
    Reads the experiment configuration from the JSON file specified by the
    ``config_filepath`` parameter, with flat command line overrides on top.
    """

    def __init__(self, config_filepath: str | None, *, command: str, overrides: Mapping[str, Any] | None = None):
        """
        :param config_filepath: the path of the configuration JSON file, or ``None`` for defaults only.
        :param command: the command being run.
        :param overrides: flag values keyed as in ``OVERRIDES``; ``None`` values are ignored.
        """
        self.config_filepath = config_filepath
        self.command = command
        self.overrides = {key: value for key, value in (overrides or {}).items() if value is not None}

    @property
    def _source(self) -> str:
        return self.config_filepath or "the command line"

    def _load(self) -> dict[str, Any]:
        if self.config_filepath is None:
            return {}

        try:
            with open(self.config_filepath) as file:
                config_dict = json.load(file)
        except OSError as error:
            raise ConfigError(f"Cannot read {self.config_filepath}: {error.strerror}") from error
        except json.JSONDecodeError as error:
            raise ConfigError(f"{self.config_filepath} is not valid JSON: {error}") from error

        if not isinstance(config_dict, dict):
            raise ConfigError(f"{self.config_filepath} must hold a JSON object.")

        return config_dict

    def _merged(self) -> dict[str, Any]:
        config_dict = self._load()

        for flag, value in self.overrides.items():
            if flag not in OVERRIDES:
                raise ConfigError(f"Unknown override '{flag}'.")

            model = config_dict.setdefault("model", {})

            # theta and (lambda, delta) are alternative forms of the model
            if flag == "theta":
                model.pop("lambda", None)
                model.pop("delta", None)
            elif flag in ("lam", "delta"):
                model.pop("theta", None)

            _set_path(config_dict, OVERRIDES[flag], value)

        return config_dict

    def _model(self, model: Mapping[str, Any]) -> ModelParameters:
        if "theta" in model:
            if "lambda" in model or "delta" in model:
                raise ConfigError(f"Give either 'model.theta' or 'model.lambda'/'model.delta' in {self._source}.")

            return ModelParameters.from_theta(float(model["theta"]))

        return ModelParameters(lam=float(model.get("lambda", 1.0)), delta=float(model.get("delta", 1.0)))

    def read(self) -> ExperimentConfig:
        """
        Creates the ``ExperimentConfig`` of the run.

        :return: the validated configuration.
        :raises:
            ConfigError: if the file is unreadable, a required key is missing or a value is invalid.
        """
        config_dict = self._merged()

        for key_path in REQUIRED_KEYS.get(self.command, ()):
            _require_key(config_dict, key_path, self.command, self._source)

        geometry = config_dict.get("geometry", {})
        chain = config_dict.get("chain", {})
        disorder = config_dict.get("disorder", {})
        branching = config_dict.get("branching", {})

        try:
            disorder_parameters = DisorderParameters(
                **{key: disorder[key] for key in ("x_min", "x_max", "environments") if key in disorder},
                **{key: float(disorder[key]) for key in ("rho", "gamma", "q") if key in disorder},
                **({"r_list": tuple(int(r) for r in disorder["r_list"])} if "r_list" in disorder else {}),
                **({"lambda_dist": _distribution(disorder["lambda_dist"], "disorder.lambda_dist")}
                   if "lambda_dist" in disorder else {}),
                **({"delta_dist": _distribution(disorder["delta_dist"], "disorder.delta_dist")}
                   if "delta_dist" in disorder else {}),
            )

            config = ExperimentConfig(
                command=self.command,
                seed=int(config_dict.get("seed", 0)),
                output_dir=str(config_dict.get("output_dir", default_output_dir())),
                workers=int(config_dict.get("workers", 1)),
                log_level=str(config_dict.get("log_level", "WARNING")).upper(),
                model=self._model(config_dict.get("model", {})),
                geometry=GeometryParameters(
                    **{key: int(geometry[key]) for key in ("m", "n", "L", "K") if key in geometry},
                    **({"beta": float(geometry["beta"])} if "beta" in geometry else {}),
                    **({"beta_rule": str(geometry["beta_rule"])} if "beta_rule" in geometry else {}),
                    **{key: tuple(int(v) for v in geometry[key]) for key in ("m_list", "L_list") if key in geometry},
                ),
                chain=ChainParameters(**{key: int(value) for key, value in chain.items()}),
                disorder=disorder_parameters,
                branching=BranchingParameters(
                    **({"delta_list": tuple(float(d) for d in branching["delta_list"])}
                       if "delta_list" in branching else {}),
                    **({"thresholds": tuple(int(t) for t in branching["thresholds"])}
                       if "thresholds" in branching else {}),
                ),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as error:
            raise ConfigError(f"Invalid value in {self._source}: {error}") from error

        logger.debug("Resolved configuration: %s", config)

        return config
