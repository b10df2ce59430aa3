class SimulationError(Exception):
    """
    Base class of every error raised by the runner.

    :param message: a user-facing description of what went wrong.
    """
    exit_code = 1
    kind = "simulation_error"

    def to_json(self) -> dict[str, object]:
        """
        :return: the machine-readable form written by the command line interface.
        """
        return {"error": self.kind, "message": str(self), "exit_code": self.exit_code}


class ParameterError(SimulationError, ValueError):
    """A rate, inverse temperature or count lies outside its admissible range."""
    kind = "parameter_error"


class DomainError(SimulationError, ValueError):
    """A point, site range or box does not lie where an operation needs it."""
    kind = "domain_error"


class SizeError(SimulationError, ValueError):
    """A dense or histogram computation would exceed its size guard."""
    kind = "size_error"


class ValidityError(SimulationError, ValueError):
    """A configuration of deaths and bridges is malformed."""
    kind = "validity_error"


class ConfigError(SimulationError, ValueError):
    kind = "config_error"
    exit_code = 2


class ContractError(SimulationError):
    """A numerical contract (symmetry, residual, Weyl inequality) was violated."""
    kind = "contract_violation"
    exit_code = 3


class InsufficientDataError(SimulationError):
    kind = "insufficient_data"
    exit_code = 4


class UnreliableNormalizerError(InsufficientDataError):
    kind = "unreliable_normalizer"


class FitError(InsufficientDataError):
    kind = "fit_error"


class ConditioningViolationError(SimulationError):
    """A configuration joins boundary parts carrying different spin labels."""
    kind = "conditioning_violation"


class PipelineInapplicableError(SimulationError, ValueError):
    kind = "pipeline_inapplicable"


class SupercriticalError(SimulationError, ValueError):
    kind = "supercritical"
