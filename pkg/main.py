import argparse
import json
import logging
import sys

from config_reader import ConfigReader
from errors import SimulationError
from experiment_application import ExperimentApplication
from experiment_config import BETA_RULES, COMMANDS, LOG_LEVELS, OUTPUT_DIR_VARIABLE


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="the JSON configuration file")
    parser.add_argument("--log-level", dest="log_level", type=str.upper, choices=LOG_LEVELS)

    model = parser.add_argument_group("model")
    model.add_argument("--theta", type=float, help="the ratio lambda/delta, with delta = 1")
    model.add_argument("--lambda", dest="lam", type=float, help="the coupling")
    model.add_argument("--delta", type=float, help="the transverse field")

    geometry = parser.add_argument_group("geometry")
    geometry.add_argument("--m", type=int, help="the margin around the slit")
    geometry.add_argument("--n", type=int, help="the chain length of an exact run")
    geometry.add_argument("--L", type=int, help="the slit length")
    geometry.add_argument("--beta", type=float, help="the inverse temperature")
    geometry.add_argument("--beta-rule", dest="beta_rule", choices=BETA_RULES)
    geometry.add_argument("--K", type=int, help="the factorization margin")
    geometry.add_argument("--m-list", dest="m_list", type=int, nargs="+")
    geometry.add_argument("--L-list", dest="L_list", type=int, nargs="+")

    chain = parser.add_argument_group("chain")
    chain.add_argument("--sweeps", type=int)
    chain.add_argument("--burn-in", dest="burn_in", type=int)
    chain.add_argument("--chains", type=int)
    chain.add_argument("--batches", type=int)
    chain.add_argument("--trials", type=int)

    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int, help="joblib workers; -1 uses every core")
    parser.add_argument("--output-dir", dest="output_dir",
                        help=f"defaults to ${OUTPUT_DIR_VARIABLE}, else ./results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rc-runner",
        description="Random-cluster simulations and exact checks for the transverse-field Ising chain.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    for command in COMMANDS:
        _add_run_flags(subparsers.add_parser(command))

    return parser


def main(argv: list[str] | None = None) -> int:
    """
    Runs one experiment command.

    :return: the exit status: 0 on success, else the exit code of the error raised.
    """
    arguments = vars(build_parser().parse_args(argv))
    command = arguments.pop("command")
    config_filepath = arguments.pop("config")

    logging.basicConfig(
        level=arguments["log_level"] or "WARNING",
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = ConfigReader(config_filepath, command=command, overrides=arguments).read()
        logging.getLogger().setLevel(config.log_level)

        application = ExperimentApplication(config=config)

        for path in application.run():
            print(path)
    except SimulationError as error:
        sys.stderr.write(json.dumps(error.to_json()) + "\n")
        return error.exit_code

    return 0


if __name__ == '__main__':
    sys.exit(main())
