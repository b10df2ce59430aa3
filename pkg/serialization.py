import csv
import json
import logging
import subprocess
from collections.abc import Iterable, Mapping, Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from custom_types import FloatArray
from disorder import DistributionSpec, Environment
from errors import ValidityError
from percolation import BoundaryRule, Configuration, SpaceTimeBox, build_clusters
from rc_sampler import ChainState, SpinConfiguration, spins_consistent

logger = logging.getLogger(__name__)

PROVENANCE_PREFIX = "# "
ENVIRONMENT_COLUMNS = ("x", "delta_x", "lambda_x_xplus1")


def git_describe() -> str:
    """
    :return: ``git describe --always --dirty`` of the working tree, or ``unknown`` outside a repository.
    """
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            check=True,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.CalledProcessError):
        return "unknown"

    return result.stdout.strip() or "unknown"


def provenance(command: str, config: Mapping[str, Any], seeds: Mapping[str, int] | None = None) -> dict[str, Any]:
    """
    Builds the provenance record echoed at the top of every output file.

    :param command: the CLI command that produced the file.
    :param config: the fully resolved configuration.
    :param seeds: the seeds used, by purpose.
    """
    return {
        "command": command,
        "config": dict(config),
        "seeds": dict(seeds or {}),
        "git": git_describe(),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))

    return str(value)


def write_table(path: str | Path,
                columns: Sequence[str],
                rows: Iterable[Sequence[Any]],
                header: Mapping[str, Any] | None = None) -> Path:
    """
    Writes a CSV table whose first line is ``# {json header}``.

    Floats are written with ``repr`` so the body is reproducible byte for byte.

    :return: the path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w", newline="") as file:
        if header is not None:
            file.write(PROVENANCE_PREFIX + json.dumps(header, sort_keys=True) + "\n")

        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows([_cell(value) for value in row] for row in rows)

    logger.info("Wrote %s", path)

    return path


def read_table(path: str | Path) -> tuple[dict[str, Any] | None, list[dict[str, str]]]:
    """
    Reads a table written by :func:`write_table`.

    :return: the header (``None`` if absent) and the rows keyed by column.
    :raises:
        ValidityError: if the header line is not JSON.
    """
    with open(path, newline="") as file:
        first = file.readline()
        header = None

        if first.startswith(PROVENANCE_PREFIX):
            try:
                header = json.loads(first[len(PROVENANCE_PREFIX):])
            except json.JSONDecodeError as error:
                raise ValidityError(f"Malformed provenance line in {path}: {error}") from error
        else:
            file.seek(0)

        return header, list(csv.DictReader(file))


def parse_bool(cell: str) -> bool:
    return cell.strip().lower() == "true"


def parse_optional_float(cell: str) -> float | None:
    return float(cell) if cell.strip() else None


def write_matrix_csv(path: str | Path, matrix: FloatArray, header: Mapping[str, Any] | None = None) -> Path:
    """
    Writes a real matrix row-major with 17 significant digits.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    comment = json.dumps(header, sort_keys=True) if header is not None else ""

    np.savetxt(path, matrix, fmt="%.17g", delimiter=",", header=comment, comments=PROVENANCE_PREFIX if comment else "")
    logger.info("Wrote %s", path)

    return path


def read_matrix_csv(path: str | Path) -> FloatArray:
    """
    :return: the matrix in a file written by :func:`write_matrix_csv`.
    """
    return np.loadtxt(path, delimiter=",", ndmin=2, comments="#")


def _box_line(box: SpaceTimeBox) -> str:
    slit = "-" if box.slit_len is None else str(box.slit_len)

    return f"box {box.x_min} {box.x_max} {box.t_min!r} {box.t_max!r} {slit} {int(box.time_identification)}"


def _configuration_lines(box: SpaceTimeBox, configuration: Configuration, seed: int) -> list[str]:
    lines = [_box_line(box), f"seed {seed}"]
    lines += [f"D {x} {t!r}" for x, times in zip(box.sites, configuration.deaths) for t in times.tolist()]
    lines += [f"B {x} {t!r}" for x, times in zip(box.sites, configuration.bridges) for t in times.tolist()]

    return lines


def write_configuration(path: str | Path, box: SpaceTimeBox, configuration: Configuration, seed: int) -> Path:
    """
    Writes ``D x t`` and ``B x t`` records (a bridge ``B x t`` joins ``x`` and ``x+1``),
    sorted by site then time, after a ``box`` and a ``seed`` line.
    """
    path = Path(path)
    path.write_text("\n".join(_configuration_lines(box, configuration, seed)) + "\n")

    return path


def _fields(line_number: int, line: str, count: int) -> list[str]:
    fields = line.split()

    if len(fields) != count:
        raise ValidityError(f"Line {line_number}: expected {count} fields in '{line}'.")

    return fields


def _parse_records(path: str | Path) -> tuple[SpaceTimeBox, int, dict[str, list[tuple[str, ...]]]]:
    box, seed = None, None
    records: dict[str, list[tuple[str, ...]]] = {"D": [], "B": [], "S": [], "sweep": []}

    with open(path) as file:
        for line_number, line in enumerate(file, start=1):
            line = line.strip()

            if not line or line.startswith("#"):
                continue

            tag = line.split()[0]

            try:
                if tag == "box":
                    _, x_min, x_max, t_min, t_max, slit, identified = _fields(line_number, line, 7)
                    box = SpaceTimeBox(
                        x_min=int(x_min),
                        x_max=int(x_max),
                        t_min=float(t_min),
                        t_max=float(t_max),
                        slit_len=None if slit == "-" else int(slit),
                        time_identification=bool(int(identified)),
                    )
                elif tag == "seed":
                    seed = int(_fields(line_number, line, 2)[1])
                elif tag in records:
                    records[tag].append(tuple(_fields(line_number, line, 2 if tag == "sweep" else 3)[1:]))
                else:
                    raise ValidityError(f"Line {line_number}: unknown record '{tag}'.")
            except ValueError as error:
                if isinstance(error, ValidityError):
                    raise

                raise ValidityError(f"Line {line_number}: cannot parse '{line}': {error}") from error

    if box is None or seed is None:
        raise ValidityError(f"{path} is missing its 'box' or 'seed' line.")

    return box, seed, records


def _configuration_from(box: SpaceTimeBox, records: dict[str, list[tuple[str, ...]]]) -> Configuration:
    deaths = [[] for _ in range(box.num_lines)]
    bridges = [[] for _ in range(box.num_pairs)]

    for x, t in records["D"]:
        deaths[box.line_index(int(x))].append(float(t))

    for x, t in records["B"]:
        index = box.line_index(int(x))

        if index >= box.num_pairs:
            raise ValidityError(f"Bridge at x={x} has no right neighbour in the box.")

        bridges[index].append(float(t))

    configuration = Configuration(
        deaths=tuple(np.sort(times) for times in deaths),
        bridges=tuple(np.sort(times) for times in bridges),
    )
    configuration.validate(box)

    return configuration


def read_configuration(path: str | Path) -> tuple[SpaceTimeBox, Configuration, int]:
    """
    :return: the box, the configuration and the seed stored in ``path``.
    :raises:
        ValidityError: if a record is malformed or the configuration is not admissible.
    """
    box, seed, records = _parse_records(path)

    return box, _configuration_from(box, records), seed


def write_checkpoint(path: str | Path, state: ChainState) -> Path:
    """
    Writes a chain state: its configuration records plus ``sweep`` and one
    ``S interval spin`` record per interval.
    """
    lines = _configuration_lines(state.box, state.configuration, state.seed)
    lines.append(f"sweep {state.sweep}")
    lines += [f"S {interval} {int(spin)}" for interval, spin in enumerate(state.spins.spins.tolist())]

    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    logger.debug("Checkpointed sweep %d to %s", state.sweep, path)

    return path


def read_checkpoint(path: str | Path, rule: BoundaryRule) -> ChainState:
    """
    Restores a chain state written by :func:`write_checkpoint`. Continuing it gives the
    same sweeps as the uninterrupted chain.

    :param rule: the counting rule the chain runs under.
    :raises:
        ValidityError: if the records are malformed or the spins are not constant on clusters.
    """
    box, seed, records = _parse_records(path)
    configuration = _configuration_from(box, records)
    labelling = build_clusters(box, configuration, rule)

    if len(records["sweep"]) != 1:
        raise ValidityError(f"{path} needs exactly one 'sweep' record.")

    spins = np.zeros(labelling.num_intervals, dtype=np.int64)
    seen = np.zeros(labelling.num_intervals, dtype=bool)

    for interval, spin in records["S"]:
        index = int(interval)

        if not 0 <= index < labelling.num_intervals:
            raise ValidityError(f"Spin record for unknown interval {index}.")

        spins[index] = int(spin)
        seen[index] = True

    if not np.all(seen) or not spins_consistent(labelling, spins):
        raise ValidityError(f"Spins in {path} are incomplete or not constant on clusters.")

    spins.flags.writeable = False

    return ChainState(
        box=box,
        rule=rule,
        configuration=configuration,
        labelling=labelling,
        spins=SpinConfiguration(labelling=labelling, spins=spins),
        sweep=int(records["sweep"][0][0]),
        seed=seed,
    )


def write_environment(path: str | Path, env: Environment, header: Mapping[str, Any] | None = None) -> Path:
    """
    Writes one row per site; the last site has no coupling to its right. The header
    carries the distributions and seed the environment was drawn from.
    """
    spec = {
        "lambda": env.lambda_spec.to_json(),
        "delta": env.delta_spec.to_json(),
        "seed": env.seed,
        "x_min": env.x_min,
        "x_max": env.x_max,
    }
    rows = [
        (x, env.delta_at(x), env.lam_at(x) if x < env.x_max else None)
        for x in range(env.x_min, env.x_max + 1)
    ]

    return write_table(path, ENVIRONMENT_COLUMNS, rows, {**(header or {}), "environment": spec})


def read_environment(path: str | Path) -> Environment:
    """
    :raises:
        ValidityError: if the header or the site rows are missing or out of order.
    """
    header, rows = read_table(path)

    if header is None or "environment" not in header:
        raise ValidityError(f"{path} has no environment header.")

    spec = header["environment"]
    sites = [int(row["x"]) for row in rows]

    if sites != list(range(spec["x_min"], spec["x_max"] + 1)):
        raise ValidityError(f"{path} does not list the sites {spec['x_min']}..{spec['x_max']} in order.")

    return Environment(
        x_min=spec["x_min"],
        x_max=spec["x_max"],
        delta=np.array([float(row["delta_x"]) for row in rows]),
        lam=np.array([float(row["lambda_x_xplus1"]) for row in rows[:-1]]),
        lambda_spec=DistributionSpec(name=spec["lambda"]["name"], params=spec["lambda"]["params"]),
        delta_spec=DistributionSpec(name=spec["delta"]["name"], params=spec["delta"]["params"]),
        seed=spec["seed"],
    )
