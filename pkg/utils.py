import math

import numpy as np

from custom_types import FloatArray

# Stream tags keep the per-purpose random streams of one seed disjoint
DEATH_STREAM = 0
BRIDGE_STREAM = 1
SPIN_STREAM = 2
SWEEP_STREAM = 3
TRIAL_STREAM = 4
CHAIN_STREAM = 5


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Creates a counter-based generator for one stream of a seed.

    The key is ``SeedSequence([seed, *stream])`` fed to Philox, so the draws for a given
    ``(seed, stream)`` never depend on how many other streams were used before.

    :param seed: the non-negative 64-bit run seed.
    :param stream: stream coordinates, e.g. ``(DEATH_STREAM, line, attempt)``.
    :return: a fresh ``numpy.random.Generator``.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def derive_seed(seed: int, *stream: int) -> int:
    """
    Derives an independent 64-bit child seed.

    :param seed: the parent seed.
    :param stream: stream coordinates distinguishing the child.
    :return: the child seed as a Python integer.
    """
    state = np.random.SeedSequence([seed, *stream]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def binomial_se(p: float, n: int) -> float:
    """
    :param p: an estimated probability.
    :param n: the number of trials behind it.
    :return: the binomial standard error ``sqrt(p(1-p)/n)``.
    """
    if n <= 0:
        return math.inf

    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def batch_means(values: FloatArray, num_batches: int) -> tuple[float, float]:
    """
    Estimates a mean and its standard error from a correlated series by batch means.

    Trailing values that do not fill a batch are dropped from the error estimate but
    kept in the mean.

    :param values: the series, in time order.
    :param num_batches: the number of contiguous batches.
    :return: ``(mean, standard error)``.
    """
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    batch_size = values.size // num_batches

    if num_batches < 2 or batch_size == 0:
        return mean, math.inf

    batches = values[:batch_size * num_batches].reshape(num_batches, batch_size).mean(axis=1)

    return mean, float(batches.std(ddof=1) / math.sqrt(num_batches))
