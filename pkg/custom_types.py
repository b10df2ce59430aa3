from collections.abc import Callable, Sequence
from typing import Annotated, NamedTuple

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

Rates = Annotated[
    float | Sequence[float] | FloatArray,
    "A Poisson rate per unit time, either shared by every line (or line pair) or given per line (or per pair)."
]
SpinVector = Annotated[
    tuple[int, ...],
    "Spins (+1 or -1) on the slit sites 0..L, read on one side of the slit."
]
SlitEvent = Annotated[
    Callable[[SpinVector, SpinVector], bool],
    "An event over the pair (upper slit spins, lower slit spins)."
]


class Point(NamedTuple):
    """
    A space-time point ``(x, t)``.

    On a slit line at ``t == 0`` the point is ambiguous, and ``side`` designates the
    upper (``+1``) or lower (``-1``) end of the slit.
    """
    x: int
    t: float
    side: int = 0
