import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import eigh
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import eigsh

from custom_types import FloatArray
from errors import ContractError, DomainError, ParameterError, SizeError

logger = logging.getLogger(__name__)

MAX_SPINS = 14
FULL_SPECTRUM_DIMENSION = 2 ** 10

SYMMETRY_TOLERANCE = 1e-12
TRACE_TOLERANCE = 1e-10
NEGATIVE_EIGENVALUE_TOLERANCE = 1e-8
RESIDUAL_TOLERANCE = 1e-9
ENTROPY_CLAMP = 1e-15
DEGENERACY_GAP = 1e-6

Solver = Literal["lapack", "jacobi"]


@dataclass(frozen=True, kw_only=True, eq=False)
class DenseOperator:
    """
    A real operator in the product basis of the sigma^3 eigenstates.

    Basis index ``i`` of an ``n``-spin chain has spin ``+1`` at internal site ``s``
    when bit ``n-1-s`` of ``i`` is 0 (site 0 is the most significant factor).

    :param matrix: the row-major matrix.
    :param symmetric: if the matrix is claimed symmetric; the claim is verified.
    """
    matrix: FloatArray
    symmetric: bool = False

    def __post_init__(self):
        """
        :raises:
            ContractError: if the matrix is not square, has non-finite entries, or is
                claimed symmetric but is not.
        """
        matrix = np.array(self.matrix, dtype=np.float64)

        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ContractError(f"Operator must be a square matrix, got shape {matrix.shape}.")

        if not np.all(np.isfinite(matrix)):
            raise ContractError("Operator has non-finite entries.")

        if self.symmetric and not _is_symmetric(matrix):
            raise ContractError("Operator claimed symmetric is not symmetric.")

        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_spins(self) -> int | None:
        """
        :return: ``log2`` of the dimension, or ``None`` if it is not a power of two.
        """
        n = self.dimension.bit_length() - 1

        return n if 1 << n == self.dimension else None


def _is_symmetric(matrix: FloatArray) -> bool:
    scale = np.abs(matrix).max(initial=0.0)

    return bool(np.abs(matrix - matrix.T).max(initial=0.0) <= SYMMETRY_TOLERANCE * max(scale, 1e-300))


@dataclass(frozen=True, kw_only=True)
class SpectrumDescending:
    """
    :param values: eigenvalues, largest first.
    :param vectors: matching eigenvectors as columns, if requested.
    """
    values: FloatArray
    vectors: FloatArray | None = None


@dataclass(frozen=True, kw_only=True, eq=False)
class DensityMatrix:
    """
    A symmetric, positive semi-definite, trace-one operator.

    :param operator: the (possibly projected) matrix.
    :param trace: the trace before any projection.
    :param min_eigenvalue: the smallest eigenvalue before any projection.
    :param raw_eigenvalues: the spectrum before any projection, largest first.
    :param projected: if the matrix was clipped to the positive cone and renormalized.
    """
    operator: DenseOperator
    trace: float
    min_eigenvalue: float
    raw_eigenvalues: FloatArray
    projected: bool = False

    @property
    def matrix(self) -> FloatArray:
        return self.operator.matrix

    @property
    def dimension(self) -> int:
        return self.operator.dimension

    @classmethod
    def from_matrix(cls, matrix, *, project: bool = False):
        """
        Validates an exact density matrix.

        Spectra slightly outside the cone (eigenvalues below ``-1e-8`` or trace drift over
        ``1e-10``) are projected, and the projection is recorded. With ``project`` the
        projection is always applied.

        :raises:
            ContractError: if the matrix is not symmetric or has trace ``<= 0``.
        """
        matrix = np.asarray(matrix, dtype=np.float64)

        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or not _is_symmetric(matrix):
            raise ContractError("A density matrix must be square and symmetric.")

        matrix = (matrix + matrix.T) / 2
        values, vectors = np.linalg.eigh(matrix)
        trace = float(np.trace(matrix))
        raw = values[::-1].copy()

        if trace <= 0:
            raise ContractError(f"Density matrix has non-positive trace {trace}.")

        violated = values[0] < -NEGATIVE_EIGENVALUE_TOLERANCE or abs(trace - 1) > TRACE_TOLERANCE

        if project or violated:
            clipped = np.clip(values, 0.0, None)
            clipped /= clipped.sum()
            matrix = (vectors * clipped) @ vectors.T
            matrix = (matrix + matrix.T) / 2

            if violated:
                logger.debug("Projected density matrix (trace %.3g, min eigenvalue %.3g)", trace, values[0])

        return cls(
            operator=DenseOperator(matrix=matrix, symmetric=True),
            trace=trace,
            min_eigenvalue=float(values[0]),
            raw_eigenvalues=raw,
            projected=bool(project or violated),
        )

    def eigenvalues(self) -> FloatArray:
        """
        :return: the spectrum, largest first.
        """
        return np.linalg.eigvalsh(self.matrix)[::-1]


def site_index(x: int, m: int) -> int:
    """
    Maps a chain site ``x`` in ``-m..m+L`` to its internal index ``x + m`` in ``0..n-1``.
    """
    return x + m


def block_sites(m: int, L: int) -> tuple[int, int]:
    """
    :return: the internal index range (inclusive) of the block ``[0, L]`` in a chain
        of ``2m + L + 1`` spins.
    """
    return site_index(0, m), site_index(L, m)


def _check_chain(n: int, lam_edges: Sequence[float], delta_sites: Sequence[float]) -> tuple[FloatArray, FloatArray]:
    if n < 1:
        raise ParameterError(f"A chain needs at least one spin, got n={n}.")

    if n > MAX_SPINS:
        raise SizeError(f"Chains are limited to {MAX_SPINS} spins, got n={n}.")

    lam_edges = np.asarray(lam_edges, dtype=np.float64).reshape(-1)
    delta_sites = np.asarray(delta_sites, dtype=np.float64).reshape(-1)

    if lam_edges.size != n - 1 or delta_sites.size != n:
        raise ParameterError(f"Need {n - 1} couplings and {n} fields, got {lam_edges.size} and {delta_sites.size}.")

    if np.any(lam_edges < 0) or np.any(delta_sites < 0):
        raise ParameterError("Couplings and fields must be non-negative.")

    return lam_edges, delta_sites


def _chain_terms(n: int, lam_edges: FloatArray, delta_sites: FloatArray):
    """
    :return: the diagonal of the coupling term and, per site, the bit mask flipped by sigma^1.
    """
    basis = np.arange(1 << n)
    bits = (basis[:, None] >> (n - 1 - np.arange(n))) & 1
    z = 1 - 2 * bits
    diagonal = -0.5 * (z[:, :-1] * z[:, 1:]) @ lam_edges if n > 1 else np.zeros(1 << n)
    masks = [1 << (n - 1 - site) for site in range(n)]

    return basis, diagonal, masks


def build_hamiltonian(n: int, lam_edges: Sequence[float], delta_sites: Sequence[float]) -> DenseOperator:
    """
    Builds ``H = -1/2 sum lam_{x,x+1} s3_x s3_{x+1} - sum delta_x s1_x`` with a free boundary.

    :param n: the number of spins.
    :param lam_edges: the ``n - 1`` couplings.
    :param delta_sites: the ``n`` transverse fields.
    :return: the symmetric Hamiltonian.
    :raises:
        SizeError: if ``n`` exceeds the dense guard.
        ParameterError: if the lengths do not match or a rate is negative.
    """
    lam_edges, delta_sites = _check_chain(n, lam_edges, delta_sites)
    basis, diagonal, masks = _chain_terms(n, lam_edges, delta_sites)

    matrix = np.diag(diagonal)

    for site, mask in enumerate(masks):
        matrix[basis, basis ^ mask] -= delta_sites[site]

    return DenseOperator(matrix=matrix, symmetric=True)


def chain_hamiltonian(n: int, lam: float, delta: float) -> DenseOperator:
    """
    :return: the Hamiltonian of a uniform chain.
    """
    return build_hamiltonian(n, [lam] * (n - 1), [delta] * n)


def _sparse_hamiltonian(n: int, lam_edges: Sequence[float], delta_sites: Sequence[float]) -> csr_matrix:
    lam_edges, delta_sites = _check_chain(n, lam_edges, delta_sites)
    basis, diagonal, masks = _chain_terms(n, lam_edges, delta_sites)

    rows = np.concatenate([basis] * (n + 1))
    cols = np.concatenate([basis] + [basis ^ mask for mask in masks])
    data = np.concatenate([diagonal] + [np.full(basis.size, -delta_sites[site]) for site in range(n)])

    return csr_matrix((data, (rows, cols)), shape=(1 << n, 1 << n))


def global_flip(n: int) -> DenseOperator:
    """
    :return: the product of sigma^1 over all ``n`` sites.
    """
    d = 1 << n
    matrix = np.zeros((d, d))
    matrix[np.arange(d), np.arange(d) ^ (d - 1)] = 1.0

    return DenseOperator(matrix=matrix, symmetric=True)


def jacobi_eigh(matrix: FloatArray, *, tol: float = 1e-13, max_sweeps: int = 100) -> tuple[FloatArray, FloatArray]:
    """
    Diagonalizes a symmetric matrix by cyclic Jacobi rotations.

    :param matrix: a real symmetric matrix.
    :param tol: the off-diagonal Frobenius norm, relative to the full norm, at which to stop.
    :param max_sweeps: the sweep limit.
    :return: the eigenvalues (ascending) and the eigenvectors as columns.
    :raises:
        ContractError: if the rotations do not converge within ``max_sweeps``.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)

    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))

        if off <= tol * scale:
            break

        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]

                if apq == 0.0:
                    continue

                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 if tau == 0 else math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * col_p - s * col_q, s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * row_p - s * row_q, s * row_p + c * row_q
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vec_p - s * vec_q, s * vec_p + c * vec_q
    else:
        raise ContractError(f"Jacobi rotations did not converge in {max_sweeps} sweeps.")

    order = np.argsort(np.diag(a))

    return np.diag(a)[order], v[:, order]


def _eigh(operator: DenseOperator, solver: Solver) -> tuple[FloatArray, FloatArray]:
    if not operator.symmetric and not _is_symmetric(operator.matrix):
        raise ContractError("Eigen-decomposition needs a symmetric operator.")

    if solver == "jacobi":
        return jacobi_eigh(operator.matrix)

    return np.linalg.eigh(operator.matrix)


def spectrum(operator: DenseOperator, *, solver: Solver = "lapack", vectors: bool = False) -> SpectrumDescending:
    """
    :return: the eigenvalues, largest first, and optionally the eigenvectors.
    :raises:
        ContractError: if the operator is not symmetric.
    """
    values, eigenvectors = _eigh(operator, solver)

    return SpectrumDescending(values=values[::-1].copy(), vectors=eigenvectors[:, ::-1].copy() if vectors else None)


def _fix_sign(vector: FloatArray) -> FloatArray:
    return vector * math.copysign(1.0, vector[np.argmax(np.abs(vector))])


def ground_state(hamiltonian: DenseOperator) -> tuple[float, FloatArray]:
    """
    Finds the lowest eigenvalue and its eigenvector.

    The eigenvector's largest-magnitude entry is made positive.

    Up to ``2**10`` states the lowest pair comes from a subset solve and the energy is
    checked against the full spectrum; above, from Lanczos iteration.

    :return: the ground energy and the unit ground-state vector.
    :raises:
        ContractError: if the operator is not symmetric, the energy is not the lowest
            eigenvalue or the residual check fails.
    """
    if not hamiltonian.symmetric and not _is_symmetric(hamiltonian.matrix):
        raise ContractError("Ground state needs a symmetric operator.")

    matrix = hamiltonian.matrix

    if hamiltonian.dimension <= FULL_SPECTRUM_DIMENSION:
        values, vectors = eigh(matrix, subset_by_index=[0, 0])
        energy, vector = float(values[0]), vectors[:, 0]
        full = spectrum(hamiltonian).values
        norm = max(abs(full[0]), abs(full[-1]))

        if abs(energy - full[-1]) > RESIDUAL_TOLERANCE * max(norm, 1.0):
            raise ContractError(f"Ground energy {energy:.12g} is not the lowest eigenvalue {full[-1]:.12g}.")
    else:
        values, vectors = eigsh(matrix, k=1, which="SA")
        energy, vector = float(values[0]), vectors[:, 0] / np.linalg.norm(vectors[:, 0])
        norm = float(np.abs(matrix).sum(axis=1).max())

    residual = np.linalg.norm(matrix @ vector - energy * vector)

    if residual > RESIDUAL_TOLERANCE * max(norm, 1.0):
        raise ContractError(f"Ground state residual {residual:.3g} exceeds tolerance.")

    return energy, _fix_sign(vector)


def spectral_gap(hamiltonian: DenseOperator) -> float:
    """
    :return: the gap between the two lowest eigenvalues.
    """
    if hamiltonian.dimension < 2:
        return math.inf

    if hamiltonian.dimension <= FULL_SPECTRUM_DIMENSION:
        values = np.linalg.eigvalsh(hamiltonian.matrix)
    else:
        values = np.sort(eigsh(hamiltonian.matrix, k=2, which="SA", return_eigenvectors=False))

    return float(values[1] - values[0])


def thermal_density(hamiltonian: DenseOperator, beta: float) -> DensityMatrix:
    """
    Computes ``exp(-beta H) / tr exp(-beta H)`` from the eigendecomposition, shifted by
    the ground energy.

    :raises:
        ParameterError: if ``beta <= 0``.
    """
    if not beta > 0:
        raise ParameterError(f"Inverse temperature must be positive, got beta={beta}.")

    values, vectors = _eigh(hamiltonian, "lapack")
    weights = np.exp(-beta * (values - values[0]))
    weights /= weights.sum()

    return DensityMatrix.from_matrix((vectors * weights) @ vectors.T)


def _check_keep(keep: tuple[int, int], n: int) -> tuple[int, int, int]:
    low, high = keep

    if not 0 <= low <= high < n:
        raise DomainError(f"Block {keep} is not a site range of a {n}-spin chain.")

    return 1 << low, 1 << (high - low + 1), 1 << (n - high - 1)


def reduce(state, keep: tuple[int, int], n: int) -> DensityMatrix:
    """
    Traces out every site outside the internal range ``keep``.

    :param state: a ``DensityMatrix`` or a unit state vector of ``n`` spins.
    :param keep: the inclusive internal site range kept (see :func:`block_sites`).
    :param n: the number of spins.
    :return: the reduced density matrix.
    :raises:
        DomainError: if ``keep`` is not a range of the chain or the state has the wrong size.
    """
    left, kept, right = _check_keep(keep, n)

    if isinstance(state, DensityMatrix):
        if state.dimension != 1 << n:
            raise DomainError(f"State of dimension {state.dimension} is not a {n}-spin state.")

        tensor = state.matrix.reshape(left, kept, right, left, kept, right)
        reduced = np.einsum("akbalb->kl", tensor)
    else:
        vector = np.asarray(state, dtype=np.float64).reshape(-1)

        if vector.size != 1 << n:
            raise DomainError(f"Vector of length {vector.size} is not a {n}-spin state.")

        tensor = vector.reshape(left, kept, right)
        reduced = np.einsum("akb,alb->kl", tensor, tensor)

    return DensityMatrix.from_matrix(reduced)


def schmidt(psi: FloatArray, split: tuple[int, int]) -> FloatArray:
    """
    :param psi: a unit vector, ordered with the first factor most significant.
    :param split: the dimensions of the two factors.
    :return: the Schmidt coefficients (singular values), largest first.
    :raises:
        DomainError: if the dimensions do not multiply to the length of ``psi``.
    """
    psi = np.asarray(psi, dtype=np.float64).reshape(-1)
    rows, cols = split

    if rows * cols != psi.size:
        raise DomainError(f"Split {split} does not match a vector of length {psi.size}.")

    return np.linalg.svd(psi.reshape(rows, cols), compute_uv=False)


def schmidt_block(psi: FloatArray, keep: tuple[int, int], n: int) -> FloatArray:
    """
    Schmidt coefficients between the internal block ``keep`` and the rest of the chain.
    """
    left, kept, right = _check_keep(keep, n)
    psi = np.asarray(psi, dtype=np.float64).reshape(left, kept, right)

    return schmidt(psi.transpose(1, 0, 2).reshape(-1), (kept, left * right))


def entropy(rho) -> float:
    """
    :param rho: a ``DensityMatrix`` or a symmetric matrix.
    :return: the von Neumann entropy in bits, with eigenvalues below ``1e-15`` taken as 0.
    """
    matrix = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=np.float64)
    values = np.linalg.eigvalsh(matrix)
    values = values[values >= ENTROPY_CLAMP]

    return float(max(-np.sum(values * np.log2(values)), 0.0))


def _matrix_of(operator) -> FloatArray:
    if isinstance(operator, (DensityMatrix, DenseOperator)):
        return operator.matrix

    return np.asarray(operator, dtype=np.float64)


def op_norm_diff(a, b) -> float:
    """
    :return: the operator norm of ``a - b``, its largest absolute eigenvalue.
    :raises:
        DomainError: if the dimensions differ.
    """
    a, b = _matrix_of(a), _matrix_of(b)

    if a.shape != b.shape:
        raise DomainError(f"Cannot compare operators of shapes {a.shape} and {b.shape}.")

    return float(np.abs(np.linalg.eigvalsh(a - b)).max())


def weyl_gap(a, b) -> float:
    """
    :return: ``max_j |lambda_j(a) - lambda_j(b)|`` over the descending spectra.
    :raises:
        DomainError: if the dimensions differ.
        ContractError: if the gap exceeds ``op_norm_diff(a, b) + 1e-9``.
    """
    a, b = _matrix_of(a), _matrix_of(b)
    norm = op_norm_diff(a, b)
    gap = float(np.abs(np.linalg.eigvalsh(a)[::-1] - np.linalg.eigvalsh(b)[::-1]).max())

    if gap > norm + 1e-9:
        raise ContractError(f"Eigenvalue gap {gap:.3g} exceeds the operator norm {norm:.3g}.")

    return gap


def chain_ground_state(n: int, lam_edges: Sequence[float], delta_sites: Sequence[float]) -> tuple[float, FloatArray]:
    """
    Ground state of a chain, through a sparse eigensolver above ``2**10`` dimensions.
    """
    if 1 << n <= FULL_SPECTRUM_DIMENSION:
        return ground_state(build_hamiltonian(n, lam_edges, delta_sites))

    hamiltonian = _sparse_hamiltonian(n, lam_edges, delta_sites)
    values, vectors = eigsh(hamiltonian, k=2, which="SA")
    order = np.argsort(values)

    if values[order[1]] - values[order[0]] < DEGENERACY_GAP:
        logger.warning("Ground state of the %d-spin chain is nearly degenerate", n)

    vector = vectors[:, order[0]]

    return float(values[order[0]]), _fix_sign(vector / np.linalg.norm(vector))


def reduced_ground_state(m: int, L: int, lam: float, delta: float) -> DensityMatrix:
    """
    :return: the ground state of the uniform chain on ``-m..m+L`` reduced to the block ``[0, L]``.
    """
    n = 2 * m + L + 1
    _, vector = chain_ground_state(n, [lam] * (n - 1), [delta] * n)

    return reduce(vector, block_sites(m, L), n)


def reduced_thermal_state(m: int, L: int, lam: float, delta: float, beta: float) -> DensityMatrix:
    """
    :return: the thermal state of the uniform chain on ``-m..m+L`` reduced to the block ``[0, L]``.
    """
    n = 2 * m + L + 1

    return reduce(thermal_density(chain_hamiltonian(n, lam, delta), beta), block_sites(m, L), n)
