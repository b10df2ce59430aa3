import math

import numpy as np
import pytest

from errors import ContractError, DomainError, ParameterError, SizeError
from quantum_oracle import (
    DenseOperator,
    DensityMatrix,
    SpectrumDescending,
    block_sites,
    build_hamiltonian,
    chain_ground_state,
    chain_hamiltonian,
    entropy,
    global_flip,
    ground_state,
    jacobi_eigh,
    op_norm_diff,
    reduce,
    reduced_ground_state,
    reduced_thermal_state,
    schmidt,
    schmidt_block,
    spectral_gap,
    spectrum,
    thermal_density,
    weyl_gap,
)
from serialization import read_matrix_csv


def random_symmetric(size: int, seed: int) -> np.ndarray:
    matrix = np.random.default_rng(seed).normal(size=(size, size))

    return (matrix + matrix.T) / 2


def test_two_spin_hamiltonian_matches_fixture(fixtures_dir):
    expected = read_matrix_csv(fixtures_dir / "two_spin_hamiltonian.csv")

    np.testing.assert_allclose(build_hamiltonian(2, [2.0], [1.0, 1.0]).matrix, expected)


@pytest.mark.parametrize("solver", ["lapack", "jacobi"])
def test_two_spin_spectrum_matches_closed_form(two_spin_closed_form, solver):
    values = spectrum(chain_hamiltonian(2, 2.0, 1.0), solver=solver).values

    np.testing.assert_allclose(values, sorted(two_spin_closed_form["energy"], reverse=True), atol=1e-12)


def test_two_spin_marginal_matches_closed_form(two_spin_closed_form):
    energy, psi = ground_state(chain_hamiltonian(2, 2.0, 1.0))

    assert energy == pytest.approx(two_spin_closed_form["energy"][0], abs=1e-12)
    np.testing.assert_allclose(reduce(psi, (0, 0), 2).eigenvalues(), two_spin_closed_form["rdm_eigenvalue"], atol=1e-12)


def test_all_plus_state_has_coupling_energy():
    hamiltonian = build_hamiltonian(3, [0.7, 1.3], [0.0, 0.0, 0.0])

    assert hamiltonian.matrix[0, 0] == pytest.approx(-0.5 * (0.7 + 1.3))
    assert hamiltonian.matrix[-1, -1] == pytest.approx(-0.5 * (0.7 + 1.3))


def test_hamiltonian_commutes_with_global_flip():
    hamiltonian = build_hamiltonian(4, [1.0, 0.5, 2.0], [0.3, 1.0, 0.8, 1.1]).matrix
    flip = global_flip(4).matrix

    np.testing.assert_allclose(hamiltonian @ flip, flip @ hamiltonian, atol=1e-14)


def test_hamiltonian_size_guard():
    with pytest.raises(SizeError):
        chain_hamiltonian(15, 1.0, 1.0)


def test_hamiltonian_checks_lengths():
    with pytest.raises(ParameterError):
        build_hamiltonian(3, [1.0], [1.0, 1.0, 1.0])

    with pytest.raises(ParameterError):
        build_hamiltonian(2, [1.0], [1.0, -1.0])


def test_operator_symmetry_claim_is_checked():
    with pytest.raises(ContractError):
        DenseOperator(matrix=np.array([[0.0, 1.0], [0.0, 0.0]]), symmetric=True)


def test_spectrum_rejects_asymmetric_operator():
    with pytest.raises(ContractError):
        spectrum(DenseOperator(matrix=np.array([[0.0, 1.0], [0.0, 0.0]])))


@pytest.mark.parametrize("seed", range(5))
def test_jacobi_agrees_with_lapack(seed):
    matrix = random_symmetric(7, seed)
    values, vectors = jacobi_eigh(matrix)

    np.testing.assert_allclose(values, np.linalg.eigvalsh(matrix), atol=1e-10)
    np.testing.assert_allclose(matrix @ vectors, vectors * values, atol=1e-10)


def test_ground_state_sign_and_norm():
    _, psi = ground_state(chain_hamiltonian(5, 1.0, 1.0))

    assert np.linalg.norm(psi) == pytest.approx(1.0)
    assert psi[np.argmax(np.abs(psi))] > 0


def random_density(size: int, seed: int) -> np.ndarray:
    factor = np.random.default_rng(seed).normal(size=(size, size))
    matrix = factor @ factor.T

    return matrix / np.trace(matrix)


@pytest.mark.parametrize("seed", range(20))
def test_entropy_is_concave(seed):
    first, second = random_density(4, seed), random_density(4, seed + 1000)

    assert entropy((first + second) / 2) >= (entropy(first) + entropy(second)) / 2 - 1e-9


def test_ground_energy_is_lowest_eigenvalue():
    hamiltonian = DenseOperator(matrix=random_symmetric(12, 4), symmetric=True)
    energy, psi = ground_state(hamiltonian)

    assert energy == pytest.approx(spectrum(hamiltonian).values[-1], abs=1e-10)
    assert np.linalg.norm(hamiltonian.matrix @ psi - energy * psi) < 1e-9


def test_ground_state_rejects_energy_above_spectrum(monkeypatch):
    hamiltonian = chain_hamiltonian(3, 1.0, 1.0)
    lowered = SpectrumDescending(values=spectrum(hamiltonian).values - 1.0)
    monkeypatch.setattr("quantum_oracle.spectrum", lambda operator: lowered)

    with pytest.raises(ContractError):
        ground_state(hamiltonian)


def test_spectral_gap_of_free_spins():
    # Without couplings the gap is the cost of one flipped spin, 2 delta
    assert spectral_gap(chain_hamiltonian(3, 0.0, 0.75)) == pytest.approx(1.5)


def test_thermal_state_is_density_matrix():
    rho = thermal_density(chain_hamiltonian(3, 1.0, 1.0), beta=0.7)

    assert np.trace(rho.matrix) == pytest.approx(1.0)
    assert rho.eigenvalues().min() > -1e-12
    assert not rho.projected


def test_thermal_state_approaches_ground_projector():
    hamiltonian = chain_hamiltonian(3, 1.0, 1.0)
    _, psi = ground_state(hamiltonian)

    assert op_norm_diff(thermal_density(hamiltonian, beta=40.0), np.outer(psi, psi)) < 1e-6


def test_thermal_state_needs_positive_beta():
    with pytest.raises(ParameterError):
        thermal_density(chain_hamiltonian(2, 1.0, 1.0), beta=0.0)


def test_reduce_agrees_for_vector_and_pure_density():
    _, psi = ground_state(chain_hamiltonian(4, 1.3, 0.9))
    pure = DensityMatrix.from_matrix(np.outer(psi, psi))

    np.testing.assert_allclose(reduce(psi, (1, 2), 4).matrix, reduce(pure, (1, 2), 4).matrix, atol=1e-12)


def test_reduce_rejects_bad_block():
    with pytest.raises(DomainError):
        reduce(np.ones(8) / math.sqrt(8), (2, 3), 3)


def test_schmidt_coefficients_square_to_marginal_spectrum():
    n = 5
    _, psi = ground_state(chain_hamiltonian(n, 1.0, 1.0))

    prefix = schmidt(psi, (4, 8))
    np.testing.assert_allclose(prefix ** 2, reduce(psi, (0, 1), n).eigenvalues(), atol=1e-12)

    middle = schmidt_block(psi, (1, 2), n)
    np.testing.assert_allclose(middle ** 2, reduce(psi, (1, 2), n).eigenvalues(), atol=1e-12)


def test_schmidt_split_must_match():
    with pytest.raises(DomainError):
        schmidt(np.ones(8), (3, 3))


def test_product_ground_state_has_no_entropy():
    _, psi = ground_state(chain_hamiltonian(3, 0.0, 1.0))

    assert entropy(reduce(psi, (0, 0), 3)) == pytest.approx(0.0, abs=1e-10)


def test_entropy_of_maximally_mixed_qubit_is_one_bit():
    assert entropy(np.eye(2) / 2) == pytest.approx(1.0)


def test_density_projection_is_recorded():
    rho = DensityMatrix.from_matrix(np.diag([1.1, -0.1]))

    assert rho.projected
    assert rho.min_eigenvalue == pytest.approx(-0.1)
    np.testing.assert_allclose(rho.eigenvalues(), [1.0, 0.0], atol=1e-14)


def test_density_rejects_zero_trace():
    with pytest.raises(ContractError):
        DensityMatrix.from_matrix(np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_weyl_gap_is_bounded_by_operator_norm(seed):
    a, b = random_symmetric(6, seed), random_symmetric(6, seed + 100)

    assert weyl_gap(a, b) <= op_norm_diff(a, b) + 1e-12


def test_block_sites_centres_the_block():
    assert block_sites(2, 1) == (2, 3)


def test_reduced_states_have_block_dimension():
    assert reduced_ground_state(1, 1, 1.0, 1.0).dimension == 4
    assert reduced_thermal_state(1, 0, 1.0, 1.0, beta=2.0).dimension == 2


@pytest.mark.slow
def test_sparse_ground_state_agrees_with_dense():
    n = 11
    energy, psi = chain_ground_state(n, [1.0] * (n - 1), [1.0] * n)
    dense = build_hamiltonian(n, [1.0] * (n - 1), [1.0] * n).matrix

    assert energy == pytest.approx(np.linalg.eigvalsh(dense)[0], abs=1e-8)
    assert np.linalg.norm(dense @ psi - energy * psi) < 1e-6
