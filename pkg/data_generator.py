import math
from pathlib import Path

from serialization import write_matrix_csv, write_table

# Two spins, lambda = 2, delta = 1: H = -ZZ - (X1 + X2) in the basis ++, +-, -+, --
lam, delta = 2.0, 1.0
coupling = lam / 2
root = math.sqrt(coupling ** 2 + 4 * delta ** 2)

hamiltonian = [
    [-coupling, -delta, -delta, 0.0],
    [-delta, coupling, 0.0, -delta],
    [-delta, 0.0, coupling, -delta],
    [0.0, -delta, -delta, -coupling],
]

# The ground state lives in the symmetric sector; its one-spin marginal has
# off-diagonal entry delta / root
energies = sorted([-root, -coupling, coupling, root])
rdm_eigenvalues = [0.5 + delta / root, 0.5 - delta / root]

fixtures = Path(__file__).resolve().parent / "fixtures"

write_matrix_csv(fixtures / "two_spin_hamiltonian.csv", hamiltonian)
write_table(
    fixtures / "two_spin_closed_form.csv",
    ("quantity", "index", "value"),
    [("energy", i, value) for i, value in enumerate(energies)]
    + [("rdm_eigenvalue", i, value) for i, value in enumerate(rdm_eigenvalues)],
)
