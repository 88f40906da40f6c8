"""Ground states of the 2D Fermi-Hubbard model on curve-mapped chains.

Modules: lattice (space-filling-curve mappings), hamiltonian (term lists),
symtensor (charge-conserving block tensors), mps / mpo (chain network and
operator compilation), dmrg (two-site ground-state sweep), ttn (tree tensor
networks), oracle (exact diagonalization references), cli (command line).
"""

__version__ = "0.1.0"
