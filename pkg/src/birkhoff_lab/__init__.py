"""Birkhoff normal forms for Hamiltonian PDEs on flat tori: lattice arithmetic,
small-divisor scans, polynomial Hamiltonians, normal-form iteration and
spectral simulation."""

__version__ = "0.1.0"
