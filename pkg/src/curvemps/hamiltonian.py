"""Mapped 1D Hubbard Hamiltonian as an explicit term list.

A 2D Hubbard model (hopping t on nearest-neighbor bonds, on-site repulsion U)
is carried through a chain ordering into a list of hopping and on-site terms
over 1-based chain positions.  Hopping records are normalized to mu < nu with
the Hermitian conjugate implied, so consumers (MPO compiler, ED oracle) add
conjugates exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

from .lattice import EdgeList, LatticeSpec, PathMapping

__all__ = [
    "HubbardParams",
    "FillingSpec",
    "HoppingTerm",
    "OnsiteTerm",
    "TermList",
    "mapped_terms",
    "filling_to_charges",
    "delta_metric",
]


@dataclass(frozen=True)
class HubbardParams:
    t: float = 1.0
    U: float = 0.0


@dataclass(frozen=True)
class FillingSpec:
    """Electron counts per spin species."""

    n_up: int
    n_down: int

    def __post_init__(self):
        if self.n_up < 0 or self.n_down < 0:
            raise ValueError("electron counts must be non-negative")

    @property
    def n_electrons(self):
        return self.n_up + self.n_down


@dataclass(frozen=True)
class HoppingTerm:
    """-t (c^dag_{mu,spin} c_{nu,spin} + h.c.) with mu < nu."""

    mu: int
    nu: int
    spin: str  # "up" | "down"
    amplitude: float


@dataclass(frozen=True)
class OnsiteTerm:
    """U n_up n_down at chain position mu."""

    mu: int
    amplitude: float


@dataclass(frozen=True)
class TermList:
    n_sites: int
    hoppings: tuple
    onsite: tuple


def mapped_terms(edges: EdgeList, mapping: PathMapping, params: HubbardParams) -> TermList:
    """Translate 2D bonds into chain-position terms under a mapping.

    Every bond yields one hopping record per spin with amplitude -t; every
    chain position gets one on-site record with amplitude U.
    """
    if (edges.spec.n_rows, edges.spec.n_cols) != (mapping.n_rows, mapping.n_cols):
        raise ValueError("edge list and mapping describe different lattices")
    hoppings = []
    for a, b in edges:
        mu, nu = mapping.chain_index(a), mapping.chain_index(b)
        if mu > nu:
            mu, nu = nu, mu
        for spin in ("up", "down"):
            hoppings.append(HoppingTerm(mu, nu, spin, -params.t))
    hoppings.sort(key=lambda h: (h.mu, h.nu, h.spin))
    onsite = tuple(OnsiteTerm(mu, params.U) for mu in range(1, mapping.n_sites + 1))
    return TermList(mapping.n_sites, tuple(hoppings), onsite)


def filling_to_charges(spec: LatticeSpec, density) -> FillingSpec:
    """Split a target density into equal spin counts (S_z = 0 sector).

    Raises if density * n_sites is not an even integer; callers wanting an
    unbalanced sector must construct a FillingSpec explicitly.
    """
    n = spec.n_sites
    electrons = density * n
    n_el = round(electrons)
    if abs(electrons - n_el) > 1e-9 or n_el % 2 != 0:
        raise ValueError(
            f"density {density} on {n} sites gives {electrons} electrons; "
            "specify n_up/n_down explicitly"
        )
    return FillingSpec(n_el // 2, n_el // 2)


def delta_metric(e_snake, e_hilbert):
    """Relative energy difference (e_snake - e_hilbert)/|e_hilbert| in percent."""
    if e_hilbert == 0:
        raise ZeroDivisionError("reference energy is zero")
    return (e_snake - e_hilbert) / abs(e_hilbert) * 100.0


def write_terms_csv(terms: TermList, fh):
    """Serialize a term list to CSV (kind, mu, nu, spin, amplitude)."""
    fh.write("kind,mu,nu,spin,amplitude\n")
    for h in terms.hoppings:
        fh.write(f"hopping,{h.mu},{h.nu},{h.spin},{h.amplitude:.12g}\n")
    for o in terms.onsite:
        fh.write(f"onsite,{o.mu},,,{o.amplitude:.12g}\n")
