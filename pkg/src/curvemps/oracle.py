"""Exact-diagonalization and free-fermion references.

Fermion signs here are computed from occupation bitmasks, independently of
the operator-valued tensor route, so agreement between the two is a real
cross-check rather than a tautology.

Mode ordering convention (shared with the MPO compiler): modes are ordered
site-major along the chain with the spin-down mode before the spin-up mode
on each site, so c^dag_down |up> = +|up,down> locally.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hamiltonian import TermList

__all__ = [
    "SectorBasis",
    "EDResult",
    "build_and_solve",
    "free_fermion_energy",
    "spectrum_compare",
    "full_dense_matrix",
]

DENSE_CUTOFF = 4096
ITERATIVE_CUTOFF = 5_000_000


class SectorTooLargeError(ValueError):
    pass


def _masks_with_popcount(n_sites, n_occ):
    out = []
    for occ in combinations(range(n_sites), n_occ):
        m = 0
        for s in occ:
            m |= 1 << s
        out.append(m)
    out.sort()
    return out


@dataclass(frozen=True)
class SectorBasis:
    """All occupation configurations with fixed (N_up, N_down).

    Basis index of (up_mask, down_mask) is iu * len(down_masks) + id, with
    masks in ascending integer order; bit s of a mask is chain site s+1.
    """

    n_sites: int
    n_up: int
    n_down: int
    up_masks: tuple
    down_masks: tuple

    @classmethod
    def build(cls, n_sites, charge):
        n_up, n_down = charge
        if not (0 <= n_up <= n_sites and 0 <= n_down <= n_sites):
            raise ValueError(f"charge {charge} infeasible on {n_sites} sites")
        return cls(
            n_sites, n_up, n_down,
            tuple(_masks_with_popcount(n_sites, n_up)),
            tuple(_masks_with_popcount(n_sites, n_down)),
        )

    @property
    def dimension(self):
        return len(self.up_masks) * len(self.down_masks)

    def index_maps(self):
        up = {m: i for i, m in enumerate(self.up_masks)}
        down = {m: i for i, m in enumerate(self.down_masks)}
        return up, down


@dataclass
class EDResult:
    eigenvalues: np.ndarray  # ascending
    ground_vector: np.ndarray
    basis: SectorBasis


def _site_range_mask(lo, hi):
    """Bitmask of chain sites lo..hi inclusive (1-based); empty if lo > hi."""
    if lo > hi:
        return 0
    return ((1 << (hi - lo + 1)) - 1) << (lo - 1)


def _hop_sign_up(u, d, a, b):
    # modes strictly between (a,up) and (b,up), a < b: up of a+1..b-1, down of a+1..b
    n = bin(u & _site_range_mask(a + 1, b - 1)).count("1")
    n += bin(d & _site_range_mask(a + 1, b)).count("1")
    return -1 if n % 2 else 1

def _hop_sign_down(u, d, a, b):
    # modes strictly between (a,down) and (b,down), a < b: down of a+1..b-1, up of a..b-1
    n = bin(d & _site_range_mask(a + 1, b - 1)).count("1")
    n += bin(u & _site_range_mask(a, b - 1)).count("1")
    return -1 if n % 2 else 1


def _apply_terms(terms: TermList, u, d):
    """Yield (u', d', amplitude) for every off-diagonal image of (u, d)."""
    for h in terms.hoppings:
        a, b = h.mu, h.nu
        move = 1 << (a - 1) | 1 << (b - 1)
        occ = u if h.spin == "up" else d
        # c^dag_a c_b + c^dag_b c_a: exactly one endpoint occupied
        if bin(occ & move).count("1") != 1:
            continue
        sign = _hop_sign_up(u, d, a, b) if h.spin == "up" else _hop_sign_down(u, d, a, b)
        new = occ ^ move
        if h.spin == "up":
            yield new, d, h.amplitude * sign
        else:
            yield u, new, h.amplitude * sign


def _diagonal(terms: TermList, u, d):
    e = 0.0
    for o in terms.onsite:
        if u & d & (1 << (o.mu - 1)):
            e += o.amplitude
    return e


def build_sector_matrix(terms: TermList, basis: SectorBasis):
    """Assemble the sector Hamiltonian as a CSR matrix."""
    up_idx, down_idx = basis.index_maps()
    nd = len(basis.down_masks)
    rows, cols, vals = [], [], []
    for iu, u in enumerate(basis.up_masks):
        for idn, d in enumerate(basis.down_masks):
            i = iu * nd + idn
            diag = _diagonal(terms, u, d)
            if diag != 0.0:
                rows.append(i)
                cols.append(i)
                vals.append(diag)
            for u2, d2, amp in _apply_terms(terms, u, d):
                j = up_idx[u2] * nd + down_idx[d2]
                rows.append(j)
                cols.append(i)
                vals.append(amp)
    h = sp.csr_matrix(
        (vals, (rows, cols)), shape=(basis.dimension, basis.dimension)
    )
    asym = abs(h - h.T).max() if h.nnz else 0.0
    if asym > 1e-12:
        raise ValueError(f"assembled Hamiltonian is not symmetric (dev {asym:.3g})")
    return h


def build_and_solve(terms: TermList, n_sites, charge, k_eigenvalues=1) -> EDResult:
    """Lowest eigenpairs of the sector Hamiltonian.

    Dense symmetric solve below DENSE_CUTOFF, otherwise ARPACK
    (Lanczos with full reorthogonalization) up to ITERATIVE_CUTOFF.
    """
    if terms.n_sites != n_sites:
        raise ValueError("term list site count mismatch")
    basis = SectorBasis.build(n_sites, charge)
    dim = basis.dimension
    if dim > ITERATIVE_CUTOFF:
        raise SectorTooLargeError(f"sector dimension {dim} exceeds the solver cap")
    h = build_sector_matrix(terms, basis)
    k = min(k_eigenvalues, dim)
    if dim <= DENSE_CUTOFF:
        w, v = np.linalg.eigh(h.toarray())
        evals = w[:k]
        ground = v[:, 0]
    else:
        w, v = spla.eigsh(h, k=max(k, 1), which="SA", maxiter=10000)
        order = np.argsort(w)
        evals = w[order][:k]
        ground = v[:, order[0]]
    resid = np.linalg.norm(h @ ground - evals[0] * ground)
    if resid > 1e-9 * max(1.0, np.linalg.norm(ground)):
        raise RuntimeError(f"eigensolver residual {resid:.3g} too large")
    return EDResult(np.asarray(evals), ground, basis)


def free_fermion_energy(edges, params, filling):
    """U = 0 ground energy from single-particle levels of the hopping matrix."""
    if params.U != 0:
        raise ValueError("free-fermion reference requires U = 0")
    sites = sorted(
        {s for e in edges for s in e}
        | {(i, j) for i in range(edges.spec.n_rows) for j in range(edges.spec.n_cols)}
    )
    idx = {s: i for i, s in enumerate(sites)}
    h = np.zeros((len(sites), len(sites)))
    for a, b in edges:
        h[idx[a], idx[b]] += -params.t
        h[idx[b], idx[a]] += -params.t
    w = np.linalg.eigvalsh(h)
    return float(np.sum(w[: filling.n_up]) + np.sum(w[: filling.n_down]))


def spectrum_compare(terms_a, terms_b, n_sites, charge, k):
    """Max deviation of the k lowest eigenvalues, relative to spectral scale."""
    ea = build_and_solve(terms_a, n_sites, charge, k).eigenvalues
    eb = build_and_solve(terms_b, n_sites, charge, k).eigenvalues
    scale = max(np.max(np.abs(ea)), np.max(np.abs(eb)), 1e-300)
    return float(np.max(np.abs(ea - eb)) / scale)


def full_dense_matrix(terms: TermList, n_sites):
    """Dense 4^N Hamiltonian in the product basis (site 1 most significant).

    Local basis order per site: empty, up, down, up+down.  Intended for
    small-N equivalence tests against the operator-tensor route.
    """
    if n_sites > 6:
        raise ValueError("dense 4^N matrix limited to N <= 6")
    dim = 4 ** n_sites
    # masks for each product-basis state
    us = np.zeros(dim, dtype=np.int64)
    ds = np.zeros(dim, dtype=np.int64)
    for state in range(dim):
        u = d = 0
        rem = state
        for site in range(n_sites, 0, -1):
            s = rem % 4
            rem //= 4
            if s in (1, 3):
                u |= 1 << (site - 1)
            if s in (2, 3):
                d |= 1 << (site - 1)
        us[state] = u
        ds[state] = d
    index = {(int(u), int(d)): i for i, (u, d) in enumerate(zip(us, ds))}
    h = np.zeros((dim, dim))
    for i in range(dim):
        u, d = int(us[i]), int(ds[i])
        h[i, i] += _diagonal(terms, u, d)
        for u2, d2, amp in _apply_terms(terms, u, d):
            h[index[(u2, d2)], i] += amp
    return h


def diagonal_expectation(result: EDResult, func):
    """<func(up_mask, down_mask)> in the ground state (diagonal observables)."""
    basis = result.basis
    nd = len(basis.down_masks)
    v2 = np.abs(result.ground_vector) ** 2
    total = 0.0
    for iu, u in enumerate(basis.up_masks):
        for idn, d in enumerate(basis.down_masks):
            total += v2[iu * nd + idn] * func(u, d)
    return float(total)
