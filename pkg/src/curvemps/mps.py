"""Matrix product states over the 4-state fermionic site basis.

Site tensors carry legs (left bond, physical, right bond) with the left bond
incoming and the other two outgoing; every tensor has total charge zero, so
the dummy left-boundary bond of site 1 carries the state's total (N_up,
N_down) charge and the right boundary is charge neutral.  Local basis order:
empty, spin-up, spin-down, doubly occupied.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .hamiltonian import FillingSpec
from .lattice import PathMapping
from .symtensor import (
    ZERO,
    BlockTensor,
    Leg,
    TruncationSpec,
    contract,
    qr_orthogonalize,
    svd_truncate,
)

__all__ = [
    "PHYS_CHARGES",
    "phys_leg",
    "MPSState",
    "product_init",
    "canonicalize",
    "measure_local",
    "measure_szsz",
    "bond_entropy",
    "overlap",
    "save_state",
    "load_state",
    "to_statevector",
]

# local basis: index 0 |0>, 1 |up>, 2 |down>, 3 |up,down>
PHYS_CHARGES = ((0, 0), (1, 0), (0, 1), (1, 1))

OBSERVABLES = {
    "density": lambda q: float(q[0] + q[1]),
    "density_up": lambda q: float(q[0]),
    "density_down": lambda q: float(q[1]),
    "double_occupancy": lambda q: float(q[0] and q[1]),
    "sz": lambda q: 0.5 * (q[0] - q[1]),
}


def phys_leg():
    return Leg(+1, tuple((q, 1) for q in PHYS_CHARGES))


def boundary_leg(charge, direction):
    return Leg(direction, ((tuple(charge), 1),))


@dataclass
class MPSState:
    """site_tensors[p-1] is the tensor of chain site p; center is 1-based."""

    site_tensors: list
    center: int

    @property
    def n_sites(self):
        return len(self.site_tensors)

    @property
    def total_charge(self):
        return self.site_tensors[0].legs[0].sectors[0][0]

    def copy(self):
        return MPSState([t for t in self.site_tensors], self.center)

    def norm(self):
        return self.site_tensors[self.center - 1].norm()

    def normalized(self):
        out = self.copy()
        c = out.center - 1
        out.site_tensors[c] = out.site_tensors[c].scale(1.0 / out.norm())
        return out


def _occupation_pattern(mapping: PathMapping, filling: FillingSpec):
    """Deterministic per-chain-site occupations realizing the filling.

    Doubly occupied sites (if any) go to the lowest chain positions, holes to
    the highest; singly occupied sites follow a 2D checkerboard (spin up on
    even row+col), with spins flipped from the chain end as needed to hit the
    exact (n_up, n_down) counts.
    """
    n = mapping.n_sites
    if filling.n_up > n or filling.n_down > n:
        raise ValueError("filling exceeds one electron per spin per site")
    doubles = max(0, filling.n_electrons - n)
    singles = filling.n_electrons - 2 * doubles
    occ = []
    for p in range(1, n + 1):
        if p <= doubles:
            occ.append(3)
        elif p <= doubles + singles:
            i, j = mapping.site(p)
            occ.append(1 if (i + j) % 2 == 0 else 2)
        else:
            occ.append(0)
    # correct spin counts deterministically, flipping from the chain end
    n_up = sum(1 for s in occ if s == 1) + doubles
    n_down = sum(1 for s in occ if s == 2) + doubles
    for p in range(n - 1, -1, -1):
        if n_up == filling.n_up:
            break
        if n_up > filling.n_up and occ[p] == 1:
            occ[p] = 2
            n_up -= 1
            n_down += 1
        elif n_up < filling.n_up and occ[p] == 2:
            occ[p] = 1
            n_up += 1
            n_down -= 1
    if n_up != filling.n_up or n_down != filling.n_down:
        raise ValueError(f"cannot realize filling {filling}")
    return occ


def parse_occupation_pattern(text, n_sites):
    """Occupation override: whitespace-separated tokens 0, u, d, 2 per site."""
    tokens = text.split()
    if len(tokens) != n_sites:
        raise ValueError(f"pattern has {len(tokens)} tokens, expected {n_sites}")
    code = {"0": 0, "u": 1, "d": 2, "2": 3}
    try:
        return [code[t] for t in tokens]
    except KeyError as err:
        raise ValueError(f"bad occupation token {err.args[0]!r}") from None


def state_from_occupations(occ):
    """Bond-dimension-1 product state from per-site local basis indices."""
    n = len(occ)
    charges = [PHYS_CHARGES[s] for s in occ]
    # accumulated charge still to be placed at or right of each position
    remaining = [ZERO] * (n + 1)
    for p in range(n - 1, -1, -1):
        q = charges[p]
        remaining[p] = (remaining[p + 1][0] + q[0], remaining[p + 1][1] + q[1])
    tensors = []
    for p in range(n):
        legs = (
            boundary_leg(remaining[p], -1),
            phys_leg(),
            boundary_leg(remaining[p + 1], +1),
        )
        key = (remaining[p], charges[p], remaining[p + 1])
        tensors.append(BlockTensor(legs, {key: np.ones((1, 1, 1))}))
    return MPSState(tensors, center=1)


def product_init(mapping: PathMapping, filling: FillingSpec, pattern=None,
                 noise=0.0, seed=0) -> MPSState:
    """Product initial state for the given filling.

    ``pattern`` optionally overrides the default checkerboard layout with an
    explicit occupation string (see parse_occupation_pattern).  A nonzero
    ``noise`` adds a small charge-conserving random perturbation with the
    recorded seed.
    """
    if pattern is not None:
        occ = parse_occupation_pattern(pattern, mapping.n_sites)
        counts = (
            sum(1 for s in occ if s in (1, 3)),
            sum(1 for s in occ if s in (2, 3)),
        )
        if counts != (filling.n_up, filling.n_down):
            raise ValueError(f"pattern charge {counts} != filling {filling}")
    else:
        occ = _occupation_pattern(mapping, filling)
    state = state_from_occupations(occ)
    if noise > 0:
        _apply_init_noise(state, noise, np.random.default_rng(seed))
    return state


def _apply_init_noise(state, amplitude, rng):
    """One left-to-right pass of two-site random enrichment (in place)."""
    for p in range(1, state.n_sites):
        _move_center(state, p)
        a, b = state.site_tensors[p - 1], state.site_tensors[p]
        theta = contract(a, b, [(2, 0)])
        for key, arr in list(theta.blocks.items()):
            theta.blocks[key] = arr + amplitude * rng.standard_normal(arr.shape)
        # enumerate additional charge-allowed physical blocks
        lq = [q for q, _ in theta.legs[0].sectors]
        rq = [q for q, _ in theta.legs[3].sectors]
        for ql in lq:
            for q1 in PHYS_CHARGES:
                for q2 in PHYS_CHARGES:
                    for qr in rq:
                        key = (ql, q1, q2, qr)
                        if key in theta.blocks:
                            continue
                        tot = (
                            -ql[0] + q1[0] + q2[0] + qr[0],
                            -ql[1] + q1[1] + q2[1] + qr[1],
                        )
                        if tot == (0, 0):
                            shape = (
                                theta.legs[0].dim(ql), 1, 1, theta.legs[3].dim(qr)
                            )
                            theta.blocks[key] = amplitude * rng.standard_normal(shape)
        res = svd_truncate(theta, (0, 1), TruncationSpec(max_dim=4))
        state.site_tensors[p - 1] = res.left
        state.site_tensors[p] = res.right_weighted()
        state.center = p + 1
    _move_center(state, 1)
    c = state.site_tensors[0]
    state.site_tensors[0] = c.scale(1.0 / c.norm())


def _move_center(state: MPSState, new_center):
    """Shift the orthogonality center by QR steps (in place)."""
    while state.center < new_center:
        c = state.center
        iso, rem = qr_orthogonalize(state.site_tensors[c - 1], (0, 1))
        state.site_tensors[c - 1] = iso
        state.site_tensors[c] = contract(rem, state.site_tensors[c], [(1, 0)])
        state.center = c + 1
    while state.center > new_center:
        c = state.center
        iso, rem = qr_orthogonalize(state.site_tensors[c - 1], (1, 2))
        state.site_tensors[c - 1] = iso.transpose((2, 0, 1)).flip_leg(0)
        state.site_tensors[c - 2] = contract(
            state.site_tensors[c - 2], rem.flip_leg(0), [(2, 1)]
        )
        state.center = c - 1


def canonicalize(state: MPSState, new_center) -> MPSState:
    """Return a copy with the orthogonality center at ``new_center``."""
    if not (1 <= new_center <= state.n_sites):
        raise ValueError("center out of range")
    out = state.copy()
    _move_center(out, new_center)
    return out


def overlap(a: MPSState, b: MPSState):
    """<a|b> by a left-to-right transfer contraction."""
    env = None
    for sa, sb in zip(a.site_tensors, b.site_tensors):
        bra = sa.dagger()
        if env is None:
            env = contract(bra, sb, [(0, 0), (1, 1)])
        else:
            env = contract(bra, contract(env, sb, [(1, 0)]), [(0, 0), (1, 1)])
    return _trace_pair(env)


def _trace_pair(env):
    """Trace an environment with legs (bra bond, ket bond) over matching sectors."""
    total = 0.0
    for (qa, qb), arr in env.blocks.items():
        if qa == qb:
            total += np.trace(arr)
    return total


def _diagonal_product_expectation(state: MPSState, site_ops):
    """Expectation of a product of diagonal single-site operators.

    ``site_ops`` maps 1-based sites to functions of the physical charge.
    """
    lo = min(site_ops)
    hi = max(site_ops)
    st = canonicalize(state, lo)
    norm2 = st.norm() ** 2
    env = None
    for p in range(lo, hi + 1):
        ket = st.site_tensors[p - 1]
        if p in site_ops:
            f = site_ops[p]
            ket = BlockTensor(
                ket.legs,
                {k: f(k[1]) * v for k, v in ket.blocks.items()},
                ket.charge, validate=False,
            )
        bra = st.site_tensors[p - 1].dagger()
        if env is None:
            env = contract(bra, ket, [(0, 0), (1, 1)])
        else:
            env = contract(bra, contract(env, ket, [(1, 0)]), [(0, 0), (1, 1)])
    return _trace_pair(env) / norm2


def measure_local(state: MPSState, site, observable):
    """Expectation of a diagonal single-site observable at a chain site."""
    return _diagonal_product_expectation(state, {site: OBSERVABLES[observable]})


def measure_szsz(state: MPSState, site_a, site_b):
    """<S^z_a S^z_b> for two distinct chain sites."""
    if site_a == site_b:
        raise ValueError("sites must differ")
    sz = OBSERVABLES["sz"]
    return _diagonal_product_expectation(state, {site_a: sz, site_b: sz})


def bond_entropy(state: MPSState, cut):
    """Von Neumann entropy of the Schmidt spectrum across cut | cut+1."""
    if not (1 <= cut < state.n_sites):
        raise ValueError("cut out of range")
    st = canonicalize(state.normalized(), cut)
    res = svd_truncate(
        st.site_tensors[cut - 1], (0, 1), TruncationSpec(max_dim=10**9)
    )
    lam2 = np.concatenate([s**2 for s in res.singular_values.values()])
    lam2 = lam2[lam2 > 1e-300]
    return float(-np.sum(lam2 * np.log(lam2)))


def schmidt_values(state: MPSState, cut):
    """Descending Schmidt coefficients across a cut (normalized state)."""
    st = canonicalize(state.normalized(), cut)
    res = svd_truncate(
        st.site_tensors[cut - 1], (0, 1), TruncationSpec(max_dim=10**9)
    )
    return res.all_singular_values()


def to_statevector(state: MPSState):
    """Dense state vector (site 1 most significant); exponential in N."""
    if state.n_sites > 8:
        raise ValueError("dense conversion limited to N <= 8")
    acc = state.site_tensors[0]
    for t in state.site_tensors[1:]:
        acc = contract(acc, t, [(acc.ndim - 1, 0)])
    dense = acc.to_dense()
    return dense.reshape(-1)


STATE_FORMAT_VERSION = 1


def _tensor_payload(t: BlockTensor, name, arrays):
    keys = sorted(t.blocks)
    for i, key in enumerate(keys):
        arrays[f"{name}_b{i}"] = t.blocks[key]
    return {
        "charge": list(t.charge),
        "legs": [
            {"dir": lg.direction, "sectors": [[q[0], q[1], d] for q, d in lg.sectors]}
            for lg in t.legs
        ],
        "keys": [[list(q) for q in key] for key in keys],
    }


def _tensor_from_payload(meta, name, npz):
    legs = tuple(
        Leg(m["dir"], tuple(((s[0], s[1]), s[2]) for s in m["sectors"]))
        for m in meta["legs"]
    )
    blocks = {}
    for i, key in enumerate(meta["keys"]):
        blocks[tuple(tuple(q) for q in key)] = npz[f"{name}_b{i}"]
    return BlockTensor(legs, blocks, tuple(meta["charge"]))


def save_state(state: MPSState, path, extra=None):
    """Write a versioned container with exact (bit-identical) payloads."""
    arrays = {}
    manifest = {
        "version": STATE_FORMAT_VERSION,
        "n_sites": state.n_sites,
        "center": state.center,
        "extra": extra or {},
        "sites": [
            _tensor_payload(t, f"s{p}", arrays)
            for p, t in enumerate(state.site_tensors)
        ],
    }
    arrays["manifest"] = np.frombuffer(
        json.dumps(manifest).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_state(path):
    """Load a saved state; returns (MPSState, extra dict)."""
    npz = np.load(path)
    manifest = json.loads(bytes(npz["manifest"]).decode())
    if manifest["version"] != STATE_FORMAT_VERSION:
        raise ValueError(f"unsupported state file version {manifest['version']}")
    tensors = [
        _tensor_from_payload(meta, f"s{p}", npz)
        for p, meta in enumerate(manifest["sites"])
    ]
    return MPSState(tensors, manifest["center"]), manifest["extra"]
