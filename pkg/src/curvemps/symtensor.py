"""Charge-conserving block-sparse tensors over the additive group Z x Z.

Every leg carries a direction (+1 outgoing, -1 incoming) and an ordered list
of (charge, degeneracy) sectors; a dense block may exist only for sector
combinations whose signed charge sum equals the tensor's total charge.  All
scalars are real double precision.

A module-level flop counter tallies the multiply-add volume of block
contractions, used to verify cost-scaling claims.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from itertools import product
from operator import itemgetter

import numpy as np

__all__ = [
    "Leg",
    "BlockTensor",
    "TruncationSpec",
    "SVDResult",
    "contract",
    "svd_truncate",
    "qr_orthogonalize",
    "flops",
    "reset_flops",
]

ZERO = (0, 0)


def _addq(a, b):
    return (a[0] + b[0], a[1] + b[1])


def _negq(a):
    return (-a[0], -a[1])


_flops = threading.local()


def flops():
    """Cumulative multiply-add count of block contractions in this thread."""
    return getattr(_flops, "n", 0)


def reset_flops():
    _flops.n = 0


def _count_flops(m, n, k):
    _flops.n = getattr(_flops, "n", 0) + 2 * m * n * k


@dataclass(frozen=True)
class Leg:
    """A tensor leg: direction +1 (outgoing) or -1 (incoming) plus sectors."""

    direction: int
    sectors: tuple  # ((charge, degeneracy), ...)

    def __post_init__(self):
        if self.direction not in (+1, -1):
            raise ValueError("direction must be +1 or -1")
        charges = [q for q, _ in self.sectors]
        if len(set(charges)) != len(charges):
            raise ValueError("duplicate sector charges on a leg")
        if any(d < 1 for _, d in self.sectors):
            raise ValueError("sector degeneracies must be positive")

    @property
    def dims(self):
        return dict(self.sectors)

    @property
    def total_dim(self):
        return sum(d for _, d in self.sectors)

    def dim(self, charge):
        return self.dims.get(charge, 0)

    def flipped(self):
        return Leg(-self.direction, self.sectors)


def leg(direction, sectors):
    """Build a Leg from an iterable of (charge, degeneracy) pairs."""
    return Leg(direction, tuple((tuple(q), int(d)) for q, d in sectors))


class BlockTensor:
    """Block-sparse tensor; blocks keyed by a per-leg charge tuple."""

    __slots__ = ("legs", "charge", "blocks")

    def __init__(self, legs, blocks=None, charge=ZERO, validate=True):
        self.legs = tuple(legs)
        self.charge = tuple(charge)
        self.blocks = {} if blocks is None else dict(blocks)
        if validate:
            self._validate()

    def _validate(self):
        for key, arr in self.blocks.items():
            if len(key) != len(self.legs):
                raise ValueError("block key arity mismatch")
            total = ZERO
            for q, lg in zip(key, self.legs):
                if lg.dim(q) == 0:
                    raise ValueError(f"charge {q} not a sector of its leg")
                total = _addq(total, q) if lg.direction > 0 else _addq(total, _negq(q))
            if total != self.charge:
                raise ValueError(
                    f"block {key} violates charge conservation "
                    f"(sum {total}, tensor charge {self.charge})"
                )
            shape = tuple(lg.dim(q) for q, lg in zip(key, self.legs))
            if arr.shape != shape:
                raise ValueError(f"block {key} shape {arr.shape} != {shape}")

    @property
    def ndim(self):
        return len(self.legs)

    def copy(self):
        return BlockTensor(
            self.legs, {k: v.copy() for k, v in self.blocks.items()},
            self.charge, validate=False,
        )

    def norm(self):
        return np.sqrt(sum(np.vdot(a, a).real for a in self.blocks.values()))

    def item(self):
        """Value of a rank-0 tensor."""
        if self.ndim != 0:
            raise ValueError("item() requires a rank-0 tensor")
        if not self.blocks:
            return 0.0
        return float(self.blocks[()])

    def dagger(self):
        """Flip all leg directions and negate the total charge."""
        return BlockTensor(
            tuple(lg.flipped() for lg in self.legs),
            self.blocks, _negq(self.charge), validate=False,
        )

    def flip_leg(self, axis):
        """Reverse one leg's direction, negating its sector charges.

        Blocks are unchanged; keys on the flipped leg are negated, so charge
        conservation is preserved.  Flipping both members of a contraction
        pair leaves the contraction result invariant.
        """
        old = self.legs[axis]
        new_leg = Leg(-old.direction, tuple((_negq(q), d) for q, d in old.sectors))
        legs = self.legs[:axis] + (new_leg,) + self.legs[axis + 1:]
        blocks = {
            key[:axis] + (_negq(key[axis]),) + key[axis + 1:]: arr
            for key, arr in self.blocks.items()
        }
        return BlockTensor(legs, blocks, self.charge, validate=False)

    def transpose(self, perm):
        perm = tuple(perm)
        legs = tuple(self.legs[p] for p in perm)
        blocks = {
            tuple(key[p] for p in perm): np.ascontiguousarray(arr.transpose(perm))
            for key, arr in self.blocks.items()
        }
        return BlockTensor(legs, blocks, self.charge, validate=False)

    def scale(self, factor):
        return BlockTensor(
            self.legs, {k: factor * v for k, v in self.blocks.items()},
            self.charge, validate=False,
        )

    def add(self, other, factor=1.0):
        """self + factor * other; legs and charge must match."""
        if self.legs != other.legs or self.charge != other.charge:
            raise ValueError("cannot add tensors with different structure")
        blocks = {k: v.copy() for k, v in self.blocks.items()}
        for k, v in other.blocks.items():
            if k in blocks:
                blocks[k] = blocks[k] + factor * v
            else:
                blocks[k] = factor * v
        return BlockTensor(self.legs, blocks, self.charge, validate=False)

    def to_dense(self):
        """Dense array with sectors concatenated in leg order (for tests)."""
        offsets = []
        for lg in self.legs:
            off, pos = {}, 0
            for q, d in lg.sectors:
                off[q] = pos
                pos += d
            offsets.append(off)
        out = np.zeros(tuple(lg.total_dim for lg in self.legs))
        for key, arr in self.blocks.items():
            sl = tuple(
                slice(offsets[i][q], offsets[i][q] + arr.shape[i])
                for i, q in enumerate(key)
            )
            out[sl] = arr
        return out

    def manifest(self):
        """Text summary (legs, sectors, block norms) for golden-file tests."""
        lines = [f"charge {self.charge[0]} {self.charge[1]}"]
        for i, lg in enumerate(self.legs):
            secs = " ".join(f"({q[0]},{q[1]}):{d}" for q, d in lg.sectors)
            lines.append(f"leg {i} dir {lg.direction:+d} {secs}")
        for key in sorted(self.blocks):
            qs = " ".join(f"({q[0]},{q[1]})" for q in key)
            lines.append(f"block {qs} norm {np.linalg.norm(self.blocks[key]):.12e}")
        return "\n".join(lines) + "\n"


def random_tensor(legs, charge=ZERO, rng=None):
    """Dense-in-every-allowed-block random tensor (test helper)."""
    rng = np.random.default_rng(rng)
    t = BlockTensor(legs, charge=charge)
    for key in product(*[[q for q, _ in lg.sectors] for lg in legs]):
        total = ZERO
        for q, lg in zip(key, legs):
            total = _addq(total, q) if lg.direction > 0 else _addq(total, _negq(q))
        if total == tuple(charge):
            shape = tuple(lg.dim(q) for q, lg in zip(key, legs))
            t.blocks[key] = rng.standard_normal(shape)
    return t


def _pick(axes):
    """C-level tuple slicer; itemgetter of one axis is wrapped to a 1-tuple."""
    if len(axes) == 1:
        ax = axes[0]
        return lambda key: (key[ax],)
    return itemgetter(*axes)


def _matricize_rows(t, a_axes, a_free):
    """Per-block row matrices (free x contracted) plus key/shape metadata."""
    a_perm = a_free + a_axes
    pick_c = _pick(a_axes)
    pick_f = _pick(a_free) if a_free else (lambda key: ())
    entries = []
    for key, arr in t.blocks.items():
        fdims = tuple(arr.shape[i] for i in a_free)
        m = 1
        for d in fdims:
            m *= d
        amat = arr.transpose(a_perm).reshape(m, arr.size // m)
        entries.append((pick_c(key), pick_f(key), fdims, m, amat))
    return entries


def _matricize_cols(t, b_axes, b_free):
    """Per-block column matrices (contracted x free) grouped by charge."""
    b_perm = b_axes + b_free
    pick_c = _pick(b_axes)
    pick_f = _pick(b_free) if b_free else (lambda key: ())
    bmap = {}
    for key, arr in t.blocks.items():
        fdims = tuple(arr.shape[i] for i in b_free)
        n = 1
        for d in fdims:
            n *= d
        mat = arr.transpose(b_perm).reshape(arr.size // n, n)
        bmap.setdefault(pick_c(key), []).append((pick_f(key), fdims, n, mat))
    return bmap


def contract(a: BlockTensor, b: BlockTensor, pairs, a_cache=None,
             b_cache=None) -> BlockTensor:
    """Contract paired legs of two tensors.

    ``pairs`` is a list of (a_axis, b_axis); paired legs must have opposite
    directions and compatible sector dimensions.  The result carries a's free
    legs followed by b's, with charge a.charge + b.charge.

    ``a_cache``/``b_cache`` are optional caller-owned dicts reusing the
    per-block matricized form across repeated contractions with the same
    (unmutated) tensor, e.g. the fixed environments inside an iterative
    eigensolver loop.
    """
    a_axes = tuple(p[0] for p in pairs)
    b_axes = tuple(p[1] for p in pairs)
    for ai, bi in pairs:
        la, lb = a.legs[ai], b.legs[bi]
        if la.direction == lb.direction:
            raise ValueError(f"paired legs {ai},{bi} have the same direction")
        da, db = la.dims, lb.dims
        for q in set(da) & set(db):
            if da[q] != db[q]:
                raise ValueError(f"sector {q} dimension mismatch on pair {ai},{bi}")
    a_free = tuple(i for i in range(a.ndim) if i not in a_axes)
    b_free = tuple(i for i in range(b.ndim) if i not in b_axes)
    out_legs = tuple(a.legs[i] for i in a_free) + tuple(b.legs[i] for i in b_free)
    out = BlockTensor(out_legs, charge=_addq(a.charge, b.charge), validate=False)

    if b_cache is not None and b_axes in b_cache:
        bmap = b_cache[b_axes]
    else:
        bmap = _matricize_cols(b, b_axes, b_free)
        if b_cache is not None:
            b_cache[b_axes] = bmap
    if a_cache is not None and a_axes in a_cache:
        aentries = a_cache[a_axes]
    else:
        aentries = _matricize_rows(a, a_axes, a_free)
        if a_cache is not None:
            a_cache[a_axes] = aentries

    acc = {}
    nflops = 0
    for ckey, afkey, afdims, m, amat in aentries:
        match = bmap.get(ckey)
        if not match:
            continue
        mk2 = 2 * m * amat.shape[1]
        for bfkey, bfdims, n, bmat in match:
            okey = afkey + bfkey
            res = amat @ bmat
            nflops += mk2 * n
            slot = acc.get(okey)
            if slot is None:
                acc[okey] = [res, afdims + bfdims]
            else:
                slot[0] += res
    _flops.n = getattr(_flops, "n", 0) + nflops
    blocks = out.blocks
    for okey, (mat, dims) in acc.items():
        blocks[okey] = mat.reshape(dims)
    return out


@dataclass(frozen=True)
class TruncationSpec:
    """Keep at most max_dim singular values, ranked globally across sectors;
    additionally drop a trailing tail whose relative squared weight is at most
    discard_cutoff."""

    max_dim: int
    discard_cutoff: float = 0.0

    def __post_init__(self):
        if self.max_dim < 1:
            raise ValueError("max_dim must be >= 1")
        if self.discard_cutoff < 0:
            raise ValueError("discard_cutoff must be >= 0")


@dataclass
class SVDResult:
    left: BlockTensor
    singular_values: dict  # bond charge -> descending 1D array
    right: BlockTensor
    discarded_weight: float

    def all_singular_values(self):
        if not self.singular_values:
            return np.zeros(0)
        return np.sort(np.concatenate(list(self.singular_values.values())))[::-1]

    def right_weighted(self):
        """diag(s) . right, i.e. the center-carrying right factor."""
        return _scale_bond(self.right, 0, self.singular_values)

    def left_weighted(self):
        """left . diag(s)."""
        return _scale_bond(self.left, self.left.ndim - 1, self.singular_values)


def _scale_bond(t, axis, svals):
    blocks = {}
    for key, arr in t.blocks.items():
        s = svals[key[axis]]
        shape = [1] * arr.ndim
        shape[axis] = len(s)
        blocks[key] = arr * s.reshape(shape)
    return BlockTensor(t.legs, blocks, t.charge, validate=False)


class Matricizer:
    """Group a tensor's blocks into per-charge dense matrices.

    The tensor is split into ``left_axes`` (rows) and the remaining axes
    (columns); blocks are grouped by the signed charge sum of their row part.
    Used by the SVD/QR factorizations and by the density-matrix truncation
    in the sweeping algorithms.
    """

    def __init__(self, t: BlockTensor, left_axes):
        self.left_axes = tuple(left_axes)
        self.right_axes = tuple(i for i in range(t.ndim) if i not in self.left_axes)
        if not self.left_axes or not self.right_axes:
            raise ValueError("leg partition must be non-empty on both sides")
        self.t = t
        self.left_legs = tuple(t.legs[i] for i in self.left_axes)
        self.right_legs = tuple(t.legs[i] for i in self.right_axes)
        groups = {}
        for key in t.blocks:
            row = tuple(key[i] for i in self.left_axes)
            col = tuple(key[i] for i in self.right_axes)
            qL = ZERO
            for q, lg in zip(row, self.left_legs):
                qL = _addq(qL, q) if lg.direction > 0 else _addq(qL, _negq(q))
            g = groups.setdefault(qL, (set(), set()))
            g[0].add(row)
            g[1].add(col)
        self.groups = {
            qL: (sorted(rows), sorted(cols)) for qL, (rows, cols) in groups.items()
        }

    def _dims(self, combo, legs):
        return tuple(lg.dim(q) for q, lg in zip(combo, legs))

    def matrix(self, qL):
        """Assemble the dense matrix of one charge group."""
        rows, cols = self.groups[qL]
        row_sizes = [int(np.prod(self._dims(r, self.left_legs))) for r in rows]
        col_sizes = [int(np.prod(self._dims(c, self.right_legs))) for c in cols]
        mat = np.zeros((sum(row_sizes), sum(col_sizes)))
        perm = self.left_axes + self.right_axes
        r0 = 0
        for r, rs in zip(rows, row_sizes):
            c0 = 0
            for c, cs in zip(cols, col_sizes):
                key = [None] * self.t.ndim
                for i, ax in enumerate(self.left_axes):
                    key[ax] = r[i]
                for i, ax in enumerate(self.right_axes):
                    key[ax] = c[i]
                arr = self.t.blocks.get(tuple(key))
                if arr is not None:
                    mat[r0:r0 + rs, c0:c0 + cs] = arr.transpose(perm).reshape(rs, cs)
                c0 += cs
            r0 += rs
        return mat

    def left_factor(self, qL, mat, bond_charge, bond_dim):
        """Rebuild a (left legs..., bond) tensor from a row-space matrix."""
        rows, _ = self.groups[qL]
        legs = self.left_legs + (Leg(+1, ((bond_charge, bond_dim),)),)
        blocks = {}
        r0 = 0
        for r in rows:
            dims = self._dims(r, self.left_legs)
            rs = int(np.prod(dims))
            blocks[r + (bond_charge,)] = np.ascontiguousarray(
                mat[r0:r0 + rs, :bond_dim].reshape(dims + (bond_dim,))
            )
            r0 += rs
        return legs, blocks

    def right_factor(self, qL, mat, bond_charge, bond_dim):
        """Rebuild a (bond, right legs...) tensor from a column-space matrix."""
        _, cols = self.groups[qL]
        legs = (Leg(-1, ((bond_charge, bond_dim),)),) + self.right_legs
        blocks = {}
        c0 = 0
        for c in cols:
            dims = self._dims(c, self.right_legs)
            cs = int(np.prod(dims))
            blocks[(bond_charge,) + c] = np.ascontiguousarray(
                mat[:bond_dim, c0:c0 + cs].reshape((bond_dim,) + dims)
            )
            c0 += cs
        return legs, blocks


def _keep_counts(per_sector_svals, spec):
    """Global ranking: how many values to keep in each sector."""
    entries = []
    for qL, s in per_sector_svals.items():
        entries.extend((v, qL) for v in s)
    entries.sort(key=lambda e: -e[0])
    total = sum(v * v for v, _ in entries)
    if total == 0:
        raise ValueError("cannot factorize an all-zero tensor")
    keep = min(spec.max_dim, len(entries))
    if spec.discard_cutoff > 0:
        tail = 0.0
        k = len(entries)
        while k > 1:
            w = entries[k - 1][0] ** 2
            if (tail + w) / total > spec.discard_cutoff:
                break
            tail += w
            k -= 1
        keep = min(keep, k)
    counts = {}
    for v, qL in entries[:keep]:
        counts[qL] = counts.get(qL, 0) + 1
    kept_weight = sum(v * v for v, _ in entries[:keep])
    return counts, 1.0 - kept_weight / total


def svd_truncate(t: BlockTensor, left_axes, spec: TruncationSpec) -> SVDResult:
    """Truncated SVD across a leg partition.

    Singular values are computed per charge sector and ranked globally; the
    kept count per sector defines the new bond leg.  The left factor is an
    isometry with total charge zero; the right factor carries the tensor's
    charge.  The new bond charge in each group is minus the signed row charge
    sum, so stacking factors left-to-right keeps every tensor charge-neutral.
    """
    mz = Matricizer(t, left_axes)
    factorized = {}
    svals = {}
    for qL in mz.groups:
        u, s, vt = np.linalg.svd(mz.matrix(qL), full_matrices=False)
        factorized[qL] = (u, vt)
        svals[qL] = s
    counts, discarded = _keep_counts(svals, spec)

    all_left = {}
    all_right = {}
    sv_out = {}
    bond_sectors = []
    for qL, k in sorted(counts.items()):
        u, vt = factorized[qL]
        bq = _negq(qL)
        _, bL = mz.left_factor(qL, u, bq, k)
        _, bR = mz.right_factor(qL, vt, bq, k)
        bond_sectors.append((bq, k))
        all_left.update(bL)
        all_right.update(bR)
        sv_out[bq] = svals[qL][:k]
    bond_leg_out = Leg(+1, tuple(bond_sectors))
    left = BlockTensor(
        mz.left_legs + (bond_leg_out,), all_left, ZERO, validate=False
    )
    right = BlockTensor(
        (bond_leg_out.flipped(),) + mz.right_legs, all_right, t.charge, validate=False
    )
    return SVDResult(left, sv_out, right, discarded)


def qr_orthogonalize(t: BlockTensor, left_axes):
    """Thin QR across a leg partition: t = isometry . remainder.

    The isometry satisfies Q^dag Q = identity on the new bond; the remainder
    carries the tensor's charge.
    """
    mz = Matricizer(t, left_axes)
    if t.norm() == 0:
        raise ValueError("cannot factorize an all-zero tensor")
    all_q = {}
    all_r = {}
    bond_sectors = []
    for qL in sorted(mz.groups):
        mat = mz.matrix(qL)
        q, r = np.linalg.qr(mat, mode="reduced")
        k = q.shape[1]
        bq = _negq(qL)
        _, bqs = mz.left_factor(qL, q, bq, k)
        _, brs = mz.right_factor(qL, r, bq, k)
        bond_sectors.append((bq, k))
        all_q.update(bqs)
        all_r.update(brs)
    bond_leg_out = Leg(+1, tuple(bond_sectors))
    iso = BlockTensor(mz.left_legs + (bond_leg_out,), all_q, ZERO, validate=False)
    rem = BlockTensor(
        (bond_leg_out.flipped(),) + mz.right_legs, all_r, t.charge, validate=False
    )
    return iso, rem
