"""Square-lattice geometry and 2D-to-1D chain orderings.

Provides the snake (boustrophedon) and Hilbert-curve orderings of a square
lattice, user-supplied custom orderings, nearest-neighbor edge sets for open
and periodic boundaries, and diagnostics quantifying how well an ordering
preserves 2D locality.

Conventions: lattice sites are (row, col) pairs with row 0 at the bottom
(matching the usual way these curves are drawn); chain indices are 1-based
in every public interface and file format.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

__all__ = [
    "LatticeSpec",
    "PathMapping",
    "EdgeList",
    "LocalityReport",
    "build_edges",
    "snake_map",
    "hilbert_map",
    "load_custom_mapping",
    "write_mapping_file",
    "locality_report",
]


class MappingError(ValueError):
    """Invalid lattice/ordering combination or malformed mapping file."""


@dataclass(frozen=True)
class LatticeSpec:
    """An n_rows x n_cols square lattice with boundary 'obc' or 'pbc'."""

    n_rows: int
    n_cols: int
    boundary: str = "obc"

    def __post_init__(self):
        if self.n_rows < 2 or self.n_cols < 2:
            raise MappingError("lattice must be at least 2x2")
        if self.boundary not in ("obc", "pbc"):
            raise MappingError(f"unknown boundary {self.boundary!r}")

    @property
    def n_sites(self):
        return self.n_rows * self.n_cols


@dataclass(frozen=True)
class EdgeList:
    """2D nearest-neighbor bonds as normalized (site_a, site_b) pairs.

    Stored as a tuple (not a set): on a 2-site-wide periodic lattice the
    wrap-around bond coincides with the interior bond and both are kept,
    since they are physically distinct couplings.
    """

    spec: LatticeSpec
    edges: tuple

    def __len__(self):
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)


@dataclass(frozen=True)
class PathMapping:
    """Bijection between 2D sites and 1-based chain positions.

    ``order[p]`` is the (row, col) site at chain position p+1;
    ``inverse[site]`` is the 1-based chain position of a site.
    """

    kind: str  # "snake" | "hilbert" | "custom"
    n_rows: int
    n_cols: int
    order: tuple
    inverse: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        n = self.n_rows * self.n_cols
        if len(self.order) != n or len(set(self.order)) != n:
            raise MappingError("order is not a bijection over the lattice")
        for (i, j) in self.order:
            if not (0 <= i < self.n_rows and 0 <= j < self.n_cols):
                raise MappingError(f"site {(i, j)} outside the lattice")
        object.__setattr__(
            self, "inverse", {site: p + 1 for p, site in enumerate(self.order)}
        )

    @property
    def n_sites(self):
        return self.n_rows * self.n_cols

    def chain_index(self, site):
        """1-based chain position of a (row, col) site."""
        return self.inverse[site]

    def site(self, chain_index):
        """(row, col) site at a 1-based chain position."""
        return self.order[chain_index - 1]


@dataclass(frozen=True)
class LocalityReport:
    """Chain-distance statistics of an edge set under a mapping."""

    distance_histogram: dict
    max_distance: int
    mean_distance: Fraction
    cut_profile: tuple
    max_cut: int
    mean_cut: Fraction


def build_edges(spec: LatticeSpec) -> EdgeList:
    """All 2D nearest-neighbor pairs; 'pbc' adds wrap-around bonds."""
    edges = []
    nr, nc = spec.n_rows, spec.n_cols
    for i in range(nr):
        for j in range(nc):
            if j + 1 < nc:
                edges.append(((i, j), (i, j + 1)))
            elif spec.boundary == "pbc":
                edges.append(_norm_pair((i, j), (i, 0)))
            if i + 1 < nr:
                edges.append(((i, j), (i + 1, j)))
            elif spec.boundary == "pbc":
                edges.append(_norm_pair((i, j), (0, j)))
    return EdgeList(spec, tuple(sorted(edges)))


def _norm_pair(a, b):
    return (a, b) if a <= b else (b, a)


def snake_map(spec: LatticeSpec) -> PathMapping:
    """Row-by-row boustrophedon ordering.

    Even rows run left to right, odd rows right to left, so the chain index
    of site (i, j) is i*n_cols + j + 1 on even rows and i*n_cols + (n_cols - j)
    on odd rows.
    """
    order = []
    for i in range(spec.n_rows):
        cols = range(spec.n_cols) if i % 2 == 0 else range(spec.n_cols - 1, -1, -1)
        order.extend((i, j) for j in cols)
    return PathMapping("snake", spec.n_rows, spec.n_cols, tuple(order))


def _hilbert_order(k):
    """Site sequence of the order-k Hilbert curve on a 2^k x 2^k grid.

    The curve enters at the bottom-left site and exits at the bottom-right
    site.  Each level places transformed copies of the previous level in the
    four quadrants, traversed BL -> TL -> TR -> BR; the BL copy is transposed
    and the BR copy is anti-transposed so the path stays continuous.
    """
    curve = [(0, 0), (1, 0), (1, 1), (0, 1)]
    for level in range(2, k + 1):
        h = 1 << (level - 1)
        prev = curve
        curve = []
        curve.extend((c, r) for r, c in prev)                        # BL
        curve.extend((r + h, c) for r, c in prev)                    # TL
        curve.extend((r + h, c + h) for r, c in prev)                # TR
        curve.extend((h - 1 - c, 2 * h - 1 - r) for r, c in prev)    # BR
    return curve


def hilbert_map(spec: LatticeSpec) -> PathMapping:
    """Hilbert-curve ordering; requires a square 2^k x 2^k lattice."""
    n = spec.n_rows
    if spec.n_cols != n:
        raise MappingError("Hilbert mapping requires a square lattice")
    k = n.bit_length() - 1
    if n < 2 or (1 << k) != n:
        raise MappingError("Hilbert mapping requires a power-of-two side length")
    return PathMapping("hilbert", n, n, tuple(_hilbert_order(k)))


def load_custom_mapping(lines, spec: LatticeSpec) -> PathMapping:
    """Parse a mapping file: one "row col chain_index" line per site.

    ``lines`` is an iterable of text lines (or an open file); '#' comments and
    blank lines are ignored.  The chain indices are 1-based and must form a
    bijection over the lattice.
    """
    entries = []
    for ln, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 3:
            raise MappingError(f"line {ln}: expected 'row col chain_index'")
        try:
            i, j, p = (int(x) for x in parts)
        except ValueError:
            raise MappingError(f"line {ln}: non-integer field") from None
        entries.append((ln, i, j, p))

    n = spec.n_sites
    if len(entries) != n:
        raise MappingError(
            f"wrong line count: got {len(entries)} sites, lattice has {n}"
        )
    order = [None] * n
    seen_sites = set()
    for ln, i, j, p in entries:
        if not (0 <= i < spec.n_rows and 0 <= j < spec.n_cols):
            raise MappingError(f"line {ln}: site ({i}, {j}) out of range")
        if not (1 <= p <= n):
            raise MappingError(f"line {ln}: chain index {p} out of range")
        if (i, j) in seen_sites:
            raise MappingError(f"line {ln}: duplicate site ({i}, {j})")
        if order[p - 1] is not None:
            raise MappingError(f"line {ln}: duplicate chain index {p}")
        seen_sites.add((i, j))
        order[p - 1] = (i, j)
    return PathMapping("custom", spec.n_rows, spec.n_cols, tuple(order))


def write_mapping_file(mapping: PathMapping, fh):
    """Write a mapping in the "row col chain_index" format."""
    fh.write(f"# {mapping.kind} ordering, {mapping.n_rows}x{mapping.n_cols}\n")
    for p, (i, j) in enumerate(mapping.order, start=1):
        fh.write(f"{i} {j} {p}\n")


def locality_report(mapping: PathMapping, edges: EdgeList) -> LocalityReport:
    """Chain-distance histogram and cut profile of an edge set.

    ``cut_profile[p]`` counts the bonds straddling the chain cut between
    positions p+1 and p+2; its sum equals the summed chain distances of all
    bonds (each bond of distance d straddles d cuts).
    """
    if (edges.spec.n_rows, edges.spec.n_cols) != (mapping.n_rows, mapping.n_cols):
        raise MappingError("mapping and edge list built from different lattices")
    n = mapping.n_sites
    hist = Counter()
    cuts = [0] * (n - 1)
    for a, b in edges:
        pa, pb = mapping.chain_index(a), mapping.chain_index(b)
        lo, hi = min(pa, pb), max(pa, pb)
        hist[hi - lo] += 1
        for c in range(lo - 1, hi - 1):
            cuts[c] += 1
    total = sum(d * c for d, c in hist.items())
    return LocalityReport(
        distance_histogram=dict(sorted(hist.items())),
        max_distance=max(hist),
        mean_distance=Fraction(total, len(edges)),
        cut_profile=tuple(cuts),
        max_cut=max(cuts),
        mean_cut=Fraction(sum(cuts), len(cuts)),
    )


def write_locality_csvs(report: LocalityReport, metrics_fh, cuts_fh):
    """Serialize a report to a (metric, value) CSV and a cut-profile CSV."""
    metrics_fh.write("metric,value\n")
    metrics_fh.write(f"max_distance,{report.max_distance}\n")
    metrics_fh.write(f"mean_distance,{float(report.mean_distance):.12g}\n")
    metrics_fh.write(f"max_cut,{report.max_cut}\n")
    metrics_fh.write(f"mean_cut,{float(report.mean_cut):.12g}\n")
    for d, c in report.distance_histogram.items():
        metrics_fh.write(f"distance_count_{d},{c}\n")
    cuts_fh.write("cut_position,strand_count\n")
    for p, c in enumerate(report.cut_profile, start=1):
        cuts_fh.write(f"{p},{c}\n")
