"""Tree tensor networks with chain-junction topologies and a tree sweep.

Topologies: starting from the 1D chain over chain-indexed sites, a junction
rewiring at each recursion scale replaces the chain edge crossing the middle
quadrant boundary with a shortcut edge, producing degree-3 branching nodes
(variant A branches at one node, variant B at two nodes with a shortcut).

Fermion convention: operators are linearized by Jordan-Wigner strings in the
depth-first visitation order from node 1 (ascending neighbor order).  Every
Hamiltonian term then factorizes into one local operator per node, so each
tree edge cleanly splits a term into two sides.  The Hamiltonian is compiled
into a tree operator: the same finite state automaton as the chain MPO
(ready / done / one channel per open term part), but with one state list per
tree edge instead of per chain cut.  Ground-state sweeps then mirror the
chain algorithm with one environment tensor per directed edge.

Correctness of the routing is pinned by dense-equivalence tests against the
independent oracle (``routed_dense_matrix`` and ``ttno_dense_matrix``), not
by convention.
"""

from __future__ import annotations

from dataclasses import dataclass
import time

import numpy as np

from .hamiltonian import TermList
from .mps import PHYS_CHARGES, phys_leg
from .mpo import LOCAL_OPS, _SPIN_CHARGE, _bond_leg
from .symtensor import (
    BlockTensor,
    Leg,
    TruncationSpec,
    contract,
    random_tensor,
    svd_truncate,
)
from .dmrg import (
    DMRGConfig,
    DMRGResult,
    EigensolverError,
    SweepRecord,
    _lanczos_lowest,
    _ThetaPacker,
)

__all__ = [
    "TreeTopology",
    "TTNState",
    "TTNOperator",
    "path_topology",
    "build_ttn_a",
    "build_ttn_b",
    "jw_order",
    "route_terms",
    "routed_dense_matrix",
    "compile_ttno",
    "ttno_dense_matrix",
    "ttn_expectation",
    "load_topology",
    "write_topology",
    "ttn_product_init",
    "ttn_ground_state",
]


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class TreeTopology:
    """Nodes 1..n_nodes, each carrying a physical site; edges form a tree."""

    n_nodes: int
    edges: tuple  # sorted tuple of (a, b) with a < b
    kind: str = "custom"
    experimental: bool = False

    def __post_init__(self):
        n = self.n_nodes
        if n < 1:
            raise TopologyError("need at least one node")
        if len(self.edges) != n - 1:
            raise TopologyError(
                f"a tree on {n} nodes needs {n - 1} edges, got {len(self.edges)}"
            )
        seen = set()
        for e in self.edges:
            a, b = e
            if not (1 <= a <= n and 1 <= b <= n):
                raise TopologyError(f"edge {e} out of node range 1..{n}")
            if a == b:
                raise TopologyError(f"self-loop at node {a}")
            if a > b:
                raise TopologyError(f"edge {e} not normalized (a < b)")
            if e in seen:
                raise TopologyError(f"duplicate edge {e}")
            seen.add(e)
        adj = self.adjacency()
        for u, nbrs in adj.items():
            if len(nbrs) > 3:
                raise TopologyError(f"node {u} has degree {len(nbrs)} > 3")
        # connectivity (with n-1 edges this also implies acyclicity)
        reached = {1}
        stack = [1]
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in reached:
                    reached.add(w)
                    stack.append(w)
        if len(reached) != n:
            raise TopologyError("edge set is not connected")

    def adjacency(self):
        adj = {u: [] for u in range(1, self.n_nodes + 1)}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return {u: tuple(sorted(v)) for u, v in adj.items()}

    def degree(self, u):
        return len(self.adjacency()[u])


def path_topology(n_nodes, kind="path"):
    return TreeTopology(
        n_nodes, tuple((i, i + 1) for i in range(1, n_nodes)), kind
    )


def _rewired_topology(k, shortcut_of_block, kind):
    """Chain over 4^k nodes with one junction rewiring per scale per block.

    At scale s (block size B = 4**s) the chain edge crossing the block's
    middle quadrant boundary, (off + B/2, off + B/2 + 1), is replaced by the
    variant's shortcut edge; each replacement reconnects the two halves, so
    the result stays a tree at every step.
    """
    if k < 2:
        raise TopologyError("junction topologies need order k >= 2 (4x4 and up)")
    n = 4**k
    edges = {(i, i + 1) for i in range(1, n)}
    for s in range(2, k + 1):
        block = 4**s
        for off in range(0, n, block):
            mid = off + block // 2
            edges.remove((mid, mid + 1))
            a, b = shortcut_of_block(off, block)
            edges.add((min(a, b), max(a, b)))
    return TreeTopology(n, tuple(sorted(edges)), kind, experimental=(k > 2))


def build_ttn_a(k):
    """Variant A: one central branch per block (degree-3 node at B/4 - 1)."""
    return _rewired_topology(
        k, lambda off, block: (off + block // 4 - 1, off + block // 2 + 1),
        "ttn_a",
    )


def build_ttn_b(k):
    """Variant B: two branching nodes per block joined by a shortcut."""
    return _rewired_topology(
        k, lambda off, block: (off + block // 4 - 1, off + 7 * block // 8),
        "ttn_b",
    )


def load_topology(lines, n_nodes) -> TreeTopology:
    """Parse "node_a node_b" lines into a validated tree."""
    edges = []
    for ln, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 2:
            raise TopologyError(f"line {ln}: expected 'node_a node_b'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError as err:
            raise TopologyError(f"line {ln}: non-integer node id") from err
        edges.append((min(a, b), max(a, b)))
    return TreeTopology(n_nodes, tuple(sorted(edges)))


def write_topology(topology: TreeTopology, fh):
    for a, b in topology.edges:
        fh.write(f"{a} {b}\n")


def jw_order(topology: TreeTopology):
    """Depth-first visitation order from node 1, ascending neighbor order."""
    adj = topology.adjacency()
    order = []
    seen = set()
    stack = [1]
    while stack:
        u = stack.pop()
        if u in seen:
            continue
        seen.add(u)
        order.append(u)
        for w in reversed(adj[u]):
            if w not in seen:
                stack.append(w)
    return tuple(order)


def op_tensor(mat):
    """4x4 local operator as a charge-homogeneous (phys out, phys in) tensor."""
    charge = None
    blocks = {}
    for o in range(4):
        for i in range(4):
            v = mat[o, i]
            if v == 0.0:
                continue
            q = (
                PHYS_CHARGES[o][0] - PHYS_CHARGES[i][0],
                PHYS_CHARGES[o][1] - PHYS_CHARGES[i][1],
            )
            if charge is None:
                charge = q
            elif charge != q:
                raise ValueError("operator mixes charge sectors")
            blocks[(PHYS_CHARGES[o], PHYS_CHARGES[i])] = np.array([[v]])
    if charge is None:
        raise ValueError("zero operator")
    return BlockTensor(
        (phys_leg(), phys_leg().flipped()), blocks, charge
    )


@dataclass(frozen=True)
class RoutedTerm:
    """One additive Hamiltonian piece as a product of local node operators."""

    factors: dict          # node -> BlockTensor (phys out, phys in)
    dense_factors: dict    # node -> 4x4 ndarray (for dense verification)
    support: frozenset


def _endpoint_mats(h, part):
    """(lower, upper) JW-dressed endpoint operators with amplitude folded in."""
    ops = LOCAL_OPS
    if part == 1:
        lower = h.amplitude * (ops["cdag_" + h.spin] @ ops["P"])
        upper = ops["c_" + h.spin]
    else:
        lower = h.amplitude * (ops["P"] @ ops["c_" + h.spin])
        upper = ops["cdag_" + h.spin]
    return lower, upper


def route_terms(topology: TreeTopology, terms: TermList):
    """Decompose the term list into JW-dressed local-operator products.

    Each hopping record yields two parts (the operator and its conjugate),
    each a product of string-dressed endpoint operators and parity factors on
    the nodes strictly between the endpoints in JW order.
    """
    if terms.n_sites != topology.n_nodes:
        raise ValueError("term list and topology have different site counts")
    ops = LOCAL_OPS
    order = jw_order(topology)
    pos = {node: i for i, node in enumerate(order)}
    parity_t = op_tensor(ops["P"])
    routed = []
    for h in terms.hoppings:
        a, b = h.mu, h.nu
        if pos[a] > pos[b]:
            a, b = b, a
        middle = list(order[pos[a] + 1:pos[b]])
        for part in (1, 2):
            mat_a, mat_b = _endpoint_mats(h, part)
            dense = {a: mat_a, b: mat_b}
            dense.update({n: ops["P"] for n in middle})
            factors = {a: op_tensor(mat_a), b: op_tensor(mat_b)}
            factors.update({n: parity_t for n in middle})
            routed.append(RoutedTerm(factors, dense,
                                     frozenset([a, b] + middle)))
    for o in terms.onsite:
        if o.amplitude == 0.0:
            continue
        mat = o.amplitude * ops["n_up_n_down"]
        routed.append(RoutedTerm({o.mu: op_tensor(mat)}, {o.mu: mat},
                                 frozenset([o.mu])))
    return routed


def routed_dense_matrix(topology: TreeTopology, terms: TermList):
    """Dense 4^N matrix of the routed Hamiltonian, factors ordered by JW
    position (JW position 1 most significant) — directly comparable to the
    oracle matrix built from JW-reindexed terms."""
    n = topology.n_nodes
    if n > 6:
        raise ValueError("dense routed matrix limited to N <= 6")
    order = jw_order(topology)
    eye = np.eye(4)
    h = np.zeros((4**n, 4**n))
    for rt in route_terms(topology, terms):
        acc = np.ones((1, 1))
        for node in order:
            acc = np.kron(acc, rt.dense_factors.get(node, eye))
        h += acc
    return h


# --------------------------------------------------------------------------
# compiled tree operator
# --------------------------------------------------------------------------

def _axis_maps(topology: TreeTopology):
    """node -> {neighbor: state-tensor axis} with phys at axis 0."""
    adj = topology.adjacency()
    return {
        u: {w: 1 + i for i, w in enumerate(nbrs)}
        for u, nbrs in adj.items()
    }


def _bond_direction(u, v):
    return +1 if u < v else -1


def _side_sets(topology: TreeTopology):
    """(u, v) -> frozenset of nodes on u's side when edge (u, v) is removed."""
    adj = topology.adjacency()
    sides = {}

    def collect(u, v):
        nodes = {u}
        stack = [u]
        while stack:
            x = stack.pop()
            for w in adj[x]:
                if w != v and w not in nodes:
                    nodes.add(w)
                    stack.append(w)
        sides[(u, v)] = frozenset(nodes)

    for a, b in topology.edges:
        collect(a, b)
        collect(b, a)
    return sides


@dataclass
class TTNOperator:
    """Compiled tree operator.

    Node tensors carry legs (phys out, phys in, then one channel leg per
    ascending neighbor); channel leg direction is +1 on the lower-numbered
    endpoint of each edge.  ``edge_states[(a, b)]`` lists the automaton
    states (ready, done, open term parts) living on that edge.
    """

    topology: TreeTopology
    tensors: dict          # node -> BlockTensor
    edge_states: dict      # (a, b) -> list of (state_key, charge)

    @property
    def edge_profile(self):
        return {e: len(s) for e, s in self.edge_states.items()}


def compile_ttno(topology: TreeTopology, terms: TermList) -> TTNOperator:
    """Compile a term list into an exact tree operator (rooted at node 1).

    Channel bookkeeping matches the chain MPO compiler: on every edge, the
    states are ready (nothing applied on the leaf side yet), done (completed
    terms accumulated), and one open state per hopping part whose JW string
    crosses the edge.  The leaf side of an edge is the side not containing
    node 1; completed terms flow toward node 1, whose tensor absorbs the
    final done state.
    """
    if terms.n_sites != topology.n_nodes:
        raise ValueError("term list site count mismatch")
    if not terms.hoppings and not terms.onsite:
        raise ValueError("empty term list")
    n = topology.n_nodes
    adj = topology.adjacency()
    sides = _side_sets(topology)
    order = jw_order(topology)
    pos = {node: i for i, node in enumerate(order)}
    ops = LOCAL_OPS

    onsite_amp = {}
    for o in terms.onsite:
        if not (1 <= o.mu <= n):
            raise ValueError(f"onsite index {o.mu} out of range")
        onsite_amp[o.mu] = onsite_amp.get(o.mu, 0.0) + o.amplitude

    supports = []
    lower_of = []
    upper_of = []
    for h in terms.hoppings:
        if not (1 <= h.mu <= n and 1 <= h.nu <= n and h.mu != h.nu):
            raise ValueError(f"hopping indices ({h.mu}, {h.nu}) out of range")
        pa, pb = sorted((pos[h.mu], pos[h.nu]))
        supports.append(frozenset(order[pa:pb + 1]))
        lower_of.append(order[pa])
        upper_of.append(order[pb])

    # leaf-side set and signed charge flow per edge
    leaf_side = {}
    flow_sign = {}
    for a, b in topology.edges:
        leaf = b if 1 in sides[(a, b)] else a
        par = a if leaf == b else b
        leaf_side[(a, b)] = sides[(leaf, par)]
        flow_sign[(a, b)] = -_bond_direction(leaf, par)

    def open_charge(idx, part, edge):
        """Bond charge of an open term part: signed operator charge already
        applied on the leaf side of the edge."""
        e = _SPIN_CHARGE[terms.hoppings[idx].spin]
        sgn = +1 if part == 1 else -1
        f = (0, 0)
        side = leaf_side[edge]
        if lower_of[idx] in side:
            f = (f[0] + sgn * e[0], f[1] + sgn * e[1])
        if upper_of[idx] in side:
            f = (f[0] - sgn * e[0], f[1] - sgn * e[1])
        s = flow_sign[edge]
        return (s * f[0], s * f[1])

    edge_states = {}
    for e in topology.edges:
        states = [("ready", (0, 0)), ("done", (0, 0))]
        side = leaf_side[e]
        for idx, sup in enumerate(supports):
            if sup & side and sup - side:
                for part in (1, 2):
                    states.append((("open", idx, part),
                                   open_charge(idx, part, e)))
        edge_states[e] = states

    # parent direction: BFS from node 1 (the graph itself is the tree)
    parent = {1: None}
    stack = [1]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if w not in parent:
                parent[w] = u
                stack.append(w)

    tensors = {}
    for u in range(1, n + 1):
        nbrs = adj[u]
        edge_of = {w: (min(u, w), max(u, w)) for w in nbrs}
        pw = parent[u]
        children = [w for w in nbrs if w != pw]
        subtree_incl = frozenset({u}).union(*(sides[(w, u)] for w in children)) \
            if children else frozenset({u})

        transitions = []  # ({neighbor: state_key}, 4x4 matrix)

        def entry(child_states, mat, out_state):
            asg = dict(child_states)
            if pw is not None:
                asg[pw] = out_state
            elif out_state != "done":
                return  # the root absorbs only completed terms
            transitions.append((asg, mat))

        # identity pass-through (never emitted at the root)
        entry({w: "ready" for w in children}, ops["I"], "ready")
        # done accumulator pass-through
        for c in children:
            entry({w: ("done" if w == c else "ready") for w in children},
                  ops["I"], "done")
        # on-site completion
        amp = onsite_amp.get(u, 0.0)
        if amp != 0.0:
            entry({w: "ready" for w in children},
                  amp * ops["n_up_n_down"], "done")
        # hopping channels
        for idx, sup in enumerate(supports):
            if not (sup & subtree_incl):
                continue
            if any(sup <= sides[(w, u)] for w in children):
                continue  # completed strictly below; carried by done
            h = terms.hoppings[idx]
            for part in (1, 2):
                lower_mat, upper_mat = _endpoint_mats(h, part)
                if u == lower_of[idx]:
                    mat = lower_mat
                elif u == upper_of[idx]:
                    mat = upper_mat
                elif u in sup:
                    mat = ops["P"]
                else:
                    mat = ops["I"]
                child_states = {
                    w: (("open", idx, part) if sup & sides[(w, u)]
                        else "ready")
                    for w in children
                }
                out = ("done" if sup <= subtree_incl
                       else ("open", idx, part))
                entry(child_states, mat, out)

        # scatter transitions into a block tensor
        legs = [phys_leg(), phys_leg().flipped()]
        indices = {}
        for w in nbrs:
            lg, index = _bond_leg(edge_states[edge_of[w]],
                                  _bond_direction(u, w))
            legs.append(lg)
            indices[w] = index
        blocks = {}
        for assignment, mat in transitions:
            chan = [indices[w][assignment[w]] for w in nbrs]
            for so in range(4):
                for si in range(4):
                    v = mat[so, si]
                    if v == 0.0:
                        continue
                    bkey = (PHYS_CHARGES[so], PHYS_CHARGES[si]) + tuple(
                        q for q, _ in chan)
                    blk = blocks.get(bkey)
                    if blk is None:
                        shape = (1, 1) + tuple(
                            legs[2 + i].dim(chan[i][0])
                            for i in range(len(nbrs)))
                        blk = np.zeros(shape)
                        blocks[bkey] = blk
                    blk[(0, 0) + tuple(i for _, i in chan)] += v
        tensors[u] = BlockTensor(tuple(legs), blocks)

    return TTNOperator(topology, tensors, edge_states)


def ttno_dense_matrix(ttno: TTNOperator):
    """Contract the tree operator to a dense 4^N x 4^N matrix (small N),
    with physical factors ordered by JW position (position 1 most
    significant) — directly comparable to ``routed_dense_matrix``."""
    top = ttno.topology
    n = top.n_nodes
    if n > 6:
        raise ValueError("dense tree-operator contraction limited to N <= 6")
    adj = top.adjacency()
    acc = None
    labels = []

    def absorb(u, par):
        nonlocal acc, labels
        w = ttno.tensors[u]
        wl = [(u, "out"), (u, "in")] + [("c", u, x) for x in adj[u]]
        if acc is None:
            acc, labels = w, wl
        else:
            ax = labels.index(("c", par, u))
            bx = 2 + adj[u].index(par)
            acc = contract(acc, w, [(ax, bx)])
            labels = [l for i, l in enumerate(labels) if i != ax]
            labels += [l for i, l in enumerate(wl) if i != bx]
        for x in adj[u]:
            if x != par:
                absorb(x, u)

    absorb(1, None)
    dense = acc.to_dense()
    order = jw_order(top)
    out_perm = [labels.index((node, "out")) for node in order]
    in_perm = [labels.index((node, "in")) for node in order]
    return dense.transpose(out_perm + in_perm).reshape(4**n, 4**n)


# --------------------------------------------------------------------------
# TTN state
# --------------------------------------------------------------------------

@dataclass
class TTNState:
    """One tensor per node: legs (phys, then bond legs to ascending neighbors).

    Bond leg direction between u and v is +1 on the min(u, v) side.  The
    center node's tensor carries the total charge; all other tensors are
    charge-zero isometries toward the center.
    """

    topology: TreeTopology
    tensors: dict  # node -> BlockTensor
    center: int

    @property
    def n_sites(self):
        return self.topology.n_nodes

    @property
    def total_charge(self):
        return self.tensors[self.center].charge

    def norm(self):
        return self.tensors[self.center].norm()


def ttn_product_init(topology: TreeTopology, occupations, center=1) -> TTNState:
    """Product state over nodes; occupations[node-1] in 0..3 (chain indexing).

    Bond sector charges are fixed by charge flow toward the center node,
    whose tensor carries the total charge.
    """
    n = topology.n_nodes
    occupations = list(occupations)
    if len(occupations) != n:
        raise ValueError("need one occupation per node")
    adj = topology.adjacency()
    phys_q = {u: PHYS_CHARGES[occupations[u - 1]] for u in range(1, n + 1)}
    sides = _side_sets(topology)
    bond_q = {}
    for a, b in topology.edges:
        child, par = (b, a) if center in sides[(a, b)] else (a, b)
        far = sides[(child, par)]
        tot = (0, 0)
        for x in far:
            tot = (tot[0] + phys_q[x][0], tot[1] + phys_q[x][1])
        d = _bond_direction(child, par)
        bond_q[(a, b)] = (-d * tot[0], -d * tot[1])
    total = (0, 0)
    for u in range(1, n + 1):
        total = (total[0] + phys_q[u][0], total[1] + phys_q[u][1])
    tensors = {}
    for u in range(1, n + 1):
        legs = [phys_leg()]
        key = [phys_q[u]]
        for w in adj[u]:
            e = (min(u, w), max(u, w))
            legs.append(Leg(_bond_direction(u, w), ((bond_q[e], 1),)))
            key.append(bond_q[e])
        charge = total if u == center else (0, 0)
        tensors[u] = BlockTensor(
            tuple(legs), {tuple(key): np.ones((1,) * (1 + len(adj[u])))},
            charge,
        )
    return TTNState(topology, tensors, center)


def _euler_tour(topology: TreeTopology, root=1):
    """Directed edges of a depth-first tour from the root and back."""
    adj = topology.adjacency()
    moves = []

    def visit(u, par):
        for w in adj[u]:
            if w != par:
                moves.append((u, w))
                visit(w, u)
                moves.append((w, u))

    visit(root, None)
    return moves


def _merge_pair(state: TTNState, axmaps, u, v):
    return contract(state.tensors[u], state.tensors[v],
                    [(axmaps[u][v], axmaps[v][u])])


def _split_pair(state: TTNState, axmaps, u, v, theta, max_dim, cutoff):
    """Split the merged pair across edge (u, v), center moving to v."""
    n_left = len(state.topology.adjacency()[u])  # phys + other bonds
    res = svd_truncate(theta, tuple(range(n_left)),
                       TruncationSpec(max_dim, cutoff))
    left = res.left
    right = res.right_weighted()
    au = axmaps[u][v]
    av = axmaps[v][u]
    if u > v:  # restore the fixed bond direction convention
        left = left.flip_leg(left.ndim - 1)
        right = right.flip_leg(0)
    # reinsert the bond leg at its canonical axis
    perm_l = list(range(au)) + [left.ndim - 1] + list(range(au, left.ndim - 1))
    left = left.transpose(perm_l)
    perm_r = list(range(1, av + 1)) + [0] + list(range(av + 1, right.ndim))
    right = right.transpose(perm_r)
    state.tensors[u] = left
    state.tensors[v] = right
    state.center = v
    return res.discarded_weight, left.legs[au].total_dim


def _lcontract(x, xlabels, y, ylabels, label_pairs, b_cache=None):
    """Contract by leg labels, returning the result and its label list."""
    pairs = [(xlabels.index(a), ylabels.index(b)) for a, b in label_pairs]
    out = contract(x, y, pairs, b_cache=b_cache)
    xdone = {p[0] for p in pairs}
    ydone = {p[1] for p in pairs}
    rest = [l for i, l in enumerate(xlabels) if i not in xdone]
    rest += [l for i, l in enumerate(ylabels) if i not in ydone]
    return out, rest


def _w_labels(u, nbrs):
    return [("pout", u), ("pin", u)] + [("wc", u, w) for w in nbrs]


def _ket_labels(u, nbrs):
    return [("p", u)] + [("k", u, w) for w in nbrs]


def _bra_labels(u, nbrs):
    return [("bp", u)] + [("bk", u, w) for w in nbrs]


def _absorb_node(x, xl, state, ttno, adj, envs, u, skip):
    """Contract node u's ket, operator tensor, and bra into the running
    environment, leaving the legs toward ``skip`` open."""
    nbrs = adj[u]
    for w in nbrs:
        if w == skip:
            continue
        env = envs[(w, u)]
        x, xl = _lcontract(x, xl, env, [("b", w), ("c", w), ("ek", w)],
                           [((("k", u, w)), ("ek", w))])
    pairs = [(("p", u), ("pin", u))]
    pairs += [(("c", w), ("wc", u, w)) for w in nbrs if w != skip]
    x, xl = _lcontract(x, xl, ttno.tensors[u], _w_labels(u, nbrs), pairs)
    bra = state.tensors[u].dagger()
    pairs = [(("pout", u), ("bp", u))]
    pairs += [(("b", w), ("bk", u, w)) for w in nbrs if w != skip]
    x, xl = _lcontract(x, xl, bra, _bra_labels(u, nbrs), pairs)
    return x, xl


def _edge_env(state: TTNState, ttno: TTNOperator, adj, envs, u, v):
    """Environment for directed edge u -> v: everything on u's side
    contracted; legs (bra, channel, ket)."""
    x, xl = _absorb_node(state.tensors[u], _ket_labels(u, adj[u]),
                         state, ttno, adj, envs, u, v)
    perm = (xl.index(("bk", u, v)), xl.index(("wc", u, v)),
            xl.index(("k", u, v)))
    envs[(u, v)] = x.transpose(perm)


def _all_envs_toward(state, ttno, adj, root):
    envs = {}

    def build(u, par):
        for w in adj[u]:
            if w != par:
                build(w, u)
        if par is not None:
            _edge_env(state, ttno, adj, envs, u, par)

    build(root, None)
    return envs


def _pair_operator(ttno: TTNOperator, adj, u, v):
    """Node operators of u and v fused over their mutual channel leg."""
    return _lcontract(ttno.tensors[u], _w_labels(u, adj[u]),
                      ttno.tensors[v], _w_labels(v, adj[v]),
                      [((("wc", u, v)), ("wc", v, u))])


def _theta_labels(adj, u, v):
    lbl = [("p", u)] + [("k", u, w) for w in adj[u] if w != v]
    lbl += [("p", v)] + [("k", v, w) for w in adj[v] if w != u]
    return lbl


def _pair_matvec_factory(tlabels, w_uv, wlabels, env_list):
    """Effective-Hamiltonian action on the merged pair tensor.

    ``env_list`` entries are (node, pair_member, env); matricization caches
    for the fixed tensors persist across eigensolver iterations.
    """
    env_caches = [dict() for _ in env_list]
    w_cache = {}
    target = list(tlabels)
    phys_nodes = [lbl[1] for lbl in target if lbl[0] == "p"]

    def apply(t):
        x, xl = t, list(tlabels)
        for (w, par, env), cache in zip(env_list, env_caches):
            x, xl = _lcontract(x, xl, env, [("b", w), ("c", w), ("ek", w)],
                               [((("k", par, w)), ("ek", w))],
                               b_cache=cache)
        pairs = [(("p", n), ("pin", n)) for n in phys_nodes]
        pairs += [(("c", w), ("wc", par, w)) for (w, par, _) in env_list]
        x, xl = _lcontract(x, xl, w_uv, wlabels, pairs, b_cache=w_cache)
        perm = []
        for lbl in target:
            if lbl[0] == "p":
                perm.append(xl.index(("pout", lbl[1])))
            else:
                perm.append(xl.index(("b", lbl[2])))
        return x.transpose(perm)

    return apply


def _solve_pair(theta, apply_h, config):
    packer = _ThetaPacker(theta.legs, theta.charge)
    n = packer.size

    def matvec(vec):
        return packer.pack(apply_h(packer.unpack(vec)))

    v0 = packer.pack(theta)
    nv = np.linalg.norm(v0)
    if nv == 0:
        raise EigensolverError("zero pair tensor in tree sweep")
    v0 /= nv
    if n <= 24:
        dense = np.column_stack([matvec(col) for col in np.eye(n)])
        dense = 0.5 * (dense + dense.T)
        w, vecs = np.linalg.eigh(dense)
        return float(w[0]), packer.unpack(vecs[:, 0])
    e, vec = _lanczos_lowest(matvec, v0, min(n - 1, config.eig_maxiter),
                             config.eig_tol)
    if not np.isfinite(e) or not np.all(np.isfinite(vec)):
        raise EigensolverError("tree eigensolver produced non-finite values")
    return e, packer.unpack(vec)


def _ttn_apply_noise(state: TTNState, amplitude, rng, axmaps, max_dim=4):
    """Enrich bond sectors of a product tree state (mirrors the chain init)."""
    if amplitude == 0:
        return
    for u, v in _euler_tour(state.topology, state.center):
        theta = _merge_pair(state, axmaps, u, v)
        noise = random_tensor(theta.legs, theta.charge, rng)
        theta = theta.add(noise, factor=amplitude * theta.norm()
                          / max(noise.norm(), 1e-300))
        _split_pair(state, axmaps, u, v, theta, max_dim, 0.0)
    c = state.tensors[state.center]
    state.tensors[state.center] = c.scale(1.0 / c.norm())


def ttn_expectation(ttno: TTNOperator, state: TTNState):
    """<Psi|H|Psi> for a tree state with isometry gauge toward its center."""
    adj = state.topology.adjacency()
    envs = _all_envs_toward(state, ttno, adj, state.center)
    c = state.center
    x, xl = _absorb_node(state.tensors[c], _ket_labels(c, adj[c]),
                         state, ttno, adj, envs, c, None)
    return x.item()


def ttn_ground_state(topology: TreeTopology, terms: TermList,
                     init: TTNState, config: DMRGConfig = DMRGConfig(),
                     log=None, edge_caps=None) -> DMRGResult:
    """Ground-state sweep over the tree: two-node updates along an Euler tour.

    Truncation and convergence follow the chain algorithm (per-sweep bond
    cap schedule, dual truncation/energy thresholds); subspace mixing is not
    used because the two-node update already explores the joint charge space
    of each pair.  ``edge_caps`` optionally caps individual edges below the
    schedule value, keyed by (min_node, max_node).
    """
    if init.topology != topology:
        raise ValueError("initial state topology mismatch")
    if init.center != 1:
        raise ValueError("initial center must be node 1")
    ttno = compile_ttno(topology, terms)
    adj = topology.adjacency()
    axmaps = _axis_maps(topology)
    state = TTNState(topology, dict(init.tensors), init.center)
    c = state.tensors[state.center]
    nrm = c.norm()
    if nrm == 0:
        raise ValueError("initial state has zero norm")
    state.tensors[state.center] = c.scale(1.0 / nrm)
    edge_caps = dict(edge_caps or {})

    envs = _all_envs_toward(state, ttno, adj, 1)
    tour = _euler_tour(topology, 1)
    pair_ops = {}  # unordered edge -> fused (tensor, labels)
    schedule = config.schedule.max_bond_per_sweep
    records = []
    converged = False
    energy = None
    last_energy = None
    for sweep_idx in range(len(schedule)):
        m = schedule[sweep_idx]
        t0 = time.perf_counter()
        sweep_max_disc = 0.0
        sweep_max_bond = 1
        for u, v in tour:
            theta = _merge_pair(state, axmaps, u, v)
            tlabels = _theta_labels(adj, u, v)
            edge = (min(u, v), max(u, v))
            if edge not in pair_ops:
                pair_ops[edge] = _pair_operator(ttno, adj, *edge)
            w_uv, wlabels = pair_ops[edge]
            env_list = [(w, u, envs[(w, u)]) for w in adj[u] if w != v]
            env_list += [(w, v, envs[(w, v)]) for w in adj[v] if w != u]
            apply_h = _pair_matvec_factory(tlabels, w_uv, wlabels, env_list)
            energy, theta = _solve_pair(theta, apply_h, config)
            cap = min(m, edge_caps.get(edge, m))
            disc, bond_dim = _split_pair(state, axmaps, u, v, theta, cap,
                                         config.svd_cutoff)
            _edge_env(state, ttno, adj, envs, u, v)
            sweep_max_disc = max(sweep_max_disc, disc)
            sweep_max_bond = max(sweep_max_bond, bond_dim)
        # tour ends back at node 1
        rec = SweepRecord(sweep_idx + 1, "TOUR", sweep_max_bond,
                          sweep_max_disc, energy, time.perf_counter() - t0)
        records.append(rec)
        if log is not None:
            log(rec.log_line())
        if (
            last_energy is not None
            and sweep_max_disc < config.criteria.trunc_threshold
            and abs(last_energy - energy) < config.criteria.energy_threshold
        ):
            converged = True
            break
        last_energy = energy

    return DMRGResult(
        final_energy=energy,
        energy_per_site=energy / topology.n_nodes,
        sweep_records=records,
        converged=converged,
        final_state=state,
        config=config,
    )
