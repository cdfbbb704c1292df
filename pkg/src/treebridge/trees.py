"""Rooted binary coalescent trees in canonical form, and subtree moves on them.

A tree over ``N`` sampled sequences has leaves labelled ``1..N`` (all at time
zero) and internal nodes labelled ``N+1..2N-1`` in strictly increasing time
order, so the root is always ``2N-1``.  The topology is stored as an
``(N-1, 2)`` integer matrix whose row ``k`` (0-based) lists the two children
of internal node ``N+1+k`` in increasing label order.  Node times are kept in
an array indexed directly by node label (slot 0 is unused padding).

Because labels encode the time ranking, relabelling happens whenever node
times are rearranged; :func:`canonicalize` is the single place that assigns
labels, and the surgery routines report the label mapping they induced.

Leaf sets are represented as bitmasks: bit ``n-1`` set means leaf ``n`` is a
descendant.  Data columns use the same encoding (bit set = entry one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTimesError,
    InvalidOperationError,
    InvalidTreeError,
    NewickError,
)

# Two internal times closer than this are considered tied, which the
# canonical form cannot represent.
TIME_TIE_TOL = 1e-12

# Sentinel returned by mutation_branch for columns no branch can explain.
# It is an int (not None) so callers can distinguish "no mutation needed"
# (None, all-zero column) from "impossible".
INCOMPATIBLE = -1

WHITE = 0
BLACK = 1
GREY = 2


class Tree:
    """Immutable rooted binary tree with canonically-labelled nodes.

    Parameters
    ----------
    children : (N-1, 2) array of int
        Row ``k`` holds the children of internal node ``N+1+k``, in
        increasing label order.
    times : sequence of 2N-1 floats
        Node times, leaves first: entry ``i`` is the time of node ``i+1``.
        Leaf times must be exactly zero and internal times strictly
        increasing.
    """

    __slots__ = ("n_leaves", "children", "times", "parent", "leafset", "_hash")

    def __init__(self, children, times):
        children = np.asarray(children, dtype=np.int64)
        times_in = np.asarray(times, dtype=float)
        if children.ndim != 2 or children.shape[1] != 2:
            raise InvalidTreeError("children matrix must have shape (N-1, 2)")
        n = children.shape[0] + 1
        if n < 2:
            raise InvalidTreeError("a tree needs at least two leaves")
        if times_in.shape != (2 * n - 1,):
            raise InvalidTreeError(
                f"expected {2 * n - 1} node times, got {times_in.shape}"
            )
        if np.any(times_in[:n] != 0.0):
            raise InvalidTreeError("leaf times must be zero")
        internal = times_in[n:]
        if np.any(~np.isfinite(times_in)) or np.any(internal <= 0.0):
            raise InvalidTreeError("internal times must be finite and positive")
        if np.any(np.diff(internal) <= TIME_TIE_TOL):
            raise DegenerateTimesError(
                "internal node times must be strictly increasing "
                f"(separation > {TIME_TIE_TOL})"
            )

        # Padded, label-indexed copies: slot 0 unused.
        t = np.zeros(2 * n, dtype=float)
        t[1:] = times_in
        parent = np.zeros(2 * n, dtype=np.int64)
        seen = np.zeros(2 * n, dtype=bool)
        for k in range(n - 1):
            node = n + 1 + k
            a, b = children[k]
            if not (1 <= a < b <= 2 * n - 2):
                raise InvalidTreeError(
                    f"row {k}: children must be distinct non-root labels "
                    "in increasing order"
                )
            if a >= node or b >= node:
                raise InvalidTreeError(
                    f"row {k}: child label at or above parent {node} "
                    "(time order violated)"
                )
            if seen[a] or seen[b]:
                raise InvalidTreeError(f"row {k}: node used as a child twice")
            seen[a] = seen[b] = True
            parent[a] = node
            parent[b] = node
        if not np.all(seen[1 : 2 * n - 1]):
            raise InvalidTreeError("every non-root node must appear as a child")

        leafset = np.zeros(2 * n, dtype=object)
        for leaf in range(1, n + 1):
            leafset[leaf] = 1 << (leaf - 1)
        for k in range(n - 1):
            a, b = children[k]
            leafset[n + 1 + k] = leafset[a] | leafset[b]

        children.setflags(write=False)
        t.setflags(write=False)
        parent.setflags(write=False)
        self.n_leaves = n
        self.children = children
        self.times = t
        self.parent = parent
        self.leafset = tuple(leafset)
        self._hash = None

    # -- basic accessors ---------------------------------------------------

    @property
    def n_nodes(self):
        return 2 * self.n_leaves - 1

    @property
    def root(self):
        return 2 * self.n_leaves - 1

    def is_leaf(self, node):
        return node <= self.n_leaves

    def children_of(self, node):
        """The two children of internal ``node``, in increasing label order."""
        return tuple(self.children[node - self.n_leaves - 1])

    def time_of(self, node):
        return float(self.times[node])

    def branch_interval(self, node):
        """Time span ``(t_node, t_parent)`` of the branch above ``node``.

        The root's notional parent sits at +infinity.
        """
        pa = self.parent[node]
        upper = float(self.times[pa]) if pa else np.inf
        return float(self.times[node]), upper

    def mrca(self, a, b):
        """Most recent common ancestor of nodes ``a`` and ``b``."""
        # Parent labels always exceed child labels, so walk the smaller up.
        while a != b:
            if a < b:
                a = self.parent[a]
            else:
                b = self.parent[b]
        return int(a)

    def topology_key(self):
        """Hashable identity of the ranked topology (ignores times)."""
        return self.children.tobytes()

    # -- equality / hashing -------------------------------------------------

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return (
            self.n_leaves == other.n_leaves
            and np.array_equal(self.children, other.children)
            and np.array_equal(self.times, other.times)
        )

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.children.tobytes(), self.times.tobytes()))
        return self._hash

    def __repr__(self):
        return f"Tree(n={self.n_leaves}, {serialize_newick(self)!r})"

    # -- derived quantities ---------------------------------------------------

    def with_times(self, times_by_label):
        """Copy of this tree with new times (same label-to-rank assignment).

        ``times_by_label`` is padded (length 2N, slot 0 ignored).  The new
        times must preserve the label ordering; otherwise the result would
        not be canonical and an error is raised.
        """
        t = np.asarray(times_by_label, dtype=float)
        return Tree(self.children, t[1:])


@dataclass(frozen=True)
class SprOp:
    """A subtree move: prune the branch above ``u`` at time ``r`` and
    reattach it on the branch above ``v`` at time ``w``.

    The all-zero quadruple denotes "no move".
    """

    u: int
    v: int
    r: float
    w: float

    def is_identity(self):
        return self.u == 0

    def as_tuple(self):
        return (self.u, self.v, self.r, self.w)


IDENTITY_OP = SprOp(0, 0, 0.0, 0.0)


def canonicalize(parent, times, n_leaves, *, return_map=False):
    """Build a canonical :class:`Tree` from a raw parent map.

    Parameters
    ----------
    parent : dict
        Maps each node id to its parent id; the root maps to 0.  Leaf ids
        must be ``1..n_leaves``; internal ids are arbitrary ints.
    times : dict
        Node id to time.  Leaves must be at 0.
    n_leaves : int
    return_map : bool
        Also return the dict sending each input id to its canonical label.

    Internal nodes are relabelled ``n_leaves+1 ..`` in increasing time
    order.  Ties within ``TIME_TIE_TOL`` raise :class:`DegenerateTimesError`.
    """
    n = n_leaves
    internal = [node for node in parent if not 1 <= node <= n]
    internal.sort(key=lambda node: times[node])
    if len(internal) != n - 1:
        raise InvalidTreeError(
            f"expected {n - 1} internal nodes, found {len(internal)}"
        )
    label = {leaf: leaf for leaf in range(1, n + 1)}
    for rank, node in enumerate(internal):
        label[node] = n + 1 + rank

    kids = {}
    for node, pa in parent.items():
        if pa:
            kids.setdefault(pa, []).append(node)
    children = np.zeros((n - 1, 2), dtype=np.int64)
    for node in internal:
        cc = kids.get(node, [])
        if len(cc) != 2:
            raise InvalidTreeError(f"node {node} has {len(cc)} children")
        a, b = sorted(label[c] for c in cc)
        children[label[node] - n - 1] = (a, b)
    times_vec = np.zeros(2 * n - 1, dtype=float)
    for node, lab in label.items():
        times_vec[lab - 1] = times[node]
    tree = Tree(children, times_vec)
    if return_map:
        return tree, label
    return tree


def branch_metrics(tree):
    """Branch lengths and their total.

    Returns ``(lengths, total)`` where ``lengths`` is label-indexed (padded;
    the root slot is zero because the root has no branch) and ``total`` sums
    lengths over all 2N-2 non-root nodes.
    """
    lengths = np.zeros(2 * tree.n_leaves, dtype=float)
    nodes = np.arange(1, tree.n_nodes)  # excludes the root
    lengths[nodes] = tree.times[tree.parent[nodes]] - tree.times[nodes]
    return lengths, float(lengths.sum())


def regraft_upper_time(tree, u, v):
    """Upper end of the branch of ``v`` once ``u``'s branch is pruned.

    Pruning deletes ``pa(u)``, so the sibling branch of ``u`` extends to the
    grandparent; for every other node the interval is unchanged.  Returns
    +inf when the (possibly extended) branch is the one above the root.
    """
    d = tree.parent[u]
    pa_v = tree.parent[v]
    if pa_v == d:
        pa_v = tree.parent[d]
    return float(tree.times[pa_v]) if pa_v else np.inf


def check_spr(tree, op):
    """Validate ``op`` against ``tree``; raise InvalidOperationError if bad."""
    if op.is_identity():
        if (op.u, op.v, op.r, op.w) != (0, 0, 0.0, 0.0):
            raise InvalidOperationError("identity op must be all zeros")
        return
    u, v, r, w = op.u, op.v, op.r, op.w
    n_nodes = tree.n_nodes
    if not 1 <= u <= n_nodes - 1 or u == tree.root:
        raise InvalidOperationError(f"pruned node {u} out of range or root")
    if not 1 <= v <= n_nodes:
        raise InvalidOperationError(f"regraft node {v} out of range")
    if v == u or v == tree.parent[u]:
        raise InvalidOperationError(
            "regraft branch may not be the pruned node or its parent"
        )
    t_u = tree.times[u]
    t_pa_u = tree.times[tree.parent[u]]
    if not t_u <= r <= t_pa_u:
        raise InvalidOperationError(
            f"prune time {r} outside branch [{t_u}, {t_pa_u}]"
        )
    if not w > r:
        raise InvalidOperationError(f"regraft time {w} not above prune time {r}")
    upper = regraft_upper_time(tree, u, v)
    if not tree.times[v] < w < upper:
        raise InvalidOperationError(
            f"regraft time {w} outside branch ({tree.times[v]}, {upper}) of {v}"
        )


def apply_spr(tree, op, *, return_map=False):
    """Apply a subtree move, returning the new canonical tree.

    With ``return_map=True`` also returns the dict sending each surviving
    label of the input tree to its label in the result; the deleted node
    ``pa(u)`` maps to the label of the newly created node (the move treats
    deletion and creation as one node changing position).
    """
    check_spr(tree, op)
    if op.is_identity():
        if return_map:
            return tree, {node: node for node in range(1, tree.n_nodes + 1)}
        return tree

    u, v, w = op.u, op.v, op.w
    n = tree.n_leaves
    parent = {node: int(tree.parent[node]) for node in range(1, tree.n_nodes + 1)}
    times = {node: float(tree.times[node]) for node in range(1, tree.n_nodes + 1)}

    d = parent[u]
    g = parent[d]
    a, b = tree.children_of(d)
    sibling = b if a == u else a
    # Splice out d, reattach the moved node (which reuses d's id) above v.
    parent[sibling] = g
    pa_v = parent[v]
    parent[v] = d
    parent[u] = d
    parent[d] = pa_v
    times[d] = float(w)

    new_tree, label = canonicalize(parent, times, n, return_map=True)
    if return_map:
        return new_tree, label
    return new_tree


def inverse_spr(tree, op):
    """The quadruple undoing ``op`` on ``apply_spr(tree, op)``.

    The pruned subtree is detached again at the same level ``r`` and
    reattached where it came from: on the old sibling's branch at the old
    parent time.
    """
    check_spr(tree, op)
    if op.is_identity():
        return IDENTITY_OP
    _, label = apply_spr(tree, op, return_map=True)
    d = tree.parent[op.u]
    a, b = tree.children_of(d)
    sibling = b if a == op.u else a
    return SprOp(label[op.u], label[sibling], op.r, float(tree.times[d]))


# -- data-column compatibility ------------------------------------------------


def mutation_branch(tree, column_mask):
    """The branch explaining a binary data column, if any.

    ``column_mask`` holds bit ``n-1`` for every leaf ``n`` whose entry is
    one.  Returns ``None`` for the all-zero column (no mutation needed),
    the node label whose leaf descendants exactly match the ones, or
    :data:`INCOMPATIBLE` when no branch matches.
    """
    if column_mask == 0:
        return None
    leafset = tree.leafset
    for node in range(1, tree.n_nodes):  # root excluded: it has no branch
        if leafset[node] == column_mask:
            return node
    return INCOMPATIBLE


def is_compatible(tree, column_mask):
    return mutation_branch(tree, column_mask) != INCOMPATIBLE


@dataclass(frozen=True)
class ColouredTree:
    """A tree coloured against a data column.

    ``colour`` is label-indexed (padded): WHITE/BLACK by the column entry at
    the leaves, interior nodes take the common child colour or GREY.
    ``subroot`` marks nodes whose colour differs from their parent's (the
    maximal monochrome subtree roots); grey nodes are never subtree roots.
    """

    tree: Tree
    colour: tuple
    subroot: tuple


def colour_tree(tree, column_mask):
    """Colour ``tree`` against the column encoded in ``column_mask``."""
    n = tree.n_leaves
    colour = [GREY] * (2 * n)
    for leaf in range(1, n + 1):
        colour[leaf] = BLACK if (column_mask >> (leaf - 1)) & 1 else WHITE
    for node in range(n + 1, 2 * n):
        a, b = tree.children_of(node)
        colour[node] = colour[a] if colour[a] == colour[b] else GREY
    subroot = [False] * (2 * n)
    for node in range(1, 2 * n):
        if colour[node] == GREY:
            continue
        pa = tree.parent[node]
        subroot[node] = pa == 0 or colour[pa] != colour[node]
    return ColouredTree(tree, tuple(colour), tuple(subroot))


def count_maximal_black_subtrees(coloured):
    colour, subroot = coloured.colour, coloured.subroot
    return sum(
        1
        for node in range(1, len(colour))
        if subroot[node] and colour[node] == BLACK
    )


def enumerate_heuristic_sprs(coloured):
    """Candidate ``(u, v)`` node pairs for a single compatibility-restoring
    subtree move, read off the colouring.

    Two shapes are admitted: (i) a maximal black subtree root moved onto any
    black node's branch, and (ii) a maximal white subtree root moved onto
    any branch whose parent end is not black.  Structural constraints (u not
    the root, v neither u nor its parent) are applied; nothing else is.
    """
    tree = coloured.tree
    colour, subroot = coloured.colour, coloured.subroot
    root = tree.root
    out = []
    for u in range(1, tree.n_nodes + 1):
        if u == root or not subroot[u]:
            continue
        cu = colour[u]
        pa_u = tree.parent[u]
        for v in range(1, tree.n_nodes + 1):
            if v == u or v == pa_u:
                continue
            if cu == BLACK:
                if colour[v] == BLACK:
                    out.append((u, v))
            else:  # cu == WHITE
                pa_v = tree.parent[v]
                if pa_v == 0 or colour[pa_v] != BLACK:
                    out.append((u, v))
    return out


# -- Newick ---------------------------------------------------------------


def serialize_newick(tree):
    """Newick string with leaf labels and branch lengths, e.g. ``(1:1,2:1);``."""

    def fmt(x):
        return f"{x:.12g}"

    def render(node):
        if tree.is_leaf(node):
            return str(node)
        a, b = tree.children_of(node)
        ta, tb = tree.times[a], tree.times[b]
        t = tree.times[node]
        return f"({render(a)}:{fmt(t - ta)},{render(b)}:{fmt(t - tb)})"

    return render(tree.root) + ";"


def parse_newick(text):
    """Parse a binary ultrametric Newick string produced by
    :func:`serialize_newick` (integer leaf labels, branch lengths required).

    Node heights are reconstructed from the branch lengths; inconsistent
    heights (non-ultrametric input) raise :class:`NewickError`.
    """
    s = text.strip()
    pos = 0
    next_id = [0]
    parent_map = {}
    height = {}

    def error(msg):
        raise NewickError(msg, pos)

    def peek():
        return s[pos] if pos < len(s) else ""

    def parse_number():
        nonlocal pos
        start = pos
        while pos < len(s) and (s[pos].isdigit() or s[pos] in "+-.eE"):
            pos += 1
        if start == pos:
            error("expected a number")
        try:
            return float(s[start:pos])
        except ValueError:
            error(f"bad number {s[start:pos]!r}")

    def parse_subtree():
        nonlocal pos
        if peek() == "(":
            pos += 1
            a = parse_subtree()
            if peek() != ":":
                error("expected ':' after subtree")
            pos += 1
            la = parse_number()
            if peek() != ",":
                error("expected ',' between children")
            pos += 1
            b = parse_subtree()
            if peek() != ":":
                error("expected ':' after subtree")
            pos += 1
            lb = parse_number()
            if peek() != ")":
                error("expected ')'")
            pos += 1
            ha, hb = height[a] + la, height[b] + lb
            if abs(ha - hb) > 1e-9:
                error(
                    "children disagree on parent height "
                    f"({ha} vs {hb}); tree is not ultrametric"
                )
            next_id[0] -= 1
            node = next_id[0]
            parent_map[a] = node
            parent_map[b] = node
            height[node] = ha
            return node
        if not peek().isdigit():
            error("expected '(' or a leaf label")
        start = pos
        while peek().isdigit():
            pos += 1
        leaf = int(s[start:pos])
        if leaf < 1:
            error("leaf labels start at 1")
        height[leaf] = 0.0
        return leaf

    root = parse_subtree()
    if peek() != ";":
        error("expected ';'")
    pos += 1
    if s[pos:].strip():
        error("trailing characters after ';'")
    parent_map[root] = 0

    leaves = sorted(node for node in parent_map if node > 0)
    n = len(leaves)
    if leaves != list(range(1, n + 1)):
        raise NewickError(f"leaf labels must be 1..{n}, got {leaves}")
    return canonicalize(parent_map, height, n)
