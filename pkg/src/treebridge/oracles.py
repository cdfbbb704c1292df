"""Independent reference implementations used to cross-check the samplers.

Everything here is deliberately written against plain dicts and loops, not
against the traversal helpers of the algorithm modules: the point is to
catch shared-assumption bugs.  Only the public :class:`~treebridge.trees.Tree`
value type is reused.  These routines are exponential or quadratic and guard
their input sizes accordingly.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.integrate import quad

from .errors import TreeBridgeError
from .trees import Tree


def _parent_map(tree):
    parent = {}
    n = tree.n_leaves
    for k in range(n - 1):
        node = n + 1 + k
        a, b = tree.children[k]
        parent[int(a)] = node
        parent[int(b)] = node
    parent[2 * n - 1] = 0
    return parent


def _descendant_sets(parent, n_leaves):
    """Leaf-set per node, recomputed from scratch by upward propagation."""
    sets = {node: set() for node in parent}
    for leaf in range(1, n_leaves + 1):
        node = leaf
        while node:
            sets.setdefault(node, set()).add(leaf)
            node = parent[node]
    return sets


def brute_force_compatible_sprs(tree, column_mask):
    """All (u, v) subtree moves after which the column fits on some branch.

    Enumerates every pruned node ``u`` and regraft branch ``v`` for which a
    valid (prune time, reattach time) pair exists, performs the surgery on a
    plain parent map, and tests column compatibility by direct comparison of
    the ones-set with every branch's recomputed descendant set.  Exponential
    safety guard: ``N <= 8``.
    """
    n = tree.n_leaves
    if n > 8:
        raise TreeBridgeError("brute-force SPR enumeration is limited to N <= 8")
    ones = {leaf for leaf in range(1, n + 1) if (column_mask >> (leaf - 1)) & 1}
    root = 2 * n - 1
    base_parent = _parent_map(tree)
    times = {node: float(tree.times[node]) for node in base_parent}
    times[0] = math.inf

    found = []
    for u in range(1, 2 * n - 1):  # root excluded
        d = base_parent[u]
        sibling = next(
            node for node, pa in base_parent.items() if pa == d and node != u
        )
        for v in range(1, 2 * n):
            if v == u or v == d:
                continue
            # Branch interval of v once u's branch is pruned (the sibling
            # branch extends past the deleted parent).
            pa_v = base_parent[v] if v != sibling else base_parent[d]
            upper = times[pa_v] if pa_v else math.inf
            if not upper > times[u]:
                continue  # no reattach time can sit above a prune time
            parent = dict(base_parent)
            parent[sibling] = base_parent[d]
            parent[v] = d
            parent[u] = d
            parent[d] = pa_v
            sets = _descendant_sets(parent, n)
            new_root = next(node for node, pa in parent.items() if pa == 0)
            ok = not ones or any(
                sets[node] == ones for node in parent if node != new_root
            )
            if ok:
                found.append((u, v))
    return sorted(found)


def quadrature_density_check(density, lower, upper, *, breakpoints=()):
    """Numerically integrate ``density`` over ``(lower, upper)``.

    ``breakpoints`` lists interior points where the integrand is not smooth;
    the integral is accumulated piecewise so adaptive quadrature converges.
    Infinite ``upper`` is allowed.  Returns the integral estimate; callers
    assert closeness to 1 themselves.
    """
    points = [lower] + sorted(p for p in breakpoints if lower < p < upper)
    total = 0.0
    for a, b in itertools.pairwise(points + [upper]):
        val, _err = quad(density, a, b, limit=200)
        total += val
    return total


def incompatible_site_pairs(matrix):
    """All pairs of column indices that no single tree can carry together.

    The observation model fixes the ancestral state at 0, so a column fits a
    tree exactly when its carrier set is a clade.  Two carrier sets that
    strictly overlap (neither nested nor disjoint) can never both be clades
    of one tree, which is a strictly sharper conflict notion than the
    unrooted four-gamete test.

    ``matrix`` is an (N, S) binary array; only pairs where both columns are
    segregating can conflict.  Returns a list of (i, j) with i < j (0-based).
    """
    m = np.asarray(matrix, dtype=np.uint8)
    _, s = m.shape
    masks = []
    for j in range(s):
        col = m[:, j]
        bits = 0
        for row, val in enumerate(col):
            if val:
                bits |= 1 << row
        masks.append(bits if col.min() != col.max() else None)
    pairs = []
    for i in range(s):
        a = masks[i]
        if a is None:
            continue
        for j in range(i + 1, s):
            b = masks[j]
            if b is None:
                continue
            both = a & b
            if both and both != a and both != b:
                pairs.append((i, j))
    return pairs


def recombination_lower_bound(matrix):
    """Lower bound on the number of recombinations needed to explain the data.

    Classic disjoint-interval argument: every incompatible pair of sites
    brackets at least one recombination, and disjoint brackets need distinct
    events.  Brackets may share an endpoint column because the forced break
    falls strictly between the pair.  Greedy interval scheduling by right
    endpoint gives the maximum number of pairwise-disjoint brackets.
    """
    intervals = sorted(incompatible_site_pairs(matrix), key=lambda ij: ij[1])
    count = 0
    frontier = -1
    for i, j in intervals:
        if i >= frontier:
            count += 1
            frontier = j
    return count


# -- exact minimum over tree paths (small instances) ---------------------------


def _all_topologies(n_leaves):
    """Every rooted binary shape on leaves 1..n as a frozenset of clades.

    A shape is identified with its set of proper non-trivial leaf clades
    (sizes 2..n-1); that identification is exact for rooted binary trees.
    Enumeration recurses over the root bipartition, pinning leaf 1 to the
    left part so each shape appears once.
    """
    if n_leaves > 6:
        raise TreeBridgeError("exhaustive topology enumeration limited to N <= 6")

    def build(leaves):
        leaves = tuple(sorted(leaves))
        if len(leaves) == 1:
            return [frozenset()]
        out = []
        first = leaves[0]
        rest = leaves[1:]
        # Partition: the clade containing `first` under the root.
        for k in range(0, len(rest)):
            for combo in itertools.combinations(rest, k):
                left = frozenset((first,) + combo)
                right = frozenset(rest) - frozenset(combo)
                if not right:
                    continue
                for lt in build(left):
                    for rt in build(right):
                        clades = set(lt) | set(rt)
                        if len(left) > 1:
                            clades.add(left)
                        if len(right) > 1:
                            clades.add(right)
                        out.append(frozenset(clades))
        return out

    return build(range(1, n_leaves + 1))


def _clades_compatible(clades, ones, n_leaves):
    if not ones:
        return True
    if len(ones) == 1:
        return True  # a leaf branch always carries a singleton column
    if len(ones) == n_leaves:
        return False  # no branch spans every leaf
    return frozenset(ones) in clades


def _spr_neighbours(clades, n_leaves):
    """Unranked topologies reachable by one subtree move, by clade surgery."""
    all_leaves = frozenset(range(1, n_leaves + 1))
    singletons = [frozenset([leaf]) for leaf in all_leaves]
    out = set()
    for moved in list(clades) + singletons:
        inside = {c for c in clades if c < moved}  # travels with the subtree
        carried = inside | ({moved} if len(moved) > 1 else set())
        # Nodes of the tree after pruning `moved`: clades disjoint from it
        # stay, ancestors shrink, the subtree's own clades leave.
        pruned = set()
        for c in list(clades) + singletons:
            c2 = c - moved
            if c2:
                pruned.add(c2)
        pruned_root = all_leaves - moved
        pruned.discard(pruned_root)
        for target in list(pruned) + [pruned_root]:
            if target == pruned_root:
                # Reattach above the old root: it becomes a proper clade.
                new = set(pruned) | {pruned_root}
            else:
                # Insert the new parent on the branch above `target`:
                # strict ancestors of `target` regain the moved leaves.
                new = {c | moved if target < c else c for c in pruned}
                new.add(target | moved)
            new |= carried
            shape = frozenset(c for c in new if 1 < len(c) < n_leaves)
            if shape != clades:
                out.add(shape)
    return out


def exact_min_recombinations(matrix):
    """Exact minimum number of subtree-move events over any site-indexed tree
    path explaining the data, for small instances (N <= 6, few segregating
    sites).

    Dynamic programme over unranked topologies: per segregating column the
    compatible shapes, transition cost the subtree-move graph distance.
    """
    m = np.asarray(matrix, dtype=np.uint8)
    n, s = m.shape
    seg = [j for j in range(s) if 0 < int(m[:, j].sum()) < n]
    if n > 6:
        raise TreeBridgeError("exact minimum limited to N <= 6")
    if len(seg) > 8:
        raise TreeBridgeError("exact minimum limited to 8 segregating sites")
    if not seg:
        return 0

    shapes = sorted(
        set(_all_topologies(n)),
        key=lambda sh: sorted(tuple(sorted(c)) for c in sh),
    )
    index = {shape: i for i, shape in enumerate(shapes)}
    neigh = [sorted(index[x] for x in _spr_neighbours(sh, n) if x in index)
             for sh in shapes]

    # All-pairs distances by BFS (graph is small and connected).
    k = len(shapes)
    dist = np.full((k, k), 255, dtype=np.uint8)
    for start in range(k):
        dist[start, start] = 0
        frontier = [start]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for node in frontier:
                for other in neigh[node]:
                    if dist[start, other] == 255:
                        dist[start, other] = d
                        nxt.append(other)
            frontier = nxt

    compat = []
    for j in seg:
        ones = {leaf for leaf in range(1, n + 1) if m[leaf - 1, j]}
        ok = [i for i, sh in enumerate(shapes) if _clades_compatible(sh, ones, n)]
        if not ok:
            raise TreeBridgeError(f"column {j} compatible with no topology")
        compat.append(ok)

    cost = {i: 0 for i in compat[0]}
    for ok in compat[1:]:
        new_cost = {}
        for i in ok:
            new_cost[i] = min(cost[j] + int(dist[j, i]) for j in cost)
        cost = new_cost
    return min(cost.values())


# -- unrestricted segment scanning ------------------------------------------


def _ranked_state_of(tree):
    """(parents, order) encoding of a tree's ranked shape, labels as ids."""
    n = tree.n_leaves
    parents = tuple(int(x) for x in tree.parent)
    return parents, tuple(range(n + 1, 2 * n))


def _desc_mask(parents, node, n):
    kids = {}
    for x in range(1, len(parents)):
        if parents[x]:
            kids.setdefault(parents[x], []).append(x)
    mask = 0
    stack = [node]
    while stack:
        x = stack.pop()
        if x <= n:
            mask |= 1 << (x - 1)
        else:
            stack.extend(kids[x])
    return mask


def _state_compatible(state, n, mask):
    if mask == 0:
        return True
    parents, order = state
    root = order[-1]
    return any(
        _desc_mask(parents, x, n) == mask
        for x in range(1, len(parents))
        if x != root
    )


def _all_single_moves(state, n):
    """Every (u, v, new_state) one subtree move away, no shortcuts.

    Candidate rank positions for the reattached node are validated by a
    full structural check of the resulting state rather than any window
    arithmetic, keeping this independent of the sampler's own surgery.
    """
    parents, order = state
    size = len(parents)
    root = order[-1]
    out = []
    for u in range(1, size):
        if u == root:
            continue
        m = parents[u]
        for v in range(1, size):
            if v == u or v == m:
                continue
            par = list(parents)
            g = par[m]
            sib = [x for x in range(1, size) if par[x] == m and x != u][0]
            par[sib] = g
            pv = par[v]
            par[v] = m
            par[m] = pv
            ord2 = [x for x in order if x != m]
            for slot in range(len(ord2) + 1):
                cand = tuple(ord2[:slot] + [m] + ord2[slot:])
                pos = {p: i for i, p in enumerate(cand)}
                ok = True
                for x in range(1, size):
                    pa = par[x]
                    if pa == 0:
                        continue
                    below = pos[x] < pos[pa] if x > n else True
                    if not below:
                        ok = False
                        break
                if ok:
                    out.append((u, v, (tuple(par), cand)))
    return out


def exhaustive_tree_scan(segment, left_tree, columns, max_ops_per_gap=2,
                         frontier_cap=200_000):
    """Unrestricted minimal-move scan of a segment, left to right.

    Reference enumeration for the heuristic scanner: per gap it tries
    zero moves, then every possible single move, then every pair of
    moves, keeping the first level that yields any continuation
    compatible with the gap's right checkpoint column.  Right-end
    conditioning is ignored.  Returns a set of TopologyPath objects.
    """
    from .bridge import TopologyPath

    n = left_tree.n_leaves
    if n > 6:
        raise TreeBridgeError("exhaustive scan limited to 6 leaves")
    cps = segment.checkpoints
    if len(cps) > 4:
        raise TreeBridgeError("exhaustive scan limited to 4 checkpoints")

    frontier = [((_ranked_state_of(left_tree),), ())]
    for g in range(len(cps) - 1):
        mask = columns[cps[g + 1]]
        width = cps[g + 1] - cps[g]
        levels = list(range(min(max_ops_per_gap, width) + 1))
        new_frontier = []
        for level in levels:
            for steps, gaps in frontier:
                state = steps[-1]
                if level == 0:
                    if _state_compatible(state, n, mask):
                        new_frontier.append((steps, gaps + ((),)))
                elif level == 1:
                    for u, v, ns in _all_single_moves(state, n):
                        if _state_compatible(ns, n, mask):
                            new_frontier.append(
                                (steps + (ns,), gaps + (((u, v),),))
                            )
                else:
                    for u1, v1, mid in _all_single_moves(state, n):
                        for u2, v2, ns in _all_single_moves(mid, n):
                            if _state_compatible(ns, n, mask):
                                new_frontier.append(
                                    (
                                        steps + (mid, ns),
                                        gaps + (((u1, v1), (u2, v2)),),
                                    )
                                )
            if new_frontier:
                break
        if not new_frontier:
            return set()
        if len(new_frontier) > frontier_cap:
            raise TreeBridgeError("exhaustive scan frontier too large")
        frontier = new_frontier
    return {TopologyPath(n, cps, steps, gaps) for steps, gaps in frontier}


def naive_log_posterior(per_site_trees, boundary_ops, columns, params):
    """Term-by-term log posterior with one explicit factor per site.

    ``per_site_trees`` lists the tree at sites 1..S; ``boundary_ops`` the
    move (possibly identity) at each of the S-1 gaps.  No run-length
    shortcuts: checks the chain module's block arithmetic.
    """
    from .model import log_density_initial, site_log_likelihood, transition_log_density

    s_count = len(per_site_trees)
    if len(boundary_ops) != s_count - 1:
        raise TreeBridgeError("need exactly one op per gap")
    total = log_density_initial(per_site_trees[0])
    for i in range(s_count):
        mask = columns.get(i + 1, 0)
        total += site_log_likelihood(per_site_trees[i], mask, params.theta)
        if i < s_count - 1:
            total += transition_log_density(per_site_trees[i], boundary_ops[i], params)
    return total
