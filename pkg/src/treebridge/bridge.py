"""Conditioned proposals over genome segments of a tree sequence.

The sampler updates one genome segment at a time, holding the local trees
at the segment's conditioned endpoint sites fixed.  A proposal is built in
three stages, and the density evaluation used for the reverse move walks
the exact same code so the two sides agree bit for bit:

1. ranked-topology scan: enumerate candidate sequences of ranked tree
   shapes across the segment's segregating-site checkpoints, changing
   shape by at most two subtree moves per inter-checkpoint gap;
2. time adjustment: pin node times carried over from the conditioned
   endpoints, decide which remaining times are free, and discard
   trajectories whose ranking constraints are contradictory;
3. sampling: draw genome positions for the moves, the free node times,
   and the prune times, accumulating each draw's log density.

Ranked states are kept in "physical" node ids: the canonical labels of the
anchor endpoint tree (left endpoint for left-conditioned segments, right
endpoint for the leftmost segment).  A subtree move deletes one internal
node and creates another at a different height; both are treated as one
physical node changing rank, so the id set never changes along a
trajectory.  A state is the pair ``(parents, order)`` where ``parents`` is
a tuple indexed by physical id (entry 0 unused, root maps to 0) and
``order`` lists the internal ids from lowest to highest.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

from .errors import ConfigError, ConsistencyError, DegenerateTimesError, ScanAbort
from .trees import BLACK, GREY, WHITE, SprOp, Tree, apply_spr, canonicalize

NEG_INF = float("-inf")

# Minimum separation enforced between distinct node times; matches the
# tie tolerance of the canonical tree form.
TIME_TOL = 1e-12

MAX_OPS_PER_GAP = 2
DEFAULT_PATH_CAP = 100_000


# --------------------------------------------------------------------------
# segment selection


@dataclass(frozen=True)
class Segment:
    """One genome interval updated as a unit, with its conditioning sides."""

    index: int
    alpha: int
    beta: int
    checkpoints: tuple
    left_fixed: bool
    right_fixed: bool

    def __post_init__(self):
        if not self.checkpoints:
            raise ConfigError("segment needs at least one checkpoint")
        if not (self.alpha <= self.checkpoints[0] <= self.checkpoints[-1] <= self.beta):
            raise ConfigError("checkpoints must lie inside the segment")


def select_segments(seg_sites, half_width, n_sites):
    """Partition the genome into overlapping update segments.

    ``seg_sites`` are the 1-based positions of the segregating columns, in
    increasing order; ``half_width`` is the number of inter-checkpoint gaps
    each conditioned endpoint contributes.  Consecutive segments share
    ``half_width`` gaps, so every region is proposed under both of its
    neighbouring conditionings.
    """
    s = [int(x) for x in seg_sites]
    if any(b <= a for a, b in zip(s, s[1:])):
        raise ConfigError("segregating sites must be strictly increasing")
    if s and not (1 <= s[0] and s[-1] <= n_sites):
        raise ConfigError("segregating sites out of genome range")
    m = int(half_width)
    m_s = len(s)
    if m < 1:
        raise ConfigError("segment half-width must be at least 1")
    if m_s <= m + 1:
        raise ConfigError(
            f"need more than {m + 1} segregating sites for half-width {m}, got {m_s}"
        )

    big_j = (m_s - 2) // m  # largest j with m*j + 1 < m_s
    segments = [
        Segment(0, 1, s[m], tuple(s[: m + 1]), left_fixed=False, right_fixed=True)
    ]
    for j in range(1, big_j):
        cps = tuple(s[m * (j - 1) : m * (j + 1) + 1])
        segments.append(Segment(j, cps[0], cps[-1], cps, True, True))
    cps = tuple(s[m * (big_j - 1) :])
    segments.append(Segment(big_j, cps[0], n_sites, cps, True, False))
    return segments


# --------------------------------------------------------------------------
# ranked states in physical ids


def state_from_tree(tree):
    parents = tuple(int(x) for x in tree.parent)
    n = tree.n_leaves
    return parents, tuple(range(n + 1, 2 * n))


def _children_map(parents):
    kids = {}
    for x in range(1, len(parents)):
        pa = parents[x]
        if pa:
            kids.setdefault(pa, []).append(x)
    return kids


@lru_cache(maxsize=1 << 16)
def _matrix_key(parents, order, n):
    """Rank-shape signature: the canonical children matrix as a tuple."""
    rank_label = {p: n + 1 + r for r, p in enumerate(order)}
    kids = _children_map(parents)
    rows = []
    for p in order:
        a, b = sorted(rank_label.get(c, c) for c in kids[p])
        rows.append((a, b))
    return tuple(rows)


def tree_matrix_key(tree):
    return tuple(tuple(int(x) for x in row) for row in tree.children)


@lru_cache(maxsize=1 << 16)
def _compatible(parents, order, n, mask):
    if mask == 0:
        return True
    ls = [0] * len(parents)
    for leaf in range(1, n + 1):
        ls[leaf] = 1 << (leaf - 1)
    kids = _children_map(parents)
    for p in order:
        a, b = kids[p]
        ls[p] = ls[a] | ls[b]
    root = order[-1]
    return any(ls[x] == mask for x in range(1, len(parents)) if x != root)


@lru_cache(maxsize=1 << 16)
def _heuristic_pairs(parents, order, n, mask):
    """Candidate (prune, regraft) id pairs for one move toward ``mask``.

    Mirrors the colouring rule used on concrete trees: leaves are coloured
    by their column entry, internal nodes take the common child colour or
    grey, and a subtree is moved only if it is a maximal single-coloured
    block.  Black blocks may join other black nodes; white blocks may go
    anywhere that does not sit strictly inside a black block.
    """
    size = len(parents)
    colour = [GREY] * size
    for leaf in range(1, n + 1):
        colour[leaf] = BLACK if mask >> (leaf - 1) & 1 else WHITE
    kids = _children_map(parents)
    for p in order:
        a, b = kids[p]
        colour[p] = colour[a] if colour[a] == colour[b] else GREY
    root = order[-1]
    pairs = []
    for u in range(1, size):
        if u == root or colour[u] == GREY:
            continue
        pa_u = parents[u]
        if pa_u and colour[pa_u] == colour[u]:
            continue  # not a maximal block
        if colour[u] == BLACK:
            for v in range(1, size):
                if v != u and v != pa_u and colour[v] == BLACK:
                    pairs.append((u, v))
        else:
            for v in range(1, size):
                if v == u or v == pa_u:
                    continue
                pa_v = parents[v]
                if pa_v == 0 or colour[pa_v] != BLACK:
                    pairs.append((u, v))
    return tuple(pairs)


@lru_cache(maxsize=1 << 16)
def _move_states(parents, order, n, u, v):
    """All ranked states reachable by pruning ``u`` and regrafting on ``v``.

    The mover (the deleted-and-recreated internal node) keeps its id; one
    output state per admissible rank slot.  Slots must place the mover
    above both ``u`` and ``v`` and below the regraft branch's upper end,
    so pairs with empty windows yield no states.
    """
    m = parents[u]
    if m == 0 or v == u or v == m:
        return ()
    g = parents[m]
    par = list(parents)
    kids_m = [x for x in range(1, len(parents)) if parents[x] == m]
    sib = kids_m[0] if kids_m[1] == u else kids_m[1]
    par[sib] = g
    pv = par[v]  # post-pruning parent: the branch above v may now reach g
    par[v] = m
    par[m] = pv
    par = tuple(par)

    ord2 = [x for x in order if x != m]
    idx = {p: i for i, p in enumerate(ord2)}
    lo = 1 + max(idx.get(u, -1), idx.get(v, -1))
    hi = idx[pv] if pv else len(ord2)
    out = []
    for slot in range(lo, hi + 1):
        out.append((par, tuple(ord2[:slot] + [m] + ord2[slot:])))
    return tuple(out)


# --------------------------------------------------------------------------
# topology paths


@dataclass(frozen=True, eq=True)
class TopologyPath:
    """A candidate sequence of ranked states across one segment.

    ``steps`` holds one state per constant-topology region, left to right;
    ``gap_ops[g]`` lists the (prune id, regraft id) moves inside gap ``g``
    (between checkpoints ``g`` and ``g+1``), in genome order.
    """

    n_leaves: int
    checkpoints: tuple
    steps: tuple
    gap_ops: tuple

    def __post_init__(self):
        total = sum(len(g) for g in self.gap_ops)
        if len(self.steps) != total + 1:
            raise ConsistencyError("step count does not match op count")
        if len(self.gap_ops) != len(self.checkpoints) - 1:
            raise ConsistencyError("one op group per checkpoint gap required")

    @cached_property
    def flat_ops(self):
        return tuple(op for gap in self.gap_ops for op in gap)

    @cached_property
    def recomb_counts(self):
        return tuple(len(g) for g in self.gap_ops)

    @property
    def n_gaps(self):
        return len(self.checkpoints) - 1

    def checkpoint_step(self, k):
        """Index into ``steps`` of the state holding at checkpoint ``k``."""
        return sum(self.recomb_counts[:k])

    @cached_property
    def checkpoint_states(self):
        return tuple(self.steps[self.checkpoint_step(k)] for k in range(len(self.checkpoints)))

    @cached_property
    def key(self):
        parts = []
        idx = 0
        for gap in self.gap_ops:
            here = []
            for u, v in gap:
                idx += 1
                here.append((u, v, self.steps[idx]))
            parts.append(tuple(here))
        return (self.steps[0], tuple(parts))


# --------------------------------------------------------------------------
# scanning


def _extensions(state, n, mask, ok, level):
    """Gap extensions of exactly ``level`` moves ending in an accepted state."""
    if level == 0:
        return (((), ()),) if ok(state) else ()
    parents, order = state
    out = []
    if level == 1:
        for u, v in _heuristic_pairs(parents, order, n, mask):
            for ns in _move_states(parents, order, n, u, v):
                if ok(ns):
                    out.append(((ns,), ((u, v),)))
        return tuple(out)
    for u1, v1 in _heuristic_pairs(parents, order, n, mask):
        for mid in _move_states(parents, order, n, u1, v1):
            # The intermediate state is unconstrained: sites strictly inside
            # a gap are non-segregating, so any topology is consistent there.
            mp, mo = mid
            for u2, v2 in _heuristic_pairs(mp, mo, n, mask):
                for ns in _move_states(mp, mo, n, u2, v2):
                    if ok(ns):
                        out.append(((mid, ns), ((u1, v1), (u2, v2))))
    return tuple(out)


def _scan_forward(n, start, targets, widths, end_key, max_ops_per_gap, path_cap, forced_gap=None):
    """Breadth scan over gaps; keeps only minimal-move extensions per gap.

    Returns a list of (steps, gap_ops) pairs.  Raises ScanAbort when no
    continuation exists (``cap=False``) or the frontier exceeds
    ``path_cap`` (``cap=True``).  With ``forced_gap`` set, that gap must
    use exactly one move; an empty result is returned if it cannot.
    """
    frontier = [((start,), ())]
    n_gaps = len(targets)
    for g in range(n_gaps):
        mask = targets[g]
        last = g == n_gaps - 1
        if end_key is not None and last:
            def ok(st):
                return _matrix_key(st[0], st[1], n) == end_key
        else:
            def ok(st):
                return _compatible(st[0], st[1], n, mask)

        cap_ops = min(max_ops_per_gap, widths[g])
        by_state = {}
        for path in frontier:
            by_state.setdefault(path[0][-1], []).append(path)

        if forced_gap == g:
            levels = [1] if cap_ops >= 1 else []
        else:
            levels = list(range(cap_ops + 1))

        new_frontier = []
        for level in levels:
            for state, members in by_state.items():
                for suffix, ops in _extensions(state, n, mask, ok, level):
                    for steps, gaps in members:
                        new_frontier.append((steps + suffix, gaps + (ops,)))
            if new_frontier:
                break
        if not new_frontier:
            if forced_gap == g:
                return []
            raise ScanAbort(f"no continuation at gap {g}")
        if len(new_frontier) > path_cap:
            raise ScanAbort(f"frontier exceeded {path_cap} at gap {g}", cap=True)
        frontier = new_frontier
    return frontier


def _other_child(parents, m, u):
    for x in range(1, len(parents)):
        if x != u and parents[x] == m:
            return x
    raise ConsistencyError(f"node {m} has no second child")


def _normalize_reverse(n, cps, steps_rev, gaps_rev):
    """Turn a right-to-left scan result into a left-to-right path.

    A reverse move that pruned ``u`` is undone by pruning ``u`` again and
    regrafting on the mover's other child in the original (righthand)
    state, so the forward description is read off the stored states.
    """
    steps = tuple(reversed(steps_rev))
    flat_u = [u for gap in gaps_rev for u, _ in gap]
    big_k = len(flat_u)
    fwd = []
    for k in range(big_k):
        u = flat_u[big_k - 1 - k]
        right = steps[k + 1]
        m = right[0][u]
        fwd.append((u, _other_child(right[0], m, u)))
    counts = [len(g) for g in reversed(gaps_rev)]
    gap_ops = []
    at = 0
    for c in counts:
        gap_ops.append(tuple(fwd[at : at + c]))
        at += c
    return TopologyPath(n, cps, steps, tuple(gap_ops))


def tree_scan(segment, anchor_tree, columns, *, end_tree=None,
              max_ops_per_gap=MAX_OPS_PER_GAP, path_cap=DEFAULT_PATH_CAP,
              _forced_gap=None):
    """Enumerate candidate topology paths for one segment.

    ``anchor_tree`` is the conditioned endpoint whose labels become the
    physical ids: the left tree except for the leftmost segment, which is
    scanned right to left from the right tree.  ``columns`` maps each
    checkpoint site to its data column bitmask.  ``end_tree`` is required
    for two-sided segments and must equal the tree at the far endpoint.
    Paths are returned in a deterministic order.
    """
    cps = segment.checkpoints
    n = anchor_tree.n_leaves
    try:
        cols = [columns[c] for c in cps]
    except KeyError as exc:
        raise ConfigError(f"missing data column for checkpoint {exc}") from None
    widths = [cps[i + 1] - cps[i] for i in range(len(cps) - 1)]
    start = state_from_tree(anchor_tree)

    if segment.left_fixed:
        if segment.right_fixed:
            if end_tree is None:
                raise ConfigError("two-sided segment needs its right endpoint tree")
            end_key = tree_matrix_key(end_tree)
        else:
            end_key = None
        raw = _scan_forward(n, start, cols[1:], widths, end_key,
                            max_ops_per_gap, path_cap, _forced_gap)
        return [TopologyPath(n, cps, steps, gaps) for steps, gaps in raw]

    # Leftmost segment: scan right to left from the right endpoint, each
    # gap targeting the next column to the left, then flip to forward form.
    n_gaps = len(widths)
    forced = None if _forced_gap is None else n_gaps - 1 - _forced_gap
    raw = _scan_forward(n, start, cols[-2::-1], widths[::-1], None,
                        max_ops_per_gap, path_cap, forced)
    return [_normalize_reverse(n, cps, steps, gaps) for steps, gaps in raw]


def tree_scan_with_extra(segment, anchor_tree, columns, *, end_tree=None,
                         max_ops_per_gap=MAX_OPS_PER_GAP,
                         path_cap=DEFAULT_PATH_CAP):
    """Base scan plus, per zero-move gap, a variant forcing one move there.

    The forced variants let the chain propose extra recombinations in
    regions the minimal scan would leave constant, which is what makes
    the recombination count able to grow.  Returns an ordered dict keyed
    by path key.
    """
    base = tree_scan(segment, anchor_tree, columns, end_tree=end_tree,
                     max_ops_per_gap=max_ops_per_gap, path_cap=path_cap)
    out = {}
    for path in base:
        out.setdefault(path.key, path)
    counts = base[0].recomb_counts
    for g, c in enumerate(counts):
        if c:
            continue
        try:
            extra = tree_scan(segment, anchor_tree, columns, end_tree=end_tree,
                              max_ops_per_gap=max_ops_per_gap,
                              path_cap=path_cap, _forced_gap=g)
        except ScanAbort as exc:
            if exc.cap:
                raise
            continue  # variant dead-ends elsewhere; nothing to add
        for path in extra:
            out.setdefault(path.key, path)
    return out


# --------------------------------------------------------------------------
# time adjustment


@dataclass(frozen=True)
class Run:
    """A maximal step interval over which one physical node keeps its time.

    ``value`` is the endpoint-copied time for affixed runs, None for free
    ones.  ``lo``/``hi`` are inclusive step indices.
    """

    phys: int
    lo: int
    hi: int
    value: float | None


@dataclass(frozen=True)
class AffixedPath:
    """A topology path whose node-time trajectory passed feasibility."""

    path: TopologyPath
    runs: tuple
    run_at: dict  # (step, phys) -> run index
    free_order: tuple  # run indices, sampling order

    @property
    def n_free(self):
        return len(self.free_order)


def time_adjust(path, left_tree, right_tree):
    """Affix endpoint-determined node times; None if the path is infeasible.

    A run touching the segment's conditioned left end copies that tree's
    time for its physical id; one touching the conditioned right end
    copies the time of the rank its id holds there.  Runs pinned from
    both sides must agree exactly.  Interval propagation over the rank
    constraints then rejects trajectories that admit no strictly ordered
    time assignment.
    """
    n = path.n_leaves
    steps = path.steps
    big_k = len(steps) - 1
    movers = [steps[b][0][u] for b, (u, _) in enumerate(path.flat_ops)]

    runs = []
    for p in range(n + 1, 2 * n):
        lo = 0
        for b, m in enumerate(movers):
            if m == p:
                runs.append((p, lo, b))
                lo = b + 1
        runs.append((p, lo, big_k))

    values = []
    for p, lo, hi in runs:
        vl = vr = None
        if left_tree is not None and lo == 0:
            vl = float(left_tree.times[p])
        if right_tree is not None and hi == big_k:
            rank = steps[big_k][1].index(p)
            vr = float(right_tree.times[n + 1 + rank])
        if vl is not None and vr is not None and vl != vr:
            return None  # carried through unchanged would be bit-equal
        values.append(vl if vl is not None else vr)

    run_at = {}
    for i, (p, lo, hi) in enumerate(runs):
        for s in range(lo, hi + 1):
            run_at[(s, p)] = i

    edges = set()
    for s, st in enumerate(steps):
        order = st[1]
        for a, b in zip(order, order[1:]):
            ia, ib = run_at[(s, a)], run_at[(s, b)]
            if ia != ib:
                edges.add((ia, ib))

    n_runs = len(runs)
    lo_b = [0.0] * n_runs
    hi_b = [math.inf] * n_runs
    for i, v in enumerate(values):
        if v is not None:
            lo_b[i] = hi_b[i] = v
    for _ in range(n_runs + 1):
        changed = False
        for a, b in edges:
            cand = lo_b[a] + TIME_TOL
            if cand > lo_b[b]:
                lo_b[b] = cand
                changed = True
            cand = hi_b[b] - TIME_TOL
            if cand < hi_b[a]:
                hi_b[a] = cand
                changed = True
        if not changed:
            break
    else:
        return None  # constraint cycle: no valid ordering exists

    for i, v in enumerate(values):
        if v is not None:
            if lo_b[i] > v or hi_b[i] < v:
                return None
        elif hi_b[i] - lo_b[i] <= TIME_TOL:
            return None

    free = [i for i, v in enumerate(values) if v is None]
    free.sort(key=lambda i: (runs[i][1], steps[runs[i][1]][1].index(runs[i][0])))
    return AffixedPath(
        path,
        tuple(Run(p, lo, hi, values[i]) for i, (p, lo, hi) in enumerate(runs)),
        run_at,
        tuple(free),
    )


def _coincidence_pins(af, left_tree, right_tree):
    """Endpoint-pinned created-node times that the left tree already has.

    Only meaningful between two conditioned endpoints; one-sided segments
    trade a pinned first-tree time for every pinned move time, so all of
    their path classes share one codimension and the count is 0.
    """
    if left_tree is None or right_tree is None:
        return 0
    n = af.path.n_leaves
    big_k = len(af.path.steps) - 1
    inherited = {float(left_tree.times[p]) for p in range(n + 1, 2 * n)}
    return sum(
        1
        for run in af.runs
        if run.lo > 0 and run.hi == big_k and run.value in inherited
    )


def feasible_family(cand, left_tree, right_tree):
    """Time-feasible candidate paths, thinned to the dominant classes.

    A path can force a node created inside the segment to survive to the
    conditioned right end on a time the left tree already carries.  The
    target never realizes such a coincidence (a continuous regraft height
    does not reproduce an existing time), so against classes with fewer
    forced coincidences these are vanishingly thin: proposing them would
    park the chain on states the posterior gives no mass.  Keep exactly
    the paths attaining the family's minimum coincidence count.
    """
    feasible = {}
    pins = {}
    for key, path in cand.items():
        af = time_adjust(path, left_tree, right_tree)
        if af is None:
            continue
        feasible[key] = af
        pins[key] = _coincidence_pins(af, left_tree, right_tree)
    if not feasible:
        return feasible
    floor = min(pins.values())
    return {k: af for k, af in feasible.items() if pins[k] == floor}


# --------------------------------------------------------------------------
# sampling and density evaluation (shared walks)


def _free_domain(af, run_idx, known):
    """Bounds on one free run's time from every known time it must order
    against anywhere along its steps."""
    run = af.runs[run_idx]
    steps = af.path.steps
    lo, hi = 0.0, math.inf
    for s in range(run.lo, run.hi + 1):
        order = steps[s][1]
        mine = order.index(run.phys)
        for j, p in enumerate(order):
            if j == mine:
                continue
            val = known.get(af.run_at[(s, p)])
            if val is None:
                continue
            if j < mine:
                lo = max(lo, val)
            else:
                hi = min(hi, val)
    return lo, hi


def _walk_times(af, rng=None, realized=None):
    """Sample (rng set) or evaluate (realized set) the free node times.

    Returns (values, logq) where values maps run index to time for every
    run, or (None, -inf) on a dead end / out-of-domain value.
    """
    values = {i: r.value for i, r in enumerate(af.runs) if r.value is not None}
    logq = 0.0
    for idx in af.free_order:
        lo, hi = _free_domain(af, idx, values)
        if hi < math.inf:
            width = hi - lo
            if width <= TIME_TOL:
                return None, NEG_INF
            if rng is not None:
                x = float(rng.uniform(lo, hi))
            else:
                x = realized[idx]
                if not lo < x < hi:
                    return None, NEG_INF
            logq -= math.log(width)
        else:
            if rng is not None:
                x = lo + float(rng.exponential(1.0))
            else:
                x = realized[idx]
                if x <= lo:
                    return None, NEG_INF
            logq -= x - lo
        values[idx] = x
    return values, logq


def _walk_prunes(af, values, rng=None, realized=None):
    """Prune heights, one per move: uniform between the pruned node's time
    and the lower of the mover's old and new positions."""
    n = af.path.n_leaves
    steps = af.path.steps
    out = []
    logq = 0.0
    for b, (u, _) in enumerate(af.path.flat_ops):
        m = steps[b][0][u]
        t_u = 0.0 if u <= n else values[af.run_at[(b, u)]]
        upper = min(values[af.run_at[(b, m)]], values[af.run_at[(b + 1, m)]])
        width = upper - t_u
        if width <= TIME_TOL:
            return None, NEG_INF
        if rng is not None:
            r = float(rng.uniform(t_u, upper))
        else:
            r = realized[b]
            if not t_u <= r <= upper:
                return None, NEG_INF
        logq -= math.log(width)
        out.append(r)
    return tuple(out), logq


def _walk_positions(segment, path, rng=None, realized=None):
    """Genome slots for each gap's moves: a uniform slot for one move, a
    uniform unordered pair of distinct slots for two."""
    cps = segment.checkpoints
    out = []
    logq = 0.0
    for g, ops in enumerate(path.gap_ops):
        k = len(ops)
        if k == 0:
            out.append(())
            continue
        base = cps[g]
        width = cps[g + 1] - cps[g]
        if k == 1:
            if rng is not None:
                slots = (base + int(rng.integers(width)),)
            else:
                slots = tuple(realized[g])
                if len(slots) != 1 or not base <= slots[0] < base + width:
                    return None, NEG_INF
            logq -= math.log(width)
        elif k == 2:
            if width < 2:
                return None, NEG_INF
            if rng is not None:
                a, b = sorted(int(x) for x in rng.choice(width, size=2, replace=False))
                slots = (base + a, base + b)
            else:
                slots = tuple(realized[g])
                if (len(slots) != 2 or not base <= slots[0] < slots[1] < base + width):
                    return None, NEG_INF
            logq -= math.log(width * (width - 1) // 2)
        else:
            return None, NEG_INF
        out.append(slots)
    return tuple(out), logq


# --------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class Block:
    """A run of sites sharing one local tree.

    ``op`` is the subtree move applied between ``end`` and ``end + 1``,
    in the canonical labels of ``tree``; None for the rightmost block of
    a sequence.
    """

    start: int
    end: int
    tree: Tree
    op: SprOp | None


def _assemble_blocks(af, segment, positions, values, prune_times):
    """Materialize concrete trees and moves; None when sampled times tie.

    Verifies every move maps its left tree onto its right tree, so any
    bookkeeping slip surfaces here instead of corrupting the chain.
    """
    path = af.path
    n = path.n_leaves
    steps = path.steps
    trees = []
    maps = []
    for s, (parents, order) in enumerate(steps):
        parent_dict = {x: parents[x] for x in range(1, 2 * n)}
        times = {leaf: 0.0 for leaf in range(1, n + 1)}
        for p in order:
            times[p] = values[af.run_at[(s, p)]]
        try:
            tree, label = canonicalize(parent_dict, times, n, return_map=True)
        except DegenerateTimesError:
            return None
        trees.append(tree)
        maps.append(label)

    slots = [x for gap in positions for x in gap]
    flat = path.flat_ops
    if len(slots) != len(flat):
        raise ConsistencyError("one genome slot per move required")

    blocks = []
    start = segment.alpha
    for k, (u, v) in enumerate(flat):
        m = steps[k][0][u]
        op = SprOp(maps[k][u], maps[k][v], prune_times[k],
                   values[af.run_at[(k + 1, m)]])
        if apply_spr(trees[k], op) != trees[k + 1]:
            raise ConsistencyError("assembled move does not map between its trees")
        blocks.append(Block(start, slots[k], trees[k], op))
        start = slots[k] + 1
    blocks.append(Block(start, segment.beta, trees[-1], None))
    return tuple(blocks)


@dataclass(frozen=True)
class BridgeProposal:
    """A sampled segment replacement plus its full proposal log density."""

    segment: Segment
    key: tuple
    blocks: tuple
    positions: tuple
    free_times: dict  # run index -> sampled time
    prune_times: tuple
    log_q_path: float
    log_q_times: float
    log_q_prunes: float

    @property
    def log_q(self):
        return self.log_q_path + self.log_q_times + self.log_q_prunes


def sample_bridge(rng, feasible, segment, left_tree=None, right_tree=None):
    """Draw one proposal from the feasible-path family; None on dead ends.

    ``feasible`` maps path keys to AffixedPath objects in a deterministic
    order; the path choice is uniform over it.  Dead ends (a free time or
    prune window narrower than the tie tolerance, or a time collision at
    assembly) are legitimate rejections, not errors.
    """
    if not feasible:
        raise ConfigError("cannot sample from an empty path family")
    items = list(feasible.values())
    af = items[int(rng.integers(len(items)))]
    logq_path = -math.log(len(items))

    positions, lq_pos = _walk_positions(segment, af.path, rng=rng)
    if positions is None:
        return None
    logq_path += lq_pos
    values, lq_t = _walk_times(af, rng=rng)
    if values is None:
        return None
    prune_times, lq_r = _walk_prunes(af, values, rng=rng)
    if prune_times is None:
        return None
    blocks = _assemble_blocks(af, segment, positions, values, prune_times)
    if blocks is None:
        return None

    if segment.left_fixed and left_tree is not None and blocks[0].tree != left_tree:
        raise ConsistencyError("proposal does not keep the left endpoint tree")
    if segment.right_fixed and right_tree is not None and blocks[-1].tree != right_tree:
        raise ConsistencyError("proposal does not keep the right endpoint tree")

    free_times = {i: values[i] for i in af.free_order}
    return BridgeProposal(segment, af.path.key, blocks, positions, free_times,
                          prune_times, logq_path, lq_t, lq_r)


def bridge_log_density(af, segment, family_size, positions, free_times, prune_times):
    """Log proposal density of a realized bridge under the same family.

    Walks the identical code paths as :func:`sample_bridge`, so a state
    and its regenerated density agree bit for bit.  Returns -inf when the
    realized values fall outside the proposal's support.
    """
    logq = -math.log(family_size)
    _, lq_pos = _walk_positions(segment, af.path, realized=positions)
    if lq_pos == NEG_INF:
        return NEG_INF
    values, lq_t = _walk_times(af, realized=free_times)
    if values is None:
        return NEG_INF
    _, lq_r = _walk_prunes(af, values, realized=prune_times)
    if lq_r == NEG_INF:
        return NEG_INF
    return logq + lq_pos + lq_t + lq_r


# --------------------------------------------------------------------------
# extraction of the current state's bridge


@dataclass(frozen=True)
class ExtractedBridge:
    """The current state's segment trajectory in proposal-family terms."""

    path: TopologyPath
    positions: tuple
    prune_times: tuple
    step_trees: tuple
    step_maps: tuple  # per step: physical id -> canonical label

    def run_values(self, af):
        """Realized times of the free runs, read off the stored trees."""
        out = {}
        for idx in af.free_order:
            run = af.runs[idx]
            label = self.step_maps[run.lo][run.phys]
            out[idx] = float(self.step_trees[run.lo].times[label])
        return out


def extract_segment_path(blocks, segment):
    """Express the current state inside ``segment`` as a topology path.

    Returns None when the current trajectory lies outside the proposal
    family: a move in a checkpoint-free margin, or more than two moves in
    one gap.  Physical ids are anchored exactly as the scan anchors them,
    so the extracted key is directly comparable.
    """
    sub = [b for b in blocks if b.end >= segment.alpha and b.start <= segment.beta]
    if not sub:
        raise ConsistencyError("segment not covered by the block sequence")
    cps = segment.checkpoints
    n = sub[0].tree.n_leaves

    slots = []
    ops = []
    for b in sub[:-1]:
        if b.op is None:
            raise ConsistencyError("interior block boundary without a move")
        slots.append(b.end)
        ops.append(b.op)

    gap_of = []
    for slot in slots:
        g = bisect.bisect_right(cps, slot) - 1
        if g < 0 or g >= len(cps) - 1:
            return None  # move outside the checkpoint span
        gap_of.append(g)
    counts = [0] * (len(cps) - 1)
    for g in gap_of:
        counts[g] += 1
    for g, c in enumerate(counts):
        if c > min(MAX_OPS_PER_GAP, cps[g + 1] - cps[g]):
            return None

    # Walk left to right, tracking canonical label -> physical id.
    fwd = {x: x for x in range(1, 2 * n)}
    trees = [sub[0].tree]
    maps_ = [dict(fwd)]
    states = [state_from_tree(sub[0].tree)]
    pairs = []
    for k, op in enumerate(ops):
        pairs.append((fwd[op.u], fwd[op.v]))
        stepped, relabel = apply_spr(trees[-1], op, return_map=True)
        if stepped != sub[k + 1].tree:
            raise ConsistencyError("block boundary move does not chain")
        fwd = {relabel[x]: fwd[x] for x in fwd}
        tree = sub[k + 1].tree
        trees.append(tree)
        par = [0] * (2 * n)
        for x in range(1, 2 * n):
            pa = int(tree.parent[x])
            par[fwd[x]] = fwd[pa] if pa else 0
        states.append((tuple(par), tuple(fwd[n + 1 + r] for r in range(n - 1))))
        maps_.append({phys: lbl for lbl, phys in fwd.items()})

    if not segment.left_fixed:
        # The scan anchors the leftmost segment at the right endpoint, so
        # rebase physical ids to that tree's labels.
        rebase = {phys: lbl for lbl, phys in fwd.items()}
        states = [
            (
                tuple(
                    (rebase[pa] if pa else 0)
                    for pa in _rebased_parents(st[0], rebase, n)
                ),
                tuple(rebase[p] for p in st[1]),
            )
            for st in states
        ]
        pairs = [(rebase[u], rebase[v]) for u, v in pairs]
        maps_ = [{rebase[p]: lbl for p, lbl in mp.items()} for mp in maps_]

    gap_ops = [[] for _ in range(len(cps) - 1)]
    positions = [[] for _ in range(len(cps) - 1)]
    for g, pair, slot, op in zip(gap_of, pairs, slots, ops):
        gap_ops[g].append(pair)
        positions[g].append(slot)

    path = TopologyPath(n, cps, tuple(states), tuple(tuple(g) for g in gap_ops))
    return ExtractedBridge(
        path,
        tuple(tuple(p) for p in positions),
        tuple(op.r for op in ops),
        tuple(trees),
        tuple(maps_),
    )


def _rebased_parents(parents, rebase, n):
    """Parent tuple reindexed by rebased ids, skipping slot 0."""
    out = [0] * (2 * n)
    for x in range(1, 2 * n):
        out[rebase[x]] = parents[x]
    return out
