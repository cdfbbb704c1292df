"""Genome-wide chain state and its Metropolis-Hastings updates.

The state is a run-length encoding of the site-indexed tree sequence:
blocks of consecutive sites sharing one tree, linked by the SPR move
taken at each block boundary.  Bridge updates rewrite one segment at a
time conditioned on its endpoint trees; coalescent-time updates move a
single node time across every site where that node persists.
"""

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bridge import (
    DEFAULT_PATH_CAP,
    NEG_INF,
    TIME_TOL,
    Block,
    bridge_log_density,
    extract_segment_path,
    feasible_family,
    sample_bridge,
    select_segments,
    tree_scan_with_extra,
)
from .errors import (
    ConfigError,
    ConsistencyError,
    DegenerateTimesError,
    InvalidOperationError,
    InvalidTreeError,
    ScanAbort,
)
from .model import (
    log_density_initial,
    pair_rate,
    site_log_likelihood,
    transition_log_density,
)
from .trees import IDENTITY_OP, SprOp, apply_spr, is_compatible, serialize_newick

EVENTS = ("accept", "reject", "skip", "time_accept", "time_reject")


@dataclass(frozen=True)
class ChainConfig:
    """Run-length knobs for one chain execution."""

    params: object
    half_width: int = 2
    iterations: int = 1000
    seed: int = 0
    burn_in: int = 0
    thin: int = 1
    parallel: bool = False
    path_cap: int = DEFAULT_PATH_CAP
    debug: bool = False

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.thin < 1:
            raise ConfigError("thinning interval must be at least 1")
        if self.burn_in < 0:
            raise ConfigError("burn-in cannot be negative")
        if self.half_width < 1:
            raise ConfigError("segment half-width must be at least 1")


@dataclass(frozen=True)
class ChainState:
    """Current tree sequence plus its cached unnormalised log posterior."""

    blocks: tuple
    log_post: float

    @property
    def recomb_count(self):
        return sum(1 for b in self.blocks if b.op is not None)


@dataclass(frozen=True)
class ChainResult:
    trace: list  # (iteration, log_posterior, recomb_count, event)
    samples: list  # (sample_id, blocks tuple)
    events: Counter
    state: ChainState
    segments: list


# --------------------------------------------------------------------------
# posterior bookkeeping


def _identity_log(tree, params):
    return transition_log_density(tree, IDENTITY_OP, params)


def _range_lik(tree, lo, hi, columns, params):
    """Log likelihood of sites lo..hi (inclusive) under one tree."""
    if lo > hi:
        return 0.0
    total = 0.0
    count = hi - lo + 1
    for site, mask in columns.items():
        if lo <= site <= hi:
            total += site_log_likelihood(tree, mask, params.theta)
            count -= 1
    return total + count * site_log_likelihood(tree, 0, params.theta)


def _boundary_log(blocks, k, params):
    """Transition density at block k's right boundary (0 past genome end)."""
    b = blocks[k]
    if b.op is not None:
        return transition_log_density(b.tree, b.op, params)
    if k < len(blocks) - 1:
        return _identity_log(b.tree, params)  # identity seam
    return 0.0


def log_posterior(blocks, columns, params):
    """Unnormalised log posterior of a full-genome state.

    Initial-tree density, per-gap transition densities (identity gaps
    inside blocks contribute the no-recombination mass), and per-site
    likelihoods where non-segregating columns contribute the no-mutation
    mass.
    """
    total = log_density_initial(blocks[0].tree)
    for k, b in enumerate(blocks):
        total += _range_lik(b.tree, b.start, b.end, columns, params)
        total += (b.end - b.start) * _identity_log(b.tree, params)
        total += _boundary_log(blocks, k, params)
    return total


def seg_log_target(seg_blocks, segment, columns, params):
    """The factors of the log posterior a segment update can change.

    Transitions for every gap inside the segment, likelihoods for every
    site whose tree is free to move (conditioned endpoints excluded), and
    the initial-tree density when the left end is unconditioned.
    """
    total = 0.0
    if not segment.left_fixed:
        total += log_density_initial(seg_blocks[0].tree)
    lik_lo = segment.alpha + 1 if segment.left_fixed else segment.alpha
    lik_hi = segment.beta - 1 if segment.right_fixed else segment.beta
    for k, b in enumerate(seg_blocks):
        total += _range_lik(b.tree, max(b.start, lik_lo), min(b.end, lik_hi), columns, params)
        total += (b.end - b.start) * _identity_log(b.tree, params)
        if k < len(seg_blocks) - 1:
            total += _boundary_log(seg_blocks, k, params)
    return total


def initial_chain_state(blocks, columns, params):
    blocks = tuple(blocks)
    return ChainState(blocks, log_posterior(blocks, columns, params))


# --------------------------------------------------------------------------
# state surgery


def _tree_at(blocks, site):
    for b in blocks:
        if b.start <= site <= b.end:
            return b.tree
    raise ConsistencyError(f"site {site} not covered by any block")


def clip_state_blocks(blocks, segment):
    """The segment's view of the state: blocks cropped to [alpha, beta],
    dropping the boundary op of the block that crosses beta."""
    out = []
    for b in blocks:
        if b.end < segment.alpha or b.start > segment.beta:
            continue
        op = b.op if b.end < segment.beta else None
        out.append(Block(max(b.start, segment.alpha), min(b.end, segment.beta), b.tree, op))
    return out


def splice_blocks(blocks, segment, new_blocks):
    """Replace the segment's site range with ``new_blocks``.

    Stubs of boundary-straddling blocks are kept; seams whose trees match
    across an op-free boundary are merged so block boundaries always carry
    a real move (except the final block).
    """
    head, tail = [], []
    carry_op = None  # op in the gap beta -> beta+1 lies outside the segment
    for b in blocks:
        if b.end < segment.alpha:
            head.append(b)
            continue
        if b.start > segment.beta:
            tail.append(b)
            continue
        if b.start < segment.alpha:
            head.append(Block(b.start, segment.alpha - 1, b.tree, None))
        if b.end > segment.beta:
            tail.append(Block(segment.beta + 1, b.end, b.tree, b.op))
        elif b.end == segment.beta:
            carry_op = b.op
    new_blocks = list(new_blocks)
    last = new_blocks[-1]
    if last.op is not None:
        raise ConsistencyError("segment blocks must end without a boundary op")
    new_blocks[-1] = Block(last.start, last.end, last.tree, carry_op)
    merged = []
    for b in head + new_blocks + tail:
        prev = merged[-1] if merged else None
        if prev is not None and prev.op is None:
            if prev.tree != b.tree:
                raise ConsistencyError("op-free seam between different trees")
            merged[-1] = Block(prev.start, b.end, b.tree, b.op)
        else:
            merged.append(b)
    return tuple(merged)


def check_blocks(blocks, columns, n_sites):
    """Debug invariants: tiling, linked boundaries, data compatibility."""
    if blocks[0].start != 1 or blocks[-1].end != n_sites:
        raise ConsistencyError("blocks do not tile the genome")
    if blocks[-1].op is not None:
        raise ConsistencyError("final block must not carry a boundary op")
    for cur, nxt in zip(blocks, blocks[1:]):
        if nxt.start != cur.end + 1:
            raise ConsistencyError("blocks overlap or leave a gap")
        if cur.op is None:
            if cur.tree != nxt.tree:
                raise ConsistencyError("op-free boundary between different trees")
        elif cur.op.is_identity():
            raise ConsistencyError("explicit identity op stored at a boundary")
        elif apply_spr(cur.tree, cur.op) != nxt.tree:
            raise ConsistencyError("boundary op does not produce the next tree")
    for b in blocks:
        for site, mask in columns.items():
            if b.start <= site <= b.end and not is_compatible(b.tree, mask):
                raise ConsistencyError(f"tree at site {site} incompatible with data")


# --------------------------------------------------------------------------
# bridge update


def _bridge_attempt(blocks, segment, columns, params, rng, path_cap):
    """One proposal for a segment, computed against a fixed state snapshot.

    Returns (event, accepted segment blocks or None, log-posterior delta).
    """
    left = _tree_at(blocks, segment.alpha) if segment.left_fixed else None
    right = _tree_at(blocks, segment.beta) if segment.right_fixed else None
    anchor = left if segment.left_fixed else right
    end = right if (segment.left_fixed and segment.right_fixed) else None
    try:
        cand = tree_scan_with_extra(
            segment, anchor, columns, end_tree=end, path_cap=path_cap
        )
    except ScanAbort:
        return "skip", None, 0.0
    feasible = feasible_family(cand, left, right)
    if not feasible:
        return "skip", None, 0.0

    current = clip_state_blocks(blocks, segment)
    ext = extract_segment_path(current, segment)
    if ext is None or ext.path.key not in feasible:
        # the reverse move could not regenerate the current state, so a
        # balanced accept/reject is impossible here
        return "skip", None, 0.0

    prop = sample_bridge(rng, feasible, segment, left, right)
    if prop is None:
        return "reject", None, 0.0
    af_cur = feasible[ext.path.key]
    log_q_cur = bridge_log_density(
        af_cur, segment, len(feasible), ext.positions, ext.run_values(af_cur), ext.prune_times
    )
    if log_q_cur == NEG_INF:
        return "skip", None, 0.0

    pi_new = seg_log_target(prop.blocks, segment, columns, params)
    pi_old = seg_log_target(current, segment, columns, params)
    delta = pi_new - pi_old + log_q_cur - prop.log_q
    if delta >= 0 or rng.uniform() < math.exp(delta):
        return "accept", prop.blocks, pi_new - pi_old
    return "reject", None, 0.0


def mh_bridge_update(state, segment, columns, params, rng, *, path_cap=DEFAULT_PATH_CAP):
    """Propose and resolve one bridge update; returns (state, event)."""
    event, seg_blocks, delta = _bridge_attempt(
        state.blocks, segment, columns, params, rng, path_cap
    )
    if event != "accept":
        return state, event
    new_blocks = splice_blocks(state.blocks, segment, seg_blocks)
    return ChainState(new_blocks, state.log_post + delta), event


# --------------------------------------------------------------------------
# coalescent-time update


def time_runs(blocks):
    """Node-time variables of the state: each run is the maximal list of
    (block index, label) positions over which one node keeps its time.

    A non-identity boundary op deletes the pruned node's parent and
    creates its replacement, ending one run and starting another; every
    other node carries straight through the move.
    """
    n = blocks[0].tree.n_leaves
    runs = []
    active = {}
    for label in range(n + 1, 2 * n):
        active[label] = len(runs)
        runs.append([(0, label)])
    for k in range(len(blocks) - 1):
        op = blocks[k].op
        if op is None:  # identity seam
            for label, idx in active.items():
                runs[idx].append((k + 1, label))
            continue
        _, relabel = apply_spr(blocks[k].tree, op, return_map=True)
        mover = int(blocks[k].tree.parent[op.u])
        nxt = {}
        for label, idx in active.items():
            new_label = relabel[label]
            if label == mover:
                nxt[new_label] = len(runs)
                runs.append([(k + 1, new_label)])
            else:
                runs[idx].append((k + 1, new_label))
                nxt[new_label] = idx
        active = nxt
    return [tuple(r) for r in runs]


def run_time_value(blocks, entries):
    k, label = entries[0]
    return float(blocks[k].tree.times[label])


def run_time_bounds(blocks, entries):
    """Tightest neighbouring node times around the run, over all its sites.

    Canonical labels are time-ordered, so the rank neighbours label-1 and
    label+1 bound the node in each block; respecting them preserves the
    time ordering genome-wide.
    """
    n = blocks[0].tree.n_leaves
    lo, hi = 0.0, math.inf
    for k, label in entries:
        times = blocks[k].tree.times
        if label - 1 > n:
            lo = max(lo, float(times[label - 1]))
        if label + 1 <= 2 * n - 1:
            hi = min(hi, float(times[label + 1]))
    return lo, hi


def _time_factor(blocks, b0, b1, columns, params):
    """Posterior factors that depend on the trees of blocks b0..b1."""
    total = 0.0
    if b0 == 0:
        total += log_density_initial(blocks[0].tree)
    for k in range(b0, b1 + 1):
        b = blocks[k]
        total += _range_lik(b.tree, b.start, b.end, columns, params)
        total += (b.end - b.start) * _identity_log(b.tree, params)
    for k in range(max(b0 - 1, 0), b1 + 1):
        total += _boundary_log(blocks, k, params)
    return total


def retime_run(blocks, entries, t_new, columns, params):
    """Rebuild the state with one run moved to ``t_new``.

    Rewrites the regraft height of the op that created the run, then
    revalidates every boundary op touching the rebuilt blocks.  Returns
    (new blocks, log-posterior delta), or None when any structural or
    support constraint fails.
    """
    b0, b1 = entries[0][0], entries[-1][0]
    new_blocks = list(blocks)
    try:
        for k, label in entries:
            times = blocks[k].tree.times.copy()
            times[label] = t_new
            new_blocks[k] = Block(
                blocks[k].start, blocks[k].end, blocks[k].tree.with_times(times), blocks[k].op
            )
    except (InvalidTreeError, DegenerateTimesError):
        return None
    if b0 > 0 and blocks[b0 - 1].op is not None:
        prev = blocks[b0 - 1]
        op = prev.op
        new_blocks[b0 - 1] = Block(
            prev.start, prev.end, prev.tree, SprOp(op.u, op.v, op.r, t_new)
        )
    for k in range(max(b0 - 1, 0), min(b1 + 1, len(blocks) - 1)):
        op = new_blocks[k].op
        if op is None:
            if new_blocks[k].tree != new_blocks[k + 1].tree:
                return None
            continue
        try:
            if apply_spr(new_blocks[k].tree, op) != new_blocks[k + 1].tree:
                return None
        except (InvalidOperationError, InvalidTreeError, DegenerateTimesError):
            return None
    delta = _time_factor(new_blocks, b0, b1, columns, params) - _time_factor(
        blocks, b0, b1, columns, params
    )
    return tuple(new_blocks), delta


def _single_time_update(state, entries, columns, params, rng):
    """Truncated-exponential proposal for one node-time variable."""
    blocks = state.blocks
    n = blocks[0].tree.n_leaves
    lo, hi = run_time_bounds(blocks, entries)
    if hi - lo <= 2 * TIME_TOL:
        return state, "time_reject"
    t_old = run_time_value(blocks, entries)
    rank = entries[0][1] - n  # position of the node in its first tree
    rate = pair_rate(n - rank + 1)
    if math.isinf(hi):
        t_new = lo + float(rng.exponential(1.0 / rate))
    else:
        mass = -math.expm1(-rate * (hi - lo))
        t_new = lo - math.log1p(-float(rng.uniform()) * mass) / rate
    rebuilt = retime_run(blocks, entries, t_new, columns, params)
    if rebuilt is None:
        return state, "time_reject"
    new_blocks, delta_pi = rebuilt
    # proposal bounds depend only on the neighbours, so the forward and
    # reverse truncated densities differ by the exponential tilt alone
    delta = delta_pi + rate * (t_new - t_old)
    if delta >= 0 or rng.uniform() < math.exp(delta):
        return ChainState(new_blocks, state.log_post + delta_pi), "time_accept"
    return state, "time_reject"


def coalescent_time_update(state, columns, params, rng):
    """One pass over every node-time variable, in increasing-time order."""
    events = []
    runs = sorted(time_runs(state.blocks), key=lambda e: run_time_value(state.blocks, e))
    for entries in runs:
        state, event = _single_time_update(state, entries, columns, params, rng)
        events.append(event)
    return state, events


# --------------------------------------------------------------------------
# sweep scheduling


def column_masks(data):
    """Segregating-site bitmask columns of a data matrix (leaf n -> bit n-1)."""
    masks = {}
    entries = np.asarray(data.entries)
    for site in data.segregating:
        col = entries[:, site - 1]
        masks[int(site)] = int(sum(1 << i for i, x in enumerate(col) if x))
    return masks


def plan_segments(seg_sites, n_sites, half_width):
    """Segment plan with the half-width clamped to what the data allows;
    empty when there are too few segregating sites to bridge."""
    m_s = len(seg_sites)
    if m_s < 3:
        return []
    return select_segments(seg_sites, min(half_width, m_s - 2), n_sites)


def _update_rng(seed, sweep, kind, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(sweep, kind, index)))


def run_chain(data, config, initial_state=None, initial_blocks=None):
    """Run the sampler: sweeps of all segment updates then all time updates.

    An iteration is a single update of either kind; skipped segment
    updates still count.  The trace records every iteration; thinned
    block snapshots are kept after burn-in.
    """
    columns = column_masks(data)
    segments = plan_segments(sorted(columns), data.n_sites, config.half_width)
    params = config.params
    if initial_state is None:
        if initial_blocks is None:
            raise ConfigError("an initial state or initial blocks are required")
        initial_state = initial_chain_state(initial_blocks, columns, params)
    state = initial_state
    if config.debug:
        check_blocks(state.blocks, columns, data.n_sites)

    trace = []
    samples = []
    events = Counter()
    iteration = 0

    def record(ev):
        nonlocal iteration
        iteration += 1
        events[ev] += 1
        trace.append((iteration, state.log_post, state.recomb_count, ev))
        if iteration > config.burn_in and (iteration - config.burn_in) % config.thin == 0:
            samples.append((iteration, state.blocks))

    sweep = 0
    while iteration < config.iterations:
        sweep += 1
        waves = [segments]
        if config.parallel and len(segments) > 1:
            waves = [segments[0::2], segments[1::2]]
        for wave in waves:
            if iteration >= config.iterations:
                break
            if config.parallel and len(wave) > 1:
                snapshot = state.blocks
                with ThreadPoolExecutor() as pool:
                    futures = [
                        pool.submit(
                            _bridge_attempt,
                            snapshot,
                            seg,
                            columns,
                            params,
                            _update_rng(config.seed, sweep, 0, seg.index),
                            config.path_cap,
                        )
                        for seg in wave
                    ]
                for seg, fut in zip(wave, futures):
                    if iteration >= config.iterations:
                        break
                    event, seg_blocks, delta = fut.result()
                    if event == "accept":
                        state = ChainState(
                            splice_blocks(state.blocks, seg, seg_blocks),
                            state.log_post + delta,
                        )
                        if config.debug:
                            check_blocks(state.blocks, columns, data.n_sites)
                    record(event)
            else:
                for seg in wave:
                    if iteration >= config.iterations:
                        break
                    rng = _update_rng(config.seed, sweep, 0, seg.index)
                    state, event = mh_bridge_update(
                        state, seg, columns, params, rng, path_cap=config.path_cap
                    )
                    if config.debug and event == "accept":
                        check_blocks(state.blocks, columns, data.n_sites)
                    record(event)
        runs = sorted(
            time_runs(state.blocks), key=lambda e: run_time_value(state.blocks, e)
        )
        for k, entries in enumerate(runs):
            if iteration >= config.iterations:
                break
            rng = _update_rng(config.seed, sweep, 1, k)
            state, event = _single_time_update(state, entries, columns, params, rng)
            if config.debug and event == "time_accept":
                check_blocks(state.blocks, columns, data.n_sites)
            record(event)
        if not segments and not runs:
            raise ConfigError("state admits no updates")
    return ChainResult(trace, samples, events, state, segments)


# --------------------------------------------------------------------------
# output streams


def write_trace(trace, path):
    with open(path, "w") as handle:
        handle.write("iter,log_posterior,n_recomb,event\n")
        for iteration, log_post, n_recomb, event in trace:
            handle.write(f"{iteration},{log_post!r},{n_recomb},{event}\n")


def write_samples(samples, path):
    with open(path, "w") as handle:
        for sample_id, blocks in samples:
            for b in blocks:
                handle.write(f"{sample_id}\t{b.start}\t{b.end}\t{serialize_newick(b.tree)}\n")
