"""Binary data matrices: loading, preprocessing, and the initial genealogy.

The initializer builds a compatible tree sequence greedily from left to
right: a perfect-phylogeny tree for the longest laminar prefix of the
segregating columns, then at each incompatibility a one-move repair, a
two-move repair, or a rebuilt tree connected by an explicit move walk.
Its contract is compatibility at every site plus a recombination count
close to the data's minimum, not exact minimality.
"""

import math
from dataclasses import dataclass

import numpy as np

from .bridge import Block, tree_matrix_key
from .chain import check_blocks, column_masks, initial_chain_state
from .errors import (
    DataFormatError,
    DegenerateTimesError,
    InvalidOperationError,
    InvalidTreeError,
    TreeBridgeError,
)
from .model import pair_rate
from .trees import (
    SprOp,
    Tree,
    apply_spr,
    colour_tree,
    count_maximal_black_subtrees,
    enumerate_heuristic_sprs,
    is_compatible,
    regraft_upper_time,
)


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """A binary alignment plus its segregating-site bookkeeping.

    ``original_positions`` maps each kept column (by index) to its
    coordinate before preprocessing, so removed columns stay traceable.
    """

    n_seq: int
    n_sites: int
    entries: np.ndarray
    segregating: tuple
    original_positions: tuple

    def __post_init__(self):
        if self.entries.shape != (self.n_seq, self.n_sites):
            raise DataFormatError("entry matrix shape does not match the counts")
        if len(self.original_positions) != self.n_sites:
            raise DataFormatError("need one original position per kept column")
        if any(b <= a for a, b in zip(self.segregating, self.segregating[1:])):
            raise DataFormatError("segregating sites must be strictly increasing")


def _content_lines(source):
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as handle:
            text = handle.read()
    lines = []
    for raw in text.splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return lines


def load_and_preprocess(source, positions_source=None, *, dedupe_rows=False,
                        min_minor_count=2):
    """Parse a matrix file and apply the standard preprocessing.

    Format: a ``#``-comment-tolerant text file whose first content line is
    ``N S``, followed by N rows of S characters from {0,1}.  An optional
    positions file lists one integer coordinate per column.

    Preprocessing drops exact duplicate rows (only when ``dedupe_rows`` is
    set) and polymorphic columns whose minor allele count is below
    ``min_minor_count``.  Constant columns are kept: they carry the
    no-mutation likelihood mass, and dropping them would shrink the genome.
    """
    lines = _content_lines(source)
    if not lines:
        raise DataFormatError("empty input")
    head = lines[0].split()
    try:
        n_seq, n_sites = (int(x) for x in head)
    except ValueError:
        raise DataFormatError("first line must be two integers: sequences, sites")
    if n_seq < 2 or n_sites < 1:
        raise DataFormatError("need at least two sequences and one site")
    rows = lines[1:]
    if len(rows) != n_seq:
        raise DataFormatError(f"expected {n_seq} sequence rows, found {len(rows)}")
    entries = np.zeros((n_seq, n_sites), dtype=np.uint8)
    for i, row in enumerate(rows):
        if len(row) != n_sites:
            raise DataFormatError(
                f"row {i + 1} has {len(row)} characters, expected {n_sites}"
            )
        for j, ch in enumerate(row):
            if ch == "1":
                entries[i, j] = 1
            elif ch != "0":
                raise DataFormatError(
                    f"row {i + 1}, column {j + 1}: invalid character {ch!r}"
                )

    positions = list(range(1, n_sites + 1))
    if positions_source is not None:
        pos_lines = _content_lines(positions_source)
        if len(pos_lines) != n_sites:
            raise DataFormatError(
                f"positions file lists {len(pos_lines)} sites, expected {n_sites}"
            )
        try:
            positions = [int(x) for x in pos_lines]
        except ValueError:
            raise DataFormatError("positions file must hold one integer per line")

    if dedupe_rows:
        first = {}
        for i in range(entries.shape[0]):
            first.setdefault(entries[i].tobytes(), i)
        keep = sorted(first.values())
        entries = entries[keep]
        if entries.shape[0] < 2:
            raise DataFormatError("fewer than two distinct sequences after dedupe")

    ones = entries.sum(axis=0)
    minor = np.minimum(ones, entries.shape[0] - ones)
    keep_cols = (minor == 0) | (minor >= min_minor_count)
    entries = np.ascontiguousarray(entries[:, keep_cols])
    if entries.shape[1] == 0:
        raise DataFormatError("no columns remain after preprocessing")
    original = tuple(p for p, k in zip(positions, keep_cols) if k)

    ones = entries.sum(axis=0)
    segregating = tuple(
        int(j + 1) for j in range(entries.shape[1])
        if 0 < ones[j] < entries.shape[0]
    )
    return DataMatrix(entries.shape[0], entries.shape[1], entries, segregating, original)


def write_matrix(entries, destination):
    """Write a binary matrix in the input format understood by the loader."""
    entries = np.asarray(entries, dtype=np.uint8)
    lines = [f"{entries.shape[0]} {entries.shape[1]}"]
    lines.extend("".join("1" if x else "0" for x in row) for row in entries)
    text = "\n".join(lines) + "\n"
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w") as handle:
            handle.write(text)


# --------------------------------------------------------------------------
# initial genealogy


def _prior_ladder(n):
    """Cumulative means of the coalescent holding times, ranks 1..n-1."""
    out = []
    total = 0.0
    for k in range(n, 1, -1):
        total += 1.0 / pair_rate(k)
        out.append(total)
    return out


def _min_leaf(mask):
    return (mask & -mask).bit_length()


def _leaves_of(mask):
    out = []
    leaf = 1
    while mask:
        if mask & 1:
            out.append(leaf)
        mask >>= 1
        leaf += 1
    return out


def _phylogeny_tree(n, masks, times):
    """A tree realizing every carrier set in the laminar family ``masks``."""
    full = (1 << n) - 1
    family = sorted(
        {int(m) for m in masks if 0 < int(m) < full},
        key=lambda m: (m.bit_count(), _min_leaf(m)),
    )

    def grow(universe, fams):
        kids = []
        covered = 0
        maximal = [m for m in fams if not any(m != o and m | o == o for o in fams)]
        for m in maximal:
            covered |= m
            inner = [o for o in fams if o != m and o | m == m]
            kids.append(grow(m, inner))
        for leaf in _leaves_of(universe & ~covered):
            kids.append(((1 << (leaf - 1)), leaf))
        kids.sort(key=lambda kid: _min_leaf(kid[0]))
        while len(kids) > 1:  # deterministic left-deep join
            kids[:2] = [(kids[0][0] | kids[1][0], (kids[0], kids[1]))]
        return kids[0]

    root = grow(full, family)
    internals = []

    def visit(node):
        payload = node[1]
        if isinstance(payload, int):
            return
        visit(payload[0])
        visit(payload[1])
        internals.append(node)

    visit(root)
    # children always precede parents: a child's leafset is strictly smaller
    internals.sort(key=lambda nd: (nd[0].bit_count(), _min_leaf(nd[0])))
    label = {id(nd): n + 1 + i for i, nd in enumerate(internals)}

    def label_of(node):
        payload = node[1]
        return payload if isinstance(payload, int) else label[id(node)]

    rows = [sorted((label_of(nd[1][0]), label_of(nd[1][1]))) for nd in internals]
    return Tree(rows, [0.0] * n + [float(t) for t in times[: n - 1]])


def _jittered_ladder(n, rng, spread=0.01):
    # relative jitter this small cannot reorder the strictly growing ladder
    base = np.array(_prior_ladder(n))
    return list(base * (1.0 + spread * rng.uniform(-1.0, 1.0, size=n - 1)))


def _laminar_prefix_len(masks, start):
    family = []
    k = start
    while k < len(masks):
        m = masks[k]
        if any((m & o) not in (0, m, o) for o in family):
            break
        if m not in family:
            family.append(m)
        k += 1
    return k - start


def _compatible_run_len(tree, masks, start):
    k = start
    while k < len(masks) and is_compatible(tree, masks[k]):
        k += 1
    return k - start


def _regraft_reps(tree, u, v, r):
    """One regraft height per ranked outcome of moving ``u`` onto ``v``."""
    n = tree.n_leaves
    mover = int(tree.parent[u])
    lo = max(float(tree.times[v]), r)
    hi = regraft_upper_time(tree, u, v)
    if hi <= lo:
        return []
    cuts = [lo] + sorted(
        float(tree.times[x])
        for x in range(n + 1, 2 * n)
        if x != mover and lo < float(tree.times[x]) < hi
    )
    if math.isinf(hi):
        return [(a + b) / 2.0 for a, b in zip(cuts, cuts[1:])] + [cuts[-1] + 1.0]
    cuts.append(hi)
    return [(a + b) / 2.0 for a, b in zip(cuts, cuts[1:])]


def _moves_from_pairs(tree, pairs):
    """Apply one representative move per (pair, ranked outcome), deduped by
    the resulting ranked shape."""
    seen = set()
    out = []
    for u, v in pairs:
        u, v = int(u), int(v)
        pa_u = int(tree.parent[u])
        r = (float(tree.times[u]) + float(tree.times[pa_u])) / 2.0
        for w in _regraft_reps(tree, u, v, r):
            op = SprOp(u, v, r, w)
            try:
                nxt = apply_spr(tree, op)
            except (InvalidOperationError, InvalidTreeError, DegenerateTimesError):
                continue
            key = tree_matrix_key(nxt)
            if key in seen:
                continue
            seen.add(key)
            out.append((op, nxt))
    return out


def _repair_moves(tree, mask):
    """Colour-guided candidate moves for one incompatible column; the
    heuristic classes cover every single-move repair."""
    return _moves_from_pairs(tree, enumerate_heuristic_sprs(colour_tree(tree, mask)))


def _all_single_moves(tree):
    """One representative move per source/destination pair, in label order.

    Unrestricted first step of a two-move repair: a move that fixes nothing
    by itself can still clear obstructing structure so that a colour-guided
    second move covers the whole run ahead.
    """
    n = tree.n_leaves
    seen = set()
    out = []
    for u in range(1, 2 * n):
        if u == tree.root:
            continue
        pa_u = int(tree.parent[u])
        r = (float(tree.times[u]) + float(tree.times[pa_u])) / 2.0
        for v in range(1, 2 * n):
            if v == u or v == pa_u:
                continue
            for w in _regraft_reps(tree, u, v, r):
                op = SprOp(u, v, r, w)
                try:
                    nxt = apply_spr(tree, op)
                except (InvalidOperationError, InvalidTreeError, DegenerateTimesError):
                    continue
                key = tree_matrix_key(nxt)
                if key not in seen:
                    seen.add(key)
                    out.append((op, nxt))
                break  # one ranked outcome per pair is enough for shape search
    return out


def _search_repair(tree, masks, k, fits):
    """Repair at column ``k``, aiming for the whole pairwise-compatible run
    ahead: best single move first, upgraded to a move pair only when a pair
    covers the full run and no single move does.  None if nothing one or two
    moves long works."""
    target = masks[k]
    goal = _laminar_prefix_len(masks, k)
    best = None
    for op, nxt in _repair_moves(tree, target):
        if not is_compatible(nxt, target) or not fits([nxt]):
            continue
        run = _compatible_run_len(nxt, masks, k)
        if best is None or run > best[0]:
            best = (run, [op], [nxt])
            if run >= goal:
                return best
    pair_best = None
    for op1, mid in _all_single_moves(tree):
        viol = k + _compatible_run_len(mid, masks, k)
        if viol >= len(masks):
            continue  # full coverage by one move was already phase-one's job
        for op2, nxt in _repair_moves(mid, masks[viol]):
            run = _compatible_run_len(nxt, masks, k)
            if run < 1:
                continue  # fixing a later column must not break column k
            if run < goal and best is not None:
                continue  # pairs only pay off when they cover the full run
            if pair_best is not None and run <= pair_best[0]:
                continue
            if not fits([mid, nxt]):
                continue
            pair_best = (run, [op1, op2], [mid, nxt])
            if run >= goal:
                return pair_best
    if best is not None and (pair_best is None or best[0] >= pair_best[0]):
        return best
    return pair_best


def _reduce_to_compatible(tree, masks, k, fits, max_moves):
    """Move-by-move repair for column ``k``: each step takes the candidate
    that most reduces the count of maximal black subtrees, which reaches one
    (compatibility) in at most count-1 moves."""
    target = masks[k]
    ops, states = [], []
    cur = tree
    while not is_compatible(cur, target):
        if len(ops) >= max_moves:
            return None
        best = None
        score = count_maximal_black_subtrees(colour_tree(cur, target))
        for op, nxt in _repair_moves(cur, target):
            left = count_maximal_black_subtrees(colour_tree(nxt, target))
            if left >= score:
                continue  # only strictly shrinking moves guarantee progress
            if best is None or left < best[0]:
                best = (left, op, nxt)
        if best is None:
            return None
        ops.append(best[1])
        states.append(best[2])
        cur = best[2]
    if not fits(states):
        return None
    return _compatible_run_len(cur, masks, k), ops, states


def _merge_subtrees(tree, a, b):
    """One move joining the subtrees at ``a`` and ``b`` under a new parent.

    At least one prune direction admits a regraft height: if neither branch
    reached above the other subtree's root, each parent would sit below the
    other, which is circular.
    """
    for u, v in ((b, a), (a, b)):
        r = float(tree.times[u])
        for w in _regraft_reps(tree, u, v, r):
            op = SprOp(u, v, r, w)
            try:
                return op, apply_spr(tree, op)
            except (InvalidOperationError, InvalidTreeError, DegenerateTimesError):
                continue
    raise TreeBridgeError("no regraft height joins the two subtrees")


def _scale_times(blocks, c):
    """Every node time and op coordinate multiplied by ``c``; ranks, labels,
    and therefore compatibility are unchanged."""
    out = []
    for b in blocks:
        tree = b.tree
        n = tree.n_leaves
        rows = [sorted(int(x) for x in tree.children[k]) for k in range(n - 1)]
        scaled = Tree(rows, [float(t) * c for t in tree.times[1:]])
        op = b.op
        if op is not None and not op.is_identity():
            op = SprOp(op.u, op.v, op.r * c, op.w * c)
        out.append(Block(b.start, b.end, scaled, op))
    return tuple(out)


def _calibrate_time_scale(blocks, columns, params):
    """Shrink or stretch the whole time axis to fit the data.

    Prior-quantile node times are far too long whenever the observed
    mutation count runs below its expectation under theta, and a chain
    started there shortens trees the expensive way, by inserting extra
    recombinations.  A one-dimensional posterior search over a global scale
    factor removes that failure mode while keeping the quantile shape.
    """
    def score(c):
        return initial_chain_state(_scale_times(blocks, c), columns, params).log_post

    grid = [0.05 * 1.32**k for k in range(14)]  # 0.05 .. ~1.8
    best = max(grid, key=score)
    fine = [best * f for f in (0.8, 0.9, 1.0, 1.12, 1.25)]
    return _scale_times(blocks, max(fine, key=score))


def _clade_labels(tree):
    return {int(tree.leafset[x]) for x in range(tree.n_leaves + 1, 2 * tree.n_leaves)}


def _walk_to_topology(tree, target):
    """Moves turning ``tree``'s topology into ``target``'s, smallest clades
    first; each step merges two of a missing clade's component subtrees."""
    ops, states = [], []
    cur = tree
    n = tree.n_leaves
    wanted = sorted(
        (int(target.leafset[x]) for x in range(n + 1, 2 * n)),
        key=lambda m: (m.bit_count(), _min_leaf(m)),
    )
    for clade in wanted:
        while clade not in _clade_labels(cur):
            roots = [
                x
                for x in range(1, 2 * n)
                if int(cur.leafset[x]) | clade == clade
                and (
                    x == cur.root
                    or int(cur.leafset[int(cur.parent[x])]) | clade != clade
                )
            ]
            roots.sort(key=lambda x: _min_leaf(int(cur.leafset[x])))
            a = roots[0]
            b = next(x for x in roots[1:] if cur.parent[x] != cur.parent[a])
            op, cur = _merge_subtrees(cur, a, b)
            ops.append(op)
            states.append(cur)
    return ops, states


def initial_state(data, params, rng=None):
    """A compatible chain state approximating the minimum-recombination
    history of ``data``, with prior-quantile node times."""
    if rng is None:
        rng = np.random.default_rng(0)
    columns = column_masks(data)
    seg = [int(s) for s in data.segregating]
    masks = [columns[s] for s in seg]
    n = data.n_seq

    def fresh(family):
        return _phylogeny_tree(n, family, _jittered_ladder(n, rng))

    if not seg:
        blocks = (Block(1, data.n_sites, fresh([]), None),)
        return initial_chain_state(blocks, columns, params)

    prefix = _laminar_prefix_len(masks, 0)
    tree = fresh(masks[:prefix])
    blocks = []
    cur_start = 1
    k = prefix
    while k < len(masks):

        def fits(states, k=k, cur_start=cur_start):
            # moves go in the gaps just before seg[k]; when they reach back
            # past earlier segregating columns, the intermediate trees take
            # those sites over and must stay compatible there
            anchor = seg[k] - len(states)
            if anchor < cur_start:
                return False
            for i in range(len(states) - 1):
                mask = columns.get(anchor + i + 1)
                if mask is not None and not is_compatible(states[i], mask):
                    return False
            return True

        repair = _search_repair(tree, masks, k, fits)
        if repair is None:
            repair = _reduce_to_compatible(tree, masks, k, fits, seg[k] - cur_start)
        if repair is None:
            # rebuild from scratch for the next laminar stretch and connect
            # the two trees by an explicit move walk
            stretch = _laminar_prefix_len(masks, k)
            target = fresh(masks[k : k + stretch])
            ops, states = _walk_to_topology(tree, target)
            if not fits(states):
                raise TreeBridgeError(
                    f"{len(ops)} moves needed before site {seg[k]} do not fit "
                    "the gaps available there"
                )
            repair = (_compatible_run_len(states[-1], masks, k), ops, states)
        run, ops, states = repair
        if run < 1 or not ops:
            raise TreeBridgeError("repair failed to advance past an incompatibility")
        anchor = seg[k] - len(ops)
        blocks.append(Block(cur_start, anchor, tree, ops[0]))
        for j in range(1, len(ops)):
            blocks.append(Block(anchor + j, anchor + j, states[j - 1], ops[j]))
        tree = states[-1]
        cur_start = seg[k]
        k += run
    blocks.append(Block(cur_start, data.n_sites, tree, None))
    blocks = _calibrate_time_scale(tuple(blocks), columns, params)
    check_blocks(blocks, columns, data.n_sites)
    return initial_chain_state(blocks, columns, params)
