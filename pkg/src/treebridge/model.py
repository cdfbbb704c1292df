"""Prior and observation model for site-indexed genealogies.

The hidden process runs along the genome: the first site carries a standard
coalescent tree, and each step to the next site either keeps the tree (no
recombination) or applies one subtree move whose coordinates are drawn in
four stages: the pruned branch, the prune time on it, the reattach time
(piecewise-exponential competition against the surviving lineages), and the
reattach branch among those crossing that time.  Columns are explained by at
most one mutation falling on a single branch.

All densities are returned as logs; impossible configurations give ``-inf``
(which is only ever added or compared, never exponentiated on its own).
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidOperationError
from .trees import (
    IDENTITY_OP,
    INCOMPATIBLE,
    SprOp,
    Tree,
    apply_spr,
    branch_metrics,
    mutation_branch,
    regraft_upper_time,
)

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ModelParams:
    """Per-site mutation and recombination rates."""

    theta: float
    rho: float

    def __post_init__(self):
        if not (self.theta > 0 and math.isfinite(self.theta)):
            raise ConfigError(f"theta must be positive, got {self.theta}")
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ConfigError(f"rho must be positive, got {self.rho}")


@dataclass(frozen=True)
class DecoratedTree:
    """A site's tree together with the move leading to the next site."""

    tree: Tree
    op: SprOp


def pair_rate(k):
    """Coalescence rate with ``k`` active lineages: the number of pairs."""
    return k * (k - 1) // 2


def expected_tree_height(n):
    """Closed-form mean root time under the initial law: sum of mean gaps."""
    return sum(1.0 / pair_rate(k) for k in range(2, n + 1))


def sample_initial_tree(n, rng):
    """Draw a coalescent tree: uniform pairings, exponential waiting times."""
    if n < 2:
        raise ConfigError("need at least two leaves")
    active = list(range(1, n + 1))
    parent = {}
    times = {leaf: 0.0 for leaf in active}
    t = 0.0
    next_id = n + 1
    while len(active) > 1:
        k = len(active)
        t += rng.exponential(1.0 / pair_rate(k))
        i, j = rng.choice(k, size=2, replace=False)
        a, b = active[int(i)], active[int(j)]
        parent[a] = next_id
        parent[b] = next_id
        times[next_id] = t
        active.remove(a)
        active.remove(b)
        active.append(next_id)
        next_id += 1
    parent[active[0]] = 0
    # Labels already increase with time by construction.
    rows = [
        sorted((a, b))
        for node in range(n + 1, 2 * n)
        for (a, b) in [[x for x, pa in parent.items() if pa == node]]
    ]
    return Tree(rows, [times.get(node, 0.0) for node in range(1, 2 * n)])


def log_density_initial(tree):
    """Log density of a tree under the initial law (pairing and gap parts)."""
    n = tree.n_leaves
    log_pairing = -sum(math.log(pair_rate(k)) for k in range(2, n + 1))
    log_gaps = 0.0
    prev = 0.0
    for i, node in enumerate(range(n + 1, 2 * n)):
        rate = pair_rate(n - i)
        gap = tree.times[node] - prev
        log_gaps += math.log(rate) - rate * gap
        prev = tree.times[node]
    return log_pairing + log_gaps


# -- transition kernel, stage by stage ------------------------------------------


def sample_recomb_node(tree, rho, rng):
    """The pruned-branch stage: 0 with the no-recombination mass, otherwise a
    branch with probability proportional to its length."""
    lengths, total = branch_metrics(tree)
    if rng.random() < math.exp(-rho * total):
        return 0
    u = rng.choice(tree.n_nodes - 1, p=lengths[1 : tree.n_nodes] / total)
    return int(u) + 1


def log_k_recomb(tree, u, rho):
    lengths, total = branch_metrics(tree)
    if u == 0:
        return -rho * total
    if not 1 <= u < tree.n_nodes:
        raise InvalidOperationError(f"branch label {u} out of range")
    return (
        math.log(-math.expm1(-rho * total))
        + math.log(lengths[u])
        - math.log(total)
    )


def sample_prune_time(tree, u, rng):
    lo, hi = tree.times[u], tree.times[tree.parent[u]]
    return float(rng.uniform(lo, hi))


def log_k_prune_time(tree, u, r):
    lo, hi = tree.times[u], tree.times[tree.parent[u]]
    if not lo <= r <= hi:
        return NEG_INF
    return -math.log(hi - lo)


def _regraft_segments(tree, u, r):
    """Boundaries and rates of the reattach-time competition above ``r``.

    Returns ``(bounds, rates)`` with ``bounds[0] == r`` and an implicit final
    boundary at +inf; ``rates[j]`` applies on ``(bounds[j], bounds[j+1])``.
    The rate counts the branches of the tree crossing that time span, minus
    the pruned branch's own remainder below its old parent.
    """
    t_pa_u = float(tree.times[tree.parent[u]])
    above = sorted(
        float(tree.times[node])
        for node in range(tree.n_leaves + 1, tree.n_nodes + 1)
        if tree.times[node] > r
    )
    k = len(above)
    bounds = [float(r)] + above
    rates = []
    for j in range(k + 1):
        rates.append(k + 1 - j if bounds[j] >= t_pa_u else k - j)
    return bounds, rates


def sample_regraft_time(tree, u, r, rng):
    """Draw the reattach time by walking the segments and inverting the
    conditional exponential within the first one that captures the draw."""
    bounds, rates = _regraft_segments(tree, u, r)
    for j in range(len(bounds) - 1):
        width = bounds[j + 1] - bounds[j]
        p_here = -math.expm1(-rates[j] * width)
        if rng.random() < p_here:
            # Inverse CDF of an exponential truncated to (0, width).
            z = rng.random()
            x = -math.log1p(z * (math.exp(-rates[j] * width) - 1.0)) / rates[j]
            return bounds[j] + x
    return bounds[-1] + rng.exponential(1.0 / rates[-1])


def log_k_regraft_time(tree, u, r, w):
    if not w > r:
        return NEG_INF
    bounds, rates = _regraft_segments(tree, u, r)
    j = bisect_right(bounds, w) - 1
    logp = 0.0
    for l in range(j):
        logp += -rates[l] * (bounds[l + 1] - bounds[l])
    return logp + math.log(rates[j]) - rates[j] * (w - bounds[j])


def available_regraft_nodes(tree, u, w):
    """Branches that cross time ``w`` once ``u``'s branch is pruned.

    The pruned node's parent is deleted by the move, so its slot is covered
    by the extended sibling branch; the set therefore never contains ``u``
    or ``pa(u)``.
    """
    d = tree.parent[u]
    out = []
    for node in range(1, tree.n_nodes + 1):
        if node == u or node == d:
            continue
        if tree.times[node] < w < regraft_upper_time(tree, u, node):
            out.append(node)
    return out


def sample_regraft_node(tree, u, w, rng):
    avail = available_regraft_nodes(tree, u, w)
    return avail[int(rng.integers(len(avail)))]


def log_k_regraft_node(tree, u, w, v):
    avail = available_regraft_nodes(tree, u, w)
    if v not in avail:
        return NEG_INF
    return -math.log(len(avail))


def sample_transition_op(tree, params, rng):
    """Draw the full move for one step along the genome (identity allowed)."""
    u = sample_recomb_node(tree, params.rho, rng)
    if u == 0:
        return IDENTITY_OP
    r = sample_prune_time(tree, u, rng)
    w = sample_regraft_time(tree, u, r, rng)
    v = sample_regraft_node(tree, u, w, rng)
    return SprOp(u, v, r, w)


def transition_log_density(tree, op, params):
    """Log density of ``op`` as the move out of ``tree``.

    Structural violations (bad labels) raise; time coordinates outside their
    supports return ``-inf`` so Metropolis updates that perturb times reject
    naturally.
    """
    if op.is_identity():
        return log_k_recomb(tree, 0, params.rho)
    u, v, r, w = op.u, op.v, op.r, op.w
    if v == u or v == tree.parent[u] or not 1 <= v <= tree.n_nodes:
        raise InvalidOperationError(f"regraft label {v} invalid for pruned {u}")
    total = log_k_recomb(tree, u, params.rho)
    total += log_k_prune_time(tree, u, r)
    if total == NEG_INF:
        return NEG_INF
    total += log_k_regraft_time(tree, u, r, w)
    if total == NEG_INF:
        return NEG_INF
    total += log_k_regraft_node(tree, u, w, v)
    return total


# -- observation model -------------------------------------------------------


def site_log_likelihood(tree, column_mask, theta):
    """Log probability of one binary column given the site's tree."""
    _, total = branch_metrics(tree)
    branch = mutation_branch(tree, column_mask)
    if branch is None:
        return -theta * total
    if branch == INCOMPATIBLE:
        return NEG_INF
    lengths, _ = branch_metrics(tree)
    return (
        math.log(-math.expm1(-theta * total))
        + math.log(lengths[branch])
        - math.log(total)
    )


def sample_site_column(tree, theta, rng):
    """Draw one data column under the single-mutation observation model."""
    lengths, total = branch_metrics(tree)
    if rng.random() < math.exp(-theta * total):
        return 0
    u = int(rng.choice(tree.n_nodes - 1, p=lengths[1 : tree.n_nodes] / total)) + 1
    return tree.leafset[u]


def simulate_smc(n, n_sites, params, rng):
    """Forward-simulate a site-indexed tree sequence and a data matrix.

    Returns ``(blocks, matrix)`` where ``blocks`` is a list of
    ``(start, end, tree, op)`` tuples covering sites ``1..n_sites`` (ends
    inclusive, ``op`` the move taken after ``end``; identity on the last
    block) and ``matrix`` is the (n, n_sites) binary observation array.
    """
    matrix = np.zeros((n, n_sites), dtype=np.uint8)
    tree = sample_initial_tree(n, rng)
    blocks = []
    start = 1
    for site in range(1, n_sites + 1):
        mask = sample_site_column(tree, params.theta, rng)
        for leaf in range(1, n + 1):
            if (mask >> (leaf - 1)) & 1:
                matrix[leaf - 1, site - 1] = 1
        if site == n_sites:
            blocks.append((start, site, tree, IDENTITY_OP))
            break
        op = sample_transition_op(tree, params, rng)
        if not op.is_identity():
            blocks.append((start, site, tree, op))
            tree = apply_spr(tree, op)
            start = site + 1
    return blocks, matrix
