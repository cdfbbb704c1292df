"""Transition kernels, initial law, likelihood, and the forward simulator."""

import math
from collections import Counter

import numpy as np
import pytest

from treebridge.errors import ConfigError, InvalidOperationError
from treebridge.model import (
    IDENTITY_OP,
    ModelParams,
    available_regraft_nodes,
    expected_tree_height,
    log_density_initial,
    log_k_prune_time,
    log_k_recomb,
    log_k_regraft_node,
    log_k_regraft_time,
    pair_rate,
    sample_initial_tree,
    sample_recomb_node,
    sample_regraft_time,
    sample_transition_op,
    simulate_smc,
    site_log_likelihood,
    transition_log_density,
    _regraft_segments,
)
from treebridge.oracles import quadrature_density_check
from treebridge.trees import INCOMPATIBLE, SprOp, Tree, apply_spr, mutation_branch

FIG_TREE = Tree(
    [[1, 2], [3, 4], [5, 8], [7, 9], [6, 10]],
    [0, 0, 0, 0, 0, 0, 1.0, 2.0, 3.0, 5.0, 8.0],
)
NEG_INF = float("-inf")


def test_params_validation():
    with pytest.raises(ConfigError):
        ModelParams(theta=0.0, rho=1.0)
    with pytest.raises(ConfigError):
        ModelParams(theta=1.0, rho=-0.5)


def test_initial_density_frozen():
    assert log_density_initial(FIG_TREE) == pytest.approx(-40.0, abs=1e-12)


def test_initial_law_statistics():
    rng = np.random.default_rng(31)
    n_rep = 40_000
    for n in (3, 5):
        heights = np.fromiter(
            (sample_initial_tree(n, rng).times[2 * n - 1] for _ in range(n_rep)),
            dtype=float,
        )
        mean = expected_tree_height(n)
        var = sum(1.0 / pair_rate(k) ** 2 for k in range(2, n + 1))
        z = (heights.mean() - mean) / math.sqrt(var / n_rep)
        assert abs(z) < 4.0


def test_initial_pairing_uniform_n4():
    # 18 distinct canonical matrices for four leaves, all equally likely
    rng = np.random.default_rng(32)
    n_rep = 100_000
    counts = Counter(
        sample_initial_tree(4, rng).topology_key() for _ in range(n_rep)
    )
    assert len(counts) == 18
    p = 1.0 / 18.0
    sigma = math.sqrt(p * (1 - p) * n_rep)
    for key, count in counts.items():
        assert abs(count - n_rep * p) < 4.0 * sigma


def test_regraft_segment_rates_frozen():
    bounds, rates = _regraft_segments(FIG_TREE, 7, 1.5)
    assert bounds == [1.5, 2.0, 3.0, 5.0, 8.0]
    assert rates == [4, 3, 2, 2, 1]
    bounds, rates = _regraft_segments(FIG_TREE, 1, 0.5)
    assert rates == [5, 5, 4, 3, 2, 1]


def test_regraft_time_density_integrates_to_one():
    for u, r in [(1, 0.5), (7, 1.5), (3, 0.0), (9, 4.0), (6, 2.0)]:
        bounds, _ = _regraft_segments(FIG_TREE, u, r)
        total = quadrature_density_check(
            lambda w: math.exp(log_k_regraft_time(FIG_TREE, u, r, w)),
            r,
            math.inf,
            breakpoints=bounds[1:],
        )
        assert total == pytest.approx(1.0, abs=1e-8)


def test_availability_matches_segment_rate():
    rng = np.random.default_rng(33)
    for _ in range(40):
        n = int(rng.integers(3, 9))
        tree = sample_initial_tree(n, rng)
        u = int(rng.integers(1, 2 * n - 1))
        lo, hi = tree.branch_interval(u)
        r = float(rng.uniform(lo, min(hi, lo + 2.0)))
        bounds, rates = _regraft_segments(tree, u, r)
        for j in range(len(bounds)):
            hi_b = bounds[j + 1] if j + 1 < len(bounds) else bounds[j] + 1.0
            w = 0.5 * (bounds[j] + hi_b)
            assert len(available_regraft_nodes(tree, u, w)) == rates[j]


def test_recomb_node_probabilities_sum_to_one():
    rho = 0.05
    total = sum(
        math.exp(log_k_recomb(FIG_TREE, u, rho)) for u in range(0, 11)
    )
    assert total == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(InvalidOperationError):
        log_k_recomb(FIG_TREE, 11, rho)  # the root has no branch


def test_recomb_node_statistics():
    rng = np.random.default_rng(34)
    rho = 0.05
    n_rep = 100_000
    counts = np.zeros(11)
    for _ in range(n_rep):
        counts[sample_recomb_node(FIG_TREE, rho, rng)] += 1
    for u in range(0, 11):
        p = math.exp(log_k_recomb(FIG_TREE, u, rho))
        z = (counts[u] / n_rep - p) / math.sqrt(p * (1 - p) / n_rep)
        assert abs(z) < 4.0


def test_regraft_time_statistics():
    rng = np.random.default_rng(35)
    u, r = 1, 0.5
    n_rep = 50_000
    draws = np.fromiter(
        (sample_regraft_time(FIG_TREE, u, r, rng) for _ in range(n_rep)), dtype=float
    )
    bounds, _ = _regraft_segments(FIG_TREE, u, r)
    assert draws.min() > r
    for b in bounds[1:]:
        theo = quadrature_density_check(
            lambda w: math.exp(log_k_regraft_time(FIG_TREE, u, r, w)),
            r,
            b,
            breakpoints=[x for x in bounds[1:] if x < b],
        )
        emp = (draws <= b).mean()
        z = (emp - theo) / math.sqrt(theo * (1 - theo) / n_rep)
        assert abs(z) < 4.0


def test_transition_density_frozen():
    params = ModelParams(theta=0.01, rho=0.05)
    assert transition_log_density(FIG_TREE, IDENTITY_OP, params) == pytest.approx(
        -0.05 * 27.0
    )
    # pruned branch 7 (length 4), reattach at 4.0 on branch 9: the pieces are
    # K_u = log(1-e^{-rho L}) + log(4/27), K_r = -log 4,
    # K_w = -4*0.5 - 3*1 + log 2 - 2*1, K_v = -log 2
    expected = (
        math.log(-math.expm1(-0.05 * 27.0))
        + math.log(4.0 / 27.0)
        - math.log(4.0)
        + (-2.0 - 3.0 + math.log(2.0) - 2.0)
        - math.log(2.0)
    )
    got = transition_log_density(FIG_TREE, SprOp(7, 9, 1.5, 4.0), params)
    assert got == pytest.approx(expected, abs=1e-12)


def test_transition_density_support_violations():
    params = ModelParams(theta=0.01, rho=0.05)
    assert transition_log_density(FIG_TREE, SprOp(7, 9, 0.5, 4.0), params) == NEG_INF
    assert transition_log_density(FIG_TREE, SprOp(7, 9, 1.5, 1.0), params) == NEG_INF
    # branch 5 tops out at time 3, so a reattach at 4 has no mass there
    assert transition_log_density(FIG_TREE, SprOp(7, 5, 1.5, 4.0), params) == NEG_INF
    with pytest.raises(InvalidOperationError):
        transition_log_density(FIG_TREE, SprOp(7, 10, 1.5, 4.0), params)


def test_regraft_node_log_density():
    assert log_k_regraft_node(FIG_TREE, 7, 4.0, 9) == pytest.approx(-math.log(2.0))
    assert log_k_regraft_node(FIG_TREE, 7, 4.0, 6) == pytest.approx(-math.log(2.0))
    assert log_k_regraft_node(FIG_TREE, 7, 4.0, 5) == NEG_INF


def test_sampled_ops_have_finite_density_and_apply():
    rng = np.random.default_rng(36)
    params = ModelParams(theta=0.01, rho=0.5)
    for _ in range(300):
        n = int(rng.integers(3, 8))
        tree = sample_initial_tree(n, rng)
        op = sample_transition_op(tree, params, rng)
        d = transition_log_density(tree, op, params)
        assert math.isfinite(d)
        if not op.is_identity():
            apply_spr(tree, op)


def test_prune_time_density():
    assert log_k_prune_time(FIG_TREE, 7, 2.0) == pytest.approx(-math.log(4.0))
    assert log_k_prune_time(FIG_TREE, 7, 0.5) == NEG_INF
    assert quadrature_density_check(
        lambda r: math.exp(log_k_prune_time(FIG_TREE, 7, r)), 1.0, 5.0
    ) == pytest.approx(1.0, abs=1e-10)


def test_site_likelihood():
    theta = 0.01
    loglik = site_log_likelihood(FIG_TREE, 0b000011, theta)
    expected = math.log(-math.expm1(-theta * 27.0)) + math.log(4.0 / 27.0)
    assert loglik == pytest.approx(expected, abs=1e-12)
    assert site_log_likelihood(FIG_TREE, 0, theta) == pytest.approx(-0.27)
    assert site_log_likelihood(FIG_TREE, 0b000101, theta) == NEG_INF
    assert site_log_likelihood(FIG_TREE, 0b111111, theta) == NEG_INF


def test_simulator_blocks_consistent():
    rng = np.random.default_rng(37)
    params = ModelParams(theta=0.02, rho=0.02)
    blocks, matrix = simulate_smc(6, 200, params, rng)
    assert blocks[0][0] == 1 and blocks[-1][1] == 200
    assert blocks[-1][3].is_identity()
    for (s, e, tree, op), nxt in zip(blocks, blocks[1:]):
        assert e + 1 == nxt[0]
        assert not op.is_identity()
        assert apply_spr(tree, op) == nxt[2]
    # every simulated column is explained by its own block's tree
    for start, end, tree, _ in blocks:
        for site in range(start, end + 1):
            mask = 0
            for leaf in range(1, 7):
                if matrix[leaf - 1, site - 1]:
                    mask |= 1 << (leaf - 1)
            assert mutation_branch(tree, mask) != INCOMPATIBLE
