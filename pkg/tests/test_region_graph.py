import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tenscirc import InputError, RegionGraph, build_cl, build_lt, build_pd, build_qg, build_qt, build_rnd, validate
from tenscirc.region_graph import Partition, build_region_graph


def scopes(rg):
    return {tuple(s) for s in rg.regions}


def partitions_of(rg, scope):
    rid = rg.regions.index(tuple(scope))
    return [sorted(tuple(rg.regions[c]) for c in rg.partitions[p].children) for p in rg.region_partitions[rid]]


# -- linear trees --------------------------------------------------------------

def test_lt_identity_three_vars():
    rg = build_lt(3)
    assert len(rg.regions) == 5 and len(rg.partitions) == 2
    assert partitions_of(rg, (0, 1, 2)) == [[(0, 1), (2,)]]
    assert partitions_of(rg, (0, 1)) == [[(0,), (1,)]]
    assert rg.is_tree()


def test_lt_single_variable_is_leaf():
    rg = build_lt(1)
    assert rg.regions == ((0,),) and rg.partitions == ()
    assert validate(rg) == []


def test_lt_reversed_order():
    rg = build_lt(4, [3, 2, 1, 0])
    assert len(rg.partitions) == 3
    assert {rg.regions[r] for r in rg.leaves} == {(0,), (1,), (2,), (3,)}
    # the first variable of the ordering sits deepest, the last splits off at the root
    assert partitions_of(rg, (0, 1, 2, 3)) == [[(0,), (1, 2, 3)]]
    assert partitions_of(rg, (2, 3)) == [[(2,), (3,)]]


@pytest.mark.parametrize("order", [[0, 0, 1], [0, 1, 3], [1, 2]])
def test_lt_rejects_non_permutation(order):
    with pytest.raises(InputError):
        build_lt(3, order)


# -- random balanced trees -----------------------------------------------------

def test_rnd_four_vars_balanced():
    rg = build_rnd(4, seed=3)
    root = partitions_of(rg, (0, 1, 2, 3))
    assert len(root) == 1 and [len(s) for s in root[0]] == [2, 2]
    assert len(rg.partitions) == 3 and rg.depth() == 2
    assert sorted(len(rg.regions[r]) for r in rg.leaves) == [1, 1, 1, 1]


def test_rnd_deterministic_per_seed():
    assert build_rnd(7, 17) == build_rnd(7, 17)
    assert validate(build_rnd(7, 18)) == []


def test_rnd_single_var():
    assert build_rnd(1, 0).partitions == ()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_rnd_children_differ_by_at_most_one(d, seed):
    rg = build_rnd(d, seed)
    assert validate(rg) == [] and rg.is_tree()
    for p in rg.partitions:
        a, b = (len(rg.regions[c]) for c in p.children)
        assert abs(a - b) <= 1


# -- Poon-Domingos ---------------------------------------------------------------

def test_pd_one_by_two():
    rg = build_pd(1, 2, 1)
    assert partitions_of(rg, (0, 1)) == [[(0,), (1,)]]


def test_pd_two_by_two_all_cuts():
    rg = build_pd(2, 2, 1)
    assert len(rg.regions) == 9
    assert len(partitions_of(rg, (0, 1, 2, 3))) == 2
    assert not rg.is_tree()


def test_pd_strip_cut_step_two():
    rg = build_pd(1, 4, 2)
    assert partitions_of(rg, (0, 1, 2, 3)) == [[(0, 1), (2, 3)]]
    assert len(rg.partitions) == 1


def test_pd_delta_too_large():
    with pytest.raises(InputError):
        build_pd(2, 3, 4)


def _patch_count_oracle(h, w, delta):
    """Number of regions reachable by recursive axis-aligned cuts at multiples of delta."""
    seen = set()

    def visit(r0, r1, c0, c1):
        if (r0, r1, c0, c1) in seen:
            return
        seen.add((r0, r1, c0, c1))
        for cut in range(r0 + 1, r1):
            if cut % delta == 0:
                visit(r0, cut, c0, c1)
                visit(cut, r1, c0, c1)
        for cut in range(c0 + 1, c1):
            if cut % delta == 0:
                visit(r0, r1, c0, cut)
                visit(r0, r1, cut, c1)

    visit(0, h, 0, w)
    return len(seen)


@pytest.mark.parametrize("h,w,delta", [(2, 2, 1), (3, 3, 1), (2, 4, 1), (4, 4, 2), (3, 5, 2)])
def test_pd_region_count_matches_enumeration(h, w, delta):
    rg = build_pd(h, w, delta)
    assert validate(rg) == []
    assert len(rg.regions) == _patch_count_oracle(h, w, delta)


# -- quad trees and quad graphs ----------------------------------------------------

def test_qt_two_by_two_single_four_way_partition():
    rg = build_qt(2, 2, 4)
    assert partitions_of(rg, (0, 1, 2, 3)) == [[(0,), (1,), (2,), (3,)]]


def test_qt_one_by_one():
    assert build_qt(1, 1, 4).partitions == ()


def test_qt_four_by_four_counts():
    rg = build_qt(4, 4, 4)
    assert len(rg.regions) == 21 and len(rg.partitions) == 5
    assert rg.depth() == 2 and rg.is_tree()


def test_qt_binary_splits_top_and_bottom_halves_first():
    rg = build_qt(2, 2, 2)
    assert partitions_of(rg, (0, 1, 2, 3)) == [[(0, 1), (2, 3)]]
    assert all(len(p.children) == 2 for p in rg.partitions)


def test_qg_two_by_two():
    rg = build_qg(2, 2)
    pair_scopes = {s for s in scopes(rg) if len(s) == 2}
    assert pair_scopes == {(0, 1), (2, 3), (0, 2), (1, 3)}
    assert len(rg.partitions) == 6
    assert len(partitions_of(rg, (0, 1, 2, 3))) == 2
    assert sum(len(s) == 1 for s in scopes(rg)) == 4


def test_qg_one_by_two():
    rg = build_qg(1, 2)
    assert len(rg.partitions) == 1 and rg.is_tree()


def test_qg_three_by_three_root_has_two_partitions():
    rg = build_qg(3, 3)
    assert validate(rg) == []
    assert len(partitions_of(rg, tuple(range(9)))) == 2


@pytest.mark.parametrize("k", [1, 2, 3])
def test_qg_power_of_two_regions_are_rectangles(k):
    side = 2**k
    rg = build_qg(side, side)
    for scope in rg.regions:
        rows = {v // side for v in scope}
        cols = {v % side for v in scope}
        box = {r * side + c for r in range(min(rows), max(rows) + 1) for c in range(min(cols), max(cols) + 1)}
        assert set(scope) == box


# -- Chow-Liu ------------------------------------------------------------------------

def test_cl_two_vars():
    data = np.array([[0, 1], [1, 0], [1, 1]])
    rg = build_cl(data, 2)
    assert partitions_of(rg, (0, 1)) == [[(0,), (1,)]]


def test_cl_strongly_dependent_pair_forms_region():
    rng = np.random.default_rng(0)
    x0 = rng.integers(0, 2, 200)
    data = np.stack([x0, x0, rng.integers(0, 2, 200)], axis=1)
    rg = build_cl(data, 2)
    assert (0, 1) in scopes(rg)
    assert build_cl(data, 2) == rg


def test_cl_constant_column_is_legal():
    data = np.array([[0, 1, 0], [1, 1, 0], [1, 1, 1], [0, 1, 1]])
    assert validate(build_cl(data, 2)) == []


def _smoothed_mi(data, C):
    d = data.shape[1]
    mi = np.zeros((d, d))
    for i, j in itertools.combinations(range(d), 2):
        joint = np.ones((C, C))
        np.add.at(joint, (data[:, i], data[:, j]), 1)
        joint /= joint.sum()
        pi, pj = joint.sum(1), joint.sum(0)
        mi[i, j] = mi[j, i] = float(np.sum(joint * np.log(joint / np.outer(pi, pj))))
    return mi


def test_cl_subtrees_match_networkx_spanning_tree():
    rng = np.random.default_rng(4)
    n, d = 400, 6
    z = rng.integers(0, 3, n)
    data = np.stack([(z + rng.integers(0, 2, n) * (j % 3)) % 3 for j in range(d)], axis=1)
    mi = _smoothed_mi(data, 3)
    g = nx.Graph()
    for i, j in itertools.combinations(range(d), 2):
        g.add_edge(i, j, weight=mi[i, j])
    tree = nx.maximum_spanning_tree(g)
    rg = build_cl(data, 3)
    # whichever node is the root, every subtree hanging off an edge is one side of
    # the edge cut, and exactly one side of each cut must appear as a region
    regions = scopes(rg)
    for u, v in tree.edges():
        t = tree.copy()
        t.remove_edge(u, v)
        side_u = tuple(sorted(nx.node_connected_component(t, u)))
        side_v = tuple(sorted(nx.node_connected_component(t, v)))
        assert side_u in regions or side_v in regions


# -- validation and exchange -----------------------------------------------------------

ALL_BUILDERS = [
    lambda: build_lt(5),
    lambda: build_rnd(9, 1),
    lambda: build_pd(3, 4, 1),
    lambda: build_pd(6, 6),
    lambda: build_qt(5, 3, 2),
    lambda: build_qt(6, 6, 4),
    lambda: build_qg(5, 7),
    lambda: build_cl(np.random.default_rng(0).integers(0, 3, (30, 7)), 3),
]


@pytest.mark.parametrize("make", ALL_BUILDERS)
def test_builder_outputs_validate(make):
    rg = make()
    assert validate(rg) == []
    for p in rg.partitions:
        kids = [set(rg.regions[c]) for c in p.children]
        assert set().union(*kids) == set(rg.regions[p.parent])
        assert sum(len(k) for k in kids) == len(rg.regions[p.parent])


@pytest.mark.parametrize("make", ALL_BUILDERS)
def test_text_round_trip(make):
    rg = make()
    assert RegionGraph.from_text(rg.to_text()) == rg
    assert rg.to_dot().startswith("digraph")


def test_tree_builders_are_trees():
    for rg in (build_lt(6), build_rnd(6, 2), build_qt(4, 4, 2), build_qt(4, 4, 4)):
        assert rg.is_tree()
    assert not build_qg(4, 4).is_tree()


def test_validate_flags_overlapping_children():
    rg = RegionGraph(((0,), (1,), (0, 1), (0, 1)), (Partition(3, (2, 0)),), 3, 2)
    problems = validate(rg)
    assert any("non-disjoint partition" in p for p in problems)


def test_validate_flags_root_scope():
    rg = RegionGraph(((0,), (1,), (0, 1)), (Partition(2, (0, 1)),), 2, 3)
    problems = validate(rg)
    assert any("root scope" in p for p in problems)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7))
def test_image_builders_valid_and_deterministic(h, w):
    for kind in ("pd", "qt2", "qt4", "qg"):
        rg = build_region_graph(kind, height=h, width=w)
        assert validate(rg) == []
        assert rg == build_region_graph(kind, height=h, width=w)
        assert rg.regions[rg.root] == tuple(range(h * w))
