import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sysmoe.numerics import Tensor
from sysmoe.structure import (CapacityError, KinematicTree, Scene, StructIndex, StructTables,
                              StructureError, channel_struct_indices, lcrs_convert, load_tree_file,
                              object_order, parse_tree_text, structural_embedding,
                              traversal_indices, walker_fixture_path)

WALKER = {
    "torso": (0, 6, 6), "right_thigh": (1, 3, 5), "right_leg": (2, 5, 4), "right_foot": (3, 4, 3),
    "left_thigh": (4, 2, 2), "left_leg": (5, 1, 1), "left_foot": (6, 0, 0),
}


def triples(pairs):
    tree = KinematicTree.from_pairs(pairs)
    tri = traversal_indices(lcrs_convert(tree))
    return {name: tri[i] for i, name, _ in tree.nodes}


def test_walker_golden_table():
    scene = load_tree_file(walker_fixture_path())
    idx = scene.robot_index()
    got = {n: (i.pre, i.in_, i.post) for n, i in idx.items() if n != "GLOBAL"}
    assert got == WALKER


def test_single_node_and_chain():
    assert triples([("r", "ROOT")]) == {"r": (0, 0, 0)}
    chain = triples([("root", "ROOT"), ("a", "root"), ("b", "a")])
    assert [chain[n][0] for n in ("root", "a", "b")] == [0, 1, 2]
    assert [chain[n][1] for n in ("root", "a", "b")] == [2, 1, 0]
    assert [chain[n][2] for n in ("root", "a", "b")] == [2, 1, 0]


def test_lcrs_definition():
    tree = KinematicTree.from_pairs([("r", "ROOT"), ("a", "r"), ("b", "r")])
    bt = lcrs_convert(tree)
    assert bt.left[0] == 1 and bt.right[1] == 2 and bt.left[1] is None and bt.n == 3


def test_tree_errors():
    with pytest.raises(StructureError):
        KinematicTree.from_pairs([("a", "ROOT"), ("b", "ROOT")])
    with pytest.raises(StructureError):
        KinematicTree.from_pairs([("a", "b"), ("b", "a")])
    with pytest.raises(StructureError):
        KinematicTree.from_pairs([("a", "ROOT"), ("b", "zzz")])
    with pytest.raises(StructureError, match=":2"):
        parse_tree_text("a ROOT\nb c d\n")


@st.composite
def random_trees(draw):
    n = draw(st.integers(1, 25))
    parents = [None] + [draw(st.integers(0, i - 1)) for i in range(1, n)]
    return [(f"n{i}", "ROOT" if p is None else f"n{p}") for i, p in enumerate(parents)]


@given(random_trees())
def test_traversal_permutations_and_uniqueness(pairs):
    tri = triples(pairs)
    n = len(pairs)
    assert len(tri) == n
    for k in range(3):
        assert sorted(t[k] for t in tri.values()) == list(range(n))
    assert len(set(tri.values())) == n


def test_child_order_changes_indices():
    a = triples([("r", "ROOT"), ("x", "r"), ("y", "r")])
    b = triples([("r", "ROOT"), ("y", "r"), ("x", "r")])
    assert a != b


def test_object_order():
    assert object_order((0, 0), []) == [0]
    assert object_order((0, 0), [(2, 0), (1, 0)]) == [0, 2, 1]
    assert object_order((0, 0), [(0, 1), (1, 0)]) == [0, 1, 2]


def test_multi_object_scene_uses_local_indices():
    scene = parse_tree_text("object robot 0 0\nbody ROOT\narm body\nobject box 3 0\nlid ROOT\n"
                            "object ball 1 0\ncore ROOT\n")
    idx = scene.index_map()
    assert idx[("robot", "arm")] == StructIndex(0, 1, 0, 0)
    assert idx[("ball", "core")].obj == 1 and idx[("box", "lid")].obj == 2
    assert idx[("box", "lid")].pre == 0
    assert idx[("robot", "GLOBAL")] == StructIndex(0, 2, 2, 2)


def _tables(d=8, value=None):
    t = StructTables.init(d, 2, 8, np.random.default_rng(0))
    if value is not None:
        for tab in t.tables():
            tab.data[...] = value
    return t


def test_struct_embedding_zero_and_order():
    assert np.all(structural_embedding(StructIndex(0, 1, 2, 3), _tables(value=0.0)).data == 0)
    t = _tables()
    for k, tab in enumerate(t.tables()):
        tab.data[...] = np.arange(tab.shape[0])[:, None] + 100 * k
    e = structural_embedding(StructIndex(1, 2, 3, 4), t).data
    assert e.tolist() == [1, 1, 102, 102, 203, 203, 304, 304]


def test_struct_embedding_distinct_nodes():
    idx = load_tree_file(walker_fixture_path()).robot_index()
    t = _tables(d=16)
    vecs = [tuple(structural_embedding(i, t).data) for i in idx.values()]
    assert len(set(vecs)) == len(vecs)


def test_capacity_error_names_table():
    with pytest.raises(CapacityError, match="'pre'"):
        structural_embedding(StructIndex(0, 20, 0, 0), _tables())
    with pytest.raises(CapacityError, match="'obj'"):
        structural_embedding(StructIndex(5, 0, 0, 0), _tables())


def test_channel_indices():
    pairs = [("base", "ROOT"), ("link0", "base")]
    out = channel_struct_indices(["link0", "GLOBAL", "base"], pairs)
    assert out.tolist() == [[0, 1, 0, 0], [0, 2, 2, 2], [0, 0, 1, 1]]
    with pytest.raises(StructureError):
        channel_struct_indices(["elbow"], pairs)
