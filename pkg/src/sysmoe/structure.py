"""Kinematic trees, left-child/right-sibling conversion and structural embeddings.

Each body node of an object gets an index tuple ``(obj, pre, in, post)``:
the object's rank by distance to the robot plus three traversal ranks of the
node in the binary (LCRS) form of its kinematic tree.

Traversal conventions on the LCRS tree, where a node's binary left child is
its first child and its binary right child is its next sibling:

* pre-order visits node, left subtree, right subtree;
* in-order and post-order treat the sibling branch as the first subtree and
  the child branch as the second; a node with only one branch treats it as
  the first subtree. In-order is first subtree, node, second subtree;
  post-order is first, second, node.

These reproduce the reference Walker table (see ``fixtures/walker.tree``).

Tree files hold one ``node parent`` pair per line with ``ROOT`` as the
root's parent; ``object name x y`` starts a new object at a planar position
(the first object is the robot). ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Tensor, concat, take_rows

ROOT = "ROOT"
GLOBAL_NODE = "GLOBAL"


class StructureError(ValueError):
    """The tree is malformed (cycle, several roots, unknown parent)."""


class CapacityError(IndexError):
    """A structural index exceeds the capacity of its lookup table."""


@dataclass
class KinematicTree:
    object_id: int
    nodes: list[tuple[int, str, int | None]]  # (node_id, name, parent_id or None for ROOT)
    root: int
    name: str = "robot"
    position: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]], object_id: int = 0,
                   name: str = "robot", position=(0.0, 0.0)) -> "KinematicTree":
        names = [n for n, _ in pairs]
        if len(set(names)) != len(names):
            raise StructureError("duplicate node names")
        ids = {n: i for i, n in enumerate(names)}
        nodes, roots = [], []
        for n, parent in pairs:
            if parent == ROOT:
                roots.append(ids[n])
                nodes.append((ids[n], n, None))
            elif parent not in ids:
                raise StructureError(f"node {n!r} has unknown parent {parent!r}")
            else:
                nodes.append((ids[n], n, ids[parent]))
        if len(roots) != 1:
            raise StructureError(f"tree must have exactly one root, found {len(roots)}")
        tree = cls(object_id, nodes, roots[0], name, tuple(position))
        tree._check_acyclic()
        return tree

    @property
    def n(self) -> int:
        return len(self.nodes)

    def names(self) -> list[str]:
        return [name for _, name, _ in self.nodes]

    def children(self) -> dict[int, list[int]]:
        """Children per node in declaration order."""
        out: dict[int, list[int]] = {i: [] for i, _, _ in self.nodes}
        for i, _, parent in self.nodes:
            if parent is not None:
                out[parent].append(i)
        return out

    def _check_acyclic(self) -> None:
        parent = {i: p for i, _, p in self.nodes}
        for start in parent:
            seen, cur = set(), start
            while cur is not None:
                if cur in seen:
                    raise StructureError(f"cycle through node {self.nodes[cur][1]!r}")
                seen.add(cur)
                cur = parent[cur]


@dataclass
class BinaryTree:
    """LCRS form: ``left[i]`` is the first child, ``right[i]`` the next sibling."""
    root: int
    left: dict[int, int | None]
    right: dict[int, int | None]

    @property
    def n(self) -> int:
        return len(self.left)


def lcrs_convert(tree: KinematicTree) -> BinaryTree:
    children = tree.children()
    left: dict[int, int | None] = {i: None for i in children}
    right: dict[int, int | None] = {i: None for i in children}
    for node, kids in children.items():
        if kids:
            left[node] = kids[0]
        for a, b in zip(kids, kids[1:]):
            right[a] = b
    return BinaryTree(tree.root, left, right)


def traversal_indices(bt: BinaryTree) -> dict[int, tuple[int, int, int]]:
    """Node id -> 0-based (pre, in, post) ranks; iterative to allow deep chains."""
    pre, ino, post = [], [], []

    stack = [bt.root]
    while stack:
        node = stack.pop()
        pre.append(node)
        for nxt in (bt.right[node], bt.left[node]):
            if nxt is not None:
                stack.append(nxt)

    def branches(node):
        return [b for b in (bt.right[node], bt.left[node]) if b is not None]

    # in-order: first branch, node, second branch
    stack2: list[tuple[int, bool]] = [(bt.root, False)]
    while stack2:
        node, expanded = stack2.pop()
        if expanded:
            ino.append(node)
            continue
        br = branches(node)
        if len(br) == 2:
            stack2.append((br[1], False))
        stack2.append((node, True))
        if br:
            stack2.append((br[0], False))

    # post-order: branches, node
    stack3: list[tuple[int, bool]] = [(bt.root, False)]
    while stack3:
        node, expanded = stack3.pop()
        if expanded:
            post.append(node)
            continue
        stack3.append((node, True))
        for b in reversed(branches(node)):
            stack3.append((b, False))

    rank = lambda order: {node: r for r, node in enumerate(order)}  # noqa: E731
    rp, ri, rq = rank(pre), rank(ino), rank(post)
    return {node: (rp[node], ri[node], rq[node]) for node in bt.left}


def object_order(robot_pos, object_positions: Sequence) -> list[int]:
    """Object ranks: robot is 0, others by ascending distance (stable on ties).

    ``object_positions`` lists the non-robot objects in declaration order; the
    result has one rank per entry of ``[robot] + object_positions``.
    """
    robot = np.asarray(robot_pos, dtype=np.float64)
    dists = [float(np.linalg.norm(np.asarray(p, dtype=np.float64) - robot)) for p in object_positions]
    order = sorted(range(len(dists)), key=lambda i: dists[i])
    ranks = [0] * (len(dists) + 1)
    for r, i in enumerate(order, start=1):
        ranks[i + 1] = r
    return ranks


@dataclass(frozen=True)
class StructIndex:
    obj: int
    pre: int
    in_: int
    post: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.obj, self.pre, self.in_, self.post)


@dataclass
class Scene:
    """All objects of a scene with their trees; the first is the robot."""
    trees: list[KinematicTree] = field(default_factory=list)

    def index_map(self) -> dict[tuple[str, str], StructIndex]:
        """(object name, node name) -> StructIndex, plus each object's GLOBAL node."""
        ranks = object_order(self.trees[0].position, [t.position for t in self.trees[1:]])
        out = {}
        for tree, obj in zip(self.trees, ranks):
            tri = traversal_indices(lcrs_convert(tree))
            for i, name, _ in tree.nodes:
                out[(tree.name, name)] = StructIndex(obj, *tri[i])
            out[(tree.name, GLOBAL_NODE)] = StructIndex(obj, tree.n, tree.n, tree.n)
        return out

    def robot_index(self) -> dict[str, StructIndex]:
        robot = self.trees[0].name
        return {node: idx for (obj, node), idx in self.index_map().items() if obj == robot}


def parse_tree_text(text: str, source: str = "<string>") -> Scene:
    blocks: list[tuple[str, tuple[float, float], list[tuple[str, str]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "object":
            if len(parts) != 4:
                raise StructureError(f"{source}:{lineno}: expected 'object name x y'")
            try:
                pos = (float(parts[2]), float(parts[3]))
            except ValueError:
                raise StructureError(f"{source}:{lineno}: bad object position") from None
            blocks.append((parts[1], pos, []))
            continue
        if len(parts) != 2:
            raise StructureError(f"{source}:{lineno}: expected 'node parent'")
        if not blocks:
            blocks.append(("robot", (0.0, 0.0), []))
        blocks[-1][2].append((parts[0], parts[1]))
    if not blocks or not blocks[0][2]:
        raise StructureError(f"{source}: no nodes")
    return Scene([KinematicTree.from_pairs(pairs, i, name, pos)
                  for i, (name, pos, pairs) in enumerate(blocks)])


def load_tree_file(path) -> Scene:
    path = Path(path)
    return parse_tree_text(path.read_text(), str(path))


def walker_fixture_path() -> Path:
    return Path(__file__).parent / "fixtures" / "walker.tree"


# -- structural embedding -----------------------------------------------------

TABLE_NAMES = ("obj", "pre", "in", "post")


@dataclass
class StructTables:
    """Four learnable lookup tables, each d/4 wide."""
    obj: Tensor
    pre: Tensor
    in_: Tensor
    post: Tensor

    @classmethod
    def init(cls, d: int, max_objects: int, max_nodes: int, rng: np.random.Generator,
             std: float = 0.02) -> "StructTables":
        if d % 4:
            raise ValueError(f"d={d} must be divisible by 4")
        q = d // 4
        # +1 row so the GLOBAL node (index n) always fits
        make = lambda rows: Tensor(rng.normal(0.0, std, (rows, q)), requires_grad=True)  # noqa: E731
        return cls(make(max_objects), make(max_nodes + 1), make(max_nodes + 1), make(max_nodes + 1))

    def tables(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return (self.obj, self.pre, self.in_, self.post)


def structural_embedding(idx, tables: StructTables) -> Tensor:
    """Concat of the four lookups for one StructIndex or an (n, 4) index array."""
    arr = np.asarray(idx.as_tuple() if isinstance(idx, StructIndex) else idx, dtype=np.int64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    parts = []
    for col, (name, table) in enumerate(zip(TABLE_NAMES, tables.tables())):
        column = arr[:, col]
        if column.size and (column.min() < 0 or column.max() >= table.shape[0]):
            raise CapacityError(f"structural table {name!r} has {table.shape[0]} rows; "
                                f"index {int(column.max())} requested")
        parts.append(take_rows(table, column))
    out = concat(parts, axis=-1)
    return out.reshape(out.shape[-1]) if single else out


def channel_struct_indices(body_nodes: Sequence[str], tree_pairs, robot: str = "robot") -> np.ndarray:
    """(M, 4) index tuples for channels attached to ``body_nodes`` of a single-object tree.

    Channels on ``GLOBAL`` (or with no tree at all) get ``(0, n, n, n)``.
    """
    if tree_pairs:
        index = Scene([KinematicTree.from_pairs(tree_pairs, name=robot)]).robot_index()
    else:
        index = {GLOBAL_NODE: StructIndex(0, 0, 0, 0)}
    rows = []
    for node in body_nodes:
        if node not in index:
            raise StructureError(f"channel body node {node!r} not in kinematic tree")
        rows.append(index[node].as_tuple())
    return np.array(rows, dtype=np.int64).reshape(len(rows), 4)
