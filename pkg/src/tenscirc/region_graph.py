"""Region graphs: hierarchical scope partitionings that template circuits.

A region graph is a rooted bipartite DAG whose region nodes hold variable
scopes and whose partition nodes split a region into disjoint sub-regions.
All builders return immutable :class:`RegionGraph` instances with region ids
assigned in creation order (leaves first) and deduplicated by scope.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import InputError

__all__ = [
    "RegionGraph",
    "Partition",
    "build_lt",
    "build_rnd",
    "build_pd",
    "build_qt",
    "build_qg",
    "build_cl",
    "build_region_graph",
    "validate",
    "RG_KINDS",
]

RG_KINDS = ("lt", "rnd", "pd", "qt2", "qt4", "qg", "cl")


@dataclass(frozen=True)
class Partition:
    parent: int
    children: tuple[int, ...]


@dataclass(frozen=True)
class RegionGraph:
    """Immutable region graph.

    Attributes
    ----------
    regions : tuple of tuple of int
        Scope of each region node; the region id is its position.
    partitions : tuple of Partition
        Partition nodes; the partition id is its position.
    root : int
        Id of the root region.
    num_vars : int
        Total number of variables ``d``.
    kind : str
        Name of the builder that produced the graph (``"custom"`` otherwise).
    """

    regions: tuple[tuple[int, ...], ...]
    partitions: tuple[Partition, ...]
    root: int
    num_vars: int
    kind: str = "custom"

    @cached_property
    def region_partitions(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.regions]
        for pid, p in enumerate(self.partitions):
            if 0 <= p.parent < len(out):
                out[p.parent].append(pid)
        return tuple(tuple(x) for x in out)

    @cached_property
    def region_parents(self) -> tuple[tuple[int, ...], ...]:
        """Partition ids having each region as a child."""
        out: list[list[int]] = [[] for _ in self.regions]
        for pid, p in enumerate(self.partitions):
            for ch in p.children:
                if 0 <= ch < len(out):
                    out[ch].append(pid)
        return tuple(tuple(x) for x in out)

    @property
    def leaves(self) -> list[int]:
        return [r for r in range(len(self.regions)) if not self.region_partitions[r]]

    def is_leaf(self, region: int) -> bool:
        return not self.region_partitions[region]

    def is_tree(self) -> bool:
        """True if every non-root region has exactly one parent partition
        and every region has at most one partition."""
        for r in range(len(self.regions)):
            if len(self.region_partitions[r]) > 1:
                return False
            nparents = len(self.region_parents[r])
            if r == self.root:
                if nparents:
                    return False
            elif nparents != 1:
                return False
        return True

    def post_order(self) -> list[int]:
        """Regions reachable from the root, children before parents."""
        seen: set[int] = set()
        order: list[int] = []
        stack: list[tuple[int, bool]] = [(self.root, False)]
        while stack:
            r, expanded = stack.pop()
            if expanded:
                order.append(r)
                continue
            if r in seen:
                continue
            seen.add(r)
            stack.append((r, True))
            kids = [c for pid in self.region_partitions[r] for c in self.partitions[pid].children]
            for c in reversed(kids):
                if c not in seen:
                    stack.append((c, False))
        return order

    def depth(self) -> int:
        """Number of partition levels on the longest root-to-leaf path."""
        memo: dict[int, int] = {}
        for r in self.post_order():
            kids = [
                memo[c] for pid in self.region_partitions[r] for c in self.partitions[pid].children
            ]
            memo[r] = 1 + max(kids) if kids else 0
        return memo[self.root]

    # -- textual exchange -------------------------------------------------
    def to_text(self) -> str:
        lines = [f"# kind={self.kind} d={self.num_vars} root={self.root}"]
        for rid, scope in enumerate(self.regions):
            lines.append(f"R {rid} {','.join(map(str, scope))}")
        for pid, p in enumerate(self.partitions):
            lines.append(f"P {pid} {p.parent} {','.join(map(str, p.children))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RegionGraph:
        regions: dict[int, tuple[int, ...]] = {}
        parts: dict[int, Partition] = {}
        kind, d, root = "custom", None, None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "kind":
                        kind = val
                    elif key == "d":
                        d = int(val)
                    elif key == "root":
                        root = int(val)
                continue
            fields = line.split()
            try:
                if fields[0] == "R":
                    regions[int(fields[1])] = tuple(int(v) for v in fields[2].split(","))
                elif fields[0] == "P":
                    parts[int(fields[1])] = Partition(
                        int(fields[2]), tuple(int(v) for v in fields[3].split(","))
                    )
                else:
                    raise InputError(f"line {lineno}: unknown record type {fields[0]!r}")
            except (IndexError, ValueError) as exc:
                if isinstance(exc, InputError):
                    raise
                raise InputError(f"line {lineno}: malformed record {line!r}") from exc
        reg = tuple(regions[i] for i in range(len(regions)))
        if d is None:
            d = 1 + max(v for s in reg for v in s)
        if root is None:
            root = max(range(len(reg)), key=lambda i: len(reg[i]))
        return cls(reg, tuple(parts[i] for i in range(len(parts))), root, d, kind)

    def to_dot(self) -> str:
        lines = ["digraph RegionGraph {", "  rankdir=TB;"]
        for rid, scope in enumerate(self.regions):
            label = "{" + ",".join(map(str, scope)) + "}"
            lines.append(f'  r{rid} [shape=box,label="{label}"];')
        for pid, p in enumerate(self.partitions):
            lines.append(f'  p{pid} [shape=circle,label="x",width=0.3];')
            lines.append(f"  r{p.parent} -> p{pid};")
            for c in p.children:
                lines.append(f"  p{pid} -> r{c};")
        lines.append("}")
        return "\n".join(lines) + "\n"


class _Builder:
    """Accumulates regions (deduplicated by scope) and partitions."""

    def __init__(self, num_vars: int):
        self.num_vars = num_vars
        self.scopes: list[tuple[int, ...]] = []
        self.index: dict[tuple[int, ...], int] = {}
        self.partitions: list[Partition] = []
        self._seen_parts: set[tuple[int, tuple[int, ...]]] = set()

    def region(self, scope) -> int:
        key = tuple(sorted(int(v) for v in scope))
        rid = self.index.get(key)
        if rid is None:
            rid = len(self.scopes)
            self.scopes.append(key)
            self.index[key] = rid
        return rid

    def partition(self, parent_scope, child_scopes) -> int:
        parent = self.region(parent_scope)
        children = tuple(self.region(s) for s in child_scopes)
        key = (parent, tuple(sorted(children)))
        if key not in self._seen_parts:
            self._seen_parts.add(key)
            self.partitions.append(Partition(parent, children))
        return parent

    def build(self, kind: str) -> RegionGraph:
        root = self.region(range(self.num_vars))
        return RegionGraph(tuple(self.scopes), tuple(self.partitions), root, self.num_vars, kind)


def build_lt(num_vars: int, ordering=None) -> RegionGraph:
    """Linear-tree region graph factorizing one variable at a time.

    Region ``{pi(0..i)}`` is partitioned into ``{pi(0..i-1)}`` and ``{pi(i)}``.
    """
    if num_vars < 1:
        raise InputError("num_vars must be >= 1")
    order = list(range(num_vars)) if ordering is None else [int(v) for v in ordering]
    if sorted(order) != list(range(num_vars)):
        raise InputError(f"ordering is not a permutation of 0..{num_vars - 1}: {order}")
    b = _Builder(num_vars)
    for v in order:
        b.region([v])
    for i in range(1, num_vars):
        b.partition(order[: i + 1], [order[:i], [order[i]]])
    return b.build("lt")


def build_rnd(num_vars: int, seed: int = 0) -> RegionGraph:
    """Balanced random binary tree: each region is shuffled and split at ceil(n/2)."""
    if num_vars < 1:
        raise InputError("num_vars must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    b = _Builder(num_vars)
    for v in range(num_vars):
        b.region([v])
    pending = [tuple(range(num_vars))]
    splits = []
    while pending:
        scope = pending.pop()
        if len(scope) == 1:
            continue
        perm = rng.permutation(np.asarray(scope))
        cut = math.ceil(len(scope) / 2)
        left, right = tuple(sorted(perm[:cut].tolist())), tuple(sorted(perm[cut:].tolist()))
        splits.append((scope, left, right))
        pending.extend([right, left])
    for scope, left, right in reversed(splits):
        b.partition(scope, [left, right])
    return b.build("rnd")


def _patch_scope(r0, r1, c0, c1, width):
    return [r * width + c for r in range(r0, r1) for c in range(c0, c1)]


def build_pd(height: int, width: int, delta: int | None = None) -> RegionGraph:
    """Poon-Domingos region graph over an image.

    With ``delta=None`` each patch is cut once per axis at its center. With an
    integer ``delta`` every cut at an absolute pixel coordinate that is a
    multiple of ``delta`` is admissible, which enumerates all rectangular
    patches reachable that way (``delta=1`` is the full construction).
    Patches without admissible cuts become (possibly multivariate) leaves.
    """
    if height < 1 or width < 1:
        raise InputError("height and width must be >= 1")
    if delta is not None:
        if delta < 1:
            raise InputError("delta must be >= 1")
        if delta > max(height, width):
            raise InputError(f"delta={delta} exceeds the largest image side {max(height, width)}")
    b = _Builder(height * width)
    done: set[tuple[int, int, int, int]] = set()
    pending = [(0, height, 0, width)]

    def cuts(lo, hi):
        if hi - lo < 2:
            return []
        if delta is None:
            return [lo + (hi - lo + 1) // 2]
        return [p for p in range(lo + 1, hi) if p % delta == 0]

    order: list[tuple] = []
    while pending:
        patch = pending.pop()
        if patch in done:
            continue
        done.add(patch)
        r0, r1, c0, c1 = patch
        for r in cuts(r0, r1):
            order.append((patch, (r0, r, c0, c1), (r, r1, c0, c1)))
            pending += [(r0, r, c0, c1), (r, r1, c0, c1)]
        for c in cuts(c0, c1):
            order.append((patch, (r0, r1, c0, c), (r0, r1, c, c1)))
            pending += [(r0, r1, c0, c), (r0, r1, c, c1)]
    # Register leaves first (row-major), then emit partitions bottom-up so
    # that smaller regions get smaller ids.
    split = {t[0] for t in order}
    for patch in sorted(done - split, key=lambda p: (p[0], p[2], p[1], p[3])):
        b.region(_patch_scope(*patch, width))
    order.sort(key=lambda t: ((t[0][1] - t[0][0]) * (t[0][3] - t[0][2]), t[0]))
    for patch, a, bb in order:
        b.partition(
            _patch_scope(*patch, width), [_patch_scope(*a, width), _patch_scope(*bb, width)]
        )
    return b.build("pd")


def _build_quad(height: int, width: int, tree: bool, arity: int) -> _Builder:
    if height < 1 or width < 1:
        raise InputError("height and width must be >= 1")
    b = _Builder(height * width)
    patches: dict[tuple[int, int], tuple[int, ...]] = {}
    for i in range(height):
        for j in range(width):
            patches[i, j] = (i * width + j,)
            b.region(patches[i, j])
    h, w = height, width
    while h > 1 or w > 1:
        nh, nw = math.ceil(h / 2), math.ceil(w / 2)
        merged: dict[tuple[int, int], tuple[int, ...]] = {}
        for i in range(nh):
            for j in range(nw):
                cells = [
                    (p, q)
                    for p in (2 * i, 2 * i + 1)
                    for q in (2 * j, 2 * j + 1)
                    if p < h and q < w
                ]
                scopes = [patches[c] for c in cells]
                union = tuple(sorted(itertools.chain.from_iterable(scopes)))
                if len(cells) == 2:
                    b.partition(union, scopes)
                elif len(cells) == 4:
                    z00, z01, z10, z11 = scopes
                    if tree and arity == 4:
                        b.partition(union, [z00, z01, z10, z11])
                    elif tree:
                        b.partition(z00 + z01, [z00, z01])
                        b.partition(z10 + z11, [z10, z11])
                        b.partition(union, [z00 + z01, z10 + z11])
                    else:
                        b.partition(z00 + z01, [z00, z01])
                        b.partition(z10 + z11, [z10, z11])
                        b.partition(z00 + z10, [z00, z10])
                        b.partition(z01 + z11, [z01, z11])
                        b.partition(union, [z00 + z01, z10 + z11])
                        b.partition(union, [z00 + z10, z01 + z11])
                merged[i, j] = union
        patches, h, w = merged, nh, nw
    return b


def build_qt(height: int, width: int, arity: int = 4) -> RegionGraph:
    """Quad-tree region graph (bottom-up merging of 2x2 patch blocks).

    ``arity=4`` merges a full block with one 4-way partition; ``arity=2``
    splits it into top/bottom halves first and each half into its two cells.
    """
    if arity not in (2, 4):
        raise InputError("arity must be 2 or 4")
    return _build_quad(height, width, tree=True, arity=arity).build(f"qt{arity}")


def build_qg(height: int, width: int) -> RegionGraph:
    """Quad-graph region graph: like the quad tree, but each full 2x2 block is
    partitioned both into horizontal and vertical pairs, sharing the pair
    regions between partitionings."""
    return _build_quad(height, width, tree=False, arity=4).build("qg")


def _mutual_information(data: np.ndarray, num_categories) -> np.ndarray:
    n, d = data.shape
    mi = np.zeros((d, d))
    for i in range(d):
        for j in range(i + 1, d):
            ci, cj = num_categories[i], num_categories[j]
            joint = np.ones((ci, cj))
            np.add.at(joint, (data[:, i], data[:, j]), 1.0)
            joint /= joint.sum()
            pi = joint.sum(1, keepdims=True)
            pj = joint.sum(0, keepdims=True)
            mi[i, j] = mi[j, i] = float(np.sum(joint * (np.log(joint) - np.log(pi) - np.log(pj))))
    return mi


def _max_spanning_tree(mi: np.ndarray) -> list[tuple[int, int]]:
    d = mi.shape[0]
    parent = list(range(d))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = sorted(((-mi[i, j], i, j) for i in range(d) for j in range(i + 1, d)))
    tree = []
    for _, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
            tree.append((i, j))
            if len(tree) == d - 1:
                break
    return tree


def _barycenter(adj: list[list[int]]) -> int:
    d = len(adj)
    best, best_size = 0, d + 1
    for v in range(d):
        sizes = []
        for u in adj[v]:
            # size of the component containing u once v is removed
            seen, stack = {v, u}, [u]
            while stack:
                a = stack.pop()
                for b in adj[a]:
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
            sizes.append(len(seen) - 1)
        worst = max(sizes, default=0)
        if worst < best_size:
            best, best_size = v, worst
    return best


def build_cl(data, num_categories=None) -> RegionGraph:
    """Chow-Liu tree region graph learned from categorical data.

    Pairwise mutual information uses add-one smoothing; the maximum spanning
    tree is extracted with Kruskal's algorithm (ties broken by lowest
    variable indices) and rooted at its barycenter. A node ``v`` with
    children ``c1 < ... < cm`` becomes a right-leaning chain of binary
    partitions peeling off one child subtree at a time, last child first.
    """
    data = np.asarray(data)
    if data.ndim != 2:
        raise InputError("data must be a 2-D integer matrix")
    n, d = data.shape
    if n < 2:
        raise InputError("build_cl needs at least 2 data points")
    if not np.issubdtype(data.dtype, np.integer):
        if not np.all(np.equal(np.mod(data, 1), 0)):
            raise InputError("build_cl expects integer categories")
        data = data.astype(np.int64)
    if num_categories is None:
        num_categories = (data.max(axis=0) + 1).tolist()
    elif np.isscalar(num_categories):
        num_categories = [int(num_categories)] * d
    num_categories = [int(c) for c in num_categories]
    if data.min() < 0 or np.any(data.max(axis=0) >= np.asarray(num_categories)):
        raise InputError("data entries out of category bounds")

    b = _Builder(d)
    for v in range(d):
        b.region([v])
    if d == 1:
        return b.build("cl")
    tree = _max_spanning_tree(_mutual_information(data, num_categories))
    adj: list[list[int]] = [[] for _ in range(d)]
    for i, j in tree:
        adj[i].append(j)
        adj[j].append(i)
    root = _barycenter(adj)

    children: dict[int, list[int]] = {}
    order, stack, seen = [], [root], {root}
    while stack:
        v = stack.pop()
        order.append(v)
        children[v] = sorted(u for u in adj[v] if u not in seen)
        seen.update(children[v])
        stack.extend(children[v])
    subtree: dict[int, tuple[int, ...]] = {}
    for v in reversed(order):
        subtree[v] = tuple(sorted([v, *itertools.chain.from_iterable(subtree[c] for c in children[v])]))
    for v in reversed(order):
        rest = set(subtree[v])
        for c in reversed(children[v]):
            child = set(subtree[c])
            b.partition(sorted(rest), [sorted(rest - child), sorted(child)])
            rest -= child
    return b.build("cl")


def build_region_graph(kind: str, *, num_vars=None, height=None, width=None, seed=0,
                       ordering=None, delta=None, data=None, num_categories=None) -> RegionGraph:
    """Dispatch to a builder by its short name (one of :data:`RG_KINDS`)."""
    kind = kind.lower()
    if kind in ("pd", "qt2", "qt4", "qg"):
        if height is None or width is None:
            if num_vars is None:
                raise InputError(f"{kind} needs height and width")
            height, width = 1, num_vars
    elif num_vars is None:
        if height is not None and width is not None:
            num_vars = height * width
        elif data is not None:
            num_vars = np.asarray(data).shape[1]
        else:
            raise InputError(f"{kind} needs num_vars")
    if kind == "lt":
        return build_lt(num_vars, ordering)
    if kind == "rnd":
        return build_rnd(num_vars, seed)
    if kind == "pd":
        return build_pd(height, width, delta)
    if kind == "qt2":
        return build_qt(height, width, 2)
    if kind in ("qt4", "qt"):
        return build_qt(height, width, 4)
    if kind == "qg":
        return build_qg(height, width)
    if kind == "cl":
        if data is None:
            raise InputError("cl needs training data")
        return build_cl(data, num_categories)
    raise InputError(f"unknown region graph kind {kind!r}; expected one of {RG_KINDS}")


def validate(rg: RegionGraph) -> list[str]:
    """Return a list of invariant violations; empty means the graph is valid."""
    out: list[str] = []
    nreg = len(rg.regions)
    full = tuple(range(rg.num_vars))
    if not 0 <= rg.root < nreg:
        return [f"graph: root id {rg.root} out of range"]
    for rid, scope in enumerate(rg.regions):
        if not scope:
            out.append(f"region {rid}: empty scope")
        if list(scope) != sorted(set(scope)):
            out.append(f"region {rid}: scope not sorted/unique")
        if any(v < 0 or v >= rg.num_vars for v in scope):
            out.append(f"region {rid}: scope outside 0..{rg.num_vars - 1}")
    if tuple(rg.regions[rg.root]) != full:
        out.append(f"region {rg.root}: root scope is not the full variable set")
    if rg.region_parents[rg.root]:
        out.append(f"region {rg.root}: root has parent partitions")
    for pid, p in enumerate(rg.partitions):
        if not 0 <= p.parent < nreg or any(not 0 <= c < nreg for c in p.children):
            out.append(f"partition {pid}: dangling region reference")
            continue
        if len(p.children) < 2:
            out.append(f"partition {pid}: fewer than two children")
        seen: set[int] = set()
        disjoint = True
        for c in p.children:
            s = set(rg.regions[c])
            if seen & s:
                disjoint = False
            seen |= s
        if not disjoint:
            out.append(f"partition {pid}: non-disjoint partition")
        if seen != set(rg.regions[p.parent]):
            out.append(f"partition {pid}: children do not cover parent scope")
    reachable = set(rg.post_order())
    for rid in range(nreg):
        if rid not in reachable:
            out.append(f"region {rid}: unreachable from root")
    # scopes strictly shrink along valid partitions, so a cycle shows up as a
    # region reachable from itself; check explicitly for robustness
    color = [0] * nreg
    for start in range(nreg):
        if color[start]:
            continue
        stack = [(start, iter(c for pid in rg.region_partitions[start] for c in rg.partitions[pid].children))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
            elif 0 <= nxt < nreg:
                if color[nxt] == 1:
                    out.append(f"region {nxt}: cycle detected")
                elif color[nxt] == 0:
                    color[nxt] = 1
                    stack.append((nxt, iter(c for pid in rg.region_partitions[nxt] for c in rg.partitions[pid].children)))
    return out
