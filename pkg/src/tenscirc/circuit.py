"""Tensorized circuit intermediate representation.

A :class:`Circuit` is a list of layers in topological order. Four layer kinds
exist: ``input`` (a univariate distribution family with ``K`` units),
``hadamard`` (element-wise product), ``kronecker`` (outer product, flattened
row-major) and ``sum`` (a non-negative matrix applied to the concatenation
of its inputs). A *diagonal* sum layer with ``N`` inputs of width ``K``
computes ``out[k] = sum_n W[k, n] * in_n[k]``; it represents mixing layers
and per-unit scalings without materializing the block-diagonal matrix.

Parameters live in a name-keyed table so that several layers can share one
tensor. Sum parameters carry a reparameterization tag (see
:mod:`tenscirc.reparam`); input parameters are interpreted by their family.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import reparam as rp
from .exceptions import ConfigurationError, InputError, StructureError
from .families import Family, family_from_spec
from .region_graph import RegionGraph, validate

__all__ = [
    "Layer",
    "Parameter",
    "Circuit",
    "LAYER_KINDS",
    "compile_circuit",
    "check_smooth",
    "check_decomposable",
    "check_structured",
    "mixing_as_sum",
    "rewrite_mixing_as_sum",
    "collapse_sum_chains",
    "FoldGroup",
    "FoldedCircuit",
    "fold",
    "format_nomenclature",
    "parse_nomenclature",
]

LAYER_KINDS = ("tucker", "cp", "cpt", "cps", "cpxs")
_RG_NAMES = {"lt": "LT", "rnd": "RND", "pd": "PD", "qt2": "QT-2", "qt4": "QT-4", "qg": "QG", "cl": "CL"}
_LAYER_NAMES = {"tucker": "Tucker", "cp": "CP", "cpt": "CPT", "cps": "CPS", "cpxs": "CPXS"}
_NOMENCLATURE = re.compile(r"^(LT|RND|PD|QT-2|QT-4|QG|CL|RG)-(Tucker|CP|CPT|CPS|CPXS)-(\d+)$")


def format_nomenclature(rg_kind: str, layer_kind: str, width: int) -> str:
    """Architecture name such as ``"QG-CP-16"``."""
    return f"{_RG_NAMES.get(rg_kind, 'RG')}-{_LAYER_NAMES[layer_kind]}-{int(width)}"


def parse_nomenclature(name: str) -> tuple[str, str, int]:
    """Inverse of :func:`format_nomenclature`; returns ``(rg_kind, layer_kind, K)``."""
    m = _NOMENCLATURE.match(name.strip())
    if not m:
        raise InputError(f"not an architecture name: {name!r}")
    rg = {v: k for k, v in _RG_NAMES.items()}.get(m.group(1), "custom")
    layer = {v: k for k, v in _LAYER_NAMES.items()}[m.group(2)]
    return rg, layer, int(m.group(3))


@dataclass(frozen=True)
class Layer:
    """One tensorized layer.

    Attributes
    ----------
    id : int
        Position in the circuit's topological order.
    kind : {"input", "hadamard", "kronecker", "sum"}
    scope : tuple of int
    width : int
        Output vector length.
    inputs : tuple of int
        Ids of the input layers (ordered).
    family : Family or None
        Distribution family of an input layer.
    param : str or None
        Key into :attr:`Circuit.params` (input and sum layers).
    diagonal : bool
        For sum layers, use the element-wise mixing form.
    block : int
        Region-graph partition that produced the layer, ``-1`` otherwise.
    role : str
        Free-form tag describing the layer's function in its block.
    """

    id: int
    kind: str
    scope: tuple[int, ...]
    width: int
    inputs: tuple[int, ...] = ()
    family: Family | None = None
    param: str | None = None
    diagonal: bool = False
    block: int = -1
    role: str = ""


@dataclass
class Parameter:
    """Raw parameter tensor plus the reparameterization applied to it."""

    value: np.ndarray
    reparam: str = "none"

    def weights(self) -> np.ndarray:
        return rp.apply(self.reparam, self.value)

    @property
    def trainable(self) -> bool:
        return rp.is_trainable(self.reparam)


class Circuit:
    """A tensorized circuit.

    Parameters
    ----------
    layers : sequence of Layer
        In topological order with ``layers[i].id == i``.
    output : int
        Id of the output layer.
    num_vars : int
    params : dict of str to Parameter
    meta : dict, optional
        Free-form metadata (nomenclature, compile options, ...).
    """

    def __init__(self, layers, output, num_vars, params, meta=None):
        self.layers: list[Layer] = list(layers)
        self.output = int(output)
        self.num_vars = int(num_vars)
        self.params: dict[str, Parameter] = dict(params)
        self.meta: dict = dict(meta or {})
        self._check()

    # -- construction checks ----------------------------------------------
    def _check(self):
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise StructureError(f"layer {i}: id {layer.id} does not match position")
            if any(j >= i or j < 0 for j in layer.inputs):
                raise StructureError(f"layer {i}: inputs {layer.inputs} violate topological order")
            widths = [self.layers[j].width for j in layer.inputs]
            if layer.kind == "input":
                if layer.inputs or layer.family is None or len(layer.scope) != 1:
                    raise StructureError(f"layer {i}: input layers need a family and one variable")
                shape = layer.family.param_shape(layer.width)
                self._check_param(layer, shape)
            elif layer.kind == "hadamard":
                if not widths or any(w != layer.width for w in widths):
                    raise StructureError(f"layer {i}: hadamard input widths {widths} != {layer.width}")
            elif layer.kind == "kronecker":
                if not widths or int(np.prod(widths)) != layer.width:
                    raise StructureError(f"layer {i}: kronecker width {layer.width} != prod{widths}")
            elif layer.kind == "sum":
                if not widths:
                    raise StructureError(f"layer {i}: sum layer without inputs")
                if layer.diagonal:
                    if any(w != layer.width for w in widths):
                        raise StructureError(f"layer {i}: diagonal sum needs inputs of width {layer.width}")
                    self._check_param(layer, (layer.width, len(widths)))
                else:
                    self._check_param(layer, (layer.width, sum(widths)))
            else:
                raise StructureError(f"layer {i}: unknown layer kind {layer.kind!r}")
        if not 0 <= self.output < len(self.layers):
            raise StructureError(f"output id {self.output} out of range")
        if tuple(self.layers[self.output].scope) != tuple(range(self.num_vars)):
            raise StructureError("output layer scope is not the full variable set")

    def _check_param(self, layer, shape):
        p = self.params.get(layer.param)
        if p is None:
            raise StructureError(f"layer {layer.id}: missing parameter {layer.param!r}")
        if tuple(p.value.shape) != tuple(shape):
            raise StructureError(
                f"layer {layer.id}: parameter {layer.param!r} has shape {p.value.shape}, expected {shape}"
            )

    # -- structure queries --------------------------------------------------
    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        name = self.meta.get("nomenclature", "circuit")
        return f"<Circuit {name}: {len(self.layers)} layers, d={self.num_vars}>"

    def consumers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.layers]
        for layer in self.layers:
            for j in layer.inputs:
                out[j].append(layer.id)
        return out

    def depths(self) -> list[int]:
        """Longest-path distance of each layer from the output layer."""
        depth = [-1] * len(self.layers)
        depth[self.output] = 0
        for layer in reversed(self.layers):
            if depth[layer.id] < 0:
                continue
            for j in layer.inputs:
                depth[j] = max(depth[j], depth[layer.id] + 1)
        return depth

    def input_families(self) -> dict[int, Family]:
        return {layer.scope[0]: layer.family for layer in self.layers if layer.kind == "input"}

    def layer_weights(self, layer: Layer) -> np.ndarray:
        """Reparameterized weights of a sum layer (``(S, N)`` if diagonal)."""
        return self.params[layer.param].weights()

    def dense_weights(self, layer: Layer) -> np.ndarray:
        """Sum-layer weights as a dense ``(S, sum of input widths)`` matrix."""
        w = self.layer_weights(layer)
        return mixing_as_sum(w) if layer.diagonal else w

    def edge_count(self) -> int:
        """Number of connections: non-zero sum weights plus product fan-in."""
        total = 0
        for layer in self.layers:
            if layer.kind == "sum":
                total += int(np.count_nonzero(self.layer_weights(layer)))
            elif layer.kind in ("hadamard", "kronecker"):
                total += layer.width * len(layer.inputs)
        return total

    def param_count(self, trainable_only: bool = False) -> int:
        """Number of distinct raw parameter entries (shared tensors counted once)."""
        used = {layer.param for layer in self.layers if layer.param is not None}
        return int(
            sum(
                self.params[n].value.size
                for n in used
                if not trainable_only or self.params[n].trainable
            )
        )

    def block_param_counts(self) -> dict[int, int]:
        """Sum-parameter entries referenced by each region-graph block."""
        names: dict[int, set] = {}
        for layer in self.layers:
            if layer.kind == "sum" and layer.block >= 0:
                names.setdefault(layer.block, set()).add(layer.param)
        return {b: int(sum(self.params[n].value.size for n in s)) for b, s in names.items()}

    def copy(self) -> Circuit:
        params = {k: Parameter(v.value.copy(), v.reparam) for k, v in self.params.items()}
        return Circuit(self.layers, self.output, self.num_vars, params, copy.deepcopy(self.meta))

    def is_monotonic(self) -> bool:
        for layer in self.layers:
            if layer.kind == "sum" and np.any(self.layer_weights(layer) < 0):
                return False
            if layer.kind == "input" and not layer.family.normalized:
                if np.any(self.params[layer.param].value < 0):
                    return False
        return True


class _Builder:
    def __init__(self):
        self.layers: list[Layer] = []
        self.params: dict[str, Parameter] = {}

    def add(self, kind, scope, width, inputs=(), **kw) -> int:
        lid = len(self.layers)
        self.layers.append(Layer(lid, kind, tuple(scope), int(width), tuple(inputs), **kw))
        return lid

    def param(self, value, mode) -> str:
        name = f"p{len(self.params)}"
        self.params[name] = Parameter(np.asarray(value, dtype=float), mode)
        return name

    def scope(self, ids):
        return tuple(sorted(set().union(*(self.layers[i].scope for i in ids))))

    def width(self, i):
        return self.layers[i].width


def compile_circuit(rg: RegionGraph, K: int, kind: str = "cp", family="categorical:2",
                    reparam: str = "clamp", learn_mixing: bool = False, folded: bool = False,
                    seed: int = 0) -> Circuit:
    """Compile a region graph into a tensorized circuit.

    Leaf regions become input layers of width ``K`` (a multivariate leaf
    becomes one input per variable joined by a Hadamard layer). Every
    partition becomes one sum-product block of the requested ``kind``:

    ``tucker``
        Kronecker product of the children followed by a ``C x K^N`` sum.
    ``cp``
        A ``C x K`` sum per child followed by a Hadamard product.
    ``cpt``
        Hadamard product of the children followed by a ``C x K`` sum.
    ``cps`` / ``cpxs``
        ``cp`` with the per-child matrices shared across all blocks that fold
        together; ``cps`` adds a per-block diagonal scaling.

    Regions with several partitions get a diagonal mixing layer over the
    candidate blocks, frozen to uniform weights unless ``learn_mixing``.
    Blocks of the root region have output width ``C = 1``.

    Parameters
    ----------
    rg : RegionGraph
    K : int
        Layer width.
    kind : str
        One of :data:`LAYER_KINDS`.
    family : Family, str or sequence
        Input family, either shared or one per variable.
    reparam : str
        Reparameterization of trainable sum layers.
    learn_mixing : bool
        Train mixing-layer weights instead of freezing them.
    folded : bool
        Declares that the circuit will be evaluated folded; required for the
        fold-shared layer kinds.
    seed : int
        Seed of the parameter initialization.
    """
    kind = kind.lower()
    if kind not in LAYER_KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
    if kind in ("cps", "cpxs") and not folded:
        raise ConfigurationError(f"{kind} shares parameters across folds and requires folded=True")
    if K < 1:
        raise InputError("K must be >= 1")
    if reparam not in ("softmax", "exp", "clamp", "none"):
        raise ConfigurationError(f"unsupported sum reparameterization {reparam!r}")
    problems = validate(rg)
    if problems:
        raise StructureError("invalid region graph: " + "; ".join(problems))
    if isinstance(family, (list, tuple)):
        fams = [family_from_spec(f) for f in family]
        if len(fams) != rg.num_vars:
            raise InputError(f"got {len(fams)} families for {rg.num_vars} variables")
    else:
        fams = [family_from_spec(family)] * rg.num_vars

    rng = np.random.Generator(np.random.PCG64(seed))
    b = _Builder()

    def sum_layer(inputs, width, block, role, mode=reparam, value=None, diagonal=False):
        ncols = len(inputs) if diagonal else sum(b.width(i) for i in inputs)
        if value is None:
            value = rng.uniform(0.01, 1.01, size=(width, ncols))
        name = b.param(value, mode)
        return b.add("sum", b.scope(inputs), width, inputs, param=name, diagonal=diagonal,
                     block=block, role=role)

    def leaf(scope, width):
        units = []
        for v in scope:
            fam = fams[v]
            name = b.param(fam.init(width, rng), "family")
            units.append(b.add("input", (v,), width, family=fam, param=name, role="input"))
        if len(units) == 1:
            return units[0]
        return b.add("hadamard", b.scope(units), width, units, role="leaf-product")

    def sum_product(children, width, block):
        if kind == "tucker":
            kr_width = int(np.prod([b.width(c) for c in children]))
            kr = b.add("kronecker", b.scope(children), kr_width, children, block=block, role="tucker-kron")
            return sum_layer([kr], width, block, "tucker-sum")
        if kind == "cpt":
            h = b.add("hadamard", b.scope(children), b.width(children[0]), children, block=block,
                      role="cpt-had")
            return sum_layer([h], width, block, "cpt-sum")
        qs = [sum_layer([c], width, block, f"cp-q{i}") for i, c in enumerate(children)]
        h = b.add("hadamard", b.scope(qs), width, qs, block=block, role="cp-had")
        if kind == "cps":
            mode = "exp" if reparam == "softmax" else reparam
            return sum_layer([h], width, block, "cp-scale", mode=mode,
                             value=rp.inverse(mode, np.ones((width, 1))), diagonal=True)
        return h

    out_of: dict[int, int] = {}
    for r in rg.post_order():
        width = 1 if r == rg.root else K
        parts = rg.region_partitions[r]
        if not parts:
            unit = leaf(rg.regions[r], K)
            out_of[r] = sum_layer([unit], 1, -1, "root") if r == rg.root else unit
            continue
        blocks = [
            sum_product([out_of[c] for c in rg.partitions[p].children], width, p) for p in parts
        ]
        if len(blocks) == 1:
            out_of[r] = blocks[0]
        else:
            n = len(blocks)
            mode = reparam if learn_mixing else "frozen"
            value = rp.inverse(mode if mode != "frozen" else "none", np.full((width, n), 1.0 / n))
            out_of[r] = sum_layer(blocks, width, -1, "mixing", mode=mode, value=value, diagonal=True)

    layers, params = b.layers, b.params
    if kind in ("cps", "cpxs"):
        layers, params = _share_across_folds(layers, params, out_of[rg.root])
    meta = {
        "nomenclature": format_nomenclature(rg.kind, kind, K),
        "rg_kind": rg.kind,
        "layer_kind": kind,
        "K": int(K),
        "reparam": reparam,
        "learn_mixing": bool(learn_mixing),
        "seed": int(seed),
    }
    return Circuit(layers, out_of[rg.root], rg.num_vars, params, meta)


def _share_across_folds(layers, params, output):
    """Tie the per-child matrices of CP blocks whose products fold together."""
    depth = [-1] * len(layers)
    depth[output] = 0
    for layer in reversed(layers):
        if depth[layer.id] >= 0:
            for j in layer.inputs:
                depth[j] = max(depth[j], depth[layer.id] + 1)
    groups: dict[tuple, list[Layer]] = {}
    for layer in layers:
        if layer.role == "cp-had":
            groups.setdefault((depth[layer.id], len(layer.inputs), layer.width), []).append(layer)
    layers = list(layers)
    for members in groups.values():
        for slot in range(len(members[0].inputs)):
            shared = layers[members[0].inputs[slot]].param
            for m in members[1:]:
                q = layers[m.inputs[slot]]
                if params[q.param].value.shape == params[shared].value.shape:
                    layers[q.id] = replace(q, param=shared)
    used = {la.param for la in layers if la.param is not None}
    return layers, {k: v for k, v in params.items() if k in used}


# -- structural properties ---------------------------------------------------

def check_smooth(c: Circuit) -> bool:
    """Every sum layer's inputs share the sum layer's scope."""
    for layer in c.layers:
        if layer.kind == "sum":
            if any(c.layers[j].scope != layer.scope for j in layer.inputs):
                return False
    return True


def check_decomposable(c: Circuit) -> bool:
    """Every product layer's inputs have pairwise disjoint scopes covering its scope."""
    for layer in c.layers:
        if layer.kind in ("hadamard", "kronecker"):
            seen: set[int] = set()
            for j in layer.inputs:
                s = set(c.layers[j].scope)
                if seen & s:
                    return False
                seen |= s
            if seen != set(layer.scope):
                return False
    return True


def check_structured(c: Circuit) -> bool:
    """Smooth, decomposable, and all same-scope products split their scope identically."""
    if not (check_smooth(c) and check_decomposable(c)):
        return False
    split: dict[tuple, frozenset] = {}
    for layer in c.layers:
        if layer.kind in ("hadamard", "kronecker"):
            parts = frozenset(c.layers[j].scope for j in layer.inputs)
            if split.setdefault(layer.scope, parts) != parts:
                return False
    return True


# -- rewrites ----------------------------------------------------------------

def mixing_as_sum(weights: np.ndarray) -> np.ndarray:
    """Block-diagonal ``K x NK`` matrix equivalent to an element-wise mixing.

    Column block ``n`` is ``diag(weights[:, n])``.
    """
    weights = np.asarray(weights, dtype=float)
    k, n = weights.shape
    out = np.zeros((k, n * k))
    rows = np.arange(k)
    for i in range(n):
        out[rows, i * k + rows] = weights[:, i]
    return out


def _compact(layers: list[Layer | None], output: int, params, num_vars, meta) -> Circuit:
    """Drop ``None`` slots, renumber ids and prune unused parameters."""
    new_id: dict[int, int] = {}
    kept: list[Layer] = []
    for layer in layers:
        if layer is None:
            continue
        new_id[layer.id] = len(kept)
        kept.append(replace(layer, id=len(kept), inputs=tuple(new_id[j] for j in layer.inputs)))
    used = {la.param for la in kept if la.param is not None}
    return Circuit(kept, new_id[output], num_vars, {k: v for k, v in params.items() if k in used}, meta)


def rewrite_mixing_as_sum(c: Circuit) -> Circuit:
    """Replace every diagonal (mixing) sum layer by an ordinary dense sum layer.

    The new matrices concatenate ``N`` diagonal ``K x K`` blocks. Frozen
    weights stay frozen; trainable ones become ``"none"`` so that the zero
    off-diagonal entries are represented exactly.
    """
    params = {k: Parameter(v.value.copy(), v.reparam) for k, v in c.params.items()}
    layers: list[Layer | None] = list(c.layers)
    done: dict[str, str] = {}
    for layer in c.layers:
        if layer.kind == "sum" and layer.diagonal:
            name = done.get(layer.param)
            if name is None:
                p = c.params[layer.param]
                name = f"{layer.param}:dense"
                params[name] = Parameter(mixing_as_sum(p.weights()), "frozen" if p.reparam == "frozen" else "none")
                done[layer.param] = name
            layers[layer.id] = replace(layer, diagonal=False, param=name)
    return _compact(layers, c.output, params, c.num_vars, c.meta)


def _sum_edges(c: Circuit, layer: Layer) -> int:
    return int(np.count_nonzero(c.layer_weights(layer)))


def collapse_sum_chains(c: Circuit) -> Circuit:
    """Merge sum layers that feed exclusively into another sum layer.

    If sum layer ``T`` has a single consumer ``U`` which is also a sum layer,
    ``U``'s columns for ``T`` are replaced by their product with ``T``'s
    matrix and ``T``'s inputs are spliced into ``U``. A merge is skipped if it
    would increase the number of non-zero weights, or if ``U`` and ``T``
    differ in how many layers share their parameters (so fold-shared
    matrices are never expanded into per-fold copies).
    """
    params = {k: Parameter(v.value.copy(), v.reparam) for k, v in c.params.items()}
    work = Circuit(c.layers, c.output, c.num_vars, params, c.meta)
    memo: dict[tuple, str] = {}
    changed = True
    while changed:
        changed = False
        consumers = work.consumers()
        usage: dict[str, int] = {}
        for la in work.layers:
            if la.param is not None:
                usage[la.param] = usage.get(la.param, 0) + 1
        layers: list[Layer | None] = list(work.layers)
        removed: set[int] = set()
        for u in work.layers:
            if u.kind != "sum" or u.id in removed:
                continue
            for slot, t_id in enumerate(u.inputs):
                t = work.layers[t_id]
                if t.kind != "sum" or consumers[t_id] != [u.id] or t_id in removed:
                    continue
                if usage[u.param] != usage[t.param]:
                    continue
                wu, wt = work.dense_weights(u), work.dense_weights(t)
                offsets = np.cumsum([0] + [work.layers[j].width for j in u.inputs])
                left, mid, right = wu[:, : offsets[slot]], wu[:, offsets[slot]: offsets[slot + 1]], wu[:, offsets[slot + 1]:]
                merged = np.concatenate([left, mid @ wt, right], axis=1)
                if np.count_nonzero(merged) > _sum_edges(work, u) + _sum_edges(work, t):
                    continue
                key = (u.param, t.param, slot)
                name = memo.get(key)
                if name is None:
                    modes = {work.params[u.param].reparam, work.params[t.param].reparam}
                    if modes == {"frozen"}:
                        mode = "frozen"
                    elif "none" in modes:
                        mode = "none"
                    else:
                        mode = "clamp"
                    name = f"({u.param}*{t.param}@{slot})"
                    params[name] = Parameter(merged, mode)
                    memo[key] = name
                layers[u.id] = replace(
                    u, inputs=u.inputs[:slot] + t.inputs + u.inputs[slot + 1:], param=name, diagonal=False
                )
                layers[t_id] = None
                removed.add(t_id)
                changed = True
                break
            if changed:
                break
        if changed:
            work = _compact(layers, work.output, params, work.num_vars, work.meta)
            params = work.params
    return work


# -- folding -----------------------------------------------------------------

@dataclass(frozen=True)
class FoldGroup:
    """Layers of identical kind and shape evaluated together.

    ``routing[f, s] = (source group, source fold)`` gives the input in slot
    ``s`` of fold ``f``.
    """

    kind: str
    layers: tuple[int, ...]
    width: int
    in_widths: tuple[int, ...]
    routing: np.ndarray
    diagonal: bool = False
    family: Family | None = None
    params: tuple[str, ...] = ()
    variables: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def num_folds(self) -> int:
        return len(self.layers)

    @property
    def arity(self) -> int:
        return len(self.in_widths)


class FoldedCircuit:
    """A circuit whose layers are grouped into fold groups.

    The groups reference the circuit's live parameter table, so optimizer
    updates on ``circuit.params`` are visible to the folded view.
    """

    def __init__(self, circuit: Circuit, groups: list[FoldGroup]):
        self.circuit = circuit
        self.groups = groups
        self.location: dict[int, tuple[int, int]] = {}
        for g, grp in enumerate(groups):
            for f, lid in enumerate(grp.layers):
                self.location[lid] = (g, f)
        self.output = self.location[circuit.output]
        self._param_index = []
        for grp in groups:
            names = list(dict.fromkeys(grp.params))
            self._param_index.append((names, np.array([names.index(n) for n in grp.params], dtype=np.intp)))

    @property
    def num_vars(self):
        return self.circuit.num_vars

    @property
    def params(self):
        return self.circuit.params

    @property
    def meta(self):
        return self.circuit.meta

    def __repr__(self):
        sizes = [g.num_folds for g in self.groups]
        return f"<FoldedCircuit {len(self.groups)} groups, folds={sizes}>"

    def unique_params(self, g: int) -> tuple[list[str], np.ndarray]:
        """Distinct parameter names of group ``g`` and the fold-to-name index."""
        return self._param_index[g]

    def stacked_params(self, g: int, raw: bool = False) -> np.ndarray:
        """Parameter tensor of group ``g`` with a leading fold axis."""
        names, idx = self._param_index[g]
        if raw or self.groups[g].kind == "input":
            vals = [self.circuit.params[n].value for n in names]
        else:
            vals = [self.circuit.params[n].weights() for n in names]
        return np.stack(vals)[idx]

    def copy(self) -> FoldedCircuit:
        return FoldedCircuit(self.circuit.copy(), self.groups)

    def group_table(self) -> list[tuple]:
        """Hashable description of the grouping, for equality checks."""
        return [
            (g.kind, g.layers, g.width, g.in_widths, g.diagonal, g.params, g.routing.tolist())
            for g in self.groups
        ]


def fold(c: Circuit, trivial: bool = False) -> FoldedCircuit:
    """Group layers for batched evaluation.

    Layers are grouped by (depth from the output, kind, arity, input widths,
    width). All input layers of the same family and width form one group.
    With ``trivial=True`` every layer gets its own group, which is how an
    unfolded circuit is executed.
    """
    if isinstance(c, FoldedCircuit):
        c = c.circuit
    depth = c.depths()
    buckets: dict[tuple, list[int]] = {}
    order: list[tuple] = []
    for layer in c.layers:
        if depth[layer.id] < 0:
            continue
        in_widths = tuple(c.layers[j].width for j in layer.inputs)
        if trivial:
            key = (layer.id,)
            rank = (0, layer.id)
        elif layer.kind == "input":
            key = ("input", layer.family.key, layer.width)
            rank = (0, 0)
        else:
            key = (layer.kind, depth[layer.id], in_widths, layer.width, layer.diagonal)
            rank = (1, -depth[layer.id])
        if key not in buckets:
            buckets[key] = []
            order.append((rank, len(order), key))
        buckets[key].append(layer.id)
    order.sort()
    location: dict[int, tuple[int, int]] = {}
    groups: list[FoldGroup] = []
    for _, _, key in order:
        ids = buckets[key]
        first = c.layers[ids[0]]
        g = len(groups)
        routing = np.zeros((len(ids), len(first.inputs), 2), dtype=np.intp)
        for f, lid in enumerate(ids):
            for s, j in enumerate(c.layers[lid].inputs):
                routing[f, s] = location[j]
            location[lid] = (g, f)
        groups.append(
            FoldGroup(
                kind=first.kind,
                layers=tuple(ids),
                width=first.width,
                in_widths=tuple(c.layers[j].width for j in first.inputs),
                routing=routing,
                diagonal=first.diagonal,
                family=first.family,
                params=tuple(c.layers[i].param for i in ids) if first.param is not None else (),
                variables=np.array([c.layers[i].scope[0] for i in ids], dtype=np.intp)
                if first.kind == "input"
                else np.zeros(0, dtype=np.intp),
            )
        )
    return FoldedCircuit(c, groups)
