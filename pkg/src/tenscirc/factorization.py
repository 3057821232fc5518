"""Tensor factorizations as circuits, CP decomposition and Tucker-to-CP compression."""
from __future__ import annotations

import string
import warnings
from dataclasses import dataclass

import numpy as np

from .circuit import Circuit, FoldedCircuit, Layer, Parameter, collapse_sum_chains, fold, format_nomenclature
from .exceptions import ConfigurationError, InputError, StructureError
from .families import Embedding
from .region_graph import RegionGraph

__all__ = [
    "TuckerFactors",
    "HTuckerFactors",
    "MPSFactors",
    "CPFactors",
    "tucker_to_circuit",
    "htucker_to_circuit",
    "mps_to_circuit",
    "cp_als",
    "cp_reconstruct",
    "compress_tucker_circuit",
    "NONNEG_EPS",
]

NONNEG_EPS = 1e-12
RIDGE = 1e-10


@dataclass
class TuckerFactors:
    """Core tensor of shape ``(R_1, ..., R_d)`` and factors ``V_j`` of shape ``(I_j, R_j)``."""

    core: np.ndarray
    factors: list

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=float)
        self.factors = [np.asarray(f, dtype=float) for f in self.factors]
        if self.core.ndim != len(self.factors):
            raise InputError(f"core has {self.core.ndim} modes but {len(self.factors)} factors given")
        for j, (r, f) in enumerate(zip(self.core.shape, self.factors)):
            if f.ndim != 2 or f.shape[1] != r:
                raise InputError(f"factor {j} has shape {f.shape}, expected (I, {r})")

    def to_dense(self) -> np.ndarray:
        t = self.core
        for j, f in enumerate(self.factors):
            t = np.moveaxis(np.tensordot(f, t, axes=(1, j)), 0, j)
        return t


@dataclass
class HTuckerFactors:
    """Hierarchical Tucker factors over a tree region graph.

    ``cores[r]`` has shape ``(R_r, R_c1, ..., R_cN)`` for the children of
    region ``r``'s partition; ``leaves[r]`` has shape ``(I, R_r)``.
    The root rank must be 1.
    """

    rg: RegionGraph
    cores: dict
    leaves: dict


@dataclass
class MPSFactors:
    """Matrix-product state: ``first (I_1, R)``, ``inner[j] (I_j, R, R)``, ``last (I_d, R)``."""

    first: np.ndarray
    inner: list
    last: np.ndarray

    def to_dense(self) -> np.ndarray:
        t = np.asarray(self.first, dtype=float)  # (I1.., R)
        for a in self.inner:
            t = np.tensordot(t, np.asarray(a, dtype=float), axes=([t.ndim - 1], [1]))
        return np.tensordot(t, np.asarray(self.last, dtype=float), axes=([t.ndim - 1], [1]))


@dataclass
class CPFactors:
    """Factor matrices ``V_j`` of shape ``(I_j, R)``."""

    factors: list

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    def to_dense(self) -> np.ndarray:
        return cp_reconstruct(self.factors)


def cp_reconstruct(factors) -> np.ndarray:
    n = len(factors)
    letters = string.ascii_lowercase[:n]
    spec = ",".join(f"{c}z" for c in letters) + "->" + letters
    return np.einsum(spec, *factors, optimize=True)


class _Emitter:
    """Small helper for building circuits from factor matrices."""

    def __init__(self):
        self.layers: list[Layer] = []
        self.params: dict[str, Parameter] = {}

    def param(self, value, mode="none"):
        name = f"p{len(self.params)}"
        self.params[name] = Parameter(np.asarray(value, dtype=float), mode)
        return name

    def add(self, kind, inputs=(), width=None, scope=None, **kw):
        if scope is None:
            scope = tuple(sorted(set().union(*(self.layers[i].scope for i in inputs))))
        lid = len(self.layers)
        self.layers.append(Layer(lid, kind, tuple(scope), int(width), tuple(inputs), **kw))
        return lid

    def embedding(self, var, table):
        table = np.asarray(table, dtype=float)
        return self.add("input", (), table.shape[1], (var,), family=Embedding(table.shape[0]),
                        param=self.param(table, "family"), role="input")

    def kron(self, inputs, **kw):
        w = int(np.prod([self.layers[i].width for i in inputs]))
        return self.add("kronecker", inputs, w, **kw)

    def hadamard(self, inputs, **kw):
        return self.add("hadamard", inputs, self.layers[inputs[0]].width, **kw)

    def sum(self, inputs, weights, mode="none", diagonal=False, **kw):
        weights = np.asarray(weights, dtype=float)
        return self.add("sum", inputs, weights.shape[0], param=self.param(weights, mode),
                        diagonal=diagonal, **kw)


def tucker_to_circuit(f: TuckerFactors) -> Circuit:
    """Shallow circuit computing a Tucker factorization.

    One embedding input per variable (rows of ``V_j``), one Kronecker layer
    and a ``1 x prod(R_j)`` sum layer holding the row-major vectorized core.
    """
    if not isinstance(f, TuckerFactors):
        f = TuckerFactors(*f)
    e = _Emitter()
    ins = [e.embedding(j, v) for j, v in enumerate(f.factors)]
    kr = e.kron(ins, block=0, role="tucker-kron")
    out = e.sum([kr], f.core.reshape(1, -1), block=0, role="tucker-sum")
    meta = {"nomenclature": "tucker", "bridge": "tucker"}
    return Circuit(e.layers, out, len(f.factors), e.params, meta)


def htucker_to_circuit(f: HTuckerFactors) -> Circuit:
    """Deep circuit computing a hierarchical Tucker factorization.

    Every internal region contributes one Kronecker layer over its children
    and one ``R_r x prod(R_c)`` sum layer holding its vectorized core.
    """
    rg = f.rg
    if not rg.is_tree():
        raise StructureError("hierarchical Tucker needs a tree region graph")
    e = _Emitter()
    out_of: dict[int, int] = {}
    for r in rg.post_order():
        parts = rg.region_partitions[r]
        if not parts:
            scope = rg.regions[r]
            if len(scope) != 1:
                raise StructureError(f"region {r}: leaves must be univariate")
            if r not in f.leaves:
                raise InputError(f"missing leaf factor for region {r}")
            out_of[r] = e.embedding(scope[0], f.leaves[r])
            continue
        children = rg.partitions[parts[0]].children
        core = np.asarray(f.cores.get(r), dtype=float) if r in f.cores else None
        if core is None:
            raise InputError(f"missing core for region {r}")
        widths = tuple(e.layers[out_of[c]].width for c in children)
        if core.shape[1:] != widths:
            raise InputError(f"region {r}: core shape {core.shape} does not match child ranks {widths}")
        if r == rg.root and core.shape[0] != 1:
            raise InputError(f"root core must have rank 1, got {core.shape[0]}")
        kr = e.kron([out_of[c] for c in children], block=parts[0], role="tucker-kron")
        out_of[r] = e.sum([kr], core.reshape(core.shape[0], -1), block=parts[0], role="tucker-sum")
    meta = {"nomenclature": "htucker", "bridge": "htucker"}
    return Circuit(e.layers, out_of[rg.root], rg.num_vars, e.params, meta)


def mps_to_circuit(f: MPSFactors, inner_rank: int | None = None, tol: float = 1e-6,
                   seed: int = 0, iters: int = 1000) -> Circuit:
    """Circuit for a matrix-product state built from Hadamard layers.

    Each inner tensor ``A_j[i, r, s]`` is CP-decomposed as
    ``sum_q V[i, q] B[r, q] C[s, q]``; the chain state then updates as
    ``g = V(i_j) * (B.T h)`` followed by ``h = C g``. The last site is
    joined by a Hadamard product and an all-ones sum. CP residuals are stored
    in ``meta["cp_residuals"]`` and a warning is raised when one exceeds ``tol``.
    """
    first = np.asarray(f.first, dtype=float)
    last = np.asarray(f.last, dtype=float)
    R = first.shape[1]
    if last.shape[1] != R:
        raise InputError("boundary matrices disagree on the bond dimension")
    e = _Emitter()
    h = e.embedding(0, first)
    residuals = []
    for j, a in enumerate(f.inner, start=1):
        a = np.asarray(a, dtype=float)
        if a.ndim != 3 or a.shape[1:] != (R, R):
            raise InputError(f"inner tensor {j} has shape {a.shape}, expected (I, {R}, {R})")
        rank = inner_rank or min(R * R, R * a.shape[0])
        cp, res = cp_als(a, rank, nonneg=False, iters=iters, seed=seed + j)
        residuals.append(res)
        v, b, c = cp.factors
        emb = e.embedding(j, v)
        proj = e.sum([h], b.T, block=j, role="mps-in")
        g = e.hadamard([emb, proj], block=j, role="mps-had")
        h = e.sum([g], c, block=j, role="mps-out")
    d = len(f.inner) + 2
    tail = e.embedding(d - 1, last)
    g = e.hadamard([h, tail], block=d - 1, role="mps-had")
    out = e.sum([g], np.ones((1, R)), block=d - 1, role="mps-top")
    if any(r > tol for r in residuals):
        warnings.warn(f"CP residuals {residuals} exceed tolerance {tol}", RuntimeWarning, stacklevel=2)
    meta = {"nomenclature": "mps", "bridge": "mps", "cp_residuals": residuals}
    return Circuit(e.layers, out, d, e.params, meta)


# -- CP decomposition ------------------------------------------------------------

def _mttkrp(t, factors, mode):
    n = t.ndim
    ops = [t, list(range(n))]
    for j, a in enumerate(factors):
        if j != mode:
            ops += [a, [j, n]]
    return np.einsum(*ops, [mode, n], optimize=True)


def _gram_except(grams, mode):
    g = np.ones_like(grams[0])
    for j, gj in enumerate(grams):
        if j != mode:
            g = g * gj
    return g


def _solve(g, m):
    try:
        if np.linalg.cond(g) < 1e12:
            return np.linalg.solve(g, m.T).T
    except np.linalg.LinAlgError:
        pass
    return np.linalg.solve(g + RIDGE * np.eye(len(g)), m.T).T


def _als_run(t, R, nonneg, iters, tol, rng):
    norm2 = float(np.sum(t * t))
    factors = [rng.uniform(0.0, 1.0, size=(i, R)) for i in t.shape]
    # rescale so that the initial reconstruction has the tensor's norm
    scale = (np.sqrt(norm2) / max(np.linalg.norm(cp_reconstruct(factors)), 1e-300)) ** (1.0 / t.ndim)
    factors = [a * scale for a in factors]
    grams = [a.T @ a for a in factors]
    prev = np.inf
    history = []
    for _ in range(iters):
        for n in range(t.ndim):
            m = _mttkrp(t, factors, n)
            g = _gram_except(grams, n)
            if nonneg:
                a = factors[n]
                for r in range(R):
                    if g[r, r] > 0:
                        a[:, r] = np.maximum(NONNEG_EPS, a[:, r] + (m[:, r] - a @ g[:, r]) / g[r, r])
            else:
                factors[n] = _solve(g, m)
            grams[n] = factors[n].T @ factors[n]
        inner = float(np.sum(m * factors[-1]))
        fit = float(np.sum(_gram_except(grams, t.ndim - 1) * grams[-1]))
        obj = max(norm2 - 2.0 * inner + fit, 0.0)
        if obj > prev + 1e-9 * norm2:
            raise AssertionError(f"CP objective increased from {prev} to {obj}")
        history.append(obj)
        if prev - obj <= tol * norm2:
            break
        prev = obj
    return factors, history


def _balance(factors):
    """Rescale every rank-one term so its column norms agree across modes.

    CP is invariant to moving scale between the factors of one term; ALS can
    drift to wildly unbalanced scalings (1e-10 in one mode, 1e10 in another),
    which later overflows or underflows once factors from different blocks
    are multiplied together.
    """
    norms = np.stack([np.linalg.norm(a, axis=0) for a in factors])  # (modes, R)
    alive = np.all(norms > 0, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    geo = np.exp(np.mean(np.log(safe), axis=0))
    return [a * np.where(alive, geo / n, 1.0) for a, n in zip(factors, safe)]


def cp_als(t, R: int, nonneg: bool = False, iters: int = 500, tol: float = 1e-12,
           restarts: int = 5, seed: int = 0):
    """Rank-``R`` CP decomposition by alternating least squares.

    The unconstrained mode solves each factor's normal equations exactly
    (with a ridge of ``1e-10`` when they are ill-conditioned). The
    non-negative mode uses hierarchical ALS column updates projected to
    ``>= 1e-12``, which keeps the objective monotonically non-increasing.
    The returned rank-one terms are rescaled to equal column norms across
    modes.

    Returns
    -------
    factors : CPFactors
    residual : float
        Relative Frobenius error ``||t - t_hat|| / ||t||`` of the best restart.
    """
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise InputError("tensor has non-finite entries")
    if R < 1:
        raise InputError("rank must be >= 1")
    if nonneg and np.any(t < 0):
        raise InputError("non-negative CP needs a non-negative tensor")
    if R >= t.size:
        warnings.warn(f"rank {R} >= tensor size {t.size}: degenerate decomposition", RuntimeWarning,
                      stacklevel=2)
    norm = float(np.linalg.norm(t))
    if norm == 0.0:
        return CPFactors([np.zeros((i, R)) for i in t.shape]), 0.0
    rng = np.random.Generator(np.random.PCG64(seed))
    best, best_res = None, np.inf
    for _ in range(max(1, restarts)):
        factors, _hist = _als_run(t, R, nonneg, iters, tol, rng)
        factors = _balance(factors)
        if nonneg:
            factors = [np.maximum(a, NONNEG_EPS) for a in factors]
        res = float(np.linalg.norm(t - cp_reconstruct(factors)) / norm)
        if res < best_res:
            best, best_res = factors, res
    return CPFactors(best), best_res


# -- compression -------------------------------------------------------------------

def _tucker_blocks(c: Circuit):
    """Pairs ``(kronecker id, sum id)`` forming Tucker blocks."""
    consumers = c.consumers()
    out = []
    for layer in c.layers:
        if layer.kind == "sum" and not layer.diagonal and len(layer.inputs) == 1:
            src = c.layers[layer.inputs[0]]
            if src.kind == "kronecker" and consumers[src.id] == [layer.id]:
                out.append((src.id, layer.id))
    return out


def compress_tucker_circuit(c, R: int, share_folds: str = "none", collapse: bool = True,
                            iters: int = 300, restarts: int = 2, tol: float = 1e-10,
                            seed: int = 0) -> Circuit:
    """Replace every Tucker block by a rank-``R`` CP block via non-negative CP.

    A Tucker block's weight tensor ``W[s, i, j] ~ sum_r A[s, r] B[i, r] C[j, r]``
    becomes a ``B.T`` sum over the first input, a ``C.T`` sum over the second,
    a Hadamard product and an ``A`` sum, i.e. ``(K + K + S) R`` parameters.

    Parameters
    ----------
    share_folds : {"none", "cps", "cpxs"}
        ``"cps"`` decomposes each fold group jointly, sharing ``A, B, C``
        across the group and keeping a per-block diagonal scaling; ``"cpxs"``
        fits shared factors to the fold-averaged tensor and drops the scaling.
    collapse : bool
        Merge the resulting chains of consecutive sum layers afterwards.
    """
    share_folds = share_folds.lower()
    if share_folds not in ("none", "cps", "cpxs"):
        raise ConfigurationError(f"unknown fold sharing {share_folds!r}")
    base = c.circuit if isinstance(c, FoldedCircuit) else c
    if not base.is_monotonic():
        raise InputError("non-negative compression needs a monotonic circuit")
    blocks = _tucker_blocks(base)
    if not blocks:
        raise StructureError("circuit has no Tucker blocks to compress")
    kron_of = {s: k for k, s in blocks}

    # decompose, possibly per fold group
    groups: list[list[int]] = []
    if share_folds == "none":
        groups = [[s] for _, s in blocks]
    else:
        fc = c if isinstance(c, FoldedCircuit) else fold(base)
        for grp in fc.groups:
            members = [lid for lid in grp.layers if lid in kron_of]
            if members:
                groups.append(members)
    factor_of: dict[int, tuple] = {}
    residuals = []
    e_params: dict[str, Parameter] = {}

    def new_param(value, tag):
        name = f"c{len(e_params)}{tag}"
        e_params[name] = Parameter(np.maximum(np.asarray(value, dtype=float), NONNEG_EPS), "clamp")
        return name

    for gi, members in enumerate(groups):
        tensors = []
        for sid in members:
            layer = base.layers[sid]
            widths = [base.layers[j].width for j in base.layers[kron_of[sid]].inputs]
            tensors.append(base.layer_weights(layer).reshape([layer.width] + widths))
        if share_folds == "none":
            cp, res = cp_als(tensors[0], R, nonneg=True, iters=iters, tol=tol, restarts=restarts, seed=seed + gi)
            a, *bs = cp.factors
            factor_of[members[0]] = (new_param(a, "A"), [new_param(b.T, "B") for b in bs], None)
        elif share_folds == "cpxs":
            cp, res = cp_als(np.mean(tensors, axis=0), R, nonneg=True, iters=iters, tol=tol,
                             restarts=restarts, seed=seed + gi)
            a, *bs = cp.factors
            shared = (new_param(a, "A"), [new_param(b.T, "B") for b in bs], None)
            for sid in members:
                factor_of[sid] = shared
        else:
            cp, res = cp_als(np.stack(tensors), R, nonneg=True, iters=iters, tol=tol,
                             restarts=restarts, seed=seed + gi)
            dmat, a, *bs = cp.factors
            pa, pbs = new_param(a, "A"), [new_param(b.T, "B") for b in bs]
            for f, sid in enumerate(members):
                factor_of[sid] = (pa, pbs, new_param(dmat[f][:, None], "D"))
        residuals.append(res)

    # rebuild the layer list
    params = {k: Parameter(v.value.copy(), v.reparam) for k, v in base.params.items()}
    params.update(e_params)
    new_layers: list[Layer] = []
    new_id: dict[int, int] = {}
    skip = set(kron_of.values())

    def add(kind, scope, width, inputs, **kw):
        lid = len(new_layers)
        new_layers.append(Layer(lid, kind, scope, width, tuple(inputs), **kw))
        return lid

    for layer in base.layers:
        if layer.id in skip:
            continue
        if layer.id in kron_of:
            kr = base.layers[kron_of[layer.id]]
            pa, pbs, pd = factor_of[layer.id]
            qs = [
                add("sum", base.layers[j].scope, R, [new_id[j]], param=pb, block=layer.block, role=f"cp-q{i}")
                for i, (j, pb) in enumerate(zip(kr.inputs, pbs))
            ]
            h = add("hadamard", layer.scope, R, qs, block=layer.block, role="cp-had")
            if pd is not None:
                h = add("sum", layer.scope, R, [h], param=pd, diagonal=True, block=layer.block, role="cp-scale")
            new_id[layer.id] = add("sum", layer.scope, layer.width, [h], param=pa, block=layer.block,
                                   role="cp-out")
            continue
        new_id[layer.id] = add(layer.kind, layer.scope, layer.width, [new_id[j] for j in layer.inputs],
                               family=layer.family, param=layer.param, diagonal=layer.diagonal,
                               block=layer.block, role=layer.role)
    used = {la.param for la in new_layers if la.param is not None}
    meta = dict(base.meta)
    layer_kind = {"none": "cp", "cps": "cps", "cpxs": "cpxs"}[share_folds]
    meta["layer_kind"] = layer_kind
    if "rg_kind" in meta and "K" in meta:
        meta["nomenclature"] = format_nomenclature(meta["rg_kind"], layer_kind, meta["K"])
    meta["compression"] = {"rank": int(R), "share_folds": share_folds, "residuals": residuals,
                           "collapsed": bool(collapse)}
    out = Circuit(new_layers, new_id[base.output], base.num_vars,
                  {k: v for k, v in params.items() if k in used}, meta)
    return collapse_sum_chains(out) if collapse else out
