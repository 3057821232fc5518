"""Folded evaluation kernels: log-domain forward/backward and linear-domain forward.

Every group of a :class:`~tenscirc.circuit.FoldedCircuit` holds its output as
an array of shape ``(F, B, K)``. Sum layers use the max-shift log-sum-exp
scheme ``m + log(exp(x - m) @ W.T)``; products add (Hadamard) or outer-add
(Kronecker) log-values. An unfolded circuit is evaluated through the trivial
grouping with one layer per group, so both paths share these kernels.
"""
from __future__ import annotations

import numpy as np

from . import reparam as rp
from .circuit import Circuit, FoldedCircuit, fold
from .exceptions import InputError

__all__ = ["as_folded", "prepare_batch", "log_forward", "log_backward", "linear_forward"]


def as_folded(c) -> FoldedCircuit:
    """Return ``c`` itself if folded, else its trivial one-layer-per-group plan."""
    if isinstance(c, FoldedCircuit):
        return c
    if isinstance(c, Circuit):
        plan = c.__dict__.get("_trivial_plan")
        if plan is None or plan.circuit is not c:
            plan = fold(c, trivial=True)
            c.__dict__["_trivial_plan"] = plan
        return plan
    raise InputError(f"expected a Circuit or FoldedCircuit, got {type(c).__name__}")


def prepare_batch(c, X) -> np.ndarray:
    """Validate a batch and return it as floats with NaN marking marginalized entries.

    Integer arrays may use ``-1`` as the marginalization mark.
    """
    circuit = c.circuit if isinstance(c, FoldedCircuit) else c
    arr = np.asarray(X)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != circuit.num_vars:
        raise InputError(f"batch must have shape (B, {circuit.num_vars}), got {np.shape(X)}")
    if np.issubdtype(arr.dtype, np.integer):
        out = arr.astype(float)
        out[arr == -1] = np.nan
    else:
        out = np.array(arr, dtype=float)
    fams: dict = {}
    for v, fam in circuit.input_families().items():
        fams.setdefault(fam, []).append(v)
    for fam, cols in fams.items():
        try:
            fam.check_values(out[:, cols])
        except InputError as exc:
            bad = [v for v in cols if _column_bad(fam, out[:, v])]
            raise InputError(f"variable {bad[0] if bad else cols[0]}: {exc}") from None
    return out


def _column_bad(fam, col):
    try:
        fam.check_values(col)
    except InputError:
        return True
    return False


def _gather(values, routing_slot, width):
    src_g = routing_slot[:, 0]
    src_f = routing_slot[:, 1]
    first = src_g[0]
    if np.all(src_g == first):
        return values[first][src_f]
    out = np.empty((len(src_g), values[first].shape[1], width), dtype=values[first].dtype)
    for g in np.unique(src_g):
        m = src_g == g
        out[m] = values[g][src_f[m]]
    return out


def _scatter(grads, shapes, routing_slot, dx):
    src_g = routing_slot[:, 0]
    src_f = routing_slot[:, 1]
    for g in np.unique(src_g):
        m = src_g == g
        if grads[g] is None:
            grads[g] = np.zeros(shapes[g])
        idx = src_f[m]
        if len(np.unique(idx)) == len(idx):
            grads[g][idx] += dx[m]
        else:
            np.add.at(grads[g], idx, dx[m])


def _safe_max(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def log_forward(c, X, *, keep=False, validated=False, dtype=np.float64):
    """Log-domain forward pass.

    Parameters
    ----------
    c : Circuit or FoldedCircuit
    X : array of shape (B, d)
    keep : bool
        Also return the cache needed by :func:`log_backward`.
    dtype : {numpy.float64, numpy.float32}
        Working precision of the activations and weights. Gradients are only
        supported in float64.

    Returns
    -------
    out : ndarray of shape (B,)
        ``log c(x)`` per batch element.
    cache : dict, only if ``keep``
    """
    fc = as_folded(c)
    X = X if validated else prepare_batch(fc, X)
    values: list[np.ndarray] = []
    extras: list = []
    for g, grp in enumerate(fc.groups):
        extra = None
        if grp.kind == "input":
            theta = fc.stacked_params(g)
            x = X[:, grp.variables].T
            val = grp.family.log_prob(theta, x).astype(dtype, copy=False)
            extra = x
        else:
            xs = [_gather(values, grp.routing[:, s], w) for s, w in enumerate(grp.in_widths)]
            if grp.kind == "hadamard":
                val = xs[0].copy()
                for x in xs[1:]:
                    val += x
            elif grp.kind == "kronecker":
                val = xs[0]
                for x in xs[1:]:
                    val = (val[..., :, None] + x[..., None, :]).reshape(val.shape[0], val.shape[1], -1)
            elif grp.diagonal:
                W = fc.stacked_params(g).astype(dtype, copy=False)  # (F, K, N)
                x = np.stack(xs, axis=2)  # (F, B, N, K)
                m = _safe_max(x, axis=2)
                p = np.exp(x - m)
                lin = np.einsum("fbnk,fkn->fbk", p, W)
                with np.errstate(divide="ignore"):
                    val = np.log(lin) + m[:, :, 0, :]
                extra = (p, lin, W)
            else:
                W = fc.stacked_params(g).astype(dtype, copy=False)  # (F, S, Kin)
                x = xs[0] if len(xs) == 1 else np.concatenate(xs, axis=2)
                m = _safe_max(x, axis=2)
                p = np.exp(x - m)
                lin = np.matmul(p, np.swapaxes(W, 1, 2))
                with np.errstate(divide="ignore"):
                    val = np.log(lin) + m
                extra = (p, lin, W)
        values.append(val)
        extras.append(extra if keep else None)
    og, of = fc.output
    out = values[og][of, :, 0].copy()
    if keep:
        return out, {"values": values, "extras": extras, "X": X, "plan": fc}
    return out


def log_backward(cache, grad_out) -> dict[str, np.ndarray]:
    """Reverse pass: gradients of ``sum_b grad_out[b] * log c(x_b)`` w.r.t. raw parameters."""
    fc: FoldedCircuit = cache["plan"]
    values, extras = cache["values"], cache["extras"]
    shapes = [v.shape for v in values]
    grads: list = [None] * len(values)
    og, of = fc.output
    grads[og] = np.zeros(shapes[og])
    grads[og][of, :, 0] = grad_out
    wgrads: dict[str, np.ndarray] = {}

    def accumulate(g, per_fold):
        names, idx = fc.unique_params(g)
        acc = np.zeros((len(names),) + per_fold.shape[1:])
        np.add.at(acc, idx, per_fold)
        for n, a in zip(names, acc):
            wgrads[n] = wgrads[n] + a if n in wgrads else a

    for g in range(len(fc.groups) - 1, -1, -1):
        grp = fc.groups[g]
        G = grads[g]
        if G is None:
            continue
        if grp.kind == "input":
            theta = fc.stacked_params(g)
            accumulate(g, grp.family.grad(theta, extras[g], G))
            continue
        if grp.kind == "hadamard":
            for s in range(grp.arity):
                _scatter(grads, shapes, grp.routing[:, s], G)
            continue
        if grp.kind == "kronecker":
            f_, b_ = G.shape[:2]
            Gr = G.reshape((f_, b_) + grp.in_widths)
            for s in range(grp.arity):
                axes = tuple(2 + t for t in range(grp.arity) if t != s)
                _scatter(grads, shapes, grp.routing[:, s], Gr.sum(axis=axes) if axes else Gr)
            continue
        p, lin, W = extras[g]
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(lin > 0, G / lin, 0.0)
        if grp.diagonal:
            dx = p * (np.swapaxes(W, 1, 2)[:, None, :, :] * q[:, :, None, :])
            accumulate(g, np.einsum("fbk,fbnk->fkn", q, p))
            for s in range(grp.arity):
                _scatter(grads, shapes, grp.routing[:, s], dx[:, :, s, :])
        else:
            dx = p * np.matmul(q, W)
            accumulate(g, np.matmul(np.swapaxes(q, 1, 2), p))
            off = 0
            for s, w in enumerate(grp.in_widths):
                _scatter(grads, shapes, grp.routing[:, s], dx[:, :, off: off + w])
                off += w
    out = {}
    for name, gw in wgrads.items():
        par = fc.params[name]
        if par.reparam == "family":
            out[name] = gw
        else:
            out[name] = rp.backward(par.reparam, par.value, par.weights(), gw)
    return out


def linear_forward(c, X) -> np.ndarray:
    """Linear-domain forward pass; supports negative (non-monotonic) parameters."""
    fc = as_folded(c)
    X = prepare_batch(fc, X)
    values: list[np.ndarray] = []
    for g, grp in enumerate(fc.groups):
        if grp.kind == "input":
            val = grp.family.linear(fc.stacked_params(g), X[:, grp.variables].T)
        else:
            xs = [_gather(values, grp.routing[:, s], w) for s, w in enumerate(grp.in_widths)]
            if grp.kind == "hadamard":
                val = xs[0].copy()
                for x in xs[1:]:
                    val *= x
            elif grp.kind == "kronecker":
                val = xs[0]
                for x in xs[1:]:
                    val = (val[..., :, None] * x[..., None, :]).reshape(val.shape[0], val.shape[1], -1)
            elif grp.diagonal:
                val = np.einsum("fbnk,fkn->fbk", np.stack(xs, axis=2), fc.stacked_params(g))
            else:
                x = xs[0] if len(xs) == 1 else np.concatenate(xs, axis=2)
                val = np.matmul(x, np.swapaxes(fc.stacked_params(g), 1, 2))
        values.append(val)
    og, of = fc.output
    return values[og][of, :, 0].copy()
