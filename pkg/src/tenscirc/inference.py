"""Inference queries: likelihoods, marginals, partition function, sampling, dense oracles."""
from __future__ import annotations

import numpy as np

from .circuit import Circuit, FoldedCircuit
from .engine import linear_forward, log_forward
from .exceptions import GuardError, InputError, PreconditionError
from .families import Binomial, Categorical, Embedding

__all__ = [
    "forward",
    "log_partition",
    "marginal",
    "evaluate_linear",
    "reconstruct_tensor",
    "domain_sizes",
    "is_normalized",
    "sample",
    "MAX_DENSE_ENTRIES",
]

MAX_DENSE_ENTRIES = 10**6


def _base(c) -> Circuit:
    return c.circuit if isinstance(c, FoldedCircuit) else c


def forward(c, X, dtype=np.float64) -> np.ndarray:
    """Log-value ``log c(x)`` for each row of ``X`` (NaN or -1 marks marginalized entries).

    ``dtype`` selects the working precision (float64 or float32).
    """
    return log_forward(c, X, dtype=dtype)


def marginal(c, X, marginalize=None) -> np.ndarray:
    """Log of the circuit summed/integrated over the marginalized variables.

    Parameters
    ----------
    X : array of shape (B, d)
        Evidence; NaN (or -1 for integer arrays) marks marginalized entries.
    marginalize : sequence of int, optional
        Additional variables to marginalize in every row.
    """
    X = np.atleast_2d(np.asarray(X))
    if marginalize is not None and len(marginalize):
        Xf = X.astype(float)
        if np.issubdtype(X.dtype, np.integer):
            Xf[X == -1] = np.nan
        Xf[:, list(marginalize)] = np.nan
        X = Xf
    return log_forward(c, X)


def log_partition(c) -> float:
    """``log Z`` computed by one forward pass with every variable marginalized."""
    d = _base(c).num_vars
    return float(log_forward(c, np.full((1, d), np.nan))[0])


def evaluate_linear(c, X) -> np.ndarray:
    """Linear-domain circuit values; works with negative parameters."""
    return linear_forward(c, X)


def domain_sizes(c) -> list[int]:
    """Number of states per variable for circuits with finite-domain inputs."""
    fams = _base(c).input_families()
    sizes = []
    for v in range(_base(c).num_vars):
        fam = fams[v]
        if isinstance(fam, (Categorical, Embedding)):
            sizes.append(fam.num_categories)
        elif isinstance(fam, Binomial):
            sizes.append(fam.num_trials + 1)
        else:
            raise InputError(f"variable {v} has a continuous family {fam.spec()}")
    return sizes


def reconstruct_tensor(c, max_entries: int = MAX_DENSE_ENTRIES, chunk: int = 4096) -> np.ndarray:
    """Dense tensor of circuit values over the joint domain (linear domain).

    Raises
    ------
    GuardError
        If the joint domain has more than ``max_entries`` states.
    """
    sizes = domain_sizes(c)
    total = int(np.prod(sizes, dtype=object))
    if total > max_entries:
        raise GuardError(f"joint domain has {total} states, above the guard of {max_entries}")
    grid = np.indices(sizes).reshape(len(sizes), -1).T
    out = np.empty(total)
    for start in range(0, total, chunk):
        out[start: start + chunk] = linear_forward(c, grid[start: start + chunk])
    return out.reshape(sizes)


def is_normalized(c, tol: float = 1e-8) -> bool:
    """True if all sum rows are non-negative and sum to 1 and inputs are distributions."""
    base = _base(c)
    for layer in base.layers:
        if layer.kind == "input":
            if not layer.family.normalized:
                theta = base.params[layer.param].value
                if np.any(theta < 0) or np.any(np.abs(theta.sum(axis=0) - 1.0) > tol):
                    return False
        elif layer.kind == "sum":
            w = base.layer_weights(layer)
            if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > tol):
                return False
    return True


def sample(c, n: int, seed: int = 0) -> np.ndarray:
    """Exact ancestral samples from a normalized circuit.

    Layers are visited from the output down. Each layer carries the list of
    (sample index, unit index) pairs routed to it: sum layers draw an input
    column from the selected row of their weight matrix, Kronecker layers
    unravel the unit index into per-input indices, Hadamard layers forward the
    same index to every input, and input layers draw the variable's value
    from the selected unit by inverse CDF.

    Raises
    ------
    PreconditionError
        If the circuit is not normalized (see :func:`is_normalized`).
    """
    base = _base(c)
    if not is_normalized(base):
        raise PreconditionError("sampling needs a normalized circuit; call normalize() first")
    if n < 0:
        raise InputError("n must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = np.full((n, base.num_vars), np.nan)
    routed: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {
        base.output: [(np.arange(n), np.zeros(n, dtype=np.intp))]
    }
    for layer in reversed(base.layers):
        parts = routed.pop(layer.id, None)
        if not parts:
            continue
        rows = np.concatenate([p[0] for p in parts])
        units = np.concatenate([p[1] for p in parts])
        if rows.size == 0:
            continue
        if layer.kind == "input":
            theta = base.params[layer.param].value
            out[rows, layer.scope[0]] = layer.family.sample(theta, units, rng.random(rows.size))
            continue
        if layer.kind == "hadamard":
            for j in layer.inputs:
                routed.setdefault(j, []).append((rows, units))
            continue
        if layer.kind == "kronecker":
            widths = [base.layers[j].width for j in layer.inputs]
            idx = np.unravel_index(units, widths)
            for j, ij in zip(layer.inputs, idx):
                routed.setdefault(j, []).append((rows, ij.astype(np.intp)))
            continue
        w = base.layer_weights(layer)[units]
        cdf = np.cumsum(w, axis=1)
        col = np.minimum((cdf < rng.random(rows.size)[:, None] * cdf[:, -1:]).sum(axis=1), w.shape[1] - 1)
        if layer.diagonal:
            for s, j in enumerate(layer.inputs):
                m = col == s
                routed.setdefault(j, []).append((rows[m], units[m]))
        else:
            offsets = np.cumsum([0] + [base.layers[j].width for j in layer.inputs])
            slot = np.searchsorted(offsets, col, side="right") - 1
            for s, j in enumerate(layer.inputs):
                m = slot == s
                routed.setdefault(j, []).append((rows[m], col[m] - offsets[s]))
    return out
