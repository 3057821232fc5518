"""Maximum-likelihood training of monotonic circuits."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import reparam as rp
from .circuit import Circuit, FoldedCircuit, Parameter, fold
from .engine import as_folded, log_backward, log_forward, prepare_batch
from .exceptions import InputError

__all__ = [
    "needs_partition",
    "log_likelihood",
    "nll",
    "nll_and_grad",
    "backward",
    "bpd",
    "Adam",
    "TrainConfig",
    "TrainState",
    "train",
    "normalize",
]


def _base(c) -> Circuit:
    return c.circuit if isinstance(c, FoldedCircuit) else c


def needs_partition(c, tol: float = 1e-12) -> bool:
    """False only if the circuit is normalized by construction.

    That is the case when every trainable sum layer uses the softmax
    reparameterization, every fixed sum layer has rows summing to one and
    every input family is a normalized distribution.
    """
    base = _base(c)
    for layer in base.layers:
        if layer.kind == "input" and not layer.family.normalized:
            return True
        if layer.kind == "sum":
            par = base.params[layer.param]
            if par.reparam == "softmax":
                continue
            if par.reparam in ("frozen", "none"):
                w = par.value
                if np.all(w >= 0) and np.all(np.abs(w.sum(axis=1) - 1.0) <= tol):
                    continue
            return True
    return False


def log_likelihood(c, X, batch_size: int = 1024) -> np.ndarray:
    """Per-row ``log c(x)``, evaluated in chunks."""
    fc = as_folded(c)
    X = prepare_batch(fc, X)
    return np.concatenate(
        [log_forward(fc, X[i: i + batch_size], validated=True) for i in range(0, len(X), batch_size)]
    )


def _log_z(fc, keep=False):
    return log_forward(fc, np.full((1, fc.num_vars), np.nan), keep=keep, validated=True)


def _report_neg_inf(ll, offset=0):
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise InputError(
            f"non-finite log-likelihood for datum {int(bad[0]) + offset} "
            f"({bad.size} affected rows)"
        )


def nll(c, X, batch_size: int = 1024, strict: bool = True) -> float:
    """Average negative log-likelihood ``-(sum log c(x) - B log Z) / B``.

    With ``strict=False`` a non-finite likelihood yields ``inf``/``nan``
    instead of raising :class:`InputError`.
    """
    fc = as_folded(c)
    ll = log_likelihood(fc, X, batch_size)
    if strict:
        _report_neg_inf(ll)
    log_z = float(_log_z(fc)[0]) if needs_partition(fc) else 0.0
    return float(-(ll.sum() - len(ll) * log_z) / len(ll))


def nll_and_grad(c, X, validated: bool = False, strict: bool = True):
    """Average NLL of a batch and its gradients w.r.t. all raw parameters.

    With ``strict=False`` a non-finite likelihood is returned as is so the
    caller can treat it as divergence.
    """
    fc = as_folded(c)
    X = X if validated else prepare_batch(fc, X)
    b = len(X)
    ll, cache = log_forward(fc, X, keep=True, validated=True)
    if strict:
        _report_neg_inf(ll)
    elif not np.all(np.isfinite(ll)):
        return float("nan"), {}
    grads = log_backward(cache, np.full(b, -1.0 / b))
    value = -float(ll.mean())
    if needs_partition(fc):
        lz, zc = _log_z(fc, keep=True)
        value += float(lz[0])
        for name, g in log_backward(zc, np.ones(1)).items():
            grads[name] = grads[name] + g if name in grads else g
    return value, grads


def backward(c, X) -> dict[str, np.ndarray]:
    """Gradients of :func:`nll` w.r.t. the raw parameters."""
    return nll_and_grad(c, X)[1]


def bpd(c, X, batch_size: int = 1024) -> float:
    """Bits per dimension: average NLL divided by ``d * ln 2``."""
    return nll(c, X, batch_size) / (_base(c).num_vars * math.log(2.0))


class Adam:
    """Adam on a dict of raw parameters; clamp-reparameterized tensors are
    projected back to ``theta >= eps`` after every step."""

    def __init__(self, params: dict[str, Parameter], lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.names = [n for n, p in params.items() if p.trainable]
        self.m = {n: np.zeros_like(params[n].value) for n in self.names}
        self.v = {n: np.zeros_like(params[n].value) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            g = grads.get(n)
            if g is None:
                g = np.zeros_like(self.m[n])
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            par = self.params[n]
            par.value -= self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            rp.project(par.reparam, par.value)


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the usual desk-scale protocol."""

    lr: float = 1e-2
    batch_size: int = 256
    epochs: int = 200
    patience: int = 5
    seed: int = 0
    folded: bool = True
    verbose: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise InputError(f"invalid training configuration {asdict(self)}")


@dataclass
class TrainState:
    """Mutable state of a training run."""

    optimizer: Adam
    epoch: int = 0
    bad_epochs: int = 0
    best_valid: float = math.inf
    best_epoch: int = 0
    best_params: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    diverged: bool = False


def _snapshot(params):
    return {n: p.value.copy() for n, p in params.items()}


def _restore(params, snap):
    for n, v in snap.items():
        params[n].value[...] = v


def train(c, X_train, X_valid=None, config: TrainConfig | None = None, callback=None):
    """Fit the circuit's parameters by minimizing the average NLL with Adam.

    The data order is reshuffled every epoch with a seeded generator and the
    last partial batch is kept. Training stops after ``config.patience``
    epochs without improvement of the validation NLL (training NLL if no
    validation set is given) and the best parameters are restored.

    Returns
    -------
    circuit : Circuit
        A trained copy of ``c``.
    history : list of dict
        Per-epoch ``epoch, train_nll, valid_nll, bpd, wall_ms``.
    """
    config = config or TrainConfig()
    circuit = _base(c).copy()
    fc = fold(circuit) if config.folded else as_folded(circuit)
    X_train = prepare_batch(fc, X_train)
    if len(X_train) == 0:
        raise InputError("empty training set")
    X_valid = None if X_valid is None else prepare_batch(fc, X_valid)
    if X_valid is not None and len(X_valid) == 0:
        raise InputError("empty validation set")
    d = circuit.num_vars
    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = TrainState(Adam(circuit.params, lr=config.lr))
    state.best_params = _snapshot(circuit.params)
    n = len(X_train)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        perm = rng.permutation(n)
        total, last_good = 0.0, _snapshot(circuit.params)
        for i in range(0, n, config.batch_size):
            idx = perm[i: i + config.batch_size]
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                value, grads = nll_and_grad(fc, X_train[idx], validated=True, strict=False)
            if not np.isfinite(value) or any(not np.all(np.isfinite(g)) for g in grads.values()):
                state.diverged = True
                if not state.history:
                    state.best_params = last_good
                break
            last_good = _snapshot(circuit.params)
            state.optimizer.step(grads)
            total += value * len(idx)
        if state.diverged:
            warnings.warn(f"training diverged in epoch {epoch}; restoring best parameters",
                          RuntimeWarning, stacklevel=2)
            break
        state.epoch = epoch
        train_nll = total / n
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            valid_nll = nll(fc, X_train if X_valid is None else X_valid, strict=False)
        if not np.isfinite(valid_nll):
            state.diverged = True
            warnings.warn(f"training diverged in epoch {epoch}; restoring best parameters",
                          RuntimeWarning, stacklevel=2)
            break
        row = {
            "epoch": epoch,
            "train_nll": train_nll,
            "valid_nll": valid_nll,
            "bpd": valid_nll / (d * math.log(2.0)),
            "wall_ms": 1000.0 * (time.perf_counter() - start),
        }
        state.history.append(row)
        if callback is not None:
            callback(row)
        if config.verbose:
            print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if valid_nll < state.best_valid:
            state.best_valid, state.best_epoch = valid_nll, epoch
            state.best_params = _snapshot(circuit.params)
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= config.patience:
                break
    _restore(circuit.params, state.best_params)
    circuit.meta["train"] = {
        "best_epoch": state.best_epoch,
        "epochs_run": state.epoch,
        "diverged": state.diverged,
    }
    return circuit, state.history


def normalize(c) -> Circuit:
    """Push the partition function into the parameters so that ``log Z = 0``.

    Works bottom-up: every layer gets a vector of per-unit log-masses; a sum
    row ``s`` is rescaled as ``W'[s, k] = W[s, k] z_in[k] / z_out[s]``. The
    distribution ``c(x) / Z`` is unchanged. Shared sum parameters are
    duplicated per layer because their rescaled values generally differ.
    """
    base = _base(c)
    out = base.copy()
    usage: dict[str, int] = {}
    for layer in base.layers:
        if layer.param is not None:
            usage[layer.param] = usage.get(layer.param, 0) + 1
    logz: list[np.ndarray] = []
    new_layers = list(base.layers)
    for layer in base.layers:
        if layer.kind == "input":
            theta = base.params[layer.param].value
            lz = layer.family.log_normalizer(theta[None])[0]
            if not layer.family.normalized:
                out.params[layer.param].value[...] = theta / np.exp(lz)[None, :]
                lz = np.zeros_like(lz)
            logz.append(lz)
            continue
        ins = [logz[j] for j in layer.inputs]
        if layer.kind == "hadamard":
            logz.append(np.sum(ins, axis=0))
            continue
        if layer.kind == "kronecker":
            acc = ins[0]
            for z in ins[1:]:
                acc = (acc[:, None] + z[None, :]).ravel()
            logz.append(acc)
            continue
        par = base.params[layer.param]
        w = par.weights()
        with np.errstate(divide="ignore"):
            lw = np.log(w) + (np.stack(ins, axis=1) if layer.diagonal else np.concatenate(ins)[None, :])
        lz_out = logsumexp(lw, axis=1)
        safe = np.where(np.isfinite(lz_out), lz_out, 0.0)
        w_new = np.exp(lw - safe[:, None])
        if par.reparam in ("softmax", "exp"):
            with np.errstate(divide="ignore", invalid="ignore"):
                raw = par.value + np.log(w_new) - np.log(w)
            raw = np.where(np.isfinite(raw), raw, -np.inf if par.reparam == "exp" else -1e300)
        else:
            raw = w_new
        name = layer.param
        if usage[name] > 1:
            name = f"{layer.param}#{layer.id}"
            new_layers[layer.id] = replace(new_layers[layer.id], param=name)
        out.params[name] = Parameter(np.asarray(raw, dtype=float), par.reparam)
        logz.append(lz_out)
    used = {la.param for la in new_layers if la.param is not None}
    params = {k: v for k, v in out.params.items() if k in used}
    meta = dict(out.meta)
    meta["normalized_log_z"] = float(logz[base.output][0])
    return Circuit(new_layers, base.output, base.num_vars, params, meta)
