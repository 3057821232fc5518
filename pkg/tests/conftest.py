"""Shared fixtures and an independent dense oracle for circuit semantics.

The oracle walks an unfolded circuit one assignment at a time in the linear
domain using only the layer definitions (``np.kron`` for Kronecker layers,
an explicit loop over units for inputs, matrix-vector products for sums). It
shares no evaluation code with the library's folded log-space engine.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from scipy.special import comb
from scipy.stats import norm

from tenscirc import (
    Circuit,
    Layer,
    Parameter,
    build_cl,
    build_lt,
    build_pd,
    build_qg,
    build_qt,
    build_rnd,
    compile_circuit,
    nll,
)

RG_NAMES = ("lt", "rnd", "pd", "qt2", "qt4", "qg", "cl")
LAYER_NAMES = ("tucker", "cp", "cpt", "cps", "cpxs")


def small_region_graph(kind, seed=0):
    """A region graph over 4 variables laid out as a 2x2 image."""
    if kind == "lt":
        return build_lt(4)
    if kind == "rnd":
        return build_rnd(4, seed)
    if kind == "pd":
        return build_pd(2, 2, 1)
    if kind == "qt2":
        return build_qt(2, 2, 2)
    if kind == "qt4":
        return build_qt(2, 2, 4)
    if kind == "qg":
        return build_qg(2, 2)
    if kind == "cl":
        data = np.random.default_rng(seed).integers(0, 2, size=(50, 4))
        data[:, 1] = data[:, 0]
        return build_cl(data, 2)
    raise ValueError(kind)


def compile_small(rg_kind, layer, K=2, reparam="clamp", family="categorical:2", seed=0, **kw):
    rg = small_region_graph(rg_kind, seed)
    return compile_circuit(rg, K, layer, family, reparam=reparam, folded=layer in ("cps", "cpxs"),
                           seed=seed, **kw)


def _input_units(layer, theta, value):
    """Unit outputs of one input layer at a scalar value (NaN means summed out)."""
    fam = layer.family
    name = fam.name
    K = layer.width
    if name == "embedding":
        if np.isnan(value):
            return theta.sum(axis=0)
        return theta[int(value)].astype(float)
    if np.isnan(value):
        return np.ones(K)
    out = np.empty(K)
    for k in range(K):
        if name == "categorical":
            row = np.exp(theta[k] - theta[k].max())
            out[k] = row[int(value)] / row.sum()
        elif name == "binomial":
            p = 1.0 / (1.0 + math.exp(-theta[k, 0]))
            n = fam.num_trials
            out[k] = comb(n, int(value)) * p ** int(value) * (1 - p) ** (n - int(value))
        elif name == "gaussian":
            sd = max(math.exp(theta[k, 1]), fam.min_std)
            out[k] = norm.pdf(value, theta[k, 0], sd)
        else:
            raise ValueError(name)
    return out


def oracle_value(c, x):
    """Linear-domain value of an unfolded circuit at one assignment."""
    vals = {}
    for layer in c.layers:
        if layer.kind == "input":
            vals[layer.id] = _input_units(layer, c.params[layer.param].value, x[layer.scope[0]])
        elif layer.kind == "hadamard":
            v = np.ones(layer.width)
            for j in layer.inputs:
                v = v * vals[j]
            vals[layer.id] = v
        elif layer.kind == "kronecker":
            v = np.ones(1)
            for j in layer.inputs:
                v = np.kron(v, vals[j])
            vals[layer.id] = v
        else:
            w = c.params[layer.param].weights()
            if layer.diagonal:
                v = np.zeros(layer.width)
                for n, j in enumerate(layer.inputs):
                    v = v + w[:, n] * vals[j]
            else:
                v = w @ np.concatenate([vals[j] for j in layer.inputs])
            vals[layer.id] = v
    return float(vals[c.output][0])


def oracle_tensor(c, domains):
    """Dense tensor of circuit values over the joint domain."""
    out = np.empty(domains)
    for idx in itertools.product(*[range(n) for n in domains]):
        out[idx] = oracle_value(c, np.asarray(idx, dtype=float))
    return out


def oracle_marginal(c, domains, x):
    """Sum of the dense tensor over every NaN entry of ``x``."""
    t = oracle_tensor(c, domains)
    index = tuple(slice(None) if np.isnan(v) else int(v) for v in x)
    return float(np.sum(t[index]))


def assert_rel_linear(log_a, log_b, rel):
    """Assert ``c_a(x)`` and ``c_b(x)`` agree to relative error ``rel``.

    For values given in log space the relative error of the linear value is
    ``|exp(log_a - log_b) - 1|``, which stays well conditioned when ``log c(x)``
    is close to zero.
    """
    log_a, log_b = np.asarray(log_a, dtype=float), np.asarray(log_b, dtype=float)
    both_zero = np.isneginf(log_a) & np.isneginf(log_b)
    err = np.abs(np.expm1(np.where(both_zero, 0.0, log_a - log_b)))
    assert np.all(err <= rel), f"max relative error {err.max():.3e} > {rel:.1e}"


def random_batch(rng, n, d, C=2, p_missing=0.0):
    X = rng.integers(0, C, size=(n, d)).astype(float)
    X[rng.random((n, d)) < p_missing] = np.nan
    return X


def insert_random_sums(c, rng):
    """Follow every non-output sum layer by a fresh random square sum layer."""
    layers, params, new_id = [], dict(c.params), {}
    for la in c.layers:
        nid = len(layers)
        layers.append(Layer(nid, la.kind, la.scope, la.width, tuple(new_id[j] for j in la.inputs), la.family,
                            la.param, la.diagonal, la.block, la.role))
        new_id[la.id] = nid
        if la.kind == "sum" and la.id != c.output:
            name = f"extra{la.id}"
            params[name] = Parameter(rng.uniform(0.1, 1.0, (la.width, la.width)), "clamp")
            layers.append(Layer(nid + 1, "sum", la.scope, la.width, (nid,), param=name))
            new_id[la.id] = nid + 1
    return Circuit(layers, new_id[c.output], c.num_vars, params, c.meta)


def finite_difference(c, X, name, h=1e-5):
    p = c.params[name].value
    out = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = nll(c, X)
        p[idx] = old - h
        down = nll(c, X)
        p[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def max_rel_error(grads, fds, floor=1e-6):
    """Largest entry-wise relative error; the floor absorbs finite-difference
    round-off (about 1e-11 at h=1e-5) for gradients that are exactly zero."""
    worst = 0.0
    for name, fd in fds.items():
        err = np.abs(grads[name] - fd) / np.maximum(np.abs(fd), floor)
        worst = max(worst, float(err.max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -----------------------------------------------------------------

_CRITERIA: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported as PASS/FAIL")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    name = marker.args[0]
    verdict = "PASS" if call.excinfo is None else "FAIL"
    detail = getattr(item, "criterion_detail", "")
    if call.excinfo is not None:
        detail = str(call.excinfo.value).splitlines()[0][:160] if str(call.excinfo.value) else call.excinfo.typename
    _CRITERIA[name] = [verdict, detail]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (verdict, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{verdict} {name}: {detail}" if detail else f"{verdict} {name}")


@pytest.fixture
def report(request):
    """Attach a one-line measurement summary to the running acceptance criterion."""

    def _report(text):
        request.node.criterion_detail = text

    return _report
