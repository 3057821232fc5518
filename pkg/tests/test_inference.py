import itertools

import numpy as np
import pytest
from conftest import LAYER_NAMES, RG_NAMES, compile_small, oracle_tensor, oracle_value
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import chisquare

from tenscirc import (
    Circuit,
    GuardError,
    InputError,
    Layer,
    Parameter,
    PreconditionError,
    build_lt,
    build_qg,
    compile_circuit,
    evaluate_linear,
    fold,
    forward,
    log_partition,
    marginal,
    normalize,
    reconstruct_tensor,
    sample,
)
from tenscirc.families import Categorical, Embedding

ALL_STATES_4 = np.array(list(itertools.product(range(2), repeat=4)), dtype=float)


@pytest.mark.parametrize("rg_kind", RG_NAMES)
@pytest.mark.parametrize("layer", LAYER_NAMES)
def test_forward_matches_oracle(rg_kind, layer):
    c = compile_small(rg_kind, layer, K=2, seed=5)
    expected = np.log([oracle_value(c, x) for x in ALL_STATES_4])
    np.testing.assert_allclose(forward(c, ALL_STATES_4), expected, rtol=1e-10)


def test_marginal_two_of_four_vars():
    c = compile_small("qg", "cp", K=3, seed=1)
    t = oracle_tensor(c, (2, 2, 2, 2))
    X = np.array([[0, 1, np.nan, np.nan], [1, 1, np.nan, np.nan]])
    expected = np.log([t[0, 1].sum(), t[1, 1].sum()])
    np.testing.assert_allclose(marginal(c, X), expected, rtol=1e-10)
    np.testing.assert_allclose(marginal(c, np.array([[0, 1, 1, 0], [1, 1, 0, 0]]), [2, 3]), expected, rtol=1e-10)


def test_marginal_nothing_equals_forward():
    c = compile_small("pd", "tucker", K=2)
    np.testing.assert_array_equal(marginal(c, ALL_STATES_4, []), forward(c, ALL_STATES_4))


def test_marginal_everything_is_log_partition():
    c = compile_small("qt2", "cpt", K=3)
    full = marginal(c, np.zeros((1, 4)), [0, 1, 2, 3])[0]
    assert full == pytest.approx(log_partition(c), rel=1e-12)
    assert np.exp(log_partition(c)) == pytest.approx(oracle_tensor(c, (2,) * 4).sum(), rel=1e-10)


def test_integer_minus_one_marks_marginalized():
    c = compile_small("lt", "cp", K=2)
    X_int = np.array([[0, -1, 1, -1]])
    X_nan = np.array([[0, np.nan, 1, np.nan]])
    np.testing.assert_array_equal(forward(c, X_int), forward(c, X_nan))


@pytest.mark.parametrize("layer", LAYER_NAMES)
def test_softmax_circuit_is_normalized(layer):
    c = compile_small("qg", layer, K=3, reparam="softmax")
    assert abs(log_partition(c)) <= 1e-10


def test_doubling_a_sum_weight_increases_log_partition():
    c = compile_small("lt", "cp", K=2, reparam="none")
    inner = next(la for la in c.layers if la.kind == "sum" and la.id != c.output)
    before = log_partition(c)
    c.params[inner.param].value[0, 0] *= 2.0
    assert log_partition(c) > before


def test_scaling_root_weights_leaves_distribution_unchanged():
    c = compile_small("lt", "cpt", K=2, reparam="none")
    root = c.layers[c.output]
    p_before = forward(c, ALL_STATES_4) - log_partition(c)
    c.params[root.param].value *= 3.7
    p_after = forward(c, ALL_STATES_4) - log_partition(c)
    np.testing.assert_allclose(p_after, p_before, rtol=1e-12)
    inner = next(la for la in c.layers if la.kind == "sum" and la.id != c.output)
    c.params[inner.param].value[0, 0] *= 5.0
    assert not np.allclose(forward(c, ALL_STATES_4) - log_partition(c), p_before, rtol=1e-6)


def test_binomial_inputs_match_oracle():
    rg = build_lt(2)
    c = compile_circuit(rg, 3, "cp", "binomial:3", reparam="exp", seed=2)
    states = np.array(list(itertools.product(range(4), repeat=2)), dtype=float)
    expected = np.log([oracle_value(c, x) for x in states])
    np.testing.assert_allclose(forward(c, states), expected, rtol=1e-10)
    assert np.exp(log_partition(c)) == pytest.approx(np.exp(expected).sum(), rel=1e-10)


def test_gaussian_inputs_match_oracle_and_integrate(rng):
    c = compile_circuit(build_lt(2), 2, "cpt", "gaussian", reparam="clamp", seed=3)
    X = rng.normal(size=(20, 2))
    expected = np.log([oracle_value(c, x) for x in X])
    np.testing.assert_allclose(forward(c, X), expected, rtol=1e-10)
    # integrating out the second variable numerically matches the marginal query
    x0 = 0.3
    num, _ = integrate.quad(lambda y: oracle_value(c, np.array([x0, y])), -30, 30, limit=200)
    assert np.exp(marginal(c, np.array([[x0, np.nan]]))[0]) == pytest.approx(num, rel=1e-7)


def test_zero_probability_inputs_propagate_without_nan():
    c = compile_small("qg", "cp", K=2, reparam="none")
    for la in c.layers:
        if la.kind == "input" and la.scope == (0,):
            c.params[la.param].value[:, 1] = -np.inf
    out = forward(c, ALL_STATES_4)
    assert not np.any(np.isnan(out))
    assert np.all(np.isneginf(out[ALL_STATES_4[:, 0] == 1]))
    assert np.all(np.isfinite(out[ALL_STATES_4[:, 0] == 0]))


def test_zero_sum_weight_is_ignored():
    c = compile_small("lt", "tucker", K=2, reparam="none")
    root = c.layers[c.output]
    c.params[root.param].value[0, 0] = 0.0
    expected = np.log([oracle_value(c, x) for x in ALL_STATES_4])
    np.testing.assert_allclose(forward(c, ALL_STATES_4), expected, rtol=1e-10)


def test_out_of_range_category_names_variable():
    c = compile_small("lt", "cp")
    with pytest.raises(InputError, match="variable 2"):
        forward(c, np.array([[0, 1, 5, 0]]))


def test_wrong_batch_width():
    with pytest.raises(InputError):
        forward(compile_small("lt", "cp"), np.zeros((2, 3)))


# -- dense reconstruction --------------------------------------------------------

def test_reconstruct_single_categorical():
    fam = Categorical(4)
    logits = np.array([[0.1, 1.0, -0.3, 0.5]])
    params = {"a": Parameter(logits, "family")}
    c = Circuit([Layer(0, "input", (0,), 1, family=fam, param="a")], 0, 1, params)
    pmf = np.exp(logits[0]) / np.exp(logits[0]).sum()
    np.testing.assert_allclose(reconstruct_tensor(c), pmf, rtol=1e-12)


@pytest.mark.parametrize("rg_kind", ["lt", "qg", "pd"])
def test_reconstruct_sums_to_partition(rg_kind):
    c = compile_small(rg_kind, "tucker", K=3)
    t = reconstruct_tensor(c)
    assert np.all(t >= 0)
    assert t.sum() == pytest.approx(np.exp(log_partition(c)), rel=1e-10)


def test_reconstruct_guard():
    c = compile_circuit(build_qg(4, 4), 2, "cp", "categorical:4")
    with pytest.raises(GuardError):
        reconstruct_tensor(c)


def test_linear_and_log_paths_agree(rng):
    c = compile_circuit(build_qg(3, 3), 3, "cp", "categorical:3", seed=9)
    X = rng.integers(0, 3, size=(50, 9))
    np.testing.assert_allclose(np.log(evaluate_linear(c, X)), forward(c, X), rtol=1e-8)


def test_embedding_marginalization_rejected():
    fam = Embedding(3)
    params = {"a": Parameter(np.ones((3, 1)), "family")}
    c = Circuit([Layer(0, "input", (0,), 1, family=fam, param="a")], 0, 1, params)
    with pytest.raises(InputError):
        marginal(c, np.array([[np.nan]]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 3), st.lists(st.sampled_from([0, 1, None]), min_size=4, max_size=4))
def test_marginalization_consistency(seed, var, evidence):
    c = compile_small("qg", "cp", K=2, seed=seed % 1000)
    x = np.array([np.nan if v is None else v for v in evidence], dtype=float)
    coarse = x.copy()
    coarse[var] = np.nan
    fine = np.repeat(coarse[None, :], 2, axis=0)
    fine[:, var] = [0, 1]
    total = np.logaddexp(*marginal(c, fine))
    assert total == pytest.approx(marginal(c, coarse[None, :])[0], rel=1e-10, abs=1e-12)


# -- sampling --------------------------------------------------------------------

def _three_var_circuit(seed=0):
    c = compile_circuit(build_lt(3), 3, "cpt", "categorical:2", reparam="clamp", seed=seed)
    return normalize(c)


def test_sample_degenerate_distribution():
    c = compile_circuit(build_lt(3), 2, "cp", "categorical:3", reparam="softmax")
    for la in c.layers:
        if la.kind == "input":
            v = np.full((2, 3), -np.inf)
            v[:, 2] = 0.0
            c.params[la.param].value[...] = v
    assert np.all(sample(c, 50, 0) == 2)


def test_sample_total_variation_and_chi_square():
    c = _three_var_circuit()
    states = np.array(list(itertools.product(range(2), repeat=3)), dtype=float)
    p = np.exp(forward(c, states))
    t = oracle_tensor(c, (2, 2, 2)).reshape(-1)
    np.testing.assert_allclose(p, t, rtol=1e-10)
    assert p.sum() == pytest.approx(1.0, abs=1e-10)
    n = 200_000
    S = sample(c, n, seed=7).astype(int)
    counts = np.bincount(S[:, 0] * 4 + S[:, 1] * 2 + S[:, 2], minlength=8)
    tv = 0.5 * np.abs(counts / n - p).sum()
    assert tv < 0.01
    assert chisquare(counts, p * n).pvalue > 1e-3


def test_sample_bit_identical_per_seed():
    c = _three_var_circuit(seed=2)
    a, b = sample(c, 1000, seed=11), sample(c, 1000, seed=11)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample(c, 1000, seed=12))


def test_sample_folded_view():
    c = _three_var_circuit()
    np.testing.assert_array_equal(sample(fold(c), 100, 3), sample(c, 100, 3))


def test_sample_requires_normalized_circuit():
    c = compile_circuit(build_lt(3), 2, "cp", reparam="clamp")
    with pytest.raises(PreconditionError):
        sample(c, 10)


def test_sample_gaussian_inputs_moments():
    c = compile_circuit(build_lt(2), 2, "cpt", "gaussian", reparam="softmax", seed=1)
    S = sample(c, 100_000, seed=0)
    # mean of the mixture from the oracle by numerical integration over x0
    m, _ = integrate.quad(lambda y: y * np.exp(marginal(c, np.array([[y, np.nan]]))[0]), -20, 20, limit=200)
    assert S[:, 0].mean() == pytest.approx(m, abs=0.02)
