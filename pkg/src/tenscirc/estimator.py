"""Scikit-learn style density estimator wrapping compile + train."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .circuit import compile_circuit
from .exceptions import InputError
from .families import Categorical, Gaussian
from .inference import log_partition, sample
from .learning import TrainConfig, log_likelihood, needs_partition, normalize, train
from .region_graph import build_region_graph

__all__ = ["TensorizedCircuitDensity"]


def _check_X(X, n_features=None):
    X = check_array(X, dtype=float, ensure_all_finite="allow-nan")
    if n_features is not None and X.shape[1] != n_features:
        raise InputError(f"X has {X.shape[1]} features, the estimator was fitted with {n_features}")
    return X


class TensorizedCircuitDensity(DensityMixin, BaseEstimator):
    """Density estimator backed by a tensorized probabilistic circuit.

    Parameters
    ----------
    region_graph : {"lt", "rnd", "pd", "qt2", "qt4", "qg", "cl"}, default="qg"
    layer : {"tucker", "cp", "cpt", "cps", "cpxs"}, default="cp"
    n_units : int, default=8
        Layer width ``K``.
    family : {"categorical", "gaussian"}, default="categorical"
    n_categories : int, optional
        Number of categories; inferred from the training data if omitted.
    image_shape : tuple of int, optional
        ``(height, width)`` for image region graphs. Square inputs are
        detected automatically, otherwise a ``1 x d`` strip is used.
    reparam : {"clamp", "softmax", "exp"}, default="clamp"
    learn_mixing : bool, default=False
    learning_rate : float, default=1e-2
    batch_size : int, default=256
    max_epochs : int, default=200
    patience : int, default=5
    random_state : int, default=0

    Attributes
    ----------
    circuit_ : Circuit
        The trained circuit.
    history_ : list of dict
        Per-epoch training metrics.
    log_z_ : float
        Log partition function of ``circuit_``.
    n_features_in_ : int

    Examples
    --------
    >>> import numpy as np
    >>> X = np.random.default_rng(0).integers(0, 2, size=(200, 4))
    >>> est = TensorizedCircuitDensity(region_graph="qt4", n_units=2, max_epochs=2).fit(X)
    >>> est.score_samples(X[:3]).shape
    (3,)
    """

    def __init__(self, region_graph="qg", layer="cp", n_units=8, family="categorical",
                 n_categories=None, image_shape=None, reparam="clamp", learn_mixing=False,
                 learning_rate=1e-2, batch_size=256, max_epochs=200, patience=5, random_state=0):
        self.region_graph = region_graph
        self.layer = layer
        self.n_units = n_units
        self.family = family
        self.n_categories = n_categories
        self.image_shape = image_shape
        self.reparam = reparam
        self.learn_mixing = learn_mixing
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def _shape(self, d):
        if self.image_shape is not None:
            h, w = self.image_shape
            if h * w != d:
                raise InputError(f"image_shape {self.image_shape} does not match {d} features")
            return h, w
        side = int(round(math.sqrt(d)))
        return (side, side) if side * side == d else (1, d)

    def fit(self, X, y=None, X_valid=None):
        """Compile a circuit for ``X`` and fit it by maximum likelihood."""
        X = _check_X(X)
        d = X.shape[1]
        if self.family == "categorical":
            obs = X[~np.isnan(X)]
            if np.any(obs != np.floor(obs)) or np.any(obs < 0):
                raise InputError("categorical data must be non-negative integers")
            n_cat = self.n_categories or int(obs.max()) + 1
            fam = Categorical(n_cat)
        elif self.family == "gaussian":
            fam = Gaussian()
        else:
            raise InputError(f"unknown family {self.family!r}")
        h, w = self._shape(d)
        data = None
        if self.region_graph == "cl":
            data = np.nan_to_num(X, nan=0).astype(np.int64)
        rg = build_region_graph(self.region_graph, num_vars=d, height=h, width=w,
                                seed=self.random_state, data=data,
                                num_categories=getattr(fam, "num_categories", None))
        c = compile_circuit(rg, self.n_units, self.layer, fam, reparam=self.reparam,
                            learn_mixing=self.learn_mixing, folded=True, seed=self.random_state)
        config = TrainConfig(lr=self.learning_rate, batch_size=self.batch_size, epochs=self.max_epochs,
                             patience=self.patience, seed=self.random_state)
        X_valid = None if X_valid is None else _check_X(X_valid, d)
        self.circuit_, self.history_ = train(c, X, X_valid, config)
        self.log_z_ = log_partition(self.circuit_) if needs_partition(self.circuit_) else 0.0
        self.n_features_in_ = d
        return self

    def score_samples(self, X):
        """Normalized log-likelihood ``log p(x)`` of each row (NaN entries are marginalized)."""
        check_is_fitted(self, "circuit_")
        X = _check_X(X, self.n_features_in_)
        return log_likelihood(self.circuit_, X) - self.log_z_

    def score(self, X, y=None):
        """Mean log-likelihood of ``X``."""
        return float(np.mean(self.score_samples(X)))

    def bpd(self, X):
        """Bits per dimension of ``X``."""
        return -self.score(X) / (self.n_features_in_ * math.log(2.0))

    def sample(self, n_samples=1, random_state=None):
        """Draw exact samples from the fitted distribution."""
        check_is_fitted(self, "circuit_")
        seed = self.random_state if random_state is None else random_state
        return sample(normalize(self.circuit_), n_samples, seed)
