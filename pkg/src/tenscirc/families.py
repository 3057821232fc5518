"""Input-layer distribution families.

Every family works on a stacked parameter tensor with a leading fold axis
``F`` so that folded and unfolded evaluation share one code path. Values of
a univariate input are passed as a float array of shape ``(F, B)`` where NaN
marks a marginalized variable.
"""
from __future__ import annotations

import numpy as np
from scipy.special import gammaln, log_softmax, ndtri, softmax

from .exceptions import InputError

__all__ = [
    "Family",
    "Categorical",
    "Gaussian",
    "Binomial",
    "Embedding",
    "family_from_spec",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class Family:
    """Base class; subclasses define parameter layout and kernels."""

    name = "family"
    normalized = True

    @property
    def key(self) -> tuple:
        return (self.name,)

    def spec(self) -> str:
        return self.name

    def __eq__(self, other):
        return isinstance(other, Family) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return self.spec()

    def param_shape(self, width: int) -> tuple[int, ...]:
        raise NotImplementedError

    def init(self, width: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def check_values(self, x: np.ndarray) -> None:
        """Raise :class:`InputError` for observed values outside the support."""

    def log_prob(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Log-densities of shape ``(F, B, K)``; marginalized entries give 0."""
        raise NotImplementedError

    def grad(self, theta: np.ndarray, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. ``theta`` given ``g = dL/dlog_prob`` of shape ``(F, B, K)``."""
        raise NotImplementedError

    def linear(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_prob(theta, x))

    def sample(self, theta: np.ndarray, units: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF draw for one fold: ``theta`` without fold axis, ``u`` uniform."""
        raise NotImplementedError

    def log_normalizer(self, theta: np.ndarray) -> np.ndarray:
        """Log of the per-unit total mass, shape ``(F, K)``."""
        return np.zeros(theta.shape[:2])


class Categorical(Family):
    """Categorical over ``{0..C-1}`` with logits of shape ``(K, C)``."""

    name = "categorical"

    def __init__(self, num_categories: int):
        if num_categories < 1:
            raise InputError("categorical needs at least one category")
        self.num_categories = int(num_categories)

    @property
    def key(self):
        return (self.name, self.num_categories)

    def spec(self):
        return f"categorical:{self.num_categories}"

    def param_shape(self, width):
        return (width, self.num_categories)

    def init(self, width, rng):
        return rng.normal(0.0, 0.5, size=self.param_shape(width))

    def check_values(self, x):
        obs = x[~np.isnan(x)]
        if obs.size and (
            np.any(obs < 0) or np.any(obs >= self.num_categories) or np.any(obs != np.floor(obs))
        ):
            bad = obs[(obs < 0) | (obs >= self.num_categories) | (obs != np.floor(obs))][0]
            raise InputError(
                f"category value {bad!r} outside 0..{self.num_categories - 1}"
            )

    def _index(self, x):
        mask = np.isnan(x)
        idx = np.where(mask, 0, x).astype(np.intp)
        return idx, mask

    def log_prob(self, theta, x):
        lp = log_softmax(theta, axis=-1)  # (F, K, C)
        idx, mask = self._index(x)  # (F, B)
        out = np.take_along_axis(lp, idx[:, None, :], axis=2)  # (F, K, B)
        out = np.swapaxes(out, 1, 2)
        out[mask] = 0.0
        return out

    def grad(self, theta, x, g):
        f_, k_, c_ = theta.shape
        idx, mask = self._index(x)
        g = np.where(mask[..., None], 0.0, g)
        p = softmax(theta, axis=-1)
        flat = (np.arange(f_)[:, None] * c_ + idx).ravel()
        gflat = g.reshape(-1, k_)
        counts = np.empty((f_ * c_, k_))
        for k in range(k_):
            counts[:, k] = np.bincount(flat, weights=gflat[:, k], minlength=f_ * c_)
        counts = counts.reshape(f_, c_, k_).transpose(0, 2, 1)
        return counts - p * g.sum(axis=1)[..., None]

    def sample(self, theta, units, u):
        cdf = np.cumsum(softmax(theta[units], axis=-1), axis=-1)
        return np.minimum((cdf < u[:, None]).sum(axis=1), self.num_categories - 1).astype(float)


class Binomial(Family):
    """Binomial with ``n`` trials and a per-unit logit, parameters ``(K, 1)``."""

    name = "binomial"

    def __init__(self, num_trials: int):
        if num_trials < 1:
            raise InputError("binomial needs at least one trial")
        self.num_trials = int(num_trials)
        k = np.arange(self.num_trials + 1)
        self._log_choose = gammaln(self.num_trials + 1) - gammaln(k + 1) - gammaln(self.num_trials - k + 1)

    @property
    def key(self):
        return (self.name, self.num_trials)

    def spec(self):
        return f"binomial:{self.num_trials}"

    def param_shape(self, width):
        return (width, 1)

    def init(self, width, rng):
        return rng.normal(0.0, 0.5, size=self.param_shape(width))

    def check_values(self, x):
        obs = x[~np.isnan(x)]
        if obs.size and (np.any(obs < 0) or np.any(obs > self.num_trials) or np.any(obs != np.floor(obs))):
            raise InputError(f"binomial value outside 0..{self.num_trials}")

    def log_prob(self, theta, x):
        logit = theta[..., 0][:, None, :]  # (F, 1, K)
        mask = np.isnan(x)
        xv = np.where(mask, 0.0, x)[..., None]  # (F, B, 1)
        log_p = -np.logaddexp(0.0, -logit)
        log_q = -np.logaddexp(0.0, logit)
        out = self._log_choose[xv.astype(np.intp)] + xv * log_p + (self.num_trials - xv) * log_q
        out[mask] = 0.0
        return out

    def grad(self, theta, x, g):
        mask = np.isnan(x)
        xv = np.where(mask, 0.0, x)[..., None]
        g = np.where(mask[..., None], 0.0, g)
        p = 1.0 / (1.0 + np.exp(-theta[..., 0]))[:, None, :]
        return (g * (xv - self.num_trials * p)).sum(axis=1)[..., None]

    def sample(self, theta, units, u):
        p = 1.0 / (1.0 + np.exp(-theta[units, 0]))
        k = np.arange(self.num_trials + 1)
        logpmf = self._log_choose[None, :] + k[None, :] * np.log(p)[:, None] + (
            self.num_trials - k[None, :]
        ) * np.log1p(-p)[:, None]
        cdf = np.cumsum(np.exp(logpmf), axis=1)
        return np.minimum((cdf < u[:, None]).sum(axis=1), self.num_trials).astype(float)


class Gaussian(Family):
    """Univariate Gaussian; parameters ``(K, 2)`` hold mean and log-stddev.

    The standard deviation is floored at ``min_std`` to keep densities bounded.
    """

    name = "gaussian"

    def __init__(self, min_std: float = 1e-3):
        self.min_std = float(min_std)

    @property
    def key(self):
        return (self.name,)

    def param_shape(self, width):
        return (width, 2)

    def init(self, width, rng):
        out = np.zeros(self.param_shape(width))
        out[:, 0] = rng.normal(0.0, 1.0, size=width)
        return out

    def check_values(self, x):
        if np.any(np.isinf(x)):
            raise InputError("gaussian inputs must be finite")

    def _std(self, theta):
        return np.maximum(np.exp(theta[..., 1]), self.min_std)

    def log_prob(self, theta, x):
        mu = theta[..., 0][:, None, :]
        sd = self._std(theta)[:, None, :]
        mask = np.isnan(x)
        z = (np.where(mask, 0.0, x)[..., None] - mu) / sd
        out = -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI
        out[mask] = 0.0
        return out

    def grad(self, theta, x, g):
        mu = theta[..., 0][:, None, :]
        sd = self._std(theta)[:, None, :]
        mask = np.isnan(x)
        g = np.where(mask[..., None], 0.0, g)
        z = (np.where(mask, 0.0, x)[..., None] - mu) / sd
        out = np.empty_like(theta)
        out[..., 0] = (g * z / sd).sum(axis=1)
        above = np.exp(theta[..., 1]) > self.min_std
        out[..., 1] = np.where(above, (g * (z * z - 1.0)).sum(axis=1), 0.0)
        return out

    def sample(self, theta, units, u):
        return theta[units, 0] + self._std(theta)[units] * ndtri(u)


class Embedding(Family):
    """Raw lookup table of shape ``(C, K)``: category ``c`` maps to row ``c``.

    Used by factorization bridges where entries can be negative. It does not
    define a normalized distribution, so marginalization is rejected.
    """

    name = "embedding"
    normalized = False

    def __init__(self, num_categories: int):
        self.num_categories = int(num_categories)

    @property
    def key(self):
        return (self.name, self.num_categories)

    def spec(self):
        return f"embedding:{self.num_categories}"

    def param_shape(self, width):
        return (self.num_categories, width)

    def init(self, width, rng):
        return rng.uniform(0.01, 1.01, size=self.param_shape(width))

    def check_values(self, x):
        if np.any(np.isnan(x)):
            raise InputError("embedding inputs cannot be marginalized")
        Categorical.check_values(self, x)

    def linear(self, theta, x):
        self.check_values(x)
        idx = x.astype(np.intp)
        return np.take_along_axis(theta, idx[..., None], axis=1)  # (F, B, K)

    def log_prob(self, theta, x):
        lin = self.linear(theta, x)
        if np.any(lin < 0):
            raise InputError("negative embedding entries cannot be evaluated in log space")
        with np.errstate(divide="ignore"):
            return np.log(lin)

    def grad(self, theta, x, g):
        lin = self.linear(theta, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(lin > 0, g / lin, 0.0)
        f_, c_, k_ = theta.shape
        flat = (np.arange(f_)[:, None] * c_ + x.astype(np.intp)).ravel()
        out = np.empty((f_ * c_, k_))
        qf = q.reshape(-1, k_)
        for k in range(k_):
            out[:, k] = np.bincount(flat, weights=qf[:, k], minlength=f_ * c_)
        return out.reshape(f_, c_, k_)

    def log_normalizer(self, theta):
        with np.errstate(divide="ignore"):
            return np.log(theta.sum(axis=1))

    def sample(self, theta, units, u):
        col = theta[:, units].T
        cdf = np.cumsum(col / col.sum(axis=1, keepdims=True), axis=1)
        return np.minimum((cdf < u[:, None]).sum(axis=1), self.num_categories - 1).astype(float)


def family_from_spec(spec) -> Family:
    """Parse ``"categorical:256"``, ``"gaussian"``, ``"binomial:10"``, ``"embedding:3"``."""
    if isinstance(spec, Family):
        return spec
    name, _, arg = str(spec).partition(":")
    name = name.strip().lower()
    try:
        if name == "categorical":
            return Categorical(int(arg))
        if name == "binomial":
            return Binomial(int(arg))
        if name == "embedding":
            return Embedding(int(arg))
        if name == "gaussian":
            return Gaussian(float(arg)) if arg else Gaussian()
    except ValueError as exc:
        raise InputError(f"bad family argument in {spec!r}") from exc
    raise InputError(f"unknown input family {spec!r}")
