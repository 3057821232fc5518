"""Reparameterizations mapping raw sum-layer parameters to non-negative weights.

All functions operate on the last axis as the "row" axis, so a stacked
``(F, S, K)`` tensor is handled row by row.
"""
from __future__ import annotations

import numpy as np
from scipy.special import softmax

from .exceptions import InputError

__all__ = ["REPARAMS", "CLAMP_EPS", "apply", "backward", "inverse", "project", "is_trainable"]

REPARAMS = ("softmax", "exp", "clamp", "none", "frozen")
CLAMP_EPS = 1e-19


def _check(mode):
    if mode not in REPARAMS:
        raise InputError(f"unknown reparameterization {mode!r}; expected one of {REPARAMS}")


def is_trainable(mode: str) -> bool:
    return mode != "frozen"


def apply(mode: str, theta: np.ndarray, eps: float = CLAMP_EPS) -> np.ndarray:
    """Weights obtained from raw parameters."""
    _check(mode)
    if mode == "softmax":
        return softmax(theta, axis=-1)
    if mode == "exp":
        return np.exp(theta)
    if mode == "clamp":
        return np.maximum(theta, eps)
    return theta


def backward(mode: str, theta: np.ndarray, weights: np.ndarray, grad_w: np.ndarray,
             eps: float = CLAMP_EPS) -> np.ndarray:
    """Chain rule from weight gradients to raw-parameter gradients.

    The clamp subgradient passes where ``theta >= eps`` so that a parameter
    sitting exactly at the projection boundary can still move back up.
    """
    _check(mode)
    if mode == "softmax":
        return weights * (grad_w - np.sum(grad_w * weights, axis=-1, keepdims=True))
    if mode == "exp":
        return grad_w * weights
    if mode == "clamp":
        return np.where(theta >= eps, grad_w, 0.0)
    if mode == "frozen":
        return np.zeros_like(theta)
    return grad_w


def inverse(mode: str, weights: np.ndarray, eps: float = CLAMP_EPS) -> np.ndarray:
    """Raw parameters reproducing ``weights`` (exactly, up to the clamp floor)."""
    _check(mode)
    if mode in ("softmax", "exp"):
        if np.any(weights <= 0):
            raise InputError(f"{mode} reparameterization cannot represent non-positive weights")
        return np.log(weights)
    return np.array(weights, dtype=float, copy=True)


def project(mode: str, theta: np.ndarray, eps: float = CLAMP_EPS) -> None:
    """In-place projection applied after an optimizer step."""
    if mode == "clamp":
        np.maximum(theta, eps, out=theta)
