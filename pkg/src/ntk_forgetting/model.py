"""Linearized predictor ``f(x) = phi(x) (w - w0)`` over a frozen feature map.

The feature map stands in for the (constant) tangent features of a wide
network; with the identity map the model is plain linear regression.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import ComplementProjector
from .tasks import rng_stream

FEATURE_KINDS = ("identity", "random_fourier", "random_relu")


@dataclass(frozen=True)
class FeatureMap:
    kind: str
    input_dim: int
    param_dim: int
    map_seed: int = 0
    bandwidth: float = 1.0
    weights: np.ndarray | None = field(default=None, repr=False)

    def __call__(self, X) -> np.ndarray:
        return apply_feature_map(self, X)


def make_feature_map(kind: str, input_dim: int, param_dim: int | None = None, map_seed: int = 0,
                     bandwidth: float = 1.0) -> FeatureMap:
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature map {kind!r}; choose from {FEATURE_KINDS}")
    p = input_dim if param_dim is None else param_dim
    if kind == "identity":
        if p != input_dim:
            raise ValueError("identity map requires param_dim == input_dim")
        return FeatureMap(kind, input_dim, p, map_seed, bandwidth)
    rng = rng_stream(map_seed, 7)
    if kind == "random_fourier":
        if p % 2:
            raise ValueError("random_fourier needs an even param_dim (cos/sin pairs)")
        W = rng.standard_normal((input_dim, p // 2)) / bandwidth
    else:
        W = rng.standard_normal((input_dim, p)) / np.sqrt(input_dim)
    W.setflags(write=False)
    return FeatureMap(kind, input_dim, p, map_seed, bandwidth, W)


def apply_feature_map(fmap: FeatureMap, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != fmap.input_dim:
        raise ValueError(f"inputs have {X.shape[1]} columns, feature map expects {fmap.input_dim}")
    if fmap.kind == "identity":
        return X
    Z = X @ fmap.weights
    scale = np.sqrt(2.0 / fmap.param_dim)
    if fmap.kind == "random_fourier":
        return scale * np.hstack([np.cos(Z), np.sin(Z)])
    return scale * np.maximum(Z, 0.0)


@dataclass(frozen=True)
class Weights:
    """Parameter matrix (one column per output) and its fixed origin w0 = 0."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if not np.all(np.isfinite(v)):
            raise ValueError("weights must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, p: int, c: int = 1) -> "Weights":
        return cls(np.zeros((p, c)))

    @property
    def origin(self) -> np.ndarray:
        return np.zeros_like(self.values)

    @property
    def shape(self):
        return self.values.shape

    def __add__(self, delta) -> "Weights":
        return Weights(self.values + np.asarray(delta, dtype=float).reshape(self.values.shape))

    def __sub__(self, other: "Weights") -> np.ndarray:
        return self.values - other.values


def _values(w) -> np.ndarray:
    return w.values if isinstance(w, Weights) else np.asarray(w, dtype=float)


def predict(fmap: FeatureMap, w, X) -> np.ndarray:
    """``phi(X) @ (w - w0)`` with n x c output."""
    W = _values(w)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != fmap.param_dim:
        raise ValueError(f"weights have {W.shape[0]} rows, feature map produces {fmap.param_dim}")
    return apply_feature_map(fmap, X) @ W


def kernel(fmap: FeatureMap, X_a, X_b, T: ComplementProjector | None = None) -> np.ndarray:
    """Tangent kernel between two input sets, optionally through a complement projector."""
    Fa = apply_feature_map(fmap, X_a)
    Fb = apply_feature_map(fmap, X_b)
    if T is not None:
        Fa, Fb = T.apply_rows(Fa), T.apply_rows(Fb)
    return Fa @ Fb.T
