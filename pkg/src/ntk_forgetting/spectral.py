"""Dense spectral primitives: thin SVD, Gram-Schmidt, complement projectors,
principal angles and explained variance.

Everything here is pure; arrays stored on the frozen dataclasses are marked
read-only so instances can be shared freely.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_RANK_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _check_finite(A: np.ndarray, name: str = "matrix") -> None:
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``A = left @ diag(singulars) @ right.T`` truncated to numerical rank."""

    left: np.ndarray
    singulars: np.ndarray
    right: np.ndarray
    rank_tol: float = DEFAULT_RANK_TOL

    @property
    def rank(self) -> int:
        return self.singulars.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singulars) @ self.right.T

    def singular(self, i: int) -> float:
        """0-based singular value lookup that returns 0 past the rank."""
        return float(self.singulars[i]) if i < self.rank else 0.0


def thin_svd(A, rank_tol: float = DEFAULT_RANK_TOL) -> SvdFactors:
    """Thin SVD keeping singular values above ``rank_tol * sigma_max``.

    Signs are fixed so that the largest-magnitude entry of every right
    singular vector is positive (first such entry on ties).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {A.shape}")
    _check_finite(A)
    if not (0.0 < rank_tol <= 1e-3):
        raise ValueError(f"rank_tol must lie in (0, 1e-3], got {rank_tol}")
    n, p = A.shape
    if n == 0 or p == 0:
        return SvdFactors(_frozen(np.zeros((n, 0))), _frozen(np.zeros(0)), _frozen(np.zeros((p, 0))), rank_tol)

    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    r = int(np.count_nonzero(s > rank_tol * s[0])) if s[0] > 0 else 0
    U, s, V = U[:, :r], s[:r], Vt[:r].T

    if r:
        pivots = np.argmax(np.abs(V), axis=0)
        signs = np.sign(V[pivots, np.arange(r)])
        signs[signs == 0] = 1.0
        U = U * signs
        V = V * signs
    return SvdFactors(_frozen(U), _frozen(s), _frozen(V), rank_tol)


@dataclass(frozen=True)
class OrthonormalBasis:
    """Columns of ``vectors`` are orthonormal; ``labels`` keeps (task, index) provenance."""

    vectors: np.ndarray
    labels: tuple = field(default_factory=tuple)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 2:
            raise ValueError("basis vectors must be a p x m matrix")
        if v.shape[1] > v.shape[0]:
            raise ValueError(f"{v.shape[1]} orthonormal columns cannot live in dimension {v.shape[0]}")
        labels = tuple(self.labels) if self.labels else tuple((0, i) for i in range(v.shape[1]))
        if len(labels) != v.shape[1]:
            raise ValueError("one label per basis column is required")
        object.__setattr__(self, "vectors", _frozen(v))
        object.__setattr__(self, "labels", labels)

    @classmethod
    def empty(cls, dim: int) -> "OrthonormalBasis":
        return cls(np.zeros((dim, 0)), ())

    @classmethod
    def from_columns(cls, M, labels=None, dep_tol: float = 1e-10) -> "OrthonormalBasis":
        """Orthonormalize the columns of ``M`` in order, dropping dependent ones."""
        M = np.asarray(M, dtype=float)
        basis = cls.empty(M.shape[0])
        labels = list(labels) if labels is not None else [(0, i) for i in range(M.shape[1])]
        for j in range(M.shape[1]):
            grown = gram_schmidt_append(basis, M[:, j], dep_tol, label=labels[j])
            if grown is not None:
                basis = grown
        return basis

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    @property
    def is_full(self) -> bool:
        return self.size >= self.dim


def _remove_span(P: np.ndarray, v: np.ndarray) -> np.ndarray:
    # Classical Gram-Schmidt applied twice: one pass leaves O(eps*|v|) in span(P),
    # which is large relative to the result when v is nearly inside the span.
    if P.shape[1] == 0:
        return np.array(v, dtype=float, copy=True)
    out = v - P @ (P.T @ v)
    return out - P @ (P.T @ out)


def gram_schmidt_append(basis: OrthonormalBasis, v, dep_tol: float = 1e-10, label=None):
    """Return ``basis`` grown by the normalized residual of ``v``, or None if rejected.

    ``v`` is rejected when its residual norm after removing the span is at most
    ``dep_tol * |v|`` (a zero vector is always rejected).
    """
    if dep_tol <= 0:
        raise ValueError("dep_tol must be positive")
    v = np.asarray(v, dtype=float).ravel()
    if v.shape[0] != basis.dim:
        raise ValueError(f"vector of length {v.shape[0]} does not match basis dimension {basis.dim}")
    _check_finite(v, "vector")
    norm_v = np.linalg.norm(v)
    if norm_v == 0.0 or basis.is_full:
        return None
    resid = _remove_span(basis.vectors, v)
    norm_r = np.linalg.norm(resid)
    if norm_r <= dep_tol * norm_v:
        return None
    u = resid / norm_r
    label = label if label is not None else (0, basis.size)
    return OrthonormalBasis(np.column_stack([basis.vectors, u]), basis.labels + (label,))


def _as_matrix(B) -> np.ndarray:
    return B.vectors if isinstance(B, OrthonormalBasis) else np.asarray(B, dtype=float)


def principal_angle_cosines(A, B) -> np.ndarray:
    """Cosines of the principal angles between two orthonormal bases, descending."""
    A, B = _as_matrix(A), _as_matrix(B)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"ambient dimensions differ: {A.shape[0]} vs {B.shape[0]}")
    k = min(A.shape[1], B.shape[1])
    if k == 0:
        return np.zeros(0)
    s = np.linalg.svd(A.T @ B, compute_uv=False)[:k]
    return np.clip(s, 0.0, 1.0)


@dataclass(frozen=True)
class ComplementProjector:
    """The map ``v -> (I - P P^T) v`` for an orthonormal ``P``; never formed densely."""

    basis: OrthonormalBasis

    @classmethod
    def identity(cls, dim: int) -> "ComplementProjector":
        return cls(OrthonormalBasis.empty(dim))

    @property
    def dim(self) -> int:
        return self.basis.dim

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise ValueError(f"leading dimension {v.shape[0]} does not match projector dimension {self.dim}")
        return _remove_span(self.basis.vectors, v)

    def apply_rows(self, M) -> np.ndarray:
        """Right-multiply: ``M @ T`` for a matrix whose rows live in parameter space."""
        M = np.asarray(M, dtype=float)
        return self.apply(M.T).T

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.dim))


def project_complement(T: ComplementProjector, v) -> np.ndarray:
    return T.apply(v)


def explained_variance_ratio(singulars, d: int) -> float:
    """Fraction of squared spectrum captured by the leading ``d`` singular values."""
    s = np.asarray(singulars, dtype=float)
    if d < 0 or d > s.shape[0]:
        raise ValueError(f"d={d} outside [0, {s.shape[0]}]")
    if np.any(s < 0):
        raise ValueError("singular values must be non-negative")
    sq = s**2
    total = sq.sum()
    if total == 0.0:
        raise ValueError("explained variance is undefined for an all-zero spectrum")
    return float(min(1.0, sq[:d].sum() / total))
