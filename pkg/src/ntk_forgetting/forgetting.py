"""Drift, closed-form forgetting, NTK overlap matrices and their upper bounds.

For each task ``k`` write ``phi(X_k) = U_k S_k V_k^T`` and let ``T_{k-1}`` be
the complement projector in force while task ``k`` was trained.  The drift of
source task ``s`` after training up to target ``t`` decomposes as

    delta = sum_{k=s+1..t} U_s S_s O_k M_k r_k,
    O_k   = V_s^T T_{k-1} V_k,
    M_k   = S_k U_k^T (phi~_k phi~_k^T + lam I)^{-1},   phi~_k = phi(X_k) T_{k-1},

with ``r_k`` the residual targets of task ``k``.  For sgd ``T = I`` and ``M_k``
reduces to ``S_k (S_k^2 + lam)^{-1} U_k^T``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .learners import (CONDITION_WARN, PROJECTION_METHODS, ConditioningWarning, Hyper, LearnerState,
                       train_sequence, with_hyper)
from .model import FeatureMap, apply_feature_map
from .spectral import ComplementProjector, SvdFactors, thin_svd
from .tasks import TaskDataset, TaskSequence


def drift(fmap: FeatureMap, w_source, w_target, source_task: TaskDataset) -> np.ndarray:
    """Prediction change on the source inputs, read at each row's true-class output."""
    Ws = getattr(w_source, "values", w_source)
    Wt = getattr(w_target, "values", w_target)
    D = apply_feature_map(fmap, source_task.features) @ (np.asarray(Wt) - np.asarray(Ws))
    return D[np.arange(source_task.n), source_task.true_class()]


@dataclass
class DriftRecord:
    source: int
    target: int
    drift: np.ndarray
    cf: float
    cf_closed_form: float
    bound: float
    bound_sum_of_squares: float
    overlap_singulars: dict = field(default_factory=dict)
    term_cf: dict = field(default_factory=dict)

    @property
    def top_overlap(self) -> float:
        """Largest overlap singular value of the last summand (the source -> target matrix)."""
        s = self.overlap_singulars.get(self.target)
        return float(s[0]) if s is not None and len(s) else 0.0


@dataclass
class CfResult:
    value: float
    drift: np.ndarray
    terms: dict  # k -> n_s x c contribution U_s S_s O_k M_k r_k
    term_cf: dict  # k -> squared norm of the k-th contribution alone


@dataclass
class BoundResult:
    value: float
    sum_of_squares: float
    coefficients: dict  # k -> prefactor * overlap norms
    residual_norms: dict  # k -> per-column |M_k r_k|


class ForgettingAnalysis:
    """Closed-form forgetting quantities for one trained trajectory.

    ``memory_schedule[k-1]`` (an OrthonormalBasis or MemoryBasis) is replayed
    as the projector for task ``k``; residual targets come from the optima.
    """

    def __init__(self, method: str, feature_map: FeatureMap, sequence: TaskSequence, lam: float,
                 memory_schedule, optima, components: int = 0, pca_used_all_rows=None,
                 normalize: bool = False):
        if method == "a_gem":
            raise ValueError("no closed-form forgetting is defined for a_gem")
        if lam <= 0:
            raise ValueError("closed-form forgetting needs lambda > 0")
        self.n_tasks = min(len(sequence), len(memory_schedule), len(optima) - 1)
        if self.n_tasks < 1:
            raise ValueError("the trajectory contains no trained task")
        self.method = method
        self.feature_map = feature_map
        self.sequence = sequence
        self.lam = lam
        self.components = components
        self.normalize = normalize
        self.pca_used_all_rows = dict(pca_used_all_rows or {})
        self.optima = [getattr(w, "values", w) for w in optima]
        self._features = {}
        self._svds = {}
        self._projectors = {}
        for k in range(1, self.n_tasks + 1):
            mem = memory_schedule[k - 1]
            basis = getattr(mem, "basis", mem)
            if method in PROJECTION_METHODS:
                self._projectors[k] = ComplementProjector(basis)
            else:
                self._projectors[k] = ComplementProjector.identity(feature_map.param_dim)
        self._mr = {}

    @classmethod
    def from_state(cls, state: LearnerState, sequence: TaskSequence, normalize: bool = False) -> "ForgettingAnalysis":
        return cls(state.method, state.feature_map, sequence, state.lam, state.memory_schedule,
                   state.per_task_optima, state.hyper.mem_per_task, state.pca_used_all_rows, normalize)

    # -- cached pieces --------------------------------------------------------
    def features(self, k: int) -> np.ndarray:
        if k not in self._features:
            self._features[k] = apply_feature_map(self.feature_map, self.sequence[k].features)
        return self._features[k]

    def svd(self, k: int) -> SvdFactors:
        if k not in self._svds:
            self._svds[k] = thin_svd(self.features(k))
        return self._svds[k]

    def projector_before(self, k: int) -> ComplementProjector:
        """Projector applied while training task ``k``."""
        return self._projectors[k]

    def residuals(self, k: int) -> np.ndarray:
        return self.sequence[k].labels - self.features(k) @ self.optima[k - 1]

    def rotated_residuals(self, k: int) -> np.ndarray:
        """``M_k r_k`` (rank_k x c)."""
        if k in self._mr:
            return self._mr[k]
        svd, r = self.svd(k), self.residuals(k)
        if self.projector_before(k).basis.size == 0:
            s = svd.singulars
            out = (s / (s**2 + self.lam))[:, None] * (svd.left.T @ r)
        else:
            Ft = self.projector_before(k).apply_rows(self.features(k))
            K = Ft @ Ft.T + self.lam * np.eye(Ft.shape[0])
            cond = np.linalg.cond(K)
            if cond > CONDITION_WARN:
                warnings.warn(f"task {k}: kernel condition number {cond:.3g}", ConditioningWarning, stacklevel=2)
            out = svd.singulars[:, None] * (svd.left.T @ scipy.linalg.solve(K, r, assume_a="pos"))
        self._mr[k] = out
        return out

    def _check_pair(self, source: int, target: int) -> None:
        T = self.n_tasks
        if not (1 <= source <= T and 1 <= target <= T):
            raise ValueError(f"tasks must lie in the trained range 1..{T}")

    def _scale(self, source: int) -> float:
        return 1.0 / self.sequence[source].n if self.normalize else 1.0

    # -- overlap --------------------------------------------------------------
    def overlap_matrix(self, source: int, target: int) -> tuple[np.ndarray, np.ndarray]:
        """``V_s^T T_{target-1} V_target`` and its singular values (descending, in [0, 1])."""
        self._check_pair(source, target)
        Vs, Vt = self.svd(source).right, self.svd(target).right
        O = Vs.T @ self.projector_before(target).apply(Vt)
        if O.size == 0:
            return O, np.zeros(0)
        return O, np.clip(np.linalg.svd(O, compute_uv=False), 0.0, 1.0)

    # -- forgetting -----------------------------------------------------------
    def cf_closed_form(self, source: int, target: int) -> CfResult:
        self._check_pair(source, target)
        if target < source:
            raise ValueError(f"target task {target} precedes source task {source}")
        src = self.svd(source)
        task = self.sequence[source]
        rows, cls = np.arange(task.n), task.true_class()
        total = np.zeros((task.n, task.n_outputs))
        terms, term_cf = {}, {}
        for k in range(source + 1, target + 1):
            O, _ = self.overlap_matrix(source, k)
            term = (src.left * src.singulars) @ (O @ self.rotated_residuals(k))
            terms[k] = term
            term_cf[k] = float(np.sum(term[rows, cls] ** 2)) * self._scale(source)
            total += term
        d = total[rows, cls]
        return CfResult(float(d @ d) * self._scale(source), d, terms, term_cf)

    def _prefactor(self, source: int) -> float:
        src = self.svd(source)
        if self.method == "pca_ogd" and self.pca_used_all_rows.get(source, False):
            return src.singular(self.components)
        return src.singular(0)

    def _overlap_norm(self, source: int, k: int) -> float:
        Vs, Vk = self.svd(source).right, self.svd(k).right
        if Vs.shape[1] == 0 or Vk.shape[1] == 0:
            return 0.0
        T = self.projector_before(k)
        if T.basis.size == 0:
            return float(np.linalg.norm(Vs.T @ Vk, 2))
        return float(np.linalg.norm(T.apply(Vs), 2) * np.linalg.norm(T.apply(Vk), 2))

    def cf_bound(self, source: int, target: int) -> BoundResult:
        """Principal-angle upper bound on the closed-form forgetting.

        Per summand ``k`` the factor is ``sigma * |Theta| * |M_k r_k|`` where
        sigma is the top source singular value (sigma_{d+1} for pca_ogd when
        its PCA saw every source row).  Summands are combined with the
        triangle inequality, ``(sum_k a_k)^2``; ``sum_of_squares`` keeps the
        cross-term-free ``sum_k a_k^2`` form, which only bounds a single step.
        """
        self._check_pair(source, target)
        if target < source:
            raise ValueError(f"target task {target} precedes source task {source}")
        pre = self._prefactor(source)
        c = self.sequence.n_outputs
        linear = np.zeros(c)
        squares = np.zeros(c)
        coefs, norms = {}, {}
        for k in range(source + 1, target + 1):
            coef = pre * self._overlap_norm(source, k)
            col_norms = np.linalg.norm(self.rotated_residuals(k), axis=0)
            coefs[k], norms[k] = coef, col_norms
            linear += coef * col_norms
            squares += (coef * col_norms) ** 2
        scale = self._scale(source)
        return BoundResult(float(np.sum(linear**2)) * scale, float(np.sum(squares)) * scale, coefs, norms)

    def empirical_cf(self, source: int, target: int) -> tuple[float, np.ndarray]:
        d = drift(self.feature_map, self.optima[source], self.optima[target], self.sequence[source])
        return float(d @ d) * self._scale(source), d

    def drift_record(self, source: int, target: int, optima=None) -> DriftRecord:
        """Everything known about one (source, target) pair.

        ``optima`` overrides the trajectory used for the empirical drift (for
        example an iterative run checked against this closed-form analysis).
        """
        if optima is None:
            cf, d = self.empirical_cf(source, target)
        else:
            d = drift(self.feature_map, optima[source], optima[target], self.sequence[source])
            cf = float(d @ d) * self._scale(source)
        closed = self.cf_closed_form(source, target)
        bound = self.cf_bound(source, target)
        overlaps = {k: self.overlap_matrix(source, k)[1] for k in range(source + 1, target + 1)}
        return DriftRecord(source, target, d, cf, closed.value, bound.value, bound.sum_of_squares, overlaps,
                           closed.term_cf)


def cf_closed_form(analysis: ForgettingAnalysis, source: int, target: int) -> CfResult:
    return analysis.cf_closed_form(source, target)


def cf_bound(analysis: ForgettingAnalysis, source: int, target: int) -> BoundResult:
    return analysis.cf_bound(source, target)


def overlap_matrix(analysis: ForgettingAnalysis, source: int, target: int):
    return analysis.overlap_matrix(source, target)


def spectrum_report(method: str, sequence: TaskSequence, memory_sizes, feature_map: FeatureMap | None = None,
                    hyper: Hyper | None = None, source: int = 1, target: int = 2) -> list[tuple]:
    """Singular values of the source -> target overlap for each per-task memory size.

    Returns rows ``(method, memory, index, singular_value)``.
    """
    hyper = hyper or Hyper()
    rows = []
    for m in memory_sizes:
        if feature_map is not None and m > feature_map.param_dim:
            raise ValueError(f"memory size {m} exceeds parameter dimension {feature_map.param_dim}")
        state = train_sequence(sequence, method, feature_map, with_hyper(hyper, mem_per_task=int(m)),
                               path="closed_form", upto=target)
        analysis = ForgettingAnalysis.from_state(state, sequence)
        _, s = analysis.overlap_matrix(source, target)
        rows.extend((method, int(m), i, float(v)) for i, v in enumerate(s))
    return rows
