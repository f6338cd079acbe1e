"""Sequential trainers for SGD, OGD, PCA-OGD, GEM-NT and A-GEM in the linearized regime.

Each task minimizes ``0.5*|phi(X) D - r|^2 + 0.5*lam*|D|^2`` over the update
``D = w - w*_{prev}``, where ``r`` are the residual targets.  Projection
methods restrict ``D`` to the orthogonal complement of their memory, which
gives the kernel-ridge closed form used as the reference path.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .model import FeatureMap, Weights, apply_feature_map, make_feature_map
from .spectral import ComplementProjector, OrthonormalBasis, gram_schmidt_append, thin_svd
from .tasks import TaskDataset, TaskSequence, rng_stream

METHODS = ("sgd", "ogd", "pca_ogd", "gem_nt", "a_gem")
PROJECTION_METHODS = ("ogd", "pca_ogd", "gem_nt")
CONDITION_WARN = 1e12

_MEMORY_STREAM = 11


class MemoryFullWarning(UserWarning):
    pass


class ConditioningWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Hyper:
    lam: float = 1e-2
    lr: float | None = None  # None: lr_fraction times the admissible bound
    lr_fraction: float = 0.99
    max_iters: int = 200_000
    grad_tol: float = 1e-11  # relative to the first projected gradient norm
    mem_per_task: int = 5
    pca_samples: int = 3000
    dep_tol: float = 1e-10
    refresh_gem_gradients: bool = False
    seed: int = 0


@dataclass(frozen=True)
class MemoryBasis:
    basis: OrthonormalBasis
    raw_buffer: tuple = ()  # (task_id, X, Y) triples kept by gem_nt / a_gem

    @classmethod
    def empty(cls, dim: int) -> "MemoryBasis":
        return cls(OrthonormalBasis.empty(dim))

    @property
    def projector(self) -> ComplementProjector:
        return ComplementProjector(self.basis)

    @property
    def size(self) -> int:
        return self.basis.size


@dataclass
class LearnerState:
    method: str
    feature_map: FeatureMap
    hyper: Hyper
    weights: Weights
    per_task_optima: list = field(default_factory=list)
    memory: MemoryBasis | None = None
    # memory_schedule[k-1] is the memory in force while task k was trained
    memory_schedule: list = field(default_factory=list)
    pca_used_all_rows: dict = field(default_factory=dict)

    @property
    def lam(self) -> float:
        return self.hyper.lam

    @property
    def trained(self) -> int:
        return len(self.per_task_optima) - 1


def new_state(method: str, feature_map: FeatureMap, n_outputs: int = 1, hyper: Hyper | None = None) -> LearnerState:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    hyper = hyper or Hyper()
    if hyper.lam < 0:
        raise ValueError("lambda must be non-negative")
    if hyper.mem_per_task < 0 or hyper.pca_samples < 1:
        raise ValueError("mem_per_task must be >= 0 and pca_samples >= 1")
    w0 = Weights.zeros(feature_map.param_dim, n_outputs)
    return LearnerState(method, feature_map, hyper, w0, [w0], MemoryBasis.empty(feature_map.param_dim))


def _check_next(state: LearnerState, task: TaskDataset) -> None:
    if task.task_id != state.trained + 1:
        raise ValueError(f"expected task {state.trained + 1}, got task {task.task_id}")


def residual_targets(state: LearnerState, task: TaskDataset) -> np.ndarray:
    """Labels minus the previous optimum's predictions on this task."""
    _check_next(state, task)
    F = apply_feature_map(state.feature_map, task.features)
    return task.labels - F @ state.per_task_optima[-1].values


def current_projector(state: LearnerState) -> ComplementProjector:
    """Projector applied to updates of the next task (identity for sgd / a_gem)."""
    if state.method in PROJECTION_METHODS:
        return state.memory.projector
    return ComplementProjector.identity(state.feature_map.param_dim)


def _projected_features(state, task):
    F = apply_feature_map(state.feature_map, task.features)
    return F, current_projector(state).apply_rows(F)


def solve_task_closed_form(state: LearnerState, task: TaskDataset) -> Weights:
    """Kernel-ridge solution ``w*_{prev} + phi~^T (phi~ phi~^T + lam I)^{-1} r``."""
    if state.method == "a_gem":
        raise ValueError("a_gem projects conditionally and has no closed-form solution")
    if state.lam <= 0:
        raise ValueError("the closed-form solve needs lambda > 0")
    resid = residual_targets(state, task)
    _, Ft = _projected_features(state, task)
    K = Ft @ Ft.T + state.lam * np.eye(task.n)
    cond = np.linalg.cond(K)
    if cond > CONDITION_WARN:
        warnings.warn(f"task {task.task_id}: kernel condition number {cond:.3g}", ConditioningWarning, stacklevel=2)
    alpha = scipy.linalg.solve(K, resid, assume_a="pos")
    return Weights(state.per_task_optima[-1].values + Ft.T @ alpha)


def learning_rate_bound(state: LearnerState, task: TaskDataset) -> float:
    """``1 / |kappa + lam I|`` for the kernel the method actually trains with."""
    _, Ft = _projected_features(state, task)
    top = np.linalg.norm(Ft, 2) ** 2 if Ft.size else 0.0
    return 1.0 / (top + state.lam)


def reference_gradient(state: LearnerState, weights, ref_batch=None) -> np.ndarray | None:
    """Average per-sample squared-loss gradient over the raw memory buffer."""
    if ref_batch is None:
        if not state.memory.raw_buffer:
            return None
        X = np.vstack([x for _, x, _ in state.memory.raw_buffer])
        Y = np.vstack([y for _, _, y in state.memory.raw_buffer])
    else:
        X, Y = ref_batch
    F = apply_feature_map(state.feature_map, X)
    W = weights.values if isinstance(weights, Weights) else weights
    return F.T @ (F @ W - Y) / F.shape[0]


def project_gradient(state: LearnerState, g, ref_batch=None, weights=None) -> np.ndarray:
    """Apply the method's projection to a p x c gradient.

    For a_gem, ``ref_batch`` is an ``(X, Y)`` pair (default: the raw buffer)
    whose loss gradient is taken at ``weights`` (default: current weights).
    """
    g = np.asarray(g, dtype=float)
    if state.method == "sgd":
        return g
    if state.method in PROJECTION_METHODS:
        return state.memory.projector.apply(g)
    g_ref = reference_gradient(state, state.weights if weights is None else weights, ref_batch)
    if g_ref is None:
        return g
    ref_sq = float(np.sum(g_ref * g_ref))
    if ref_sq == 0.0:
        return g
    dot = float(np.sum(g * g_ref))
    if dot >= 0.0:
        return g
    return g - (dot / ref_sq) * g_ref


def train_task_gd(state: LearnerState, task: TaskDataset, callback=None) -> Weights:
    """Full-batch projected gradient descent from ``w*_{prev}``.

    Stops once the projected gradient norm falls to ``grad_tol`` times its
    first value, or after ``max_iters`` steps.  ``callback(step, update)`` is
    invoked with every applied update (a p x c array).
    """
    resid = residual_targets(state, task)
    bound = learning_rate_bound(state, task)
    hp = state.hyper
    if hp.lr is None:
        lr = hp.lr_fraction * bound
    elif hp.lr >= bound:
        raise ValueError(f"learning rate {hp.lr} violates the stability bound; admissible maximum is < {bound:.6g}")
    else:
        lr = hp.lr
    F = apply_feature_map(state.feature_map, task.features)
    start = state.per_task_optima[-1].values
    delta = np.zeros_like(start)
    ref_batch = None
    if state.method == "a_gem" and state.memory.raw_buffer:
        ref_batch = (np.vstack([x for _, x, _ in state.memory.raw_buffer]),
                     np.vstack([y for _, _, y in state.memory.raw_buffer]))
    first = None
    for step in range(hp.max_iters):
        g = F.T @ (F @ delta - resid) + hp.lam * delta
        g = project_gradient(state, g, ref_batch, weights=start + delta)
        norm = np.linalg.norm(g)
        if first is None:
            first = norm
        if norm <= hp.grad_tol * first or norm == 0.0:
            break
        update = -lr * g
        delta = delta + update
        if callback is not None:
            callback(step, update)
    return Weights(start + delta)


# --- memory -----------------------------------------------------------------

def _sample_rows(state, task, k):
    rng = rng_stream(state.hyper.seed, _MEMORY_STREAM, task.task_id)
    return rng.choice(task.n, size=min(k, task.n), replace=False)


def _append_all(basis, vectors, labels, dep_tol, task_id):
    for v, label in zip(vectors, labels):
        if basis.is_full:
            warnings.warn(f"task {task_id}: memory spans the whole parameter space; "
                          "remaining directions dropped", MemoryFullWarning, stacklevel=3)
            break
        grown = gram_schmidt_append(basis, v, dep_tol, label=label)
        if grown is not None:
            basis = grown
    return basis


def _gem_direction(state, X, Y, weights):
    F = apply_feature_map(state.feature_map, X)
    cls = np.argmax(Y, axis=1) if Y.shape[1] >= 2 else np.zeros(len(Y), dtype=int)
    R = F @ weights.values - Y
    r = R[np.arange(len(Y)), cls]
    return F.T @ r / len(Y)


def update_memory(state: LearnerState, task: TaskDataset) -> MemoryBasis:
    """Grow the method's memory at the end of ``task`` and store it on the state."""
    if task.task_id != state.trained:
        raise ValueError(f"memory is updated right after training; last trained task is {state.trained}")
    hp, mem = state.hyper, state.memory
    d = hp.mem_per_task
    if state.method == "sgd" or d == 0:
        return mem
    tau = task.task_id
    if state.method == "ogd":
        F = apply_feature_map(state.feature_map, task.features[_sample_rows(state, task, d)])
        basis = _append_all(mem.basis, F, [(tau, j) for j in range(len(F))], hp.dep_tol, tau)
        mem = MemoryBasis(basis, mem.raw_buffer)
    elif state.method == "pca_ogd":
        if hp.pca_samples >= task.n:
            rows = np.arange(task.n)
        else:
            rows = np.sort(_sample_rows(state, task, hp.pca_samples))
        state.pca_used_all_rows[tau] = len(rows) == task.n
        svd = thin_svd(apply_feature_map(state.feature_map, task.features[rows]))
        top = svd.right[:, : min(d, svd.rank)].T
        basis = _append_all(mem.basis, top, [(tau, j) for j in range(len(top))], hp.dep_tol, tau)
        mem = MemoryBasis(basis, mem.raw_buffer)
    else:
        rows = _sample_rows(state, task, d)
        buffer = mem.raw_buffer + ((tau, task.features[rows], task.labels[rows]),)
        if state.method == "a_gem":
            mem = MemoryBasis(mem.basis, buffer)
        elif hp.refresh_gem_gradients:
            dirs = [_gem_direction(state, x, y, state.weights) for _, x, y in buffer]
            empty = OrthonormalBasis.empty(mem.basis.dim)
            mem = MemoryBasis(_append_all(empty, dirs, [(t, 0) for t, _, _ in buffer], hp.dep_tol, tau), buffer)
        else:
            g = _gem_direction(state, task.features[rows], task.labels[rows], state.weights)
            mem = MemoryBasis(_append_all(mem.basis, [g], [(tau, 0)], hp.dep_tol, tau), buffer)
    state.memory = mem
    return mem


# --- driving a sequence -------------------------------------------------------

def default_path(method: str) -> str:
    return "iterative" if method == "a_gem" else "closed_form"


def fit_task(state: LearnerState, task: TaskDataset, path: str | None = None, callback=None) -> Weights:
    """Train one task, record the optimum, then update memory."""
    path = path or default_path(state.method)
    _check_next(state, task)
    state.memory_schedule.append(state.memory)
    if path == "closed_form":
        w = solve_task_closed_form(state, task)
    elif path == "iterative":
        w = train_task_gd(state, task, callback)
    else:
        raise ValueError(f"unknown training path {path!r}")
    state.weights = w
    state.per_task_optima.append(w)
    update_memory(state, task)
    return w


def train_sequence(sequence: TaskSequence, method: str, feature_map: FeatureMap | None = None,
                   hyper: Hyper | None = None, path: str | None = None, callback=None,
                   upto: int | None = None) -> LearnerState:
    """Run ``method`` over the sequence (or its first ``upto`` tasks)."""
    fmap = feature_map or make_feature_map("identity", sequence.input_dim)
    state = new_state(method, fmap, sequence.n_outputs, hyper)
    for task in list(sequence)[: upto or len(sequence)]:
        fit_task(state, task, path, None if callback is None else (lambda s, u, t=task.task_id: callback(t, s, u)))
    return state


def with_hyper(hyper: Hyper, **changes) -> Hyper:
    return replace(hyper, **changes)
