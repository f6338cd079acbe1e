"""Synthetic task sequences and CSV ingestion.

All generators draw from Philox streams keyed by ``(seed, stream, task)`` so a
sequence is a pure function of its parameters.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# stream identifiers for derived generators
_SHARED, _TASK, _PERM, _NOISE = 0, 1, 2, 3


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the derived stream ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class TaskDataset:
    features: np.ndarray
    labels: np.ndarray
    task_id: int
    seed: int = 0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        Y = np.asarray(self.labels, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] < 1:
            raise ValueError(f"task {self.task_id} has no samples")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"task {self.task_id}: {X.shape[0]} feature rows but {Y.shape[0]} label rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError(f"task {self.task_id} contains non-finite values")
        if Y.shape[1] >= 2:
            if not (np.all((Y == 0) | (Y == 1)) and np.all(Y.sum(axis=1) == 1)):
                raise ValueError(f"task {self.task_id}: classification labels must be one-hot")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", Y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.labels.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.labels.shape[1] >= 2

    def true_class(self) -> np.ndarray:
        """Column index read for each row: the hot class, or 0 for regression."""
        if self.is_classification:
            return np.argmax(self.labels, axis=1)
        return np.zeros(self.n, dtype=int)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple
    generator_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("a task sequence needs at least one task")
        q, c = tasks[0].features.shape[1], tasks[0].n_outputs
        for i, t in enumerate(tasks, start=1):
            if t.task_id != i:
                raise ValueError(f"task ids must run 1..T; position {i} holds task {t.task_id}")
            if t.features.shape[1] != q or t.n_outputs != c:
                raise ValueError(f"task {i} has shape ({t.features.shape[1]}, {t.n_outputs}), expected ({q}, {c})")
        object.__setattr__(self, "tasks", tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, task_id: int) -> TaskDataset:
        """1-based task lookup."""
        if not 1 <= task_id <= len(self.tasks):
            raise IndexError(f"task {task_id} outside 1..{len(self.tasks)}")
        return self.tasks[task_id - 1]

    @property
    def input_dim(self) -> int:
        return self.tasks[0].features.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.tasks[0].n_outputs

    def equals(self, other: "TaskSequence", atol: float = 0.0) -> bool:
        if len(self) != len(other):
            return False
        return all(
            a.features.shape == b.features.shape
            and a.labels.shape == b.labels.shape
            and np.allclose(a.features, b.features, rtol=0, atol=atol)
            and np.allclose(a.labels, b.labels, rtol=0, atol=atol)
            for a, b in zip(self, other)
        )


def _validate_counts(T, n, p):
    for name, v in (("T", T), ("n", n), ("p", p)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")


def _responses(X, W, noise_scale, rng, n_classes):
    R = X @ W
    if n_classes >= 2:
        # argmax over per-class linear responses, one-hot encoded
        return np.eye(n_classes)[np.argmax(R, axis=1)]
    if noise_scale > 0:
        R = R + noise_scale * rng.standard_normal(R.shape)
    return R


def _draw_weights(rng, p, loc_w, scale_w, n_classes):
    return loc_w + scale_w * rng.standard_normal((p, max(1, n_classes)))


def gen_gaussian_linear(seed: int, T: int, n: int, p: int, loc_x: float = 0.0, scale_x: float = 1.0,
                        loc_w: float = 0.0, scale_w: float = 1.0, noise_scale: float = 0.0,
                        n_classes: int = 1) -> TaskSequence:
    """i.i.d. Gaussian inputs with a fresh Gaussian true weight vector per task."""
    _validate_counts(T, n, p)
    if scale_x <= 0 or scale_w <= 0 or noise_scale < 0:
        raise ValueError("scales must be positive and noise_scale non-negative")
    tasks = []
    for tau in range(1, T + 1):
        rng = rng_stream(seed, _TASK, tau)
        X = loc_x + scale_x * rng.standard_normal((n, p))
        W = _draw_weights(rng, p, loc_w, scale_w, n_classes)
        Y = _responses(X, W, noise_scale, rng_stream(seed, _NOISE, tau), n_classes)
        tasks.append(TaskDataset(X, Y, tau, seed))
    spec = dict(name="gaussian_linear", seed=seed, T=T, n=n, p=p, loc_x=loc_x, scale_x=scale_x,
                loc_w=loc_w, scale_w=scale_w, noise_scale=noise_scale, n_classes=n_classes)
    return TaskSequence(tuple(tasks), spec)


def shared_rotation(seed: int, p: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix shared by every task of a seed."""
    A = rng_stream(seed, _SHARED).standard_normal((p, p))
    Q, R = np.linalg.qr(A)
    return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))


def population_spectrum(p: int, decay: float) -> np.ndarray:
    """Population singular-value profile: sigma_i^2 proportional to decay**i."""
    return np.sqrt(decay ** np.arange(p, dtype=float))


def _structured_features(rng, n, p, decay, Q):
    Z = rng.standard_normal((n, p))
    return (Z * population_spectrum(p, decay)) @ Q.T


def gen_spectrum_controlled(seed: int, T: int, n: int, p: int, decay: float, loc_w: float = 0.0,
                            scale_w: float = 1.0, noise_scale: float = 0.0,
                            n_classes: int = 1) -> TaskSequence:
    """Gaussian inputs whose covariance eigenvalues decay geometrically along a shared rotation.

    ``decay = 1`` gives an isotropic (flat-spectrum) sequence.
    """
    _validate_counts(T, n, p)
    if not (0.0 < decay <= 1.0):
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    Q = shared_rotation(seed, p)
    tasks = []
    for tau in range(1, T + 1):
        rng = rng_stream(seed, _TASK, tau)
        X = _structured_features(rng, n, p, decay, Q)
        W = _draw_weights(rng, p, loc_w, scale_w, n_classes)
        Y = _responses(X, W, noise_scale, rng_stream(seed, _NOISE, tau), n_classes)
        tasks.append(TaskDataset(X, Y, tau, seed))
    spec = dict(name="spectrum_controlled", seed=seed, T=T, n=n, p=p, decay=decay, loc_w=loc_w,
                scale_w=scale_w, noise_scale=noise_scale, n_classes=n_classes)
    return TaskSequence(tuple(tasks), spec)


def rotation_plane(seed: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded orthonormal pair spanning the rotation plane."""
    if p < 2:
        raise ValueError("a plane rotation needs p >= 2")
    Q = shared_rotation(seed, p)
    return Q[:, 0].copy(), Q[:, 1].copy()


def plane_rotation(a: np.ndarray, b: np.ndarray, degrees: float) -> np.ndarray:
    """Orthogonal matrix rotating span{a, b} by ``degrees`` and fixing its complement."""
    t = math.radians(degrees)
    p = a.shape[0]
    return (np.eye(p) + (math.cos(t) - 1.0) * (np.outer(a, a) + np.outer(b, b))
            + math.sin(t) * (np.outer(b, a) - np.outer(a, b)))


def gen_rotated(seed: int, T: int, n: int, p: int, degrees_per_task: float, decay: float = 1.0,
                loc_w: float = 0.0, scale_w: float = 1.0, noise_scale: float = 0.0) -> TaskSequence:
    """Task tau is task 1's inputs rotated by ``(tau-1) * degrees_per_task`` in a fixed plane.

    One weight vector labels every task, recomputed from the rotated inputs.
    """
    _validate_counts(T, n, p)
    a, b = rotation_plane(seed, p)
    rng = rng_stream(seed, _TASK, 1)
    X1 = _structured_features(rng, n, p, decay, shared_rotation(seed, p))
    w = _draw_weights(rng, p, loc_w, scale_w, 1)
    tasks = []
    for tau in range(1, T + 1):
        X = X1 @ plane_rotation(a, b, (tau - 1) * degrees_per_task) if tau > 1 else X1
        Y = _responses(X, w, noise_scale, rng_stream(seed, _NOISE, tau), 1)
        tasks.append(TaskDataset(X, Y, tau, seed))
    spec = dict(name="rotated", seed=seed, T=T, n=n, p=p, degrees_per_task=degrees_per_task, decay=decay,
                loc_w=loc_w, scale_w=scale_w, noise_scale=noise_scale)
    return TaskSequence(tuple(tasks), spec)


def gen_permuted(seed: int, T: int, n: int, p: int, decay: float = 0.5, loc_w: float = 0.0,
                 scale_w: float = 1.0, noise_scale: float = 0.0, permutations=None) -> TaskSequence:
    """Task 1 is structured Gaussian; every later task permutes its feature columns afresh.

    ``permutations`` optionally fixes the 0-based column order for tasks 2..T
    (testing hook).
    """
    _validate_counts(T, n, p)
    rng = rng_stream(seed, _TASK, 1)
    X1 = _structured_features(rng, n, p, decay, shared_rotation(seed, p))
    if permutations is not None and len(permutations) != T - 1:
        raise ValueError(f"expected {T - 1} permutations, got {len(permutations)}")
    tasks = []
    for tau in range(1, T + 1):
        if tau == 1:
            X = X1
        else:
            perm = (np.asarray(permutations[tau - 2]) if permutations is not None
                    else rng_stream(seed, _PERM, tau).permutation(p))
            if sorted(perm.tolist()) != list(range(p)):
                raise ValueError(f"task {tau}: not a permutation of 0..{p - 1}")
            X = X1[:, perm]
        W = _draw_weights(rng_stream(seed, _TASK, tau) if tau > 1 else rng, p, loc_w, scale_w, 1)
        Y = _responses(X, W, noise_scale, rng_stream(seed, _NOISE, tau), 1)
        tasks.append(TaskDataset(X, Y, tau, seed))
    spec = dict(name="permuted", seed=seed, T=T, n=n, p=p, decay=decay, loc_w=loc_w, scale_w=scale_w,
                noise_scale=noise_scale)
    return TaskSequence(tuple(tasks), spec)


GENERATORS = {
    "gaussian_linear": gen_gaussian_linear,
    "spectrum_controlled": gen_spectrum_controlled,
    "rotated": gen_rotated,
    "permuted": gen_permuted,
}


def generate(name: str, **params) -> TaskSequence:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(**params)


# --- CSV ------------------------------------------------------------------

def write_csv(seq: TaskSequence, path) -> None:
    c, q = seq.n_outputs, seq.input_dim
    header = ["task", "row"] + [f"y{j}" for j in range(c)] + [f"x{j}" for j in range(q)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in seq:
            for i in range(t.n):
                w.writerow([t.task_id, i] + [repr(float(v)) for v in t.labels[i]]
                           + [repr(float(v)) for v in t.features[i]])


class CsvFormatError(ValueError):
    pass


def load_csv(path) -> TaskSequence:
    """Parse a task CSV (``task,row,y0..,x0..``); errors name the offending line/column."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if header[:2] != ["task", "row"]:
            raise CsvFormatError(f"{path}: header must start with 'task,row', got {header[:2]}")
        ycols = [h for h in header[2:] if h.startswith("y")]
        xcols = [h for h in header[2:] if h.startswith("x")]
        if not ycols or not xcols:
            raise CsvFormatError(f"{path}: need at least one y column and one x column")
        expected = ["task", "row"] + [f"y{j}" for j in range(len(ycols))] + [f"x{j}" for j in range(len(xcols))]
        if header != expected:
            raise CsvFormatError(f"{path}: columns must be {','.join(expected[:4])}..., got {','.join(header)}")

        blocks: dict[int, tuple[list, list]] = {}
        order = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                task = int(row[0])
            except ValueError:
                raise CsvFormatError(f"{path}:{lineno}: column 'task' is not an integer: {row[0]!r}") from None
            values = []
            for col, cell in zip(header[2:], row[2:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvFormatError(f"{path}:{lineno}: column {col!r} is not numeric: {cell!r}") from None
                if not math.isfinite(v):
                    raise CsvFormatError(f"{path}:{lineno}: column {col!r} is not finite: {cell!r}")
                values.append(v)
            if task not in blocks:
                if order and task <= order[-1]:
                    raise CsvFormatError(f"{path}:{lineno}: tasks must be contiguous and ascending (saw {task} after {order[-1]})")
                blocks[task] = ([], [])
                order.append(task)
            elif task != order[-1]:
                raise CsvFormatError(f"{path}:{lineno}: task {task} is not contiguous")
            blocks[task][0].append(values[len(ycols):])
            blocks[task][1].append(values[: len(ycols)])
    if not order:
        raise CsvFormatError(f"{path}: no data rows")
    if order != list(range(1, len(order) + 1)):
        raise CsvFormatError(f"{path}: task ids must be 1..T, got {order}")
    tasks = tuple(TaskDataset(np.array(X), np.array(Y), t) for t, (X, Y) in blocks.items())
    return TaskSequence(tasks, {"name": "csv", "path": str(path)})
