import warnings

import numpy as np
import pytest

from ntk_forgetting.learners import (ConditioningWarning, Hyper, MemoryFullWarning, fit_task, learning_rate_bound,
                                     new_state, project_gradient, residual_targets, solve_task_closed_form,
                                     train_sequence, train_task_gd, update_memory, with_hyper)
from ntk_forgetting.model import Weights, make_feature_map
from ntk_forgetting.spectral import OrthonormalBasis
from ntk_forgetting.tasks import TaskDataset, TaskSequence, gen_gaussian_linear, gen_spectrum_controlled

from oracles import projected_ridge_oracle, ridge_oracle


def seq_of(*pairs):
    return TaskSequence(tuple(TaskDataset(np.atleast_2d(X), np.asarray(y, float), i)
                              for i, (X, y) in enumerate(pairs, start=1)))


def state_for(method, p, c=1, **hyper):
    return new_state(method, make_feature_map("identity", p), c, Hyper(**hyper))


# --- residual targets --------------------------------------------------------

def test_residual_first_task_is_label():
    seq = gen_gaussian_linear(0, T=1, n=4, p=3)
    np.testing.assert_array_equal(residual_targets(state_for("sgd", 3), seq[1]), seq[1].labels)


def test_residual_hand_case():
    st = state_for("sgd", 1)
    st.per_task_optima.append(Weights(np.array([1.0])))
    st.weights = st.per_task_optima[-1]
    task = TaskDataset(np.array([[1.0]]), np.array([3.0]), 2)
    np.testing.assert_array_equal(residual_targets(st, task), [[2.0]])


def test_residual_zero_when_previous_model_fits():
    X = np.random.default_rng(0).standard_normal((5, 3))
    w = np.array([1.0, -2.0, 0.5])
    seq = seq_of((X[:3], X[:3] @ w), (X[3:], X[3:] @ w))
    st = state_for("sgd", 3)
    st.per_task_optima.append(Weights(w))
    np.testing.assert_allclose(residual_targets(st, seq[2]), 0.0, atol=1e-14)


def test_residual_requires_next_task():
    seq = gen_gaussian_linear(0, T=2, n=2, p=2)
    with pytest.raises(ValueError):
        residual_targets(state_for("sgd", 2), seq[2])


# --- closed form ---------------------------------------------------------------

def test_closed_form_scalar_ridge():
    st = state_for("sgd", 2, lam=0.01)
    w = solve_task_closed_form(st, TaskDataset(np.array([[1.0, 0.0]]), np.array([1.0]), 1))
    np.testing.assert_allclose(w.values[:, 0], [1 / 1.01, 0.0], rtol=1e-15)


# primal ridge norms |(X^T X + lam I)^{-1} X^T y| on gen_gaussian_linear(7, 3, 5, 6, noise_scale=0.1) task 1
RIDGE_NORMS = {1e-3: 2.355642709225045, 1.0: 2.0277202765874707, 1e3: 0.03378306978121804}


def test_closed_form_shrinks_with_lambda():
    task = gen_gaussian_linear(7, 3, 5, 6, noise_scale=0.1)[1]
    norms = []
    for lam, expected in RIDGE_NORMS.items():
        w = solve_task_closed_form(state_for("sgd", 6, lam=lam), task)
        norms.append(np.linalg.norm(w.values))
        assert norms[-1] == pytest.approx(expected, rel=1e-9)
        np.testing.assert_allclose(w.values, ridge_oracle(task.features, task.labels, lam), rtol=1e-8, atol=1e-12)
    assert norms[0] > norms[1] > norms[2]


def test_closed_form_full_memory_span_gives_zero_update():
    # rank-2 data; pca_ogd with d = 2 stores its whole row space
    rng = np.random.default_rng(2)
    X = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    seq = seq_of((X, rng.standard_normal(6)), (X, rng.standard_normal(6)))
    st = train_sequence(seq, "pca_ogd", hyper=Hyper(mem_per_task=2), upto=1)
    w1 = st.weights.values.copy()
    w2 = solve_task_closed_form(st, seq[2])
    np.testing.assert_allclose(w2.values, w1, atol=1e-13)


def test_closed_form_projected_matches_complement_basis_oracle():
    seq = gen_spectrum_controlled(1, T=3, n=4, p=7, decay=0.7)
    st = train_sequence(seq, "ogd", hyper=Hyper(mem_per_task=3, lam=0.05), upto=2)
    r = residual_targets(st, seq[3])
    expected = st.weights.values + projected_ridge_oracle(seq[3].features, r, 0.05, st.memory.basis.vectors)
    np.testing.assert_allclose(solve_task_closed_form(st, seq[3]).values, expected, rtol=1e-9, atol=1e-12)


def test_closed_form_errors():
    task = TaskDataset(np.eye(2), np.ones(2), 1)
    with pytest.raises(ValueError):
        solve_task_closed_form(state_for("sgd", 2, lam=0.0), task)
    with pytest.raises(ValueError):
        solve_task_closed_form(state_for("a_gem", 2), task)


def test_closed_form_conditioning_warning():
    X = np.array([[1.0, 0.0], [1.0, 1e-9]])
    with pytest.warns(ConditioningWarning):
        solve_task_closed_form(state_for("sgd", 2, lam=1e-14), TaskDataset(X, np.ones(2), 1))


# --- iterative path ------------------------------------------------------------

def test_gd_matches_closed_form_sgd():
    task = gen_gaussian_linear(4, T=1, n=6, p=10, noise_scale=0.1)[1]
    w_gd = train_task_gd(state_for("sgd", 10, lam=0.1), task)
    w_cf = solve_task_closed_form(state_for("sgd", 10, lam=0.1), task)
    assert np.linalg.norm(w_gd.values - w_cf.values) <= 1e-6 * np.linalg.norm(w_cf.values)


def test_gd_one_projected_step_by_hand():
    # task 1: x = e1, y = 1 -> w1 = e1 / 1.1 and ogd memory {e1}
    lam, lr = 0.1, 0.1
    seq = seq_of((np.array([[1.0, 0.0]]), [1.0]), (np.array([[1.0, 0.0], [0.0, 2.0]]), [1.0, 1.0]))
    st = train_sequence(seq, "ogd", hyper=Hyper(lam=lam, lr=lr, mem_per_task=1), upto=1)
    steps = []
    train_task_gd(st, seq[2], callback=lambda k, u: steps.append(u.copy()))
    # r = (1 - 1/1.1, 1); g = -F^T r = -(1 - 1/1.1, 2); T g = (0, -2); step = -lr T g
    np.testing.assert_allclose(steps[0][:, 0], [0.0, 0.2], atol=1e-15)


def test_gd_full_projector_never_moves():
    X = np.eye(3)
    seq = seq_of((X, [1.0, 2.0, 3.0]), (np.ones((2, 3)), [5.0, -1.0]))
    st = train_sequence(seq, "ogd", hyper=Hyper(mem_per_task=3), upto=1)
    w = train_task_gd(st, seq[2])
    np.testing.assert_array_equal(w.values, st.weights.values)


def test_gd_learning_rate_bound_enforced():
    task = TaskDataset(np.array([[2.0, 0.0]]), np.array([1.0]), 1)
    st = state_for("sgd", 2, lam=0.5, lr=1.0)
    assert learning_rate_bound(st, task) == pytest.approx(1 / 4.5)
    with pytest.raises(ValueError, match="admissible maximum is < 0.222222"):
        train_task_gd(st, task)


@pytest.mark.parametrize("method", ["ogd", "pca_ogd", "gem_nt"])
def test_gd_matches_closed_form_projection_methods(method):
    seq = gen_spectrum_controlled(3, T=3, n=5, p=12, decay=0.8, noise_scale=0.1)
    hyper = Hyper(lam=0.1, mem_per_task=2)
    a = train_sequence(seq, method, hyper=hyper, path="closed_form")
    b = train_sequence(seq, method, hyper=hyper, path="iterative")
    for wa, wb in zip(a.per_task_optima[1:], b.per_task_optima[1:]):
        assert np.linalg.norm(wa.values - wb.values) <= 1e-6 * np.linalg.norm(wa.values)


def test_gd_steps_orthogonal_to_memory():
    seq = gen_spectrum_controlled(0, T=2, n=4, p=8, decay=0.9)
    st = train_sequence(seq, "ogd", hyper=Hyper(mem_per_task=3, lam=0.1), upto=1)
    P = st.memory.basis.vectors

    def check(k, u):
        assert np.abs(P.T @ u).max() <= 1e-10 * np.linalg.norm(u)
    fit_task(st, seq[2], "iterative", check)


def test_unknown_path_rejected():
    seq = gen_gaussian_linear(0, T=1, n=2, p=2)
    with pytest.raises(ValueError):
        fit_task(state_for("sgd", 2), seq[1], "newton")


# --- memory -----------------------------------------------------------------

def test_pca_rank_one_gains_data_direction():
    v = np.array([0.6, 0.0, 0.8])
    X = np.outer([1.0, -2.0, 3.0], v)
    st = train_sequence(seq_of((X, [1.0, 2.0, 3.0])), "pca_ogd", hyper=Hyper(mem_per_task=1))
    assert st.memory.size == 1
    assert abs(st.memory.basis.vectors[:, 0] @ v) == pytest.approx(1.0, abs=1e-14)


def test_ogd_duplicate_samples_rejected():
    X = np.array([[1.0, 0.0, 0.0]] * 3 + [[0.0, 2.0, 0.0]])
    st = train_sequence(seq_of((X, np.ones(4))), "ogd", hyper=Hyper(mem_per_task=4))
    assert st.memory.size == 2


def test_pca_stores_top_eigenvectors():
    # spectrum (4, 2, 1) along a random rotation; the stored directions are the top-2 eigenvectors of F^T F
    rng = np.random.default_rng(8)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    U, _ = np.linalg.qr(rng.standard_normal((5, 3)))
    X = U @ np.diag([4.0, 2.0, 1.0]) @ Q.T
    st = train_sequence(seq_of((X, np.ones(5))), "pca_ogd", hyper=Hyper(mem_per_task=2))
    evals, evecs = np.linalg.eigh(X.T @ X)
    np.testing.assert_allclose(evals[::-1], [16.0, 4.0, 1.0], rtol=1e-12)
    top = evecs[:, ::-1][:, :2]
    np.testing.assert_allclose(np.abs(top.T @ st.memory.basis.vectors), np.eye(2), atol=1e-12)


def test_pca_sampling_flag():
    seq = gen_gaussian_linear(0, T=1, n=10, p=4)
    st = train_sequence(seq, "pca_ogd", hyper=Hyper(mem_per_task=2, pca_samples=5))
    assert st.pca_used_all_rows == {1: False}
    st = train_sequence(seq, "pca_ogd", hyper=Hyper(mem_per_task=2, pca_samples=10))
    assert st.pca_used_all_rows == {1: True}


def test_memory_full_warns_and_stops():
    seq = gen_gaussian_linear(0, T=2, n=3, p=4)
    with pytest.warns(MemoryFullWarning):
        st = train_sequence(seq, "ogd", hyper=Hyper(mem_per_task=3))
    assert st.memory.size == 4
    np.testing.assert_allclose(st.memory.basis.vectors.T @ st.memory.basis.vectors, np.eye(4), atol=1e-12)


def test_gem_nt_one_direction_per_task_and_buffer():
    seq = gen_gaussian_linear(1, T=3, n=6, p=8, noise_scale=0.5)
    st = train_sequence(seq, "gem_nt", hyper=Hyper(mem_per_task=2))
    assert st.memory.size <= 3
    assert [t for t, _, _ in st.memory.raw_buffer] == [1, 2, 3]
    assert all(x.shape == (2, 8) for _, x, _ in st.memory.raw_buffer)


def test_gem_nt_direction_is_stored_sample_gradient():
    seq = gen_gaussian_linear(2, T=1, n=5, p=4, noise_scale=1.0)
    st = train_sequence(seq, "gem_nt", hyper=Hyper(mem_per_task=3))
    _, x, y = st.memory.raw_buffer[0]
    g = x.T @ (x @ st.weights.values - y)
    g = g[:, 0] / np.linalg.norm(g)
    assert abs(st.memory.basis.vectors[:, 0] @ g) == pytest.approx(1.0, abs=1e-12)


def test_gem_nt_classification_uses_true_class_residual():
    seq = gen_gaussian_linear(3, T=1, n=6, p=5, n_classes=3)
    st = train_sequence(seq, "gem_nt", hyper=Hyper(mem_per_task=4, lam=0.5))
    _, x, y = st.memory.raw_buffer[0]
    cls = np.argmax(y, axis=1)
    r = (x @ st.weights.values - y)[np.arange(len(y)), cls]
    g = x.T @ r
    assert abs(st.memory.basis.vectors[:, 0] @ g) / np.linalg.norm(g) == pytest.approx(1.0, abs=1e-12)


def test_gem_refresh_option_rebuilds_directions():
    seq = gen_gaussian_linear(1, T=3, n=6, p=8, noise_scale=0.5)
    a = train_sequence(seq, "gem_nt", hyper=Hyper(mem_per_task=2))
    b = train_sequence(seq, "gem_nt", hyper=Hyper(mem_per_task=2, refresh_gem_gradients=True))
    assert b.memory.size <= 3
    assert not np.allclose(a.memory.basis.vectors, b.memory.basis.vectors)


def test_a_gem_keeps_raw_samples_only():
    seq = gen_gaussian_linear(0, T=2, n=4, p=3)
    st = train_sequence(seq, "a_gem", hyper=Hyper(mem_per_task=2, max_iters=2000))
    assert st.memory.size == 0 and len(st.memory.raw_buffer) == 2


def test_sgd_memory_is_noop():
    seq = gen_gaussian_linear(0, T=2, n=4, p=3)
    st = train_sequence(seq, "sgd")
    assert st.memory.size == 0
    with pytest.raises(ValueError):
        update_memory(st, seq[1])


def test_zero_components_reduce_to_sgd_bitwise():
    seq = gen_spectrum_controlled(6, T=4, n=5, p=7, decay=0.6, noise_scale=0.1)
    ref = train_sequence(seq, "sgd")
    for method in ("ogd", "pca_ogd"):
        st = train_sequence(seq, method, hyper=Hyper(mem_per_task=0))
        for a, b in zip(ref.per_task_optima, st.per_task_optima):
            assert a.values.tobytes() == b.values.tobytes()


def test_trajectory_is_reproducible():
    seq = gen_spectrum_controlled(6, T=3, n=5, p=7, decay=0.6)
    a = train_sequence(seq, "pca_ogd", hyper=Hyper(mem_per_task=2, pca_samples=3, seed=4))
    b = train_sequence(seq, "pca_ogd", hyper=Hyper(mem_per_task=2, pca_samples=3, seed=4))
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a.per_task_optima, b.per_task_optima))
    assert a.memory.basis.vectors.tobytes() == b.memory.basis.vectors.tobytes()


def test_state_validation():
    with pytest.raises(ValueError):
        state_for("ewc", 2)
    with pytest.raises(ValueError):
        state_for("sgd", 2, lam=-1.0)
    with pytest.raises(ValueError):
        state_for("ogd", 2, mem_per_task=-1)
    assert with_hyper(Hyper(), lam=3.0).lam == 3.0


# --- projection ----------------------------------------------------------------

def test_project_empty_memory_unchanged():
    g = np.array([[1.0], [2.0]])
    np.testing.assert_array_equal(project_gradient(state_for("ogd", 2), g), g)


def test_project_in_span_to_zero():
    st = state_for("ogd", 3)
    st.memory = type(st.memory)(OrthonormalBasis(np.eye(3)[:, :2]))
    np.testing.assert_allclose(project_gradient(st, np.array([[1.0], [-4.0], [0.0]])), 0.0, atol=1e-15)


def _agem_state():
    st = state_for("a_gem", 2)
    return st, (np.eye(2), np.zeros((2, 1)))


def test_a_gem_positive_dot_unchanged():
    st, _ = _agem_state()
    # reference gradient at w with zero labels is X^T X w / n; choose w so that g_ref = e1 + e2
    ref = (np.eye(2), np.zeros((2, 1)))
    w = np.array([[2.0], [2.0]])
    g = np.array([[1.0], [0.0]])
    np.testing.assert_array_equal(project_gradient(st, g, ref, w), g)


def test_a_gem_negative_dot_projected():
    st, _ = _agem_state()
    ref = (np.eye(2), np.zeros((2, 1)))
    w = np.array([[2.0], [0.0]])  # g_ref = e1
    out = project_gradient(st, np.array([[-1.0], [0.0]]), ref, w)
    np.testing.assert_allclose(out, 0.0, atol=1e-15)


def test_a_gem_zero_reference_returns_input():
    st, _ = _agem_state()
    g = np.array([[-1.0], [3.0]])
    np.testing.assert_array_equal(project_gradient(st, g, (np.eye(2), np.zeros((2, 1))), np.zeros((2, 1))), g)
    np.testing.assert_array_equal(project_gradient(st, g), g)  # empty buffer


def test_a_gem_trains_iteratively_and_keeps_loss_on_reference():
    seq = gen_gaussian_linear(5, T=2, n=6, p=10, noise_scale=0.1)
    hyper = Hyper(lam=0.1, mem_per_task=6)
    st = train_sequence(seq, "a_gem", hyper=hyper)
    assert st.trained == 2
    sgd = train_sequence(seq, "sgd", hyper=hyper)
    X1, y1 = seq[1].features, seq[1].labels

    def loss(w):
        return float(np.sum((X1 @ w.values - y1) ** 2))
    assert loss(st.weights) <= loss(sgd.weights) + 1e-9


def test_warning_free_on_regular_problem():
    seq = gen_gaussian_linear(0, T=2, n=4, p=6)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train_sequence(seq, "ogd", hyper=Hyper(mem_per_task=2))
