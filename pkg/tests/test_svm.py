"""Tests for the class-weighted RBF SVM and its SMO solver."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.svm import SVC

from feedmon.svm import (
    ConvergenceWarning,
    WeightedRbfSvm,
    median_heuristic_gamma,
    rbf_kernel,
)
from oracles import projected_gradient_dual


def two_blob_dataset(rng, n, d, spread=1.0):
    half = n // 2
    x = np.vstack([
        rng.normal(-1.0, spread, size=(half, d)),
        rng.normal(1.0, spread, size=(n - half, d)),
    ])
    y = np.concatenate([-np.ones(half), np.ones(n - half)])
    return x, y


# -- solver correctness against the reference dual solver ---------------------


def test_dual_objective_matches_projected_gradient_reference():
    rng = np.random.default_rng(42)
    for _ in range(5):
        n = int(rng.integers(20, 61))
        d = int(rng.integers(2, 6))
        x, y = two_blob_dataset(rng, n, d)
        w_pos = float(rng.uniform(0.5, 4.0))
        c_base = float(rng.uniform(0.5, 3.0))
        model = WeightedRbfSvm(c_base=c_base, w_pos=w_pos, tol=1e-4).fit(x, y)
        gram = rbf_kernel(x, x, model.gamma_)
        box = np.where(y > 0, c_base * w_pos, c_base)
        _, reference = projected_gradient_dual(gram, y, box)
        mine = model.dual_objective(gram, y)
        assert abs(mine - reference) / max(abs(reference), 1.0) < 1e-3


def test_kkt_residuals_below_tolerance_after_convergence():
    rng = np.random.default_rng(9)
    x, y = two_blob_dataset(rng, 50, 3)
    model = WeightedRbfSvm(c_base=2.0, w_pos=2.5, tol=1e-4).fit(x, y)
    assert model.converged_
    gram = rbf_kernel(x, x, model.gamma_)
    assert model.kkt_violations(gram, y).max() < 1e-4


def test_dual_feasibility_invariants():
    rng = np.random.default_rng(17)
    x, y = two_blob_dataset(rng, 40, 2)
    model = WeightedRbfSvm(c_base=1.5, w_pos=3.0, tol=1e-5).fit(x, y)
    assert np.all(model.alpha_ >= -1e-12)
    assert np.all(model.alpha_ <= model.box_ + 1e-9)
    assert abs(np.sum(model.alpha_ * y)) < 1e-8


def test_agreement_with_libsvm_style_reference():
    rng = np.random.default_rng(4)
    x, y = two_blob_dataset(rng, 80, 3)
    gamma = median_heuristic_gamma(x)
    mine = WeightedRbfSvm(c_base=1.0, w_pos=3.0, gamma=gamma, tol=1e-5).fit(x, y)
    reference = SVC(
        C=1.0, kernel="rbf", gamma=gamma, class_weight={1: 3.0, -1: 1.0}, tol=1e-6
    ).fit(x, y)
    probe = rng.normal(0.0, 1.5, size=(200, 3))
    assert np.mean(mine.predict(probe) == reference.predict(probe)) >= 0.99
    correlation = np.corrcoef(
        mine.decision_function(probe), reference.decision_function(probe)
    )[0, 1]
    assert correlation > 0.999


def test_fit_is_deterministic():
    rng = np.random.default_rng(23)
    x, y = two_blob_dataset(rng, 60, 4)
    first = WeightedRbfSvm(w_pos=2.0).fit(x, y)
    second = WeightedRbfSvm(w_pos=2.0).fit(x, y)
    assert first.bias_ == second.bias_
    np.testing.assert_array_equal(first.support_vectors_, second.support_vectors_)
    np.testing.assert_array_equal(first.dual_coef_, second.dual_coef_)


def test_precomputed_gram_reproduces_default_fit():
    rng = np.random.default_rng(31)
    x, y = two_blob_dataset(rng, 50, 3)
    plain = WeightedRbfSvm(w_pos=1.5).fit(x, y)
    gram = rbf_kernel(x, x, plain.gamma_)
    shared = WeightedRbfSvm(w_pos=1.5).fit(x, y, gram=gram)
    assert shared.bias_ == plain.bias_
    np.testing.assert_array_equal(shared.alpha_, plain.alpha_)


# -- class weighting ----------------------------------------------------------


def test_positive_weight_trades_recall_for_false_alarms():
    # Raising w_pos widens the positive-class box, so training recall on the
    # positive class must not drop; on overlapping data it strictly rises.
    rng = np.random.default_rng(77)
    x, y = two_blob_dataset(rng, 120, 2, spread=1.6)

    def recall(w):
        model = WeightedRbfSvm(c_base=1.0, w_pos=w, gamma=0.5).fit(x, y)
        predicted = model.predict(x)
        return np.mean(predicted[y > 0] == 1.0)

    low, high = recall(0.1), recall(10.0)
    assert high >= low
    assert high >= 0.9


# -- kernel and gamma heuristic -------------------------------------------------


def test_rbf_kernel_basic_properties():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 4))
    kernel = rbf_kernel(x, x, 0.7)
    np.testing.assert_allclose(np.diag(kernel), 1.0, atol=1e-12)
    np.testing.assert_allclose(kernel, kernel.T, atol=1e-12)
    assert np.all(kernel > 0.0)
    assert np.all(kernel <= 1.0 + 1e-12)


def test_median_heuristic_hand_computed():
    # Pairwise squared distances of {0, 1, 3} are {1, 9, 4}; median 4 gives
    # gamma = 1 / (2 * 4).
    x = np.array([[0.0], [1.0], [3.0]])
    assert median_heuristic_gamma(x) == pytest.approx(1.0 / 8.0)


def test_median_heuristic_degenerate_falls_back_to_inverse_dimension():
    x = np.ones((5, 4))
    assert median_heuristic_gamma(x) == pytest.approx(1.0 / 4.0)
    assert median_heuristic_gamma(np.ones((1, 3))) == pytest.approx(1.0 / 3.0)


# -- validation and diagnostics --------------------------------------------------


def test_fit_rejects_bad_inputs():
    x = np.random.default_rng(0).normal(size=(10, 2))
    y = np.concatenate([-np.ones(5), np.ones(5)])
    with pytest.raises(ValueError, match="labels"):
        WeightedRbfSvm().fit(x, np.arange(10))
    with pytest.raises(ValueError, match="both classes"):
        WeightedRbfSvm().fit(x, np.ones(10))
    with pytest.raises(ValueError, match="at least 2"):
        WeightedRbfSvm().fit(x[:1], y[:1])
    with pytest.raises(ValueError, match="rows"):
        WeightedRbfSvm().fit(x, y[:5])
    with pytest.raises(ValueError, match="gram"):
        WeightedRbfSvm().fit(x, y, gram=np.eye(3))
    with pytest.raises(ValueError, match="finite"):
        bad = x.copy()
        bad[0, 0] = np.nan
        WeightedRbfSvm().fit(bad, y)
    with pytest.raises(ValueError, match="c_base"):
        WeightedRbfSvm(c_base=0.0).fit(x, y)


def test_predict_rejects_wrong_width_and_unfitted():
    rng = np.random.default_rng(1)
    x, y = two_blob_dataset(rng, 20, 3)
    model = WeightedRbfSvm().fit(x, y)
    with pytest.raises(ValueError, match="features"):
        model.predict(np.zeros((4, 5)))
    with pytest.raises(ValueError, match="not fitted"):
        WeightedRbfSvm().predict(x)


def test_iteration_cap_raises_convergence_warning():
    rng = np.random.default_rng(5)
    x, y = two_blob_dataset(rng, 40, 2, spread=2.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = WeightedRbfSvm(max_passes=0).fit(x, y)
    assert not model.converged_
    assert any(issubclass(w.category, ConvergenceWarning) for w in caught)


# -- serialization ------------------------------------------------------------


def test_round_trip_preserves_decision_function(tmp_path):
    rng = np.random.default_rng(8)
    x, y = two_blob_dataset(rng, 40, 3)
    model = WeightedRbfSvm(w_pos=2.0).fit(x, y)
    path = tmp_path / "svm.json"
    model.save(path)
    loaded = WeightedRbfSvm.load(path)
    probe = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(
        model.decision_function(probe), loaded.decision_function(probe)
    )


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: d.update(version=5), "version"),
        (lambda d: d.update(format="nope"), "format"),
        (lambda d: d.update(gamma=-1.0), "gamma"),
        (lambda d: d.update(bias=float("nan")), "bias"),
        (lambda d: d["dual_coef"].pop(), "dual_coef"),
        (lambda d: d.update(n_features=7), "support_vectors"),
    ],
)
def test_loader_rejects_invalid_documents(mutate, field):
    rng = np.random.default_rng(2)
    x, y = two_blob_dataset(rng, 20, 2)
    doc = WeightedRbfSvm().fit(x, y).to_dict()
    mutate(doc)
    with pytest.raises(ValueError, match=field):
        WeightedRbfSvm.from_dict(doc)


# -- properties ---------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), w_pos=st.floats(0.2, 8.0))
def test_solution_is_always_dual_feasible(seed, w_pos):
    rng = np.random.default_rng(seed)
    x, y = two_blob_dataset(rng, 24, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = WeightedRbfSvm(w_pos=w_pos, max_passes=50).fit(x, y)
    assert np.all(model.alpha_ >= -1e-12)
    assert np.all(model.alpha_ <= model.box_ + 1e-9)
    assert abs(np.sum(model.alpha_ * y)) < 1e-8
    predictions = model.predict(x)
    assert set(np.unique(predictions)) <= {-1.0, 1.0}
