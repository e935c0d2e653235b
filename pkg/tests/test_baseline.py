import numpy as np
import pytest

from attrinet import baseline as B
from attrinet.pipeline import BMI_COL, BMI_OBS_COL, DX_START_COL


def test_aggregate_identical_buckets():
    bucket = np.zeros(DX_START_COL + 2)
    bucket[0] = 1.0
    bucket[BMI_COL] = 0.7
    bucket[BMI_OBS_COL] = 1.0
    buckets = np.tile(bucket, (4, 1))
    np.testing.assert_allclose(B.aggregate_temporal(buckets), bucket)


def test_aggregate_visit_indicator_mean():
    buckets = np.zeros((3, DX_START_COL))
    buckets[0, 1] = 1.0
    agg = B.aggregate_temporal(buckets)
    assert agg[1] == pytest.approx(1 / 3)


def test_aggregate_bmi_over_observed_buckets_only():
    buckets = np.zeros((3, DX_START_COL))
    buckets[0, BMI_COL], buckets[0, BMI_OBS_COL] = 98.0, 1.0
    buckets[2, BMI_COL], buckets[2, BMI_OBS_COL] = 96.0, 1.0
    agg = B.aggregate_temporal(buckets)
    assert agg[BMI_COL] == 97.0
    assert agg[BMI_OBS_COL] == pytest.approx(2 / 3)


def test_aggregate_no_observed_bmi_gives_zero():
    agg = B.aggregate_temporal(np.zeros((2, DX_START_COL)))
    assert agg[BMI_COL] == 0.0


def test_aggregate_validates_shape():
    with pytest.raises(B.BaselineError):
        B.aggregate_temporal(np.zeros(DX_START_COL))


# ---------------------------------------------------------------------------
# training


def _separable(n=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    X[:, 0] = np.sign(X[:, 0]) * (0.3 + np.abs(X[:, 0]))  # margin around zero
    y = (X[:, 0] > 0).astype(float)
    return X, y


def test_separable_data_fit_exactly():
    X, y = _separable()
    model = B.train_logistic(X, y, l2=0.01)
    pred = (B.predict_logistic(model, X) >= 0.5).astype(float)
    assert np.array_equal(pred, y)


def test_huge_penalty_shrinks_weights():
    X, y = _separable()
    model = B.train_logistic(X, y, l2=1e6)
    assert np.linalg.norm(model.weights[1:]) <= 1e-3


def test_gradient_norm_at_optimum():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 5))
    logits = X @ rng.normal(size=5) * 0.5
    y = (rng.random(200) < 1 / (1 + np.exp(-logits))).astype(float)
    model = B.train_logistic(X, y, l2=0.1)
    assert model.converged
    assert model.grad_norm <= 1e-6


def test_convexity_same_optimum_from_any_start():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 4))
    y = (rng.random(120) < 0.4).astype(float)
    y[0], y[1] = 0, 1
    objectives = []
    for seed in range(3):
        w0 = np.random.default_rng(seed).normal(size=5) * 2.0
        model = B.train_logistic(X, y, l2=0.5, w0=w0)
        objectives.append(B.lr_objective(model.weights, X, y, 0.5)[0])
    assert max(objectives) - min(objectives) <= 1e-8


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(40, 3))
    y = rng.integers(0, 2, 40).astype(float)
    w = rng.normal(size=4)
    _, grad = B.lr_objective(w, X, y, 0.3)
    h = 1e-6
    for k in range(4):
        wp, wm = w.copy(), w.copy()
        wp[k] += h
        wm[k] -= h
        numeric = (B.lr_objective(wp, X, y, 0.3)[0] - B.lr_objective(wm, X, y, 0.3)[0]) / (2 * h)
        assert abs(grad[k] - numeric) / max(1.0, abs(grad[k])) <= 1e-7


def test_intercept_not_penalized():
    # all-positive-shifted labels: intercept should move freely under heavy l2
    rng = np.random.default_rng(7)
    X = rng.normal(size=(300, 2))
    y = (rng.random(300) < 0.9).astype(float)
    model = B.train_logistic(X, y, l2=1e6)
    assert model.weights[0] > 1.0  # sigmoid(w0) tracks the 0.9 base rate


def test_single_class_rejected():
    X = np.zeros((5, 2))
    with pytest.raises(B.BaselineError):
        B.train_logistic(X, np.ones(5))


def test_negative_penalty_rejected():
    X, y = _separable()
    with pytest.raises(B.BaselineError):
        B.train_logistic(X, y, l2=-1.0)


# ---------------------------------------------------------------------------
# prediction


def test_zero_weights_give_half():
    model = B.LrModel(weights=np.zeros(4), l2=1.0, converged=True, grad_norm=0.0)
    np.testing.assert_allclose(B.predict_logistic(model, np.random.default_rng(0).normal(size=(5, 3))), 0.5)


def test_prediction_monotone_in_positive_weight_feature():
    model = B.LrModel(weights=np.array([0.0, 1.0]), l2=1.0, converged=True, grad_norm=0.0)
    values = B.predict_logistic(model, np.array([[-1.0], [0.0], [2.0]]))
    assert values[0] < values[1] < values[2]
    assert values[1] == 0.5


def test_prediction_width_mismatch():
    model = B.LrModel(weights=np.zeros(4), l2=1.0, converged=True, grad_norm=0.0)
    with pytest.raises(B.BaselineError):
        B.predict_logistic(model, np.zeros((2, 5)))
