import numpy as np
import pytest

from knobtune.errors import ConfigError, DataError, RuntimeFailure
from knobtune.shapley import (
    Attribution,
    exact_shapley,
    global_importance,
    kernel_shap,
    kernel_weight,
    select_knobs,
)


def random_quadratic_model(m, seed):
    """Random quadratic with interactions: a genuinely non-additive model."""
    rng = np.random.default_rng(seed)
    lin = rng.normal(0, 1, m)
    quad = rng.normal(0, 0.5, (m, m))

    def f(x):
        x = np.atleast_2d(x)
        return x @ lin + ((x @ quad) * x).sum(axis=1)

    return f


# -- exact oracle ---------------------------------------------------------------


def test_linear_model_attributions_are_coefficients():
    def f(x):
        x = np.atleast_2d(x)
        return 2.0 * x[:, 0] + 3.0 * x[:, 1]

    attr = exact_shapley(f, x=np.array([1.0, 1.0]), background=np.zeros(2), m=2)
    assert attr.base == pytest.approx(0.0, abs=1e-12)
    assert attr.contributions == pytest.approx([2.0, 3.0], abs=1e-12)


def test_symmetry_axiom():
    def f(x):
        x = np.atleast_2d(x)
        return x[:, 0] + x[:, 1]

    attr = exact_shapley(f, np.array([1.0, 1.0]), np.zeros(2), 2)
    assert attr.contributions[0] == pytest.approx(attr.contributions[1], abs=1e-12)


def test_dummy_axiom_unused_feature_gets_zero():
    def f(x):
        x = np.atleast_2d(x)
        return np.sin(x[:, 0]) * 3.0 + x[:, 2] ** 2

    attr = exact_shapley(f, np.array([0.7, 0.9, 0.4]), np.array([0.1, 0.5, 0.2]), 3)
    assert attr.contributions[1] == pytest.approx(0.0, abs=1e-12)


def test_efficiency_axiom_randomized():
    rng = np.random.default_rng(0)
    for trial in range(100):
        m = int(rng.integers(2, 7))
        f = random_quadratic_model(m, seed=trial)
        x = rng.normal(0, 1, m)
        bg = rng.normal(0, 1, m)
        attr = exact_shapley(f, x, bg, m)
        lhs = attr.base + attr.contributions.sum()
        assert lhs == pytest.approx(float(f(x[None, :])[0]), abs=1e-9)


def test_exact_rejects_too_many_features_and_bad_model():
    with pytest.raises(ConfigError):
        exact_shapley(lambda x: 0.0, np.zeros(21), np.zeros(21), 21)
    with pytest.raises(RuntimeFailure):
        exact_shapley(lambda x: float("nan"), np.zeros(2), np.ones(2), 2)


# -- kernel weights --------------------------------------------------------------


def test_kernel_weight_hand_values():
    assert kernel_weight(4, 1) == 0.25
    assert kernel_weight(4, 2) == 0.125


def test_kernel_weight_symmetry():
    for m in range(2, 13):
        for s in range(1, m):
            assert kernel_weight(m, s) == pytest.approx(kernel_weight(m, m - s), rel=1e-15)


def test_kernel_weight_rejects_endpoints():
    with pytest.raises(ConfigError):
        kernel_weight(4, 0)
    with pytest.raises(ConfigError):
        kernel_weight(4, 4)


# -- kernel shap -----------------------------------------------------------------


def test_full_enumeration_matches_exact_oracle():
    rng = np.random.default_rng(42)
    for trial in range(10):
        m = 6
        f = random_quadratic_model(m, seed=100 + trial)
        x = rng.normal(0, 1, m)
        bg = rng.normal(0, 1, m)
        exact = exact_shapley(f, x, bg, m)
        approx = kernel_shap(f, x, background_set=bg[None, :], budget="full")
        assert np.max(np.abs(approx.contributions - exact.contributions)) <= 1e-6
        assert approx.base == pytest.approx(exact.base, abs=1e-9)


def test_constant_model_gets_zero_attributions():
    def f(x):
        x = np.atleast_2d(x)
        return np.full(x.shape[0], 7.5)

    attr = kernel_shap(f, np.ones(5), np.zeros((3, 5)), budget="full")
    assert attr.base == pytest.approx(7.5)
    assert np.allclose(attr.contributions, 0.0, atol=1e-9)


def test_efficiency_enforced_exactly():
    rng = np.random.default_rng(7)
    f = random_quadratic_model(8, seed=3)
    x = rng.normal(0, 1, 8)
    bg = rng.normal(0, 1, (10, 8))
    attr = kernel_shap(f, x, bg, budget=60, seed=5)
    total = attr.base + attr.contributions.sum()
    assert total == pytest.approx(float(f(x[None, :])[0]), abs=1e-9)


def test_sampled_mode_deterministic_per_seed():
    f = random_quadratic_model(9, seed=11)
    rng = np.random.default_rng(13)
    x = rng.normal(0, 1, 9)
    bg = rng.normal(0, 1, (6, 9))
    a = kernel_shap(f, x, bg, budget=80, seed=21)
    b = kernel_shap(f, x, bg, budget=80, seed=21)
    c = kernel_shap(f, x, bg, budget=80, seed=22)
    assert np.array_equal(a.contributions, b.contributions)
    assert not np.array_equal(a.contributions, c.contributions)


def test_sampled_mode_approximates_exact():
    f = random_quadratic_model(10, seed=17)
    rng = np.random.default_rng(19)
    x = rng.normal(0, 1, 10)
    bg = rng.normal(0, 1, 10)
    exact = exact_shapley(f, x, bg, 10)
    approx = kernel_shap(f, x, bg[None, :], budget=600, seed=1)
    assert np.max(np.abs(approx.contributions - exact.contributions)) <= 0.15


def test_budget_too_small_rejected():
    f = random_quadratic_model(6, seed=1)
    with pytest.raises(ConfigError):
        kernel_shap(f, np.zeros(6), np.ones((2, 6)), budget=5)


def test_single_feature_shortcut():
    def f(x):
        x = np.atleast_2d(x)
        return 3.0 * x[:, 0]

    attr = kernel_shap(f, np.array([2.0]), np.array([[0.5]]), budget="full")
    assert attr.base == pytest.approx(1.5)
    assert attr.contributions[0] == pytest.approx(4.5)


# -- global importance -------------------------------------------------------------


def test_global_importance_mean_of_absolutes_with_tie_break():
    attrs = [
        Attribution(base=0.0, contributions=np.array([1.0, -2.0])),
        Attribution(base=0.0, contributions=np.array([-3.0, 2.0])),
    ]
    report = global_importance(attrs)
    assert report.importance.tolist() == [2.0, 2.0]
    assert report.ranking.tolist() == [0, 1]  # tie broken by ascending index


def test_global_importance_single_row():
    report = global_importance([Attribution(0.0, np.array([-1.5, 0.25, 0.0]))])
    assert report.importance.tolist() == [1.5, 0.25, 0.0]
    assert report.ranking.tolist() == [0, 1, 2]


def test_scaling_preserves_ranking():
    rng = np.random.default_rng(23)
    attrs = [Attribution(0.0, rng.normal(0, 1, 6)) for _ in range(10)]
    scaled = [Attribution(0.0, 3.5 * a.contributions) for a in attrs]
    r1 = global_importance(attrs)
    r2 = global_importance(scaled)
    assert np.array_equal(r1.ranking, r2.ranking)
    assert np.allclose(r2.importance, 3.5 * r1.importance)


def test_global_importance_rejects_empty():
    with pytest.raises(DataError):
        global_importance([])


def test_select_knobs():
    report = global_importance([Attribution(0.0, np.array([0.1, 5.0, 2.0, 0.4]))])
    assert select_knobs(report, 4) == [1, 2, 3, 0]
    assert select_knobs(report, 1) == [1]
    with pytest.raises(ConfigError):
        select_knobs(report, 0)
    with pytest.raises(ConfigError):
        select_knobs(report, 5)
