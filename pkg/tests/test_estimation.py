import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from mixturelab.errors import FittingFailedError
from mixturelab.estimation import (
    FitConfig,
    StartSpec,
    align_labels,
    best_permutation,
    best_root,
    default_starts,
    detect_spurious,
    em_fit,
    em_step,
    multi_start_fit,
    permute,
)
from mixturelab.model import MixtureModel, Sample, loglik


def two_cluster_sample(rng, n=400, gap=4.0):
    model = MixtureModel([0.4, 0.6], [[0.0, 0.0], [gap, 1.0]], [np.eye(2), [[1.0, 0.3], [0.3, 2.0]]])
    x, labels = model.sample(n, rng)
    return model, Sample(x, labels)


def test_recovers_separated_components(rng):
    truth, sample = two_cluster_sample(rng, n=4000)
    fit = align_labels(em_fit(sample, FitConfig(k=2)), truth)
    assert fit.converged and not fit.spurious
    np.testing.assert_allclose(fit.model.means, truth.means, atol=0.1)
    np.testing.assert_allclose(fit.model.weights, truth.weights, atol=0.03)
    np.testing.assert_allclose(fit.model.covariances, truth.covariances, atol=0.15)


def test_converged_fit_is_em_fixed_point(rng):
    _, sample = two_cluster_sample(rng)
    config = FitConfig(k=2, rel_tolerance=1e-13, max_iterations=5000)
    fit = em_fit(sample, config)
    nxt = em_step(fit.model, sample, config)
    np.testing.assert_allclose(nxt.means, fit.model.means, atol=1e-5)
    assert loglik(fit.model, sample.data) == pytest.approx(fit.loglik, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 3), m=st.integers(1, 3))
def test_em_trace_nondecreasing(seed, k, m):
    rng = np.random.default_rng(seed)
    truth = random_model(rng, k, m)
    x, _ = truth.sample(150, rng)
    config = FitConfig(k=k, starts=(StartSpec("random"),), seed=seed, max_iterations=300)
    try:
        fit = em_fit(Sample(x), config)
    except Exception:
        return
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9)


def test_fixed_blocks_are_untouched(rng):
    truth, sample = two_cluster_sample(rng)
    config = FitConfig(k=2, fix_weights=truth.weights, fix_covariances=truth.covariances)
    fit = em_fit(sample, config)
    np.testing.assert_array_equal(fit.model.weights, truth.weights)
    np.testing.assert_array_equal(fit.model.covariances, truth.covariances)
    assert fit.weights_fixed and fit.covariances_fixed


def test_fixed_weight_validation():
    with pytest.raises(ValueError):
        FitConfig(k=2, fix_weights=np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        FitConfig(k=0)


def test_random_starts_are_seed_deterministic(rng):
    _, sample = two_cluster_sample(rng)
    config = FitConfig(k=2, starts=default_starts(sample, 2, n_random=3), seed=7)
    a = multi_start_fit(sample, config)
    b = multi_start_fit(sample, config)
    assert [r.loglik for r in a] == [r.loglik for r in b]
    assert np.array_equal(a[0].model.means, b[0].model.means)


def test_multistart_roots_are_distinct_and_sorted(rng):
    _, sample = two_cluster_sample(rng, gap=1.5)
    config = FitConfig(k=3, starts=default_starts(sample, 3, n_random=8), seed=3)
    roots = multi_start_fit(sample, config)
    lls = [r.loglik for r in roots]
    assert lls == sorted(lls, reverse=True)
    for i, a in enumerate(roots):
        for b in roots[i + 1 :]:
            assert not np.allclose(a.model.means, align_labels(b, a.model).model.means, atol=1e-8)


def test_spurious_component_flagged():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(size=(200, 1)), [[5.0], [5.0 + 1e-4]]])
    sample = Sample(x)
    model = MixtureModel([0.99, 0.01], [[0.0], [5.0]], [[[1.0]], [[1e-8]]])
    resp = np.column_stack([np.r_[np.ones(200), 0, 0], np.r_[np.zeros(200), 1, 1]])
    from mixturelab.estimation import FitResult

    fit = FitResult(model, 0.0, np.zeros(1), resp, 1, True)
    flag, reason = detect_spurious(fit, sample, FitConfig(k=2))
    assert flag
    assert "(a)" in reason and "(b)" in reason


def test_best_root_skips_spurious(rng):
    _, sample = two_cluster_sample(rng)
    fit = em_fit(sample, FitConfig(k=2))
    from dataclasses import replace

    bad = replace(fit, loglik=fit.loglik + 10, spurious=True)
    assert best_root([bad, fit]) is fit
    assert best_root([bad]) is None


def test_all_starts_failing_raises():
    sample = Sample(np.zeros((6, 1)))
    with pytest.raises(FittingFailedError) as info:
        multi_start_fit(sample, FitConfig(k=3))
    assert len(info.value.reasons) == 1


def test_permutation_roundtrip(rng):
    _, sample = two_cluster_sample(rng)
    fit = em_fit(sample, FitConfig(k=2))
    swapped = permute(fit, [1, 0])
    assert best_permutation(swapped.model.means, fit.model.means) == (1, 0)
    back = align_labels(swapped, fit.model)
    np.testing.assert_array_equal(back.model.means, fit.model.means)
    np.testing.assert_array_equal(back.responsibilities, fit.responsibilities)


def test_single_gaussian_converges_to_moments(rng):
    x = rng.normal(size=(300, 2)) @ np.array([[1.0, 0.0], [0.5, 1.0]])
    fit = em_fit(Sample(x), FitConfig(k=1))
    assert fit.iterations <= 2
    np.testing.assert_allclose(fit.model.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(fit.model.covariances[0], np.cov(x.T, bias=True), rtol=1e-8)


def test_k1_has_one_root(rng):
    x = rng.normal(size=(100, 1))
    config = FitConfig(k=1, starts=default_starts(Sample(x), 1, n_random=5))
    assert len(multi_start_fit(Sample(x), config)) == 1


def test_fit_beats_mean_grid():
    rng = np.random.default_rng(50)
    truth = MixtureModel([0.5, 0.5], [[-1.5], [1.5]], [[[1.0]], [[1.0]]])
    x, _ = truth.sample(50, rng)
    sample = Sample(x)
    fit = em_fit(sample, FitConfig(k=2, rel_tolerance=1e-14, max_iterations=10000))
    grid = np.linspace(-4, 4, 100)
    best = max(
        loglik(fit.model.replace(means=[[a], [b]]), x) for a in grid for b in grid
    )
    assert fit.loglik >= best - 1e-9


def test_separated_data_single_regular_root(rng):
    _, sample = two_cluster_sample(rng, gap=8.0)
    config = FitConfig(k=2, starts=default_starts(sample, 2, n_random=10), seed=1)
    roots = multi_start_fit(sample, config)
    regular = [r for r in roots if not r.spurious]
    assert len(regular) == 1 and regular[0] is roots[0]


def _fit_with(model, resp):
    from mixturelab.estimation import FitResult

    return FitResult(model, 0.0, np.zeros(1), resp, 1, True)


def test_determinant_rule_threshold():
    resp = np.tile([0.5, 0.5], (100, 1))
    sample = Sample(np.zeros((100, 1)) + np.arange(100)[:, None])
    # |V1|/|V2| = 1e-4 is 1e-2 of the geometric mean: above the 1e-3 threshold
    mild = MixtureModel([0.5, 0.5], [[0.0], [1.0]], [[[1e-4]], [[1.0]]])
    assert not detect_spurious(_fit_with(mild, resp), sample)[0]
    severe = MixtureModel([0.5, 0.5], [[0.0], [1.0]], [[[1e-7]], [[1.0]]])
    flag, reason = detect_spurious(_fit_with(severe, resp), sample)
    assert flag and "(a)" in reason


def test_collapse_onto_eight_points():
    rng = np.random.default_rng(8)
    x = np.vstack([rng.normal(size=(92, 1)), 6.0 + 1e-5 * rng.normal(size=(8, 1))])
    resp = np.zeros((100, 2))
    resp[:92, 0] = resp[92:, 1] = 1.0
    model = MixtureModel([0.92, 0.08], [[0.0], [6.0]], [[[1.0]], [[1e-10]]])
    flag, reason = detect_spurious(_fit_with(model, resp), Sample(x))
    # mass 8 exceeds max(2, 0.02 n) = 2, so only the determinant rule fires
    assert flag and "(a)" in reason and "(b)" not in reason
