import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdsm_lab import gmm_oracle as oracle
from tdsm_lab.label_noise import FORWARD, TransitionMatrix

# Reference values computed independently at 50 digits (mpmath), frozen.
# (x, noisy label, t) -> weights over clean labels, noisy score, per-class
# S-weighted fixed points, clean posterior.
FROZEN = [
    ((1.0, 2.0), 0, 1.0,
     [0.99996914850082269743, 0.000030851499177302574558],
     [0.99990744550246809228, 0.49990744550246809228],
     [[1.0003699896601920863, 0.50036998966019208627], [0.9980572688715721163, 0.4980572688715721163]],
     [0.99987660542401376827, 0.00012339457598623172975]),
    ((0.5, -0.25), 1, 0.3,
     [0.49746312873684665743, 0.50253687126315334257],
     [-0.47268002530176152162, 0.21539336919365132663],
     [[2.7797898241187378786, 3.4678632186141507268], [-1.2857974876568863717, -0.59772409316147352343]],
     [0.79837144466931922967, 0.20162855533068077033]),
    ((-1.0, 0.5), 0, 3.0,
     [0.74768328359162472152, 0.25231671640837527848],
     [0.24860997015497483291, 0.098609970154974832911],
     [[0.36689386896539627405, 0.21689386896539627405], [-0.22452562508671093166, -0.37452562508671093166]],
     [0.42555748318834101285, 0.57444251681165898715]),
]

points = st.tuples(st.floats(-8, 8), st.floats(-8, 8))
times = st.floats(0.05, 10.0)


@pytest.mark.parametrize("x, ny, t, w, noisy, fp, post", FROZEN)
def test_frozen_reference_values(gmm, sched, S, x, ny, t, w, noisy, fp, post):
    x = np.array(x)
    np.testing.assert_allclose(oracle.weight_vectors(gmm, sched, S, x, ny, t), w, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(oracle.noisy_score(gmm, sched, S, x, ny, t), noisy, rtol=1e-12, atol=1e-14)
    for y in (0, 1):
        np.testing.assert_allclose(oracle.sdsm_fixed_point(gmm, sched, S, x, y, t), fp[y], rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(oracle.clean_posterior(gmm, sched, x, t), post, rtol=1e-12, atol=1e-15)


def test_clean_score_closed_form(gmm, sched):
    # -(x - mu) / (1 + t^2)
    np.testing.assert_allclose(oracle.clean_score(gmm, sched, np.array([1.0, 2.0]), 0, 1.0), [1.0, 0.5])
    np.testing.assert_array_equal(oracle.clean_score(gmm, sched, gmm.means[1], 1, 0.7), [0.0, 0.0])


def test_density_at_mean(gmm, sched):
    # N(mu; mu, 2 I) in 2-D is 1 / (4 pi)
    assert oracle.perturbed_class_density(gmm, sched, gmm.means[0], 0, 1.0) == pytest.approx(1 / (4 * np.pi), rel=1e-14)


def test_origin_weight_is_prior_by_symmetry(gmm, sched, S):
    for t in (0.05, 0.1, 1.0, 3.0, 10.0):
        assert oracle.exact_weight(gmm, sched, S, np.zeros(2), 0, 0, t) == pytest.approx(0.8, abs=1e-14)


def _grid():
    g = np.linspace(-6, 6, 20)
    return np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)


def test_large_time_weights_approach_S(gmm, sched, S):
    w = oracle.exact_weight(gmm, sched, S, _grid(), 0, 0, 40.0)
    assert np.abs(w - 0.8).max() < 0.01


def test_grid_deviation_at_t10_matches_closed_form(gmm, sched, S):
    # log p(x|1)/p(x|0) = -12 (x1 + x2) / (2 (1 + t^2)); worst at the corner (-6, -6)
    r = np.exp(144.0 / 202.0)
    expected = 0.8 - 0.8 / (0.8 + 0.2 * r)
    w = oracle.exact_weight(gmm, sched, S, _grid(), 0, 0, 10.0)
    assert np.abs(w - 0.8).max() == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.137730781518, abs=1e-11)


def test_small_time_weights_become_hard(gmm, sched, S, rng):
    x = gmm.means[0] + rng.standard_normal((500, 2))
    assert oracle.exact_weight(gmm, sched, S, x, 0, 0, 0.05).min() > 0.99


@given(points, times, st.integers(0, 1))
def test_weights_on_simplex(gmm, sched, S, x, t, ny):
    w = oracle.weight_vectors(gmm, sched, S, np.array(x), ny, t)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


@given(points, times, st.integers(0, 1))
def test_noisy_score_is_weighted_clean_score(gmm, sched, S, x, t, ny):
    x = np.array(x)
    w = oracle.weight_vectors(gmm, sched, S, x, ny, t)
    combo = w @ oracle.clean_scores(gmm, sched, x, t)
    np.testing.assert_allclose(oracle.noisy_score(gmm, sched, S, x, ny, t), combo, atol=1e-10)


@given(points, times, st.integers(0, 1), st.integers(0, 1))
def test_weight_equals_posterior(gmm, sched, S, x, t, ny, y):
    x = np.array(x)
    a = oracle.exact_weight(gmm, sched, S, x, ny, y, t)
    b = oracle.posterior_weight(gmm, sched, S, x, ny, y, t)
    assert abs(a - b) < 1e-10


@given(points, times)
def test_mirror_symmetry(gmm, sched, S, x, t):
    # the toy problem is symmetric under x -> -x with labels swapped
    x = np.array(x)
    assert oracle.exact_weight(gmm, sched, S, x, 0, 0, t) == pytest.approx(
        oracle.exact_weight(gmm, sched, S, -x, 1, 1, t), abs=1e-12)


@given(points, times)
def test_marginal_score_matches_central_difference(gmm, sched, x, t):
    x = np.array(x)
    h = 1e-5
    fd = [(oracle.log_marginal(gmm, sched, x + h * e, t) - oracle.log_marginal(gmm, sched, x - h * e, t)) / (2 * h)
          for e in np.eye(2)]
    np.testing.assert_allclose(oracle.marginal_score(gmm, sched, x, t), fd, atol=1e-6)


@given(times)
def test_sdsm_fixed_point_maps_back_through_S(gmm, sched, S, t):
    x = np.array([[0.3, -1.2], [2.0, 2.5], [-4.0, 1.0]])
    fp = np.stack([oracle.sdsm_fixed_point(gmm, sched, S, x, y, t) for y in (0, 1)], axis=1)
    for k in (0, 1):
        np.testing.assert_allclose(np.einsum("c,ncd->nd", S.entries[k], fp),
                                   oracle.noisy_score(gmm, sched, S, x, k, t), atol=1e-10)


def test_fixed_point_differs_from_clean_score(gmm, sched, S):
    x = np.array([0.5, -0.25])
    assert np.abs(oracle.sdsm_fixed_point(gmm, sched, S, x, 0, 0.3) - oracle.clean_score(gmm, sched, x, 0, 0.3)).max() > 0.4


def test_oracle_noisy_classifier_is_simplex_and_forward_composition(gmm, sched, S):
    x = np.array([[0.0, 0.0], [3.0, 3.0], [-5.0, 2.0]])
    p = oracle.oracle_noisy_classifier(gmm, sched, S, x, 0.5)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(p[0], [0.5, 0.5], atol=1e-14)
    T = oracle.forward_matrix(gmm, S)
    np.testing.assert_allclose(p, oracle.clean_posterior(gmm, sched, x, 0.5) @ T, atol=1e-15)


def test_forward_matrix_of_symmetric_S_with_uniform_prior(gmm, S):
    np.testing.assert_allclose(oracle.forward_matrix(gmm, S), S.entries, atol=1e-15)
    np.testing.assert_allclose(oracle.noisy_prior(gmm, S), [0.5, 0.5], atol=1e-15)


def test_log_prob_gradients_keep_precision_far_from_boundary(gmm, sched, S):
    # deep in class 0 the class-1 posterior is ~1e-30; its gradient must still
    # be accurate relative to its own size
    x = np.array([5.0, 5.0])
    G = oracle.oracle_clean_log_prob_grads(gmm, sched, x, 0.1)
    post = oracle.clean_posterior(gmm, sched, x, 0.1)
    s = oracle.clean_scores(gmm, sched, x, 0.1)
    np.testing.assert_allclose(G[0], post[1] * (s[0] - s[1]), rtol=1e-12)
    np.testing.assert_allclose(G[1], post[0] * (s[1] - s[0]), rtol=1e-12)


def test_vectorised_shapes(gmm, sched, S):
    x = np.zeros((3, 4, 2))
    assert oracle.clean_scores(gmm, sched, x, 1.0).shape == (3, 4, 2, 2)
    assert oracle.weight_vectors(gmm, sched, S, x, 0, 1.0).shape == (3, 4, 2)
    assert oracle.weight_matrices(gmm, sched, S, x, 1.0).shape == (3, 4, 2, 2)
    assert oracle.noisy_score(gmm, sched, S, x, np.zeros((3, 4), dtype=int), np.full((3, 4), 2.0)).shape == (3, 4, 2)


def test_mixture_sampling_moments(gmm):
    x, y = gmm.sample(20000, np.random.Generator(np.random.Philox(0)))
    assert abs(y.mean() - 0.5) < 0.02
    np.testing.assert_allclose(x[y == 0].mean(axis=0), gmm.means[0], atol=0.05)


def test_errors(gmm, sched, S):
    x = np.zeros(2)
    with pytest.raises(IndexError):
        oracle.clean_score(gmm, sched, x, 2, 1.0)
    with pytest.raises(TypeError):
        oracle.exact_weight(gmm, sched, S, x, 0.5, 0, 1.0)
    with pytest.raises(ValueError):
        oracle.clean_score(gmm, sched, np.zeros(3), 0, 1.0)
    with pytest.raises(ValueError):
        oracle.clean_score(gmm, sched, x, 0, -1.0)
    with pytest.raises(ValueError):
        oracle.weight_vectors(gmm, sched, TransitionMatrix(np.eye(2), FORWARD), x, 0, 1.0)
    with pytest.raises(np.linalg.LinAlgError):
        oracle.sdsm_fixed_point(gmm, sched, np.full((2, 2), 0.5), x, 0, 1.0)
    with pytest.raises(ValueError):
        oracle.GaussianMixture(np.zeros((2, 2)), np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        oracle.GaussianMixture(np.zeros((2, 2)), np.ones(2), np.array([0.6, 0.5]))
    with pytest.raises(ValueError):
        oracle.VESchedule(t_min=1.0, t_max=0.5)


def test_schedule_is_variance_exploding(sched):
    t = np.array([0.0, 0.5, 2.0])
    np.testing.assert_array_equal(sched.sigma(t), t)
    np.testing.assert_allclose(sched.g(t) ** 2, 2 * t)
    assert not sched.drift(np.ones((2, 2)), 1.0).any()


def test_no_underflow_at_grid_corners_small_t(gmm, sched, S):
    # linear-space evaluation would underflow here; log-space must not
    x = np.array([[6.0, 6.0], [-6.0, -6.0], [6.0, -6.0]])
    w = oracle.weight_vectors(gmm, sched, S, x, 0, 0.05)
    assert np.all(np.isfinite(w))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-14)
