import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.special import ndtr
from scipy.stats import multivariate_normal

from survey_disagg.design_effect import EffectiveCounts
from survey_disagg.model.observations import ModelConfig, ModelObservation, Priors, compile_observations
from survey_disagg.model.sampler import (
    JointPosterior,
    PosteriorDraws,
    SamplerError,
    _block_sandwich,
    ar_quadratic,
    ar_sums,
    augment_latents,
    collapsed_stats,
    cov_log_prior,
    prepare_fit_data,
    run_chain,
    run_chains,
    whitened_weights,
)
from survey_disagg.stmra import MaternParams, build_basis, build_knot_tree

from toy import FIXED, toy_config, toy_hierarchy, toy_observations


@pytest.fixture(scope="module")
def small_sys():
    tree = build_knot_tree((0, 0, 1, 1), 1, 4, 4)
    return build_basis(tree, MaternParams(0.8, 0.4, 1.0))


def dense_prior_cov(sys, T, alpha, mu_var):
    """Covariance of the stacked ``(mu_t, eta_t)`` vectors."""
    Sigma = sys.params.sigma2 * np.linalg.inv(block_diag(*sys.Kinv_unit))
    p = Sigma.shape[0]
    n = p + 1
    C = np.zeros((T * n, T * n))
    for s in range(T):
        C[s * n, s * n] = mu_var
        for t in range(T):
            C[s * n + 1:(s + 1) * n, t * n + 1:(t + 1) * n] = alpha ** abs(s - t) * Sigma
    return C


def posterior_setup(sys, T=3, G=7, seed=0):
    rng = np.random.default_rng(seed)
    B = rng.uniform(0, 0.5, (G, sys.n_basis))
    prec = rng.uniform(1, 30, (T, G))
    lin = rng.normal(0, 3, (T, G))
    return B, prec, lin


def test_block_sandwich(small_sys):
    Kb = small_sys.Kinv_unit
    S = np.random.default_rng(0).normal(size=(small_sys.n_basis,) * 2)
    S = S + S.T
    K = block_diag(*Kb)
    np.testing.assert_allclose(_block_sandwich(Kb, S), K @ S @ K, atol=1e-9)


@pytest.mark.parametrize("T", [1, 3])
def test_joint_posterior_mean_matches_dense(small_sys, T):
    B, prec, lin = posterior_setup(small_sys, T)
    pri = Priors(mu_var=4.0)
    alpha = 0.7
    post = JointPosterior(B, small_sys, alpha, prec, lin, pri)
    C = dense_prior_cov(small_sys, T, alpha, pri.mu_var)
    X = np.column_stack([np.ones(B.shape[0]), B])
    Xbig = block_diag(*([X] * T))
    Q = np.linalg.inv(C) + Xbig.T @ np.diag(prec.ravel()) @ Xbig
    mean = np.linalg.solve(Q, Xbig.T @ lin.ravel())
    np.testing.assert_allclose(post.mean().ravel(), mean, rtol=1e-7, atol=1e-8)


def test_joint_posterior_marginal_likelihood_differences(small_sys):
    """Differences of the collapsed log marginal across alpha and phi match dense Gaussians."""
    T = 3
    B, prec, lin = posterior_setup(small_sys, T)
    pri = Priors(mu_var=4.0)
    X = np.column_stack([np.ones(B.shape[0]), B])
    Xbig = block_diag(*([X] * T))
    y = lin.ravel() / prec.ravel()

    def dense(sys, alpha):
        C = dense_prior_cov(sys, T, alpha, pri.mu_var)
        S = Xbig @ C @ Xbig.T + np.diag(1.0 / prec.ravel())
        return multivariate_normal(np.zeros(len(y)), S).logpdf(y)

    other = build_basis(small_sys.tree, MaternParams(1.3, 0.2, 0.6))
    a = JointPosterior(B, small_sys, 0.7, prec, lin, pri).log_marginal()
    b = JointPosterior(B, small_sys, 0.2, prec, lin, pri).log_marginal()
    c = JointPosterior(B, other, 0.7, prec, lin, pri).log_marginal()
    assert a - b == pytest.approx(dense(small_sys, 0.7) - dense(small_sys, 0.2), rel=1e-7, abs=1e-7)
    assert a - c == pytest.approx(dense(small_sys, 0.7) - dense(other, 0.7), rel=1e-7, abs=1e-7)


def test_joint_posterior_sample_covariance(small_sys):
    T = 2
    B, prec, lin = posterior_setup(small_sys, T, seed=3)
    pri = Priors(mu_var=4.0)
    post = JointPosterior(B, small_sys, 0.5, prec, lin, pri)
    C = dense_prior_cov(small_sys, T, 0.5, pri.mu_var)
    X = np.column_stack([np.ones(B.shape[0]), B])
    Xbig = block_diag(*([X] * T))
    cov = np.linalg.inv(np.linalg.inv(C) + Xbig.T @ np.diag(prec.ravel()) @ Xbig)
    rng = np.random.default_rng(1)
    draws = np.array([np.column_stack(post.sample(rng)).ravel() for _ in range(20_000)])
    idx = [0, 1, 5, post.n, post.n + 3]
    emp = np.cov(draws[:, idx].T)
    np.testing.assert_allclose(emp, cov[np.ix_(idx, idx)], atol=4 * np.sqrt(2.0 / 20_000) * np.max(np.diag(cov)))


def test_collapsed_stats_match_integrating_eps():
    # S | f ~ N(n f, n + n^2 tau2) after integrating eps, so the Gaussian in f has
    # precision n / (1 + n tau2) and linear term S / (1 + n tau2)
    n, S, tau2 = np.array([7.0]), np.array([2.5]), 0.3
    P, lin = collapsed_stats(n, S, tau2)
    fs = np.linspace(-2, 2, 5)
    logp = -0.5 * (S - n * fs) ** 2 / (n + n**2 * tau2)
    quad = -0.5 * P * fs**2 + lin * fs
    d = logp - quad
    np.testing.assert_allclose(d, d[0], atol=1e-12)


def test_augment_single_cell_counts_pass_through():
    obs = [ModelObservation("tract", "a", 1, 1, EffectiveCounts(10, 4), (("a", 1, 1.0),))]
    comp = compile_observations(obs, ["a", "b"], [1])
    n_pos, n_neg, S = augment_latents(np.array([0.1, -0.3]), comp, np.random.default_rng(0))
    assert list(n_pos) == [4, 0] and list(n_neg) == [6, 0]
    assert S[1] == 0.0


def test_augment_allocation_probabilities():
    cells = (("a", 1, 0.25), ("b", 1, 0.75))
    obs = [ModelObservation("puma", "P", 1, 1, EffectiveCounts(40, 10), cells)]
    comp = compile_observations(obs, ["a", "b"], [1])
    lp = np.array([0.5, -0.8])
    rng = np.random.default_rng(2)
    got = np.array([augment_latents(lp, comp, rng)[0][0] for _ in range(4000)])
    pa, pb = 0.25 * ndtr(0.5), 0.75 * ndtr(-0.8)
    assert got.mean() == pytest.approx(10 * pa / (pa + pb), rel=0.02)


def test_augment_rejects_non_finite():
    obs = [ModelObservation("tract", "a", 1, 1, EffectiveCounts(10, 4), (("a", 1, 1.0),))]
    comp = compile_observations(obs, ["a"], [1])
    with pytest.raises(SamplerError):
        augment_latents(np.array([np.nan]), comp, np.random.default_rng(0))


def test_ar_quadratic_matches_dense(small_sys):
    T, alpha = 4, 0.6
    eta = np.random.default_rng(0).normal(size=(T, small_sys.n_basis))
    Q = ar_quadratic(ar_sums(whitened_weights(eta, small_sys)), alpha)
    C = dense_prior_cov(small_sys.with_sigma2(1.0), T, alpha, 1.0)
    keep = [i for i in range(C.shape[0]) if i % (small_sys.n_basis + 1) != 0]
    C = C[np.ix_(keep, keep)]
    x = eta.ravel()
    assert Q == pytest.approx(x @ np.linalg.solve(C, x), rel=1e-8)


def test_cov_log_prior_outside_support():
    assert cov_log_prior(0.5, 1.99, Priors()) == -np.inf
    assert np.isfinite(cov_log_prior(0.5, 1.0, Priors()))


# --- full chains on the toy ---------------------------------------------------


@pytest.fixture(scope="module")
def toy_data():
    cfg = toy_config(400)
    return cfg, prepare_fit_data(toy_observations(), toy_hierarchy(), cfg, years=[1])


def test_chain_is_reproducible(toy_data):
    cfg, data = toy_data
    a = run_chain(cfg, data)
    b = run_chain(cfg, data)
    np.testing.assert_array_equal(a.pi, b.pi)
    assert a.pi.shape == (320, 1, 2)
    assert np.all((a.pi >= 0) & (a.pi <= 1))


def test_fixed_parameters_stay_fixed(toy_data):
    cfg, data = toy_data
    d = run_chain(cfg, data)
    for k in ("tau2", "tauC2", "sigma2", "phi", "nu", "alpha"):
        assert np.all(d.params[k] == FIXED[k])


def test_free_chain_moves_everything():
    h = toy_hierarchy()
    cfg = ModelConfig(M=0, r=1, q=4, iters=300, burnin=100, thin=1, seed=4)
    data = prepare_fit_data(toy_observations(), h, cfg, years=[1])
    d = run_chains(cfg, data)
    for k in ("tau2", "tauC2", "sigma2", "phi", "nu"):
        assert np.std(d.params[k]) > 0
    assert set(d.ess) >= {"tau2", "mu[1]"}


def test_draws_roundtrip(tmp_path, toy_data):
    cfg, data = toy_data
    d = run_chain(cfg, data)
    d.save(tmp_path / "d.npz")
    e = PosteriorDraws.load(tmp_path / "d.npz")
    np.testing.assert_array_equal(d.pi, e.pi)
    assert e.tract_ids == d.tract_ids and e.years == d.years
    assert e.fingerprint == cfg.fingerprint()
    np.testing.assert_array_equal(e.cell("B", 1), d.pi[:, 0, 1])
    with pytest.raises(KeyError):
        e.cell("Z", 1)


def test_draws_reject_out_of_range():
    with pytest.raises(ValueError):
        PosteriorDraws(np.full((2, 1, 1), 1.5), np.zeros((2, 1)), {}, ["a"], [1], np.zeros(2), {}, 0, "")


def test_two_chains_pool(toy_data):
    cfg, data = toy_data
    from dataclasses import replace
    d = run_chains(replace(cfg, chains=2), data)
    assert d.n_draws == 640
    assert set(np.unique(d.chain_id)) == {0, 1}
