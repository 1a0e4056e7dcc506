import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from survey_disagg.geometry import rectangle_unit, quadrature_points
from survey_disagg.stmra import (
    ArealDesign,
    MaternParams,
    PointEvaluator,
    WeightChain,
    areal_basis,
    basis_cache_key,
    build_basis,
    build_knot_tree,
    eval_field,
    load_basis_matrix,
    matern_corr,
    matern_cov,
    sample_weights_prior,
    save_basis_matrix,
)

UNIT = (0.0, 0.0, 1.0, 1.0)


# --- Matérn ------------------------------------------------------------------


def test_matern_half_is_exponential():
    h = np.linspace(0, 5, 101)
    p = MaternParams(1.7, 0.4, 0.5)
    np.testing.assert_allclose(matern_cov(h, p), 1.7 * np.exp(-h / 0.4), rtol=0, atol=1e-10)


def test_matern_three_halves_closed_form():
    h = np.linspace(0, 5, 101)
    x = h / 0.7
    np.testing.assert_allclose(matern_corr(h, 0.7, 1.5), (1 + x) * np.exp(-x), atol=1e-10)


def test_matern_zero_distance_is_sigma2():
    assert matern_cov(0.0, MaternParams(2.5, 1.0, 1.0)) == 2.5


def mp_matern(h, phi, nu):
    x = mpmath.mpf(h) / phi
    if x == 0:
        return 1.0
    return float(2 ** (1 - mpmath.mpf(nu)) / mpmath.gamma(nu) * x**nu * mpmath.besselk(nu, x))


@given(st.floats(1e-4, 30.0), st.floats(0.05, 3.0), st.floats(0.06, 1.94))
def test_matern_against_mpmath(h, phi, nu):
    assert matern_corr(h, phi, nu) == pytest.approx(mp_matern(h, phi, nu), rel=1e-9, abs=1e-300)


def test_matern_rejects_bad_input():
    with pytest.raises(ValueError):
        matern_corr(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        matern_corr(np.inf, 1.0, 1.0)
    with pytest.raises(ValueError):
        MaternParams(1.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        MaternParams(0.0, 1.0, 1.0)


@given(st.floats(0.05, 3.0), st.floats(0.06, 1.94))
def test_matern_monotone_decreasing(phi, nu):
    c = matern_corr(np.linspace(0, 10, 200), phi, nu)
    assert np.all(np.diff(c) <= 1e-15)
    assert np.all((c >= 0) & (c <= 1))


def test_spline_plan_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, (600, 2))
    tree = build_knot_tree(UNIT, 2, 4, 9)
    ev = PointEvaluator(tree, pts)
    assert ev.plan is not None
    sys = build_basis(tree, MaternParams(1.0, 0.3, 0.8))
    exact = sys.level_values(ev.dist, ev.parts, None)
    np.testing.assert_allclose(ev.values(sys), exact, atol=1e-9)


# --- knot tree ---------------------------------------------------------------


def test_tree_shape():
    tree = build_knot_tree(UNIT, 2, 4, 9)
    assert [len(r) for r in tree.rects] == [1, 4, 16]
    assert tree.n_basis == 21 * 9
    for m in range(3):
        k = tree.knots[m]
        rc = tree.rects[m]
        assert np.all((k[..., 0] > rc[:, None, 0]) & (k[..., 0] < rc[:, None, 2]))


def test_tree_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_knot_tree(UNIT, 2, 3, 9)
    with pytest.raises(ValueError):
        build_knot_tree(UNIT, 2, 4, 8)
    with pytest.raises(ValueError):
        build_knot_tree((0, 0, 0, 1), 2, 4, 9)


def test_locate_matches_rectangles():
    tree = build_knot_tree(UNIT, 2, 4, 4)
    pts = np.random.default_rng(1).uniform(0, 1, (500, 2))
    for m in range(3):
        idx = tree.locate(pts, m)
        rc = tree.rects[m][idx]
        assert np.all((pts[:, 0] >= rc[:, 0]) & (pts[:, 0] <= rc[:, 2]))
        assert np.all((pts[:, 1] >= rc[:, 1]) & (pts[:, 1] <= rc[:, 3]))


# --- independent recursion oracle --------------------------------------------


class NaiveMRA:
    """Direct transcription of the recursive remainder covariances."""

    def __init__(self, tree, p):
        self.tree, self.p = tree, p
        self.cache = {}

    def region(self, s, m):
        return int(self.tree.locate(np.atleast_2d(s), m)[0])

    def C(self, m, A, B):
        """Remainder covariance at level ``m`` between point sets ``A`` and ``B``."""
        A, B = np.atleast_2d(A), np.atleast_2d(B)
        D = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1))
        out = matern_cov(D, self.p) * np.ones_like(D)
        for k in range(m):
            for a in range(len(A)):
                for b in range(len(B)):
                    ja, jb = self.region(A[a], k), self.region(B[b], k)
                    if ja == jb:
                        out[a, b] -= self.b(k, ja, A[a]) @ self.K(k, ja) @ self.b(k, jb, B[b])
        for a in range(len(A)):
            for b in range(len(B)):
                if self.region(A[a], m) != self.region(B[b], m):
                    out[a, b] = 0.0
        return out

    def K(self, m, j):
        key = ("K", m, j)
        if key not in self.cache:
            Q = self.tree.knots[m][j]
            self.cache[key] = np.linalg.inv(self.C(m, Q, Q))
        return self.cache[key]

    def b(self, m, j, s):
        if self.region(s, m) != j:
            return np.zeros(self.tree.r)
        return self.C(m, s, self.tree.knots[m][j])[0]


@pytest.fixture(scope="module")
def small_system():
    tree = build_knot_tree(UNIT, 2, 4, 4)
    p = MaternParams(1.3, 0.35, 1.2)
    return tree, p, build_basis(tree, p, jitter=1e-12)


def test_basis_matches_naive_recursion(small_system):
    tree, p, sys = small_system
    oracle = NaiveMRA(tree, p)
    pts = np.random.default_rng(5).uniform(0, 1, (6, 2))
    B = sys.basis_at(pts)
    for i, s in enumerate(pts):
        for m in range(tree.M + 1):
            for j in range(tree.n_partitions(m)):
                cols = sys.columns(m, j)
                # basis functions use the unit-variance correlation
                np.testing.assert_allclose(p.sigma2 * B[i, cols], oracle.b(m, j, s), atol=1e-8)


def test_block_covariances_match_naive_recursion(small_system):
    tree, p, sys = small_system
    oracle = NaiveMRA(tree, p)
    for m, j in [(0, 0), (1, 2), (2, 7)]:
        k = tree.block_offset(m) + j
        # sigma2 moves from the basis into the blocks: K = sigma2^2 * K_oracle
        np.testing.assert_allclose(sys.K_blocks[k], p.sigma2**2 * oracle.K(m, j), rtol=1e-6, atol=1e-8)


def test_zero_rule(small_system):
    tree, _, sys = small_system
    pts = np.random.default_rng(6).uniform(0, 1, (50, 2))
    B = sys.basis_at(pts)
    for m in range(tree.M + 1):
        own = tree.locate(pts, m)
        for j in range(tree.n_partitions(m)):
            outside = own != j
            assert np.all(B[np.ix_(outside, sys.columns(m, j))] == 0.0)


def test_covariance_exact_at_knots_of_coarsest_level(small_system):
    tree, p, sys = small_system
    Q = tree.knots[0][0]
    D = np.sqrt(((Q[:, None] - Q[None]) ** 2).sum(-1))
    np.testing.assert_allclose(sys.covariance(Q, Q), matern_cov(D, p), atol=1e-8)


def test_variance_exact_at_every_point():
    # the finest remainder is fully resolved at knots of the last level
    tree = build_knot_tree(UNIT, 1, 4, 9)
    p = MaternParams(1.0, 0.3, 1.0)
    sys = build_basis(tree, p, jitter=1e-12)
    Q = tree.knots[1].reshape(-1, 2)
    np.testing.assert_allclose(np.diag(sys.covariance(Q, Q)), 1.0, atol=1e-7)


def test_covariance_approximates_matern():
    tree = build_knot_tree(UNIT, 2, 4, 16)
    p = MaternParams(1.0, 0.3, 1.0)
    sys = build_basis(tree, p)
    pts = np.random.default_rng(2).uniform(0, 1, (40, 2))
    D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    err = np.abs(sys.covariance(pts, pts) - matern_cov(D, p))
    assert np.max(np.diag(err)) < 0.02
    assert np.max(err) < 0.1
    assert np.mean(err) < 0.01


def test_with_sigma2_scales_blocks(small_system):
    _, _, sys = small_system
    other = sys.with_sigma2(2.6)
    np.testing.assert_allclose(other.K_blocks, 2.0 * sys.K_blocks)
    np.testing.assert_array_equal(other.K_unit, sys.K_unit)


def test_jitter_escalates_and_reports():
    tree = build_knot_tree(UNIT, 1, 4, 16)
    sys = build_basis(tree, MaternParams(1.0, 50.0, 1.9), jitter=1e-8)
    assert np.all(np.isfinite(sys.K_unit))
    assert np.max(sys.jitter_used) >= 1e-8


# --- areal matrix --------------------------------------------------------------


def test_areal_matrix_is_mean_of_point_values(small_system):
    tree, _, sys = small_system
    units = [rectangle_unit("a", 0, 0, 0.5, 0.5), rectangle_unit("b", 0.3, 0.2, 1.0, 0.9)]
    quads = [quadrature_points(u, 30, 4) for u in units]
    B = areal_basis(sys, quads)
    for row, qs in zip(B, quads):
        np.testing.assert_allclose(row, sys.basis_at(qs.points).mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(ArealDesign(tree, quads).matrix(sys), B)


def test_points_outside_domain_rejected(small_system):
    tree, _, sys = small_system
    with pytest.raises(ValueError):
        PointEvaluator(tree, [[1.5, 0.5]])


# --- AR(1) weights --------------------------------------------------------------


def test_weight_chain_validation(small_system):
    _, _, sys = small_system
    with pytest.raises(ValueError):
        sample_weights_prior(sys, 3, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        WeightChain(np.zeros((2, 3)), 0.0, np.zeros(1))


def test_eval_field_bad_time(small_system):
    _, _, sys = small_system
    chain = sample_weights_prior(sys, 3, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        eval_field(sys, chain, [[0.5, 0.5]], 4)
    with pytest.raises(ValueError):
        eval_field(sys, chain, [[2.0, 0.5]], 1)


def test_space_time_covariance_monte_carlo_small(small_system):
    _, _, sys = small_system
    alpha = 0.6
    chain = sample_weights_prior(sys, 3, alpha, np.random.default_rng(9), n_chains=40_000)
    s = np.array([[0.2, 0.3], [0.25, 0.4]])
    w1 = eval_field(sys, chain, s, 1)  # (2, n)
    w3 = eval_field(sys, chain, s, 3)
    target = alpha**2 * sys.covariance(s, s)
    emp = (w1 @ w3.T) / w1.shape[1]
    np.testing.assert_allclose(emp, target, rtol=0.1, atol=0.02)


# --- cache ---------------------------------------------------------------------


def test_cache_roundtrip(tmp_path):
    p = MaternParams(1.0, 0.3, 1.0)
    key = basis_cache_key(UNIT, 2, 4, 9, 0, p, 16)
    assert key != basis_cache_key(UNIT, 2, 4, 9, 0, MaternParams(1.0, 0.31, 1.0), 16)
    # sigma2 does not enter the basis
    assert key == basis_cache_key(UNIT, 2, 4, 9, 0, MaternParams(5.0, 0.3, 1.0), 16)
    assert load_basis_matrix(tmp_path, key) is None
    B = np.arange(6.0).reshape(2, 3)
    save_basis_matrix(tmp_path, key, B, ["a", "b"])
    B2, ids = load_basis_matrix(tmp_path, key)
    np.testing.assert_array_equal(B, B2)
    assert ids == ["a", "b"]
