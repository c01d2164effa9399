import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from covflow.errors import ConvergenceError, DomainError
from covflow.scaling import Explicit, InversePower, LogDamped, SeriesTruncation, UniformPower
from covflow.theory import (
    InputPair,
    KernelTriple,
    covariance_flow,
    euler_trace,
    flow_functional,
    infinite_width_trace,
    mlp_correlation_trace,
    relu_dual,
    relu_dual_prime,
    series_limit_kernel,
    shaped_gain,
    shaped_relu_kernel,
    variance_profile,
    width_limit_trace,
)

# Frozen oracles (computed independently, see the decisions ledger):
# f(1/2) in 50-digit arithmetic via the arc-cosine form of f
F_HALF = 0.60899778104422935809
# q_ab at t = 1 from an adaptive DOP853 solve (rtol 1e-13), keyed by (q_aa, q_bb, c0)
FLOW_T1 = {
    (1.0, 1.0, 0.25): 0.5637514614114753,
    (1.0, 1.0, 0.5): 0.9072540534615626,
    (1.0, 1.0, 0.9): 1.4914387763143513,
    (2.0, 0.5, -0.3): -0.1485858678513197,
}
# limit of zeta_l = 1/l for the unit pair with c0 = 1/2: 10^7 plain recursion steps
# plus the first-order tail correction (residual ~1e-13)
HARMONIC_LIMIT = 1.158199602073258


# relu dual --------------------------------------------------------------------


def test_relu_dual_special_values():
    assert abs(relu_dual(1.0) - 1.0) < 1e-12
    assert abs(relu_dual(-1.0)) < 1e-12
    assert abs(relu_dual(0.0) - 1 / math.pi) < 1e-12
    assert relu_dual(0.5) == pytest.approx(F_HALF, abs=1e-15)
    assert relu_dual(-0.5) == pytest.approx(F_HALF - 0.5, abs=1e-15)


def test_relu_dual_monte_carlo():
    # 2 E[relu(Z1) relu(c Z1 + sqrt(1 - c^2) Z2)]
    rng = np.random.default_rng(1)
    z1, z2 = rng.standard_normal((2, 2_000_000))
    c = 0.5
    prod = np.maximum(z1, 0) * np.maximum(c * z1 + math.sqrt(1 - c * c) * z2, 0)
    est = 2 * prod.mean()
    se = 2 * prod.std() / math.sqrt(prod.size)
    assert abs(est - relu_dual(c)) < 5 * se


def test_relu_dual_array_matches_scalar():
    cs = np.linspace(-1, 1, 101)
    np.testing.assert_allclose(relu_dual(cs), [relu_dual(float(c)) for c in cs], rtol=0, atol=1e-15)


def test_relu_dual_clamps_rounding_only():
    assert relu_dual(1.0 + 1e-12) == 1.0
    assert relu_dual(-1.0 - 1e-12) == relu_dual(-1.0)
    with pytest.raises(DomainError):
        relu_dual(1.01)
    with pytest.raises(DomainError):
        relu_dual(np.array([0.0, -1.5]))
    with pytest.raises(DomainError):
        relu_dual(float("nan"))


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_relu_dual_lipschitz_and_monotone(x, y):
    fx, fy = relu_dual(x), relu_dual(y)
    assert abs(fx - fy) <= abs(x - y) + 1e-15
    if x <= y:
        assert fx <= fy + 1e-15
    assert 0.0 <= fx <= 1.0
    # convex with tangent y = c at c = 1
    assert fx >= x - 1e-15


def test_relu_dual_prime_values():
    assert relu_dual_prime(0.0) == 0.5
    assert relu_dual_prime(0.5) == pytest.approx(2 / 3, abs=1e-15)
    assert relu_dual_prime(1.0, limit=True) == 1.0
    assert relu_dual_prime(-1.0, limit=True) == 0.0
    assert relu_dual_prime(1 - 1e-12) == pytest.approx(1.0, abs=1e-6)
    for bad in (1.0, -1.0, 2.0):
        with pytest.raises(DomainError):
            relu_dual_prime(bad)


@given(st.floats(-0.99, 0.99))
def test_relu_dual_prime_finite_difference(c):
    h = 1e-6
    fd = (relu_dual(c + h) - relu_dual(c - h)) / (2 * h)
    assert relu_dual_prime(c) == pytest.approx(fd, abs=1e-8)


def test_mlp_correlation_trace():
    assert np.all(mlp_correlation_trace(1.0, 20) == 1.0)
    assert mlp_correlation_trace(0.5, 1)[1] == pytest.approx(F_HALF, abs=1e-15)
    tr = mlp_correlation_trace(0.1, 10_000)
    assert tr[-1] > 0.999
    assert np.all(np.diff(tr) >= 0)
    with pytest.raises(DomainError):
        mlp_correlation_trace(1.5, 3)


# containers --------------------------------------------------------------------


def test_kernel_triple():
    k = KernelTriple(4.0, 2.0, 1.0)
    assert k.correlation() == 1.0
    assert k.satisfies_cauchy_schwarz()
    assert not KernelTriple(1.0, 1.1, 1.0).satisfies_cauchy_schwarz()
    assert KernelTriple(1.0, 1.0 + 1e-14, 1.0).clamped_correlation() == 1.0


@given(st.floats(0.01, 10), st.floats(-1, 1).filter(lambda c: c != 0), st.floats(0.01, 10))
def test_from_kernel_reproduces_triple(q_aa, c, q_bb):
    q_ab = c * math.sqrt(q_aa * q_bb)
    p = InputPair.from_kernel(q_aa, q_ab, q_bb)
    assert p.q0.as_tuple() == (q_aa, q_ab, q_bb)
    assert p.d == 2
    # vectors agree with the stated triple up to rounding
    assert p.a @ p.a / 2 == pytest.approx(q_aa, rel=1e-12)
    assert p.b @ p.b / 2 == pytest.approx(q_bb, rel=1e-12)
    assert p.a @ p.b / 2 == pytest.approx(q_ab, rel=1e-9, abs=1e-12)


def test_input_pair_validation():
    with pytest.raises(DomainError):
        InputPair([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DomainError):
        InputPair([1.0, 0.0], [0.0, 1.0])
    with pytest.raises(DomainError):
        InputPair([1.0], [1.0, 2.0])
    with pytest.raises(DomainError):
        InputPair.from_kernel(1.0, 1.5, 1.0)
    p = InputPair([3.0, 4.0], [3.0, 4.0])
    assert p.zeta == 12.5
    assert p.norm_a == pytest.approx(5.0)
    assert p.describe()["q0"] == [12.5, 12.5, 12.5]


# variance profile & recursions ------------------------------------------------------------


def test_variance_profile_examples():
    assert variance_profile(UniformPower(0.5), 0, 1.0).tolist() == [1.0]
    np.testing.assert_allclose(variance_profile(UniformPower(0.5), 2, 1.0), [1, 1.25, 1.5625], rtol=1e-15)
    v = variance_profile(SeriesTruncation(InversePower(1.0)), 3, 2.0)
    np.testing.assert_allclose(v, [2, 3, 3 * 1.125, 3 * 1.125 * (1 + 1 / 18)], rtol=1e-15)


def test_trace_of_identical_inputs_is_variance_profile():
    p = InputPair([1.0, 2.0, 2.0], [1.0, 2.0, 2.0])
    for seq in (UniformPower(0.5), SeriesTruncation(InversePower(1.0))):
        tr = infinite_width_trace(seq, 50, p)
        vp = variance_profile(seq, 50, 3.0)
        np.testing.assert_allclose(tr.q_ab, vp, rtol=1e-14)
        assert np.array_equal(tr.q_aa, vp)


def test_trace_depth_zero(gauss_pair):
    tr = infinite_width_trace(UniformPower(0.5), 0, gauss_pair)
    assert len(tr) == 1
    assert tr[0] == gauss_pair.q0


@given(st.floats(-0.99, 0.99).filter(lambda c: abs(c) > 1e-3), st.integers(1, 200))
def test_trace_respects_cauchy_schwarz(c0, L):
    tr = infinite_width_trace(UniformPower(0.5), L, InputPair.from_correlation(c0, 2.0, 0.5))
    assert all(k.satisfies_cauchy_schwarz() for k in tr)
    # the off-diagonal never decreases since f >= 0
    assert np.all(np.diff(tr.q_ab) >= 0)
    assert tr.clamp_events == 0


# series limit -------------------------------------------------------------------------------


def test_series_limit_zero_series(unit_pair):
    assert series_limit_kernel(Explicit(()), unit_pair) == unit_pair.q0
    assert series_limit_kernel(Explicit((0.0, 0.0)), unit_pair) == unit_pair.q0


def test_series_limit_single_step():
    p = InputPair.from_kernel(1.0, 1.0, 1.0)
    assert series_limit_kernel(Explicit((1.0,)), p).q_ab == pytest.approx(1.5, abs=1e-15)


def test_series_limit_harmonic_regression(unit_pair):
    q = series_limit_kernel(InversePower(1.0), unit_pair, tol=1e-6)
    assert abs(q.q_ab - HARMONIC_LIMIT) < 1e-6
    # diagonal limit is prod (1 + 1/(2 l^2)) = sinh(pi / sqrt 2) / (pi / sqrt 2)
    x = math.pi / math.sqrt(2)
    assert q.q_aa == pytest.approx(math.sinh(x) / x, abs=2e-6)


def test_series_limit_failures(unit_pair):
    with pytest.raises(DomainError):
        series_limit_kernel(InversePower(0.5), unit_pair)
    with pytest.raises(ConvergenceError):
        series_limit_kernel(LogDamped(), unit_pair, tol=1e-3, max_terms=10_000)
    with pytest.raises(DomainError):
        series_limit_kernel(InversePower(1.0), unit_pair, tol=0.0)


# covariance flow ---------------------------------------------------------------------------------


def test_flow_identical_inputs_is_exponential():
    p = InputPair.from_kernel(1.0, 1.0, 1.0)
    sol = covariance_flow(p, step=1e-4)
    # f is only C^{3/2} at c = 1, so RK4 loses some order here
    assert sol.final().q_ab == pytest.approx(math.exp(0.5), rel=1e-9)


def test_flow_diagonal_closed_form(gauss_pair):
    sol = covariance_flow(gauss_pair, step=1e-3)
    q0 = gauss_pair.q0
    assert sol.values[0] == q0
    np.testing.assert_allclose(sol.q_aa, q0.q_aa * np.exp(sol.t_grid / 2), rtol=1e-14)
    np.testing.assert_allclose(sol.q_bb, q0.q_bb * np.exp(sol.t_grid / 2), rtol=1e-14)


@pytest.mark.parametrize("key", sorted(FLOW_T1))
def test_flow_matches_adaptive_oracle(key):
    q_aa, q_bb, c0 = key
    sol = covariance_flow(InputPair.from_correlation(c0, q_aa, q_bb), step=1e-4)
    assert sol.final().q_ab == pytest.approx(FLOW_T1[key], rel=1e-12)


def test_flow_matches_deep_recursion(unit_pair):
    q_flow = covariance_flow(unit_pair, step=1e-5).final().q_ab
    q_deep = infinite_width_trace(UniformPower(0.5), 2**22, unit_pair).q_ab[-1]
    assert abs(q_flow - q_deep) < 1e-5


def test_flow_grid_and_short_horizon(unit_pair):
    sol = covariance_flow(unit_pair, step=0.3)
    assert sol.t_grid[-1] == 1.0
    assert sol.step == pytest.approx(0.25)
    short = covariance_flow(unit_pair, step=1e-9, t_end=1e-9)
    assert short.final().q_ab == pytest.approx(unit_pair.q0.q_ab, abs=1e-9)
    with pytest.raises(DomainError):
        covariance_flow(unit_pair, step=0.0)
    with pytest.raises(DomainError):
        covariance_flow(unit_pair, t_end=1.5)


def test_flow_interpolation(unit_pair):
    coarse = covariance_flow(unit_pair, step=1e-2)
    fine = covariance_flow(unit_pair, step=1e-4)
    ts = np.linspace(0, 1, 37)
    np.testing.assert_allclose(coarse.q_ab_at(ts), fine.q_ab_at(ts), rtol=1e-9)
    assert coarse.q_ab_at(coarse.t_grid[5])[0] == coarse.q_ab[5]
    with pytest.raises(DomainError):
        coarse.q_ab_at(1.2)


def test_flow_functional_clamps():
    assert flow_functional(0.0, 5.0, 1.0) == 0.5
    assert flow_functional(0.0, -5.0, 1.0) == 0.0


# Euler scheme ------------------------------------------------------------------------------------


def test_euler_examples():
    p = InputPair.from_kernel(1.0, 1.0, 1.0)
    assert euler_trace(UniformPower(0.5), 1, p)[1] == 1.5
    assert euler_trace(UniformPower(0.5), 2, p)[1] == 1.25
    with pytest.raises(DomainError):
        euler_trace(SeriesTruncation(InversePower(1.0)), 4, p)


def test_euler_first_order_convergence(unit_pair):
    # flow grid 2^-16 contains every l / L for L a power of two up to 2^16
    flow = covariance_flow(unit_pair, step=2.0**-16)
    gaps = []
    for k in range(4, 13):
        L = 2**k
        eu = euler_trace(UniformPower(0.5), L, unit_pair)
        ref = flow.q_ab[:: 2 ** (16 - k)]
        gaps.append(np.max(np.abs(eu - ref)))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.all((ratios > 0.45) & (ratios < 0.55)), ratios


# width-first references ----------------------------------------------------------------------------


def test_mlp_width_limit_matches_correlation_map():
    p = InputPair.from_correlation(0.3, 2.0, 2.0)
    tr = width_limit_trace("mlp", 30, p)
    np.testing.assert_allclose(tr.correlation, mlp_correlation_trace(0.3, 30), rtol=1e-14)
    assert np.all(tr.q_aa == 2.0)


@pytest.mark.parametrize("arch", ["shaped_mlp", "shaped_resnet"])
def test_shaped_width_limit_keeps_diagonal(arch, gauss_pair):
    tr = width_limit_trace(arch, 64, gauss_pair)
    assert np.all(tr.q_aa == gauss_pair.q0.q_aa)
    assert np.all(np.abs(tr.correlation) <= 1 + 1e-12)
    # the shaped map pulls correlations up, but only by O(1) over L layers
    assert tr.correlation[0] < tr.correlation[-1] < 1.0


def test_shaped_kernel_monte_carlo():
    rng = np.random.default_rng(3)
    L, c = 4, 0.3
    z1, z2 = rng.standard_normal((2, 2_000_000))
    u = z1 * math.sqrt(2.0)
    v = (c * z1 + math.sqrt(1 - c * c) * z2) * math.sqrt(0.5)
    phi = lambda z: z + np.maximum(z, 0) / math.sqrt(L)
    prod = phi(u) * phi(v)
    q = KernelTriple(2.0, c, 0.5)
    assert abs(prod.mean() - shaped_relu_kernel(q, L)) < 5 * prod.std() / math.sqrt(prod.size)
    sq = phi(u) ** 2
    assert abs(sq.mean() - 2.0 * shaped_gain(L)) < 5 * sq.std() / math.sqrt(sq.size)


def test_width_limit_rejects_resnet(unit_pair):
    with pytest.raises(DomainError):
        width_limit_trace("scaled_resnet", 4, unit_pair)
