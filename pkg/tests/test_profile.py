import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from nlrecomb.dynamics import evolve_exact
from nlrecomb.errors import CapacityExceeded, DomainError
from nlrecomb.initdist import monochromatic_dense
from nlrecomb.measures import MarginalSequence, SpinSpace, product_measure, tv_distance
from nlrecomb.montecarlo import make_rng
from nlrecomb.onb import build_basis
from nlrecomb.profile import (
    alpha_beta,
    alpha_clt_moments,
    alpha_domain_failure_rate,
    chi_square_cdf,
    compositions,
    count_tv_to_stationary,
    fbar,
    gaussian_tv_limit,
    lift_count_measure,
    monochromatic_count_evolution,
    multinomial_count_measure,
    profile_experiment,
    psi,
    psi_closed,
    psi_gaussian_mean,
    reconstruct_density,
    regularized_lower_gamma,
    write_profile_csv,
)


def quadrature_tv(d, s):
    """1/2 int |density difference|, by adaptive quadrature (radial for d > 1)."""
    if d == 1:
        f = lambda x: abs(stats.norm.pdf(x, scale=math.sqrt(1 + s)) - stats.norm.pdf(x))
        val, _ = integrate.quad(f, 0, 80, limit=400, epsabs=1e-13, epsrel=1e-13)
        return val  # symmetric: half of the full line integral
    f = lambda r: abs(stats.chi.pdf(r, d, scale=math.sqrt(1 + s)) - stats.chi.pdf(r, d))
    val, _ = integrate.quad(f, 0, 80, limit=400, epsabs=1e-13, epsrel=1e-13)
    return 0.5 * val


def test_compositions():
    c = compositions(4, 3)
    assert c.shape == (math.comb(6, 2), 3)
    assert np.all(c.sum(axis=1) == 4) and len({tuple(r) for r in c.tolist()}) == c.shape[0]


def test_t0_is_one_hot():
    sp = SpinSpace.range(3)
    p = (0.2, 0.3, 0.5)
    cm = monochromatic_count_evolution(sp, p, 5, 0)
    for l in range(3):
        row = [5 if j == l else 0 for j in range(3)]
        j = [r.tolist() for r in cm.compositions].index(row)
        assert cm.weights[j] == pytest.approx(p[l], abs=1e-14)
    assert cm.weights.sum() == pytest.approx(1.0)


def test_large_t_converges():
    sp = SpinSpace.range(2)
    cm = monochromatic_count_evolution(sp, (0.3, 0.7), 6, 16)
    assert count_tv_to_stationary(cm, (0.3, 0.7)) < 1e-3


def test_count_tv_examples():
    p = (0.5, 0.5)
    assert count_tv_to_stationary(multinomial_count_measure(p, 5), p) == pytest.approx(0.0, abs=1e-15)
    cm = monochromatic_count_evolution(SpinSpace.range(2), p, 2, 0)
    assert count_tv_to_stationary(cm, p) == pytest.approx(0.5)
    q = (0.2, 0.3, 0.5)
    cm = monochromatic_count_evolution(SpinSpace.range(3), q, 4, 0)
    assert count_tv_to_stationary(cm, q) == pytest.approx(sum(x * (1 - x**3) for x in q))


def test_capacity():
    with pytest.raises(CapacityExceeded):
        monochromatic_count_evolution(SpinSpace.range(3), (0.2, 0.3, 0.5), 200, 9, cap=10**6)


def test_lift_matches_dense_evolution():
    rng = np.random.default_rng(3)
    for n in range(1, 5):
        for k in (2, 3):
            sp = SpinSpace.range(k)
            p = rng.dirichlet(np.ones(k)) * 0.8 + 0.2 / k
            p = tuple(p / p.sum())
            pi = product_measure(MarginalSequence.homogeneous(sp, p, n))
            trace = evolve_exact(monochromatic_dense(sp, p, n), 3)
            for t in range(4):
                cm = monochromatic_count_evolution(sp, p, n, t)
                lifted = lift_count_measure(cm, sp)
                np.testing.assert_allclose(lifted.weights, trace.steps[t].weights, atol=1e-10)
                assert count_tv_to_stationary(cm, p) == pytest.approx(
                    tv_distance(trace.steps[t], pi), abs=1e-10
                )


def test_dense_evolution_exchangeable():
    sp = SpinSpace.range(3)
    mu = evolve_exact(monochromatic_dense(sp, (0.2, 0.3, 0.5), 4), 2).final.tensor
    for perm in itertools.permutations(range(4)):
        np.testing.assert_allclose(np.transpose(mu, perm), mu, atol=1e-15)


def test_threads_do_not_change_counts():
    sp = SpinSpace.range(3)
    a = monochromatic_count_evolution(sp, (0.2, 0.3, 0.5), 40, 5)
    b = monochromatic_count_evolution(sp, (0.2, 0.3, 0.5), 40, 5, threads=4)
    assert np.array_equal(a.weights, b.weights)


def test_chi_square_cdf_values():
    assert chi_square_cdf(3, 0.0) == 0.0
    assert chi_square_cdf(1, 1.0) == pytest.approx(math.erf(1 / math.sqrt(2)), abs=1e-12)
    assert chi_square_cdf(1, 1.0) == pytest.approx(0.682689, abs=1e-6)
    for x in np.linspace(0, 60, 241):
        assert abs(chi_square_cdf(2, x) - (1 - math.exp(-x / 2))) <= 1e-12
    with pytest.raises(ValueError):
        chi_square_cdf(0, 1.0)
    with pytest.raises(ValueError):
        regularized_lower_gamma(1.0, -1.0)


@given(st.integers(1, 40), st.floats(0, 200))
def test_chi_square_cdf_vs_scipy(d, x):
    assert abs(chi_square_cdf(d, x) - stats.chi2.cdf(x, d)) <= 1e-10


@given(st.integers(1, 10), st.floats(0, 100), st.floats(0, 5))
def test_chi_square_cdf_monotone(d, x, dx):
    assert chi_square_cdf(d, x) <= chi_square_cdf(d, x + dx) + 1e-15


def test_gaussian_tv_examples():
    assert gaussian_tv_limit(1, 1.0) == pytest.approx(quadrature_tv(1, 1.0), abs=1e-6)
    assert gaussian_tv_limit(1, 1.0) == pytest.approx(0.166, abs=5e-4)
    assert gaussian_tv_limit(2, 1.0) == pytest.approx(0.25, abs=1e-12)
    for d in (1, 3):
        for s in (1e-3, 1e-4):
            assert gaussian_tv_limit(d, s) <= d / 2 * s * 1.01
    with pytest.raises(ValueError):
        gaussian_tv_limit(1, 0.0)


def test_gaussian_tv_monotone_in_s():
    for d in (1, 2, 5):
        vals = [gaussian_tv_limit(d, s) for s in np.geomspace(0.01, 100, 60)]
        assert np.all(np.diff(vals) > 0) and 0 < vals[0] and vals[-1] < 1


@pytest.mark.parametrize("d", [1, 3, 5])
@pytest.mark.parametrize("s", [0.3, 3.0])
def test_gaussian_tv_vs_quadrature(d, s):
    assert gaussian_tv_limit(d, s) == pytest.approx(quadrature_tv(d, s), abs=1e-6)


def test_alpha_beta_zero_and_domain():
    sp = SpinSpace.range(3)
    basis = build_basis(sp, (0.2, 0.3, 0.5))
    ab = alpha_beta(np.zeros(2), basis, 10)
    assert np.all(ab.alpha == 0) and ab.beta == 0
    sigma = np.array([0, 1, 2, 2, 1, 0, 0, 1, 2, 2])
    assert reconstruct_density(ab, basis, sigma) == pytest.approx(1.0)
    # leaves with no spin 0: phat_0 = 0 and the log argument vanishes there
    phat = np.array([0.0, 0.5, 0.5])
    q = basis.table[1:] @ phat
    with pytest.raises(DomainError) as info:
        alpha_beta(q, basis, 10)
    assert info.value.index == 0


def test_alpha_beta_reconstruction():
    rng = make_rng(17, "reconstruct")
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(1, 33))
        t = int(rng.integers(2, 7))
        p = rng.dirichlet(np.ones(k)) * 0.7 + 0.3 / k
        basis = build_basis(SpinSpace.range(k), p / p.sum())
        M = rng.multinomial(2**t, basis.marginal.array)
        if np.any(M == 0):
            continue
        q = basis.table[1:] @ (M / 2**t)
        sigma = rng.integers(0, k, size=n)
        ab = alpha_beta(q, basis, n)
        # direct product over sites of 1 + q . f(sigma_i)
        direct = np.prod(1.0 + q @ basis.table[1:, sigma])
        got = reconstruct_density(ab, basis, sigma)
        worst = max(worst, abs(got - direct) / abs(direct))
    assert worst < 1e-8


def test_alpha_beta_second_order():
    basis = build_basis(SpinSpace.range(3), (0.2, 0.3, 0.5))
    F = basis.table[1:]
    w = basis.marginal.array
    z = np.array([0.6, -0.8])
    for n in (10**2, 10**4, 10**6):
        # the scaling regime q ~ n^{-1/2}, where sqrt(n)|q|^2 and n|q|^3 are comparable
        q = z / math.sqrt(n)
        ab = alpha_beta(q, basis, n)
        err = n * np.linalg.norm(q) ** 3
        assert abs(ab.beta + n / 2 * q @ q) <= 10 * err
        assert np.all(np.abs(ab.alpha - math.sqrt(n) * q) <= 10 * err)
        # next Taylor term of alpha leaves an O(sqrt(n) |q|^3) remainder
        second = math.sqrt(n) * (q - 0.5 * F @ (w * (q @ F) ** 2))
        assert np.all(np.abs(ab.alpha - second) <= 10 * math.sqrt(n) * np.linalg.norm(q) ** 3)


def test_fbar_shape():
    basis = build_basis(SpinSpace.range(3), (1 / 3, 1 / 3, 1 / 3))
    assert fbar(basis, np.zeros((4, 9), dtype=int)).shape == (4, 2)


def test_psi():
    rng = make_rng(2, "psi")
    for d, s in [(1, 1.0), (2, 0.5)]:
        v = psi(np.zeros(d), s, mc_samples=200_000, rng=rng)
        assert v.closed == pytest.approx((1 + s) ** (-d / 2))
        assert v.mc.within(v.closed, z=3)
        assert psi_gaussian_mean(d, s, 200_000, rng).within(1.0, z=3)
    u = np.array([0.7, -0.2])
    v = psi(u, 0.8, mc_samples=200_000, rng=rng)
    assert v.mc.within(v.closed, z=3)
    assert psi_closed(u, 1e-9) == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ValueError):
        psi(u, 1.0, mc_samples=10)


def test_alpha_clt_moments():
    sp = SpinSpace.range(3)
    s = 1.0
    t = 10
    n = int(s * 2**t)
    m = alpha_clt_moments(sp, (0.2, 0.3, 0.5), n, t, 20_000, seed=4)
    assert m.failures == 0
    assert np.all(np.abs(m.alpha_mean) <= 3 * m.alpha_mean_se)
    np.testing.assert_allclose(m.alpha_cov, s * np.eye(2), atol=0.05)
    assert abs(m.residual.mean) < 0.05


def test_failure_rate_exact():
    p = np.array([0.2, 0.3, 0.5])
    for t in (0, 1, 2, 3):
        N = 2**t
        comp = compositions(N, 3)
        pmf = stats.multinomial.pmf(comp, N, p)
        direct = float(pmf[np.any(comp == 0, axis=1)].sum())
        assert alpha_domain_failure_rate(p, t) == pytest.approx(direct, abs=1e-14)


def test_profile_rows_and_ordering(tmp_path):
    sp = SpinSpace.range(2)
    rows = profile_experiment(sp, (0.5, 0.5), 1.0, range(3, 8))
    assert [r.n for r in rows] == [8, 16, 32, 64, 128]
    gaps = [r.gap for r in rows]
    assert all(b <= a for a, b in zip(gaps[2:], gaps[3:]))
    lo = profile_experiment(sp, (0.5, 0.5), 0.25, [6])[0]
    hi = profile_experiment(sp, (0.5, 0.5), 4.0, [6])[0]
    assert hi.tv_exact > lo.tv_exact
    write_profile_csv(tmp_path / "p.csv", rows)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].split(",") == [
        "k", "s", "t", "n", "tv_exact", "tv_gaussian", "gap", "alpha_domain_failure_rate",
    ]
    assert len(lines) == 6
