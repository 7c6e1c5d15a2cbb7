import itertools

import numpy as np
import pytest
from hypothesis import given

from conftest import dense_measures, random_measure, random_sequence
from nlrecomb.dynamics import (
    ConfigurationSampler,
    DenseSampler,
    FragmentationState,
    ProductSampler,
    evolve_exact,
    fragmentation_time,
    fragmentation_times,
    partition_average_oracle,
    quantile_index,
    recombine,
    recombine_bruteforce,
    sample_environment,
    sample_root,
    write_trace_csv,
)
from nlrecomb.errors import CapacityExceeded, DimensionMismatch
from nlrecomb.initdist import monochromatic_init
from nlrecomb.measures import (
    DenseMeasure,
    MarginalSequence,
    SpinSpace,
    configurations,
    product_measure,
    tv_distance,
)
from nlrecomb.montecarlo import make_rng


def subset_formula(mu, nu):
    """2^-n sum_A mu_A (x) nu_{A^c}, with plain dictionaries."""
    n, k = mu.n, mu.k
    conf = [tuple(c) for c in configurations(n, k).tolist()]
    pm = dict(zip(conf, mu.weights))
    pn = dict(zip(conf, nu.weights))
    out = []
    for sigma in conf:
        total = 0.0
        for mask in itertools.product((0, 1), repeat=n):
            a = sum(w for c, w in pm.items() if all(c[i] == sigma[i] for i in range(n) if mask[i]))
            b = sum(w for c, w in pn.items() if all(c[i] == sigma[i] for i in range(n) if not mask[i]))
            total += a * b
        out.append(total / 2**n)
    return np.array(out)


MIX = DenseMeasure(SpinSpace.range(2), 2, [0.5, 0.0, 0.0, 0.5])


def test_mixture_example():
    expected = [3 / 8, 1 / 8, 1 / 8, 3 / 8]
    np.testing.assert_allclose(recombine(MIX, MIX).weights, expected, atol=1e-15)
    np.testing.assert_allclose(recombine_bruteforce(MIX, MIX).weights, expected, atol=1e-15)


def test_recombine_matches_subset_formula(rng):
    for n, k in [(1, 2), (2, 3), (3, 2)]:
        mu, nu = random_measure(rng, n, k), random_measure(rng, n, k)
        np.testing.assert_allclose(recombine(mu, nu).weights, subset_formula(mu, nu), atol=1e-14)


def test_recombine_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        recombine(MIX, DenseMeasure(SpinSpace.range(2), 1, [0.5, 0.5]))


def test_recombine_capacity():
    mu = DenseMeasure(SpinSpace.range(2), 3, np.full(8, 1 / 8))
    with pytest.raises(CapacityExceeded):
        recombine(mu, mu, cap=4)


@given(dense_measures(), dense_measures())
def test_recombine_symmetric_and_marginal_average(mu, nu):
    if (mu.n, mu.k) != (nu.n, nu.k):
        return
    r = recombine(mu, nu)
    np.testing.assert_allclose(r.weights, recombine(nu, mu).weights, atol=1e-14)
    np.testing.assert_allclose(
        r.site_marginals(), 0.5 * (mu.site_marginals() + nu.site_marginals()), atol=1e-13
    )


@given(dense_measures(max_n=3))
def test_evolution_preserves_marginals(mu):
    trace = evolve_exact(mu, 3)
    for m in trace.steps:
        np.testing.assert_allclose(m.site_marginals(), mu.site_marginals(), atol=1e-13)


def test_evolve_t0_and_trace(rng):
    mu = random_measure(rng, 3, 2)
    tr = evolve_exact(mu, 0)
    assert tr.final == mu and list(tr.times) == [0]
    assert len(evolve_exact(mu, 4).steps) == 5


def test_stationary_fixed_point(rng):
    seq = random_sequence(rng, 4, 3)
    pi = product_measure(seq)
    assert tv_distance(evolve_exact(pi, 3).final, pi) < 1e-14


def test_partition_oracle(rng):
    mu = random_measure(rng, 3, 2)
    for t in range(3):
        np.testing.assert_allclose(
            partition_average_oracle(mu, t).weights, evolve_exact(mu, t).final.weights, atol=1e-14
        )


def test_partition_oracle_capacity(rng):
    with pytest.raises(CapacityExceeded):
        partition_average_oracle(random_measure(rng, 3, 2), 4, cap=100)


def test_quantile_index_right_continuous():
    cdf = np.array([[0.3, 1.0]])
    assert quantile_index(cdf, np.array([0.3]))[0] == 0
    assert quantile_index(cdf, np.array([0.30001]))[0] == 1
    assert quantile_index(cdf, np.array([0.0]))[0] == 0


def test_root_frequency_example():
    rng = make_rng(5, "root-example")
    roots = sample_root(DenseSampler(MIX), 1, rng, size=100_000)
    freq = np.mean((roots[:, 0] == 0) & (roots[:, 1] == 1))
    se = np.sqrt(0.125 * 0.875 / 100_000)
    assert abs(freq - 0.125) < 3 * se


def test_root_converges_to_marginals():
    sp = SpinSpace.range(3)
    init = monochromatic_init(sp, (0.2, 0.3, 0.5), 6)
    roots = sample_root(init.sampler(), 20, make_rng(2, "conv"), size=20_000)
    freq = np.stack([(roots == l).mean(axis=0) for l in range(3)], axis=1)
    se = np.sqrt(0.25 / 20_000)
    assert np.all(np.abs(freq - [0.2, 0.3, 0.5]) < 4 * se)
    # distinct sites almost surely pick distinct leaves, so sites decorrelate
    assert abs(np.corrcoef(roots[:, 0], roots[:, 1])[0, 1]) < 4 / np.sqrt(20_000)


def test_generic_sample_roots_branches():
    sp = SpinSpace.range(2)
    init = monochromatic_init(sp, (0.4, 0.6), 70)
    sampler = init.sampler()
    rng = make_rng(1, "branches")
    leaves = rng.integers(0, 4, size=(30, 70))
    small = monochromatic_init(sp, (0.4, 0.6), 8).sampler()
    for out in (
        sampler.sample_roots(rng, leaves),
        ConfigurationSampler.sample_roots(sampler, rng, leaves),
        ConfigurationSampler.sample_roots(small, rng, leaves[:, :8]),
    ):
        # every site copies its leaf; monochromatic leaves make spin a function of the leaf
        for b in range(out.shape[0]):
            lv = leaves[b, : out.shape[1]]
            for x in np.unique(lv):
                assert len(set(out[b, lv == x].tolist())) == 1


def test_environment_sampling():
    sp = SpinSpace.range(2)
    seq = MarginalSequence.homogeneous(sp, (0.3, 0.7), 5)
    env = sample_environment(ProductSampler(seq), 12, make_rng(3, "env"))
    assert env.leaves.shape == (4096, 5) and env.counts.sum(axis=1).tolist() == [4096] * 5
    se = np.sqrt(0.21 / 4096)
    assert np.all(np.abs(env.counts[:, 0] / 4096 - 0.3) < 4 * se)
    streamed = sample_environment(ProductSampler(seq), 12, make_rng(3, "env"), keep_leaves=False, chunk=4096)
    assert streamed.leaves is None and np.array_equal(streamed.counts, env.counts)
    one = sample_environment(ProductSampler(seq), 0, make_rng(3, "env0"))
    assert one.leaves.shape == (1, 5) and np.all(one.counts.sum(axis=1) == 1)


def test_fragmentation_basic():
    rng = make_rng(0, "frag")
    assert fragmentation_time(1, rng) == 0
    st = FragmentationState.start(4)
    assert st.block_count == 1 and not st.fragmented
    while not st.fragmented:
        st = st.step(rng)
    assert st.block_count == 4
    tau = fragmentation_times(2, 100_000, make_rng(0, "frag2"))
    for t in range(1, 6):
        p = 2.0**-t
        assert abs(np.mean(tau > t) - p) < 3 * np.sqrt(p * (1 - p) / 1e5)


def test_trace_csv(tmp_path, rng):
    seq = random_sequence(rng, 2, 2)
    mu = random_measure(rng, 2, 2)
    write_trace_csv(tmp_path / "trace.csv", evolve_exact(mu, 3), product_measure(seq))
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,tv_to_pi,upper_bound,l2_bound" and len(lines) == 5
