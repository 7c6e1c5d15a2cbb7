"""Closed-form TV bounds and the two Monte Carlo experiments built on them.

Upper bounds: the linear bound (k-1) n 2^-t and the phi-route bound
1 - e^{-2(k-1) n 2^-t} / 2. Lower bound: the basket experiment, which
compares the probability of a magnetization test event under mu_t and pi.
The Q2 statistic is the pair-interaction term of the density expansion.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .dynamics import DenseSampler, ProductSampler, evolve_exact, sample_environment, sample_root
from .initdist import StructuredInit, comonotonic_cross_moments, rho_estimate
from .measures import DenseMeasure, MarginalSequence, marginalize, product_measure, tv_distance
from .montecarlo import Estimate, Moments, proportion, run_chunks
from .onb import OrthonormalBasis, mean_vector_table, stack_tables
from .quenched import hhat_l1_bounds, quenched_moments

MAG_FACTOR = 20.0
FRACTION = 1.0 / 15.0
C0_NUMERATOR = 80.0
SECOND_MOMENT_RATIO = 3.1
PZ_LOWER = 1.0 / 12.4


# -- closed forms ----------------------------------------------------------


def upper_bound_linear(n: int, k: int, t: int) -> float:
    """min(1, (k-1) n 2^-t)."""
    return min(1.0, (k - 1) * n * 2.0**-t)


def phi(x: float) -> float:
    """x/2 below 1, 1 - 1/(1 + x^2) from 1 on."""
    if x < 0:
        raise ValueError("phi is defined on x >= 0")
    return x / 2.0 if x < 1.0 else 1.0 - 1.0 / (1.0 + x * x)


def phi_threshold(k: int) -> float:
    """Smallest n 2^-t for which the phi-route bound applies."""
    return math.log(2.0) / (2.0 * (k - 1))


class PhiBound(NamedTuple):
    value: float
    in_regime: bool


def upper_bound_phi(n: int, k: int, t: int) -> PhiBound:
    """1 - exp(-2(k-1) n 2^-t)/2 when n 2^-t >= log 2 / (2(k-1)).

    Outside that regime the linear bound is returned with ``in_regime``
    False.
    """
    s = n * 2.0**-t
    if s < phi_threshold(k) * (1.0 - 1e-12):
        return PhiBound(upper_bound_linear(n, k, t), False)
    return PhiBound(1.0 - 0.5 * math.exp(-2.0 * (k - 1) * s), True)


def chi2_tv_bound(mu: DenseMeasure, pi: DenseMeasure) -> float:
    """Cauchy-Schwarz bound TV <= sqrt(chi^2(mu | pi)) / 2, clamped to 1."""
    w = pi.weights
    chi2 = float(np.sum((mu.weights - w) ** 2 / w))
    return min(1.0, 0.5 * math.sqrt(chi2))


@dataclass(frozen=True)
class BoundReport:
    """Upper bounds and an optional empirical lower bound, all in [0, 1]."""

    n: int
    k: int
    t: int
    upper_linear: float
    upper_phi: float
    phi_in_regime: bool
    lower_event: Estimate | None = None

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lower_event"] = None if self.lower_event is None else self.lower_event.as_dict()
        return d


def bound_report(n: int, k: int, t: int, lower: Estimate | None = None) -> BoundReport:
    ph = upper_bound_phi(n, k, t)
    return BoundReport(n, k, t, upper_bound_linear(n, k, t), ph.value, ph.in_regime, lower)


class DominationChain(NamedTuple):
    exact_tv: float
    half_mean_min_bound: Estimate
    linear: float


def domination_chain(
    mu: DenseMeasure,
    seq: MarginalSequence,
    t: int,
    samples: int,
    seed: int,
    chunk: int = 1000,
) -> DominationChain:
    """Exact D_n(mu, t), MC estimate of E_xi[min(bound1, bound2)]/2, linear bound."""
    exact = tv_distance(evolve_exact(mu, t).final, product_measure(seq))
    bases = mean_vector_table(seq)
    sampler = DenseSampler(mu)

    def work(rng, size):
        vals = np.empty(size)
        for j in range(size):
            env = sample_environment(sampler, t, rng)
            vals[j] = 0.5 * hhat_l1_bounds(quenched_moments(env, bases)).combined
        return Moments.of(vals)

    parts = run_chunks(work, samples, seed=seed, stream="domination", chunk=chunk)
    est = Moments.merge_all(parts).estimate()
    return DominationChain(exact, est, upper_bound_linear(seq.n, seq.k, t))


# -- basket experiment -----------------------------------------------------


def basket_c0(rho: float) -> float:
    if rho <= 0:
        raise ValueError("correlation constant must be positive")
    return C0_NUMERATOR / rho


def basket_block_size(n: int, t: int, rho: float) -> int:
    """b = ceil(C0 2^t), capped at n."""
    return int(min(n, math.ceil(basket_c0(rho) * 2**t)))


def rho_for(seq: MarginalSequence, resolution: int = 40) -> float:
    """rho-hat for the delta class of ``seq``.

    The delta is rounded down to the grid so the grid is not empty.
    """
    d = math.floor(seq.delta * resolution) / resolution
    d = max(d, 1.0 / resolution)
    return rho_estimate(min(d, 1.0 / seq.k), seq.k, seq.space, resolution)


@dataclass(frozen=True)
class BasketExperimentConfig:
    """Parameters of the basket test-event experiment.

    ``mag_factor`` and ``fraction`` default to 20 and 1/15; any other value
    marks the run as a tuned extension.
    """

    n: int
    t: int
    b: int
    mag_factor: float = MAG_FACTOR
    fraction: float = FRACTION
    samples_pi: int = 20_000
    samples_mu: int = 20_000
    seed: int = 0
    chunk: int = 500
    threads: int = 1

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("b must be at least 1")
        if self.n // self.b < 1:
            raise ValueError(f"b = {self.b} exceeds n = {self.n}")
        if self.t < 0:
            raise ValueError("t must be nonnegative")

    @property
    def a(self) -> int:
        return self.n // self.b

    @property
    def tuned(self) -> bool:
        return self.mag_factor != MAG_FACTOR or self.fraction != FRACTION

    @property
    def degenerate(self) -> bool:
        # with fewer than 15 blocks, Z >= a/15 just asks for one hit
        return self.a < 15


@dataclass(frozen=True)
class BasketResult:
    config: BasketExperimentConfig
    pi_A: Estimate
    mut_A: Estimate
    tv_lower: float
    pi_block_hit: Estimate
    mut_block_hit: Estimate
    pi_xi_mean: Estimate
    mut_xi_mean: Estimate

    def as_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg.pop("threads")  # execution detail, not part of the result
        cfg.update(a=self.config.a, tuned=self.config.tuned, degenerate=self.config.degenerate)
        out = {"config": cfg, "tv_lower": self.tv_lower}
        for name in ("pi_A", "mut_A", "pi_block_hit", "mut_block_hit", "pi_xi_mean", "mut_xi_mean"):
            out[name] = getattr(self, name).as_dict()
        return out


def _block_xi(sigma: np.ndarray, g_table: np.ndarray, a: int, b: int) -> np.ndarray:
    """Squared block magnetizations Xi_j, shape (B, a)."""
    g = g_table[np.arange(a * b)[None, :], sigma[:, : a * b]]
    return np.square(g.reshape(sigma.shape[0], a, b).sum(axis=2))


def _check_basket(cfg: BasketExperimentConfig, init: StructuredInit) -> None:
    if init.kind != "basket-blockwise" or init.params.get("b") != cfg.b:
        raise ValueError("init must be basket_init with the configured block size")
    if init.n != cfg.n:
        raise ValueError("init and config disagree on n")


def _basket_stats(sigma, g_table, cfg: BasketExperimentConfig) -> np.ndarray:
    """Per-sample rows (1_A, mean_j X_j, mean_j Xi_j, mean_j Xi_j^2)."""
    xi = _block_xi(sigma, g_table, cfg.a, cfg.b)
    x = xi >= cfg.mag_factor * cfg.b
    z = x.sum(axis=1)
    hit = z >= cfg.a * cfg.fraction
    return np.column_stack([hit, x.mean(axis=1), xi.mean(axis=1), (xi * xi).mean(axis=1)])


def basket_experiment(cfg: BasketExperimentConfig, init: StructuredInit) -> BasketResult:
    """Estimate pi(A) and mu_t(A) for A = {#{j : Xi_j >= 20b} >= a/15}.

    tv_lower = max(0, mu_t(A) - pi(A) - 2 SE) with SE the combined standard
    error; |mu_t(A) - pi(A)| is a lower bound on the TV distance.
    """
    _check_basket(cfg, init)
    g_table = stack_tables(mean_vector_table(init.seq))[:, 1, :]
    pi_sampler = ProductSampler(init.seq)
    mu_sampler = init.sampler()

    def pi_work(rng, size):
        return Moments.of(_basket_stats(pi_sampler.sample(rng, size), g_table, cfg))

    def mu_work(rng, size):
        return Moments.of(_basket_stats(sample_root(mu_sampler, cfg.t, rng, size), g_table, cfg))

    kw = dict(seed=cfg.seed, chunk=cfg.chunk, threads=cfg.threads)
    pi_m = Moments.merge_all(run_chunks(pi_work, cfg.samples_pi, stream="basket-pi", **kw))
    mu_m = Moments.merge_all(run_chunks(mu_work, cfg.samples_mu, stream="basket-mu", **kw))
    pi_A = proportion(int(round(pi_m.total[0])), pi_m.count)
    mut_A = proportion(int(round(mu_m.total[0])), mu_m.count)
    se = math.hypot(pi_A.se, mut_A.se)
    tv_lower = max(0.0, mut_A.mean - pi_A.mean - 2.0 * se)
    return BasketResult(
        cfg, pi_A, mut_A, tv_lower,
        pi_m.estimate(1), mu_m.estimate(1), pi_m.estimate(2), mu_m.estimate(2),
    )


def block_first_moment_exact(init: StructuredInit, t: int, block: int = 0) -> float:
    """E_{mu_t}[Xi_j] = b + 2^-t sum_{i != l in B_j} E_mu[g_i g_l].

    Two distinct sites share a leaf with probability 2^-t and are otherwise
    independent with mean-zero g, which gives the formula.
    """
    sites = list(init.blocks[block])
    marg = [init.seq.marginals[i] for i in sites]
    classes = sorted(set(marg), key=lambda m: m.probs)
    index = {m: c for c, m in enumerate(classes)}
    counts = np.bincount([index[m] for m in marg], minlength=len(classes)).astype(float)
    space = init.seq.space
    R = np.array([[comonotonic_cross_moments(a, b, space)[0, 0] for b in classes] for a in classes])
    off = counts @ R @ counts - np.sum(counts * np.diag(R))
    return len(sites) + off * 2.0**-t


@dataclass(frozen=True)
class SecondMomentReport:
    xi_mean: Estimate
    xi_sq_mean: Estimate
    ratio: Estimate
    first_moment_floor: float
    first_moment_exact: float
    ratio_ok: bool
    first_moment_ok: bool

    def as_dict(self) -> dict:
        d = {k: v.as_dict() for k, v in
             (("xi_mean", self.xi_mean), ("xi_sq_mean", self.xi_sq_mean), ("ratio", self.ratio))}
        d.update(first_moment_floor=self.first_moment_floor,
                 first_moment_exact=self.first_moment_exact,
                 ratio_ok=self.ratio_ok, first_moment_ok=self.first_moment_ok)
        return d


def evolved_block_second_moment_check(
    cfg: BasketExperimentConfig, init: StructuredInit, rho: float | None = None
) -> SecondMomentReport:
    """E[Xi_j^2] / E[Xi_j]^2 under mu_t, with a delta-method standard error.

    Blocks are pooled within each root sample; samples are i.i.d.
    """
    _check_basket(cfg, init)
    rho = rho_for(init.seq) if rho is None else rho
    g_table = stack_tables(mean_vector_table(init.seq))[:, 1, :]
    sampler = init.sampler()

    def work(rng, size):
        xi = _block_xi(sample_root(sampler, cfg.t, rng, size), g_table, cfg.a, cfg.b)
        v = np.column_stack([xi.mean(axis=1), (xi * xi).mean(axis=1)])
        return v.shape[0], v.sum(axis=0), v.T @ v

    parts = run_chunks(work, cfg.samples_mu, stream="basket-second", seed=cfg.seed,
                       chunk=cfg.chunk, threads=cfg.threads)
    count = sum(p[0] for p in parts)
    total = sum((p[1] for p in parts), np.zeros(2))
    cross = sum((p[2] for p in parts), np.zeros((2, 2)))
    m = total / count
    cov = (cross - count * np.outer(m, m)) / (count - 1) / count
    r = m[1] / m[0] ** 2
    grad = np.array([-2.0 * m[1] / m[0] ** 3, 1.0 / m[0] ** 2])
    r_se = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    xi_mean = Estimate(float(m[0]), float(math.sqrt(max(cov[0, 0], 0.0))), count)
    xi_sq = Estimate(float(m[1]), float(math.sqrt(max(cov[1, 1], 0.0))), count)
    b = cfg.b
    floor = b + b * (b - 1) * 2.0**-cfg.t * rho
    return SecondMomentReport(
        xi_mean, xi_sq, Estimate(float(r), r_se, count), floor,
        block_first_moment_exact(init, cfg.t),
        bool(r < SECOND_MOMENT_RATIO + 3.0 * r_se),
        bool(xi_mean.mean >= floor - 3.0 * xi_mean.se),
    )


# -- Q2 statistic ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PairMoments:
    """Cross moments E_mu[f_m^i f_m'^j] (m, m' >= 1) grouped by site class.

    ``site_class[i]`` is the class of site i and ``C[c, c']`` the
    (k-1) x (k-1) matrix shared by every pair i != j with those classes.
    """

    site_class: np.ndarray
    C: np.ndarray

    @property
    def n(self) -> int:
        return self.site_class.size

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.site_class, minlength=self.C.shape[0])


def comonotonic_pair_moments(seq: MarginalSequence) -> PairMoments:
    """Exact pair moments of the global comonotonic coupling."""
    classes = sorted(set(seq.marginals), key=lambda m: m.probs)
    index = {m: c for c, m in enumerate(classes)}
    site_class = np.array([index[m] for m in seq.marginals], dtype=np.intp)
    C = np.array([[comonotonic_cross_moments(a, b, seq.space) for b in classes] for a in classes])
    return PairMoments(site_class, C)


def dense_pair_moments(mu: DenseMeasure, bases: Sequence[OrthonormalBasis]) -> PairMoments:
    """Pair moments of an arbitrary dense law via its two-site marginals."""
    n, k = mu.n, mu.k
    C = np.zeros((n, n, k - 1, k - 1))
    for i in range(n):
        for j in range(i + 1, n):
            pair = marginalize(mu, [i, j]).tensor
            C[i, j] = bases[i].table[1:] @ pair @ bases[j].table[1:].T
            C[j, i] = C[i, j].T
    return PairMoments(np.arange(n), C)


def q2_statistic(pm: PairMoments, bases: Sequence[OrthonormalBasis], t: int, sigma):
    """Q2(sigma) = N^-1 sum_{i<j} sum_{m,m'} E_mu[f_m^i f_m'^j] f_m^i(sigma_i) f_m'^j(sigma_j).

    Evaluated from class-by-spin counts: with S_c the sum of the basis
    vectors v_i over class c, the double sum is
    (sum_{c,c'} S_c^T C[c,c'] S_c' - sum_i v_i^T C[c_i,c_i] v_i) / 2.
    """
    s = np.asarray(sigma, dtype=np.intp)
    single = s.ndim == 1
    s = s[None] if single else s
    B, n = s.shape
    k = bases[0].k
    ncls = pm.C.shape[0]
    # sites of one class share a marginal, hence a basis
    first = np.zeros(ncls, dtype=np.intp)
    first[pm.site_class[::-1]] = np.arange(n)[::-1]
    G = np.stack([bases[i].table[1:].T for i in first])  # (ncls, k, k-1)
    key = pm.site_class[None, :] * k + s + (np.arange(B) * ncls * k)[:, None]
    counts = np.bincount(key.ravel(), minlength=B * ncls * k).reshape(B, ncls, k)
    S = np.einsum("bcl,clm->bcm", counts, G)
    full = np.einsum("bcm,cdmr,bdr->b", S, pm.C, S, optimize=True)
    own = np.einsum("clm,ccmr,clr->cl", G, pm.C, G)  # v^T C[c,c] v per (class, spin)
    diag = np.einsum("bcl,cl->b", counts, own)
    q = 0.5 * (full - diag) * 2.0**-t
    return float(q[0]) if single else q


def q2_second_moment_exact(pm: PairMoments, t: int) -> float:
    """E_pi[Q2^2] = N^-2 sum_{i<j} ||C_ij||_F^2 (orthonormality under pi)."""
    cnt = pm.class_counts.astype(float)
    fro = np.sum(pm.C * pm.C, axis=(2, 3))
    total = cnt @ fro @ cnt - np.sum(cnt * np.diag(fro))
    return 0.5 * total * 4.0**-t


def q2_second_moment_bounds(n: int, k: int, t: int, rho: float) -> tuple[float, float]:
    """rho^2 n(n-1)/(2N^2) <= E_pi[Q2^2] <= (k-1)^2 n(n-1)/(2N^2) for comonotonic mu."""
    pairs = n * (n - 1) / 2.0 * 4.0**-t
    return rho * rho * pairs, (k - 1) ** 2 * pairs


class Q2Estimate(NamedTuple):
    mean: Estimate
    second_moment: Estimate


def q2_moments_mc(
    pm: PairMoments,
    seq: MarginalSequence,
    t: int,
    samples: int,
    seed: int,
    stream: str = "q2",
    chunk: int = 2000,
    threads: int = 1,
) -> Q2Estimate:
    """Monte Carlo E_pi[Q2] and E_pi[Q2^2] with sigma ~ pi."""
    bases = mean_vector_table(seq)
    sampler = ProductSampler(seq)

    def work(rng, size):
        q = q2_statistic(pm, bases, t, sampler.sample(rng, size))
        return Moments.of(np.column_stack([q, q * q]))

    m = Moments.merge_all(run_chunks(work, samples, seed=seed, stream=stream,
                                     chunk=chunk, threads=threads))
    return Q2Estimate(m.estimate(0), m.estimate(1))
