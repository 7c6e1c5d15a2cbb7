"""Cutoff profile of the homogeneous monochromatic start.

With identical marginals p and a monochromatic initial law, mu_t is
exchangeable, so it is determined by the law of the spin counts. The leaves
carry i.i.d. p colors, each site copies a uniform leaf, hence the counts
are a Multinomial(n, M/N) mixture over leaf color counts M ~ Multinomial(N, p).
That exact count law is compared with the Gaussian limit
||N(0, (1+s) I_d) - N(0, I_d)||_TV, d = k - 1, s = lim n 2^-t.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln, xlogy

from .errors import CapacityExceeded, DomainError
from .measures import DenseMeasure, SiteMarginal, SpinSpace, configurations
from .montecarlo import Estimate, Moments, run_chunks
from .onb import OrthonormalBasis, build_basis

COUNT_CAP = 1 << 26
DOMAIN_EPS = 1e-12
_ROW_BUDGET = 1 << 21


# -- count space -----------------------------------------------------------


def compositions(total: int, k: int) -> np.ndarray:
    """All (c_0, ..., c_{k-1}) >= 0 with sum ``total``, shape (C(total+k-1, k-1), k)."""
    rows = []
    for bars in itertools.combinations(range(total + k - 1), k - 1):
        edges = (-1,) + bars + (total + k - 1,)
        rows.append([edges[j + 1] - edges[j] - 1 for j in range(k)])
    return np.array(rows, dtype=np.int64).reshape(-1, k)


def _log_multinomial(counts: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """log Multinomial(sum c, q)(c) for every pair of rows (counts, probs)."""
    total = counts.sum(axis=-1)
    return (
        gammaln(total + 1.0)
        - gammaln(counts + 1.0).sum(axis=-1)
        + xlogy(counts, probs).sum(axis=-1)
    )


@dataclass(frozen=True, eq=False)
class CountMeasure:
    """Law of the spin-count vector (n_0, ..., n_{k-1}) of an exchangeable measure."""

    n: int
    k: int
    compositions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.compositions.shape[0],):
            raise ValueError("one weight per composition required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("count weights must be a probability vector")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def multinomial_count_measure(p: Sequence[float], n: int) -> CountMeasure:
    p = np.asarray(p, dtype=float)
    comp = compositions(n, p.size)
    w = np.exp(_log_multinomial(comp, p[None, :]))
    return CountMeasure(n, p.size, comp, w / w.sum())


def monochromatic_count_evolution(
    space: SpinSpace, p, n: int, t: int, cap: int = COUNT_CAP, threads: int = 1
) -> CountMeasure:
    """Exact count law of mu_t for the monochromatic start with marginal p.

    Sum over leaf color counts M of Mult(N, p)(M) * Mult(n, M/N). Chunks of M
    are summed in index order, so ``threads`` does not change the result.
    """
    p = p if isinstance(p, SiteMarginal) else SiteMarginal(tuple(p))
    k = space.k
    if p.k != k:
        raise ValueError("marginal and spin space disagree on k")
    N = 2**t
    n_env = math.comb(N + k - 1, k - 1)
    n_cnt = math.comb(n + k - 1, k - 1)
    if n_env * n_cnt > cap:
        raise CapacityExceeded(f"{n_env} environments x {n_cnt} count vectors exceeds cap {cap}")
    env = compositions(N, k)
    cnt = compositions(n, k)
    log_env = _log_multinomial(env, p.array[None, :])
    step = max(1, _ROW_BUDGET // max(n_cnt, 1))
    starts = list(range(0, env.shape[0], step))

    def part(start):
        M = env[start : start + step]
        lw = _log_multinomial(cnt[None, :, :], (M / N)[:, None, :])
        return np.exp(lw + log_env[start : start + step, None]).sum(axis=0)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(part, starts))
    else:
        parts = [part(s) for s in starts]
    w = np.zeros(n_cnt)
    for q in parts:
        w += q
    return CountMeasure(n, k, cnt, w / w.sum())


def count_tv_to_stationary(cm: CountMeasure, p) -> float:
    """1/2 sum over count vectors of |cm - Multinomial(n, p)|."""
    p = np.asarray(p.probs if isinstance(p, SiteMarginal) else p, dtype=float)
    ref = np.exp(_log_multinomial(cm.compositions, p[None, :]))
    return 0.5 * float(np.abs(cm.weights - ref).sum())


def lift_count_measure(cm: CountMeasure, space: SpinSpace) -> DenseMeasure:
    """Spread each count vector's mass uniformly over its configurations."""
    conf = configurations(cm.n, cm.k)
    counts = np.stack([(conf == l).sum(axis=1) for l in range(cm.k)], axis=1)
    # index of each configuration's count vector among the compositions
    lookup = {tuple(c): j for j, c in enumerate(cm.compositions.tolist())}
    idx = np.array([lookup[tuple(c)] for c in counts.tolist()], dtype=np.intp)
    log_coef = gammaln(cm.n + 1.0) - gammaln(counts + 1.0).sum(axis=1)
    w = cm.weights[idx] * np.exp(-log_coef)
    return DenseMeasure(space, cm.n, w)


# -- chi-square CDF --------------------------------------------------------


_EPS = 1e-16
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    """Upper regularized Q(a, x) by the modified Lentz continued fraction."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_lower_gamma(a: float, x: float) -> float:
    """P(a, x) = gamma(a, x) / Gamma(a): series below x = a + 1, continued fraction above."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_cf(a, x))


def chi_square_cdf(d: int, x: float) -> float:
    if d < 1 or int(d) != d:
        raise ValueError("degrees of freedom must be a positive integer")
    return regularized_lower_gamma(d / 2.0, x / 2.0)


def gaussian_tv_limit(d: int, s: float) -> float:
    """||N(0, (1+s) I_d) - N(0, I_d)||_TV by the radial reduction.

    The two densities cross on the sphere r^2 = d (1+s) log(1+s) / s, so the
    TV is F_d(r^2) - F_d(r^2 / (1+s)) with F_d the chi-square CDF.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if s <= 0:
        raise ValueError("s must be positive")
    r2 = d * (1.0 + s) * math.log1p(s) / s
    return chi_square_cdf(d, r2) - chi_square_cdf(d, r2 / (1.0 + s))


# -- alpha / beta separation -----------------------------------------------


class AlphaBeta(NamedTuple):
    alpha: np.ndarray
    beta: float


def alpha_beta(q, basis: OrthonormalBasis, n: int) -> AlphaBeta:
    """Split log h into a linear statistic and a constant.

    With x_l = 1 + q . f(s_l): beta = n sum_l p_l log x_l and
    alpha = sqrt(n) sum_l p_l f(s_l) log x_l, so that
    h(sigma) = exp(alpha . fbar_n(sigma) + beta) with
    fbar_n = n^{-1/2} sum_i f(sigma_i). x_l = phat_l / p_l, so x_l = 0
    exactly when color l is absent from the leaves.
    """
    q = np.asarray(q, dtype=float)
    F = basis.table[1:]
    if q.shape != (F.shape[0],):
        raise ValueError(f"q must have length {F.shape[0]}")
    x = 1.0 + q @ F
    bad = np.flatnonzero(x <= DOMAIN_EPS)
    if bad.size:
        raise DomainError(f"1 + q.f(s_l) = {x[bad[0]]:.3e} <= 0 at l = {bad[0]}", int(bad[0]))
    w = basis.marginal.array * np.log(x)
    return AlphaBeta(math.sqrt(n) * (F @ w), n * float(w.sum()))


def fbar(basis: OrthonormalBasis, sigma) -> np.ndarray:
    """n^{-1/2} sum_i f(sigma_i) for spin-index configurations (..., n)."""
    s = np.asarray(sigma, dtype=np.intp)
    n = s.shape[-1]
    return basis.table[1:, s].sum(axis=-1).T / math.sqrt(n)


def reconstruct_density(ab: AlphaBeta, basis: OrthonormalBasis, sigma):
    """exp(alpha . fbar_n(sigma) + beta)."""
    v = fbar(basis, sigma)
    return np.exp(v @ ab.alpha + ab.beta)


class AlphaMoments(NamedTuple):
    alpha_mean: np.ndarray
    alpha_mean_se: np.ndarray
    alpha_cov: np.ndarray
    residual: Estimate  # beta + |alpha|^2 / 2
    failures: int
    samples: int


def alpha_clt_moments(
    space: SpinSpace, p, n: int, t: int, samples: int, seed: int, chunk: int = 5000
) -> AlphaMoments:
    """Sample moments of (alpha, beta) over environments M ~ Mult(N, p).

    Environments outside the log domain are counted and skipped.
    """
    p = p if isinstance(p, SiteMarginal) else SiteMarginal(tuple(p))
    basis = build_basis(space, p)
    F = basis.table[1:]
    N = 2**t
    d = space.k - 1

    def work(rng, size):
        M = rng.multinomial(N, p.array, size=size)
        q = (M / N) @ F.T
        x = 1.0 + q @ F
        ok = np.all(x > DOMAIN_EPS, axis=1)
        lx = np.log(np.where(ok[:, None], x, 1.0)) * p.array
        alpha = math.sqrt(n) * lx[ok] @ F.T
        beta = n * lx[ok].sum(axis=1)
        resid = beta + 0.5 * np.sum(alpha * alpha, axis=1)
        outer = (alpha[:, :, None] * alpha[:, None, :]).reshape(-1, d * d)
        return Moments.of(np.column_stack([alpha, outer, resid])), int((~ok).sum())

    parts = run_chunks(work, samples, seed=seed, stream="alpha-clt", chunk=chunk)
    m = Moments.merge_all([x[0] for x in parts])
    mean = m.mean()
    se = np.sqrt(m.var() / m.count)
    a_mean = mean[:d]
    cov = mean[d : d + d * d].reshape(d, d) - np.outer(a_mean, a_mean)
    return AlphaMoments(a_mean, se[:d], cov, m.estimate(d + d * d),
                        sum(x[1] for x in parts), samples)


def alpha_domain_failure_rate(p, t: int) -> float:
    """Exact probability that some color is absent from the N = 2^t leaves."""
    p = np.asarray(p.probs if isinstance(p, SiteMarginal) else p, dtype=float)
    N = 2**t
    k = p.size
    # inclusion-exclusion over the set of missing colors
    total = 0.0
    for r in range(1, k):
        for missing in itertools.combinations(range(k), r):
            total += (-1) ** (r + 1) * (1.0 - p[list(missing)].sum()) ** N
    return max(0.0, min(1.0, total))


# -- psi -------------------------------------------------------------------


class PsiValue(NamedTuple):
    closed: float
    mc: Estimate | None


def psi_closed(u, s: float) -> float:
    """(1+s)^{-d/2} exp(s |u|^2 / (2(1+s)))."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if s <= 0:
        raise ValueError("s must be positive")
    d = u.size
    return float((1.0 + s) ** (-d / 2.0) * math.exp(s * float(u @ u) / (2.0 * (1.0 + s))))


def psi(u, s: float, mc_samples: int = 0, rng: np.random.Generator | None = None) -> PsiValue:
    """psi(u) = E[exp(Z.u - |Z|^2/2)], Z ~ N(0, s I).

    Closed form is primary; ``mc_samples > 0`` adds a Monte Carlo check.
    """
    closed = psi_closed(u, s)
    if mc_samples <= 0:
        return PsiValue(closed, None)
    if rng is None:
        raise ValueError("Monte Carlo evaluation needs an rng")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    Z = rng.normal(scale=math.sqrt(s), size=(mc_samples, u.size))
    vals = np.exp(Z @ u - 0.5 * np.sum(Z * Z, axis=1))
    return PsiValue(closed, Moments.of(vals).estimate())


def psi_gaussian_mean(d: int, s: float, samples: int, rng: np.random.Generator) -> Estimate:
    """Monte Carlo E_{Z ~ N(0, I_d)}[psi(Z)]; equals 1."""
    Z = rng.normal(size=(samples, d))
    vals = (1.0 + s) ** (-d / 2.0) * np.exp(s * np.sum(Z * Z, axis=1) / (2.0 * (1.0 + s)))
    return Moments.of(vals).estimate()


# -- experiment ------------------------------------------------------------


class ProfileRow(NamedTuple):
    k: int
    s: float
    t: int
    n: int
    tv_exact: float
    tv_gaussian: float
    gap: float
    alpha_domain_failure_rate: float


def profile_experiment(
    space: SpinSpace, p, s: float, t_range: Sequence[int], threads: int = 1
) -> list[ProfileRow]:
    """Exact count TV against the Gaussian limit along n = round(s 2^t)."""
    p = p if isinstance(p, SiteMarginal) else SiteMarginal(tuple(p))
    d = space.k - 1
    limit = gaussian_tv_limit(d, s)
    rows = []
    for t in t_range:
        n = max(1, int(round(s * 2**t)))
        cm = monochromatic_count_evolution(space, p, n, t, threads=threads)
        tv = count_tv_to_stationary(cm, p)
        rows.append(ProfileRow(space.k, float(s), int(t), n, tv, limit, abs(tv - limit),
                               float(alpha_domain_failure_rate(p, t))))
    return rows


def write_profile_csv(path, rows: Sequence[ProfileRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ProfileRow._fields)
        for r in rows:
            wr.writerow([r.k, repr(r.s), r.t, r.n, repr(r.tv_exact), repr(r.tv_gaussian),
                         repr(r.gap), repr(r.alpha_domain_failure_rate)])
