"""Quantities conditional on the tree-leaf environment xi.

Given the N = 2^t leaf configurations, the root law is the product measure
of the per-site empirical marginals. Its density against pi factorizes over
sites and expands in the orthonormal bases with the quenched moments
q_m(i) = mean over leaves of f_m^i(xi_i(x)) as coefficients.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import CapacityExceeded
from .measures import DenseMeasure, SpinSpace, configurations
from .onb import OrthonormalBasis, stack_tables


@dataclass(frozen=True, eq=False)
class Environment:
    """Leaf configurations of a depth-t tree, or just their per-site counts.

    ``counts[i, l]`` is the number of leaves with spin s_l at site i.
    ``leaves`` (N x n, uint8 spin indices) is optional; streaming
    generation keeps only the counts.
    """

    counts: np.ndarray
    t: int
    source: str = ""
    leaves: np.ndarray | None = None

    @classmethod
    def from_leaves(cls, leaves, k: int, t: int, source: str = "") -> "Environment":
        leaves = np.asarray(leaves, dtype=np.uint8)
        if leaves.shape[0] != 2**t:
            raise ValueError(f"expected 2^{t} leaves, got {leaves.shape[0]}")
        if leaves.size and leaves.max() >= k:
            raise ValueError("leaf spin index out of range")
        counts = np.stack([(leaves == l).sum(axis=0) for l in range(k)], axis=1)
        return cls(counts.astype(np.int64), t, source, leaves)

    @classmethod
    def from_counts(cls, counts, t: int, source: str = "") -> "Environment":
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts.sum(axis=1) != 2**t):
            raise ValueError("every site must count 2^t leaves")
        return cls(counts, t, source)

    @property
    def N(self) -> int:
        return 2**self.t

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def k(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True, eq=False)
class QuenchedMoments:
    """``q[i, m - 1]`` = q_m(i) for m = 1..k-1; q_0 = 1 is implicit."""

    q: np.ndarray

    @property
    def a_xi(self) -> float:
        """A_xi = sum over sites and m >= 1 of q_m(i)^2."""
        return float(np.sum(self.q * self.q))


def empirical_marginals(env: Environment) -> np.ndarray:
    """(n, k) table of per-site leaf frequencies; rows sum to 1."""
    return env.counts / env.N


def quenched_moments(
    env: Environment, bases: Sequence[OrthonormalBasis], chunk: int = 1 << 14
) -> QuenchedMoments:
    """Leaf averages of f_m^i, straight from the definition when leaves exist."""
    F = stack_tables(bases)
    n = env.n
    if F.shape[0] != n or F.shape[1] != env.k:
        raise ValueError("bases do not match the environment's n and k")
    if env.leaves is None:
        return QuenchedMoments(moments_from_counts(env.counts[None], F)[0])
    acc = np.zeros((n, env.k))
    sites = np.arange(n)[None, :]
    for start in range(0, env.N, chunk):
        block = env.leaves[start : start + chunk].astype(np.intp)
        acc += F[sites, :, block].sum(axis=0)
    return QuenchedMoments(acc[:, 1:] / env.N)


def moments_from_counts(counts: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Batched q from per-environment counts (E, n, k) -> (E, n, k-1)."""
    counts = np.asarray(counts, dtype=float)
    N = counts[0, 0].sum()
    return np.einsum("eil,iml->eim", counts / N, F[:, 1:, :])


def _as_configs(sigma) -> tuple[np.ndarray, bool]:
    s = np.asarray(sigma, dtype=np.intp)
    return (s[None, :], True) if s.ndim == 1 else (s, False)


def quenched_density(env: Environment, bases: Sequence[OrthonormalBasis], sigma):
    """h(sigma) = prod_i phat_i(sigma_i) / p_i(sigma_i); nonnegative by construction."""
    s, single = _as_configs(sigma)
    phat = empirical_marginals(env)
    p = np.stack([b.marginal.array for b in bases])
    sites = np.arange(env.n)[None, :]
    h = np.prod(phat[sites, s] / p[sites, s], axis=1)
    return float(h[0]) if single else h


def density_expansion(
    moments: QuenchedMoments | Environment, bases: Sequence[OrthonormalBasis], sigma
):
    """prod_i (1 + sum_{m>=1} q_m(i) f_m^i(sigma_i))."""
    if isinstance(moments, Environment):
        moments = quenched_moments(moments, bases)
    F = stack_tables(bases)
    s, single = _as_configs(sigma)
    n = F.shape[0]
    # fvals[b, i, m] = f_m^i(sigma_i) for m >= 1
    fvals = F[np.arange(n)[None, :], 1:, s]
    factors = 1.0 + np.sum(moments.q[None] * fvals, axis=2)
    h = np.prod(factors, axis=1)
    return float(h[0]) if single else h


def quenched_l2_fluctuation(moments: QuenchedMoments | np.ndarray) -> float:
    """||h - 1||^2_{L2(pi)} = prod_i (1 + sum_m q_m(i)^2) - 1, in log space."""
    q = moments.q if isinstance(moments, QuenchedMoments) else np.asarray(moments)
    return float(np.expm1(np.sum(np.log1p(np.sum(q * q, axis=-1)))))


def _expm1_minus(a: float) -> float:
    """e^a - a - 1 without cancellation."""
    if a < 1e-3:
        return a * a / 2.0 + a**3 / 6.0 + a**4 / 24.0
    if a > 700.0:
        return math.inf
    return math.expm1(a) - a


class HhatBounds(NamedTuple):
    bound1: float
    bound2: float
    combined: float


def hhat_l1_bounds(moments: QuenchedMoments | float) -> HhatBounds:
    """Two bounds on ||hhat - 1||_{L1(pi)} and their minimum.

    hhat is the quenched density with its linear terms removed. The first
    bound is 2 + sqrt(A), the second sqrt(e^A - A - 1), with A = A_xi.
    """
    a = moments.a_xi if isinstance(moments, QuenchedMoments) else float(moments)
    b1 = 2.0 + math.sqrt(a)
    b2 = math.sqrt(_expm1_minus(a))
    return HhatBounds(b1, b2, min(b1, b2))


def min_inequality_holds(a: float) -> bool:
    """min(2 + sqrt(a), sqrt(e^a - a - 1)) <= 2a (checked numerically)."""
    return hhat_l1_bounds(a).combined <= 2.0 * a


# -- exact small-n companions ----------------------------------------------


def quenched_product_measure(env: Environment, space: SpinSpace) -> DenseMeasure:
    """The quenched law: product of the per-site empirical marginals."""
    phat = empirical_marginals(env)
    w = np.ones(1)
    for row in phat:
        w = np.multiply.outer(w, row).reshape(-1)
    return DenseMeasure(space, env.n, w)


def hhat_l1_exact(env: Environment, bases: Sequence[OrthonormalBasis]) -> float:
    """||hhat - 1||_{L1(pi)} by summing over all k^n configurations."""
    n, k = env.n, env.k
    conf = configurations(n, k)
    mom = quenched_moments(env, bases)
    F = stack_tables(bases)
    lin = np.sum(mom.q[None] * F[np.arange(n)[None, :], 1:, conf], axis=(1, 2))
    hhat = quenched_density(env, bases, conf) - lin
    p = np.stack([b.marginal.array for b in bases])
    pi = np.prod(p[np.arange(n)[None, :], conf], axis=1)
    return float(np.sum(pi * np.abs(hhat - 1.0)))


def enumerate_environments(
    mu: DenseMeasure, t: int, cap: int = 1 << 16
) -> Iterator[tuple[float, Environment]]:
    """Every leaf tuple (xi(1), ..., xi(N)) with its probability prod_x mu(xi(x))."""
    N = 2**t
    size = mu.weights.size
    if size**N > cap:
        raise CapacityExceeded(f"(k^n)^N = {size}^{N} exceeds cap {cap}")
    conf = configurations(mu.n, mu.k)
    support = np.flatnonzero(mu.weights)
    for combo in itertools.product(support, repeat=N):
        weight = float(np.prod(mu.weights[list(combo)]))
        yield weight, Environment.from_leaves(conf[list(combo)], mu.k, t, "enumerated")


def quenched_mixture_exact(mu: DenseMeasure, t: int, cap: int = 1 << 16) -> DenseMeasure:
    """E_xi of the quenched law, by full enumeration of environments."""
    acc = np.zeros(mu.weights.size)
    for weight, env in enumerate_environments(mu, t, cap):
        acc += weight * quenched_product_measure(env, mu.space).weights
    return DenseMeasure(mu.space, mu.n, acc)


def write_quenched_csv(path, rows: Sequence[tuple[int, float, float, float, float]]) -> None:
    """Columns env_id, A_xi, bound1, bound2, l2_fluct."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["env_id", "A_xi", "bound1", "bound2", "l2_fluct"])
        for env_id, a, b1, b2, l2 in rows:
            wr.writerow([env_id, repr(float(a)), repr(float(b1)), repr(float(b2)), repr(float(l2))])
