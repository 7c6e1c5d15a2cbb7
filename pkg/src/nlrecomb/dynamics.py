"""The recombination dynamics mu_t = mu_{t-1} o mu_{t-1}.

Exact evolution for small n (subset-marginal algorithm, with two
independent oracles), the tree-leaf sampler that draws from mu_t for any n,
and the random fragmentation process behind convergence.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapacityExceeded, DimensionMismatch
from .measures import (
    DEFAULT_CAP,
    DenseMeasure,
    MarginalSequence,
    check_capacity,
    configurations,
    tv_distance,
)
from .quenched import Environment

BRUTEFORCE_CAP = 2**24
PARTITION_CAP = 2**16


# -- exact evolution -------------------------------------------------------


def _subset_marginals(t: np.ndarray) -> list[np.ndarray]:
    """Marginal on every site subset, kept as broadcastable tensors.

    Entry ``mask`` keeps the sites whose bit is set (bit i <-> site i). Each
    marginal is obtained from a one-larger subset by summing a single axis.
    """
    n = t.ndim
    full = (1 << n) - 1
    out: list[np.ndarray | None] = [None] * (1 << n)
    out[full] = t
    for mask in range(full - 1, -1, -1):
        j = next(i for i in range(n) if not mask >> i & 1)
        out[mask] = out[mask | 1 << j].sum(axis=j, keepdims=True)
    return out  # type: ignore[return-value]


def recombine(nu1: DenseMeasure, nu2: DenseMeasure, cap: int = DEFAULT_CAP) -> DenseMeasure:
    """Collision product 2^{-n} sum_A (nu1)_A x (nu2)_{A^c}.

    Precomputes all 2^n marginals of each argument, then sums 2^n broadcast
    products: O(2^n k^n) work instead of the k^{3n} parent-pair sum.
    """
    if nu1.n != nu2.n or nu1.space != nu2.space:
        raise DimensionMismatch("recombine needs measures on the same S^n")
    n = nu1.n
    check_capacity(nu1.k, n, cap)
    if n == 0:
        return nu1
    m1 = _subset_marginals(nu1.tensor)
    m2 = m1 if nu2 is nu1 else _subset_marginals(nu2.tensor)
    full = (1 << n) - 1
    acc = np.zeros((nu1.k,) * n)
    for mask in range(full + 1):
        acc += m1[mask] * m2[full ^ mask]
    # total mass is squared by the product, so rounding error doubles per
    # step; renormalizing keeps long exact runs on the simplex
    acc /= acc.sum()
    return DenseMeasure(nu1.space, n, acc.reshape(-1))


def recombine_bruteforce(
    nu1: DenseMeasure, nu2: DenseMeasure, cap: int = BRUTEFORCE_CAP
) -> DenseMeasure:
    """Parent-pair oracle for :func:`recombine`.

    Sums nu1(tau) nu2(tau') prod_i (1[tau_i = sigma_i] + 1[tau'_i = sigma_i]) / 2
    over all parent pairs; k^{3n} work, for validation only.
    """
    if nu1.n != nu2.n or nu1.space != nu2.space:
        raise DimensionMismatch("recombine needs measures on the same S^n")
    k, n = nu1.k, nu1.n
    size = k**n
    if size**3 > cap:
        raise CapacityExceeded(f"brute force needs k^(3n) = {size**3} > {cap}")
    conf = configurations(n, k)
    w1, w2 = nu1.weights, nu2.weights
    out = np.empty(size)
    for j in range(size):
        hit = (conf == conf[j]).astype(float)
        kernel = np.prod((hit[:, None, :] + hit[None, :, :]) / 2.0, axis=2)
        out[j] = w1 @ kernel @ w2
    return DenseMeasure(nu1.space, n, out)


@dataclass(frozen=True)
class EvolutionTrace:
    """mu_0, ..., mu_T of an exact evolution."""

    initial: DenseMeasure
    steps: tuple[DenseMeasure, ...]

    @property
    def times(self) -> range:
        return range(len(self.steps))

    @property
    def final(self) -> DenseMeasure:
        return self.steps[-1]


def evolve_exact(mu: DenseMeasure, t: int, cap: int = DEFAULT_CAP) -> EvolutionTrace:
    if t < 0:
        raise ValueError("t must be nonnegative")
    check_capacity(mu.k, mu.n, cap)
    steps = [mu]
    for _ in range(t):
        cur = steps[-1]
        steps.append(recombine(cur, cur, cap))
    return EvolutionTrace(mu, tuple(steps))


def _canonical_partition(assign: Sequence[int]) -> tuple[int, ...]:
    relabel: dict[int, int] = {}
    return tuple(relabel.setdefault(a, len(relabel)) for a in assign)


def partition_average_oracle(mu: DenseMeasure, t: int, cap: int = PARTITION_CAP) -> DenseMeasure:
    """mu_t as N^{-n} sum over leaf assignments U of prod_x mu_{A_x}, N = 2^t.

    Enumerates all N^n assignments; assignments inducing the same set
    partition share one product tensor.
    """
    n, k = mu.n, mu.k
    N = 2**t
    if N**n > cap:
        raise CapacityExceeded(f"N^n = {N}^{n} exceeds cap {cap}")
    if n == 0:
        return mu
    margs = _subset_marginals(mu.tensor)
    counts: dict[tuple[int, ...], int] = {}
    for assign in itertools.product(range(N), repeat=n):
        key = _canonical_partition(assign)
        counts[key] = counts.get(key, 0) + 1
    acc = np.zeros((k,) * n)
    for part, c in counts.items():
        term = np.ones((1,) * n)
        for block in set(part):
            mask = sum(1 << i for i, b in enumerate(part) if b == block)
            term = term * margs[mask]
        acc += c * term
    acc /= N**n
    return DenseMeasure(mu.space, n, acc.reshape(-1))


def write_trace_csv(path, trace: EvolutionTrace, pi: DenseMeasure) -> None:
    """Rows (t, tv_to_pi, upper_bound, l2_bound) for every step of ``trace``."""
    from .bounds import chi2_tv_bound, upper_bound_linear

    with open(path, "w", newline="\n") as fh:
        fh.write("t,tv_to_pi,upper_bound,l2_bound\n")
        for t, mu_t in zip(trace.times, trace.steps):
            fh.write(
                f"{t},{tv_distance(mu_t, pi)!r},"
                f"{upper_bound_linear(mu_t.n, mu_t.k, t)!r},{chi2_tv_bound(mu_t, pi)!r}\n"
            )


# -- samplers --------------------------------------------------------------


def quantile_index(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Right-continuous generalized inverse: min{l : F(s_l) >= u}.

    ``cdf`` is (n, k) and ``u`` broadcasts against (..., n).
    """
    k = cdf.shape[-1]
    return (u[..., None] > cdf[..., : k - 1]).sum(axis=-1)


class ConfigurationSampler:
    """Draws configurations (as spin-index arrays) from a law on S^n.

    ``sample`` gives i.i.d. configurations. ``sample_roots`` gives, for each
    row of a leaf-assignment matrix U, the configuration
    sigma_i = xi_i(U_i) built from a fresh i.i.d. environment xi; only
    leaves that some site actually selects are drawn.
    """

    n: int
    k: int

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def sample_roots(self, rng: np.random.Generator, leaves: np.ndarray) -> np.ndarray:
        leaves = np.asarray(leaves)
        B, n = leaves.shape
        if n <= 64:
            # slot of each site = first site sharing its leaf
            first = (leaves[:, :, None] == leaves[:, None, :]).argmax(axis=2)
            draws = self.sample(rng, B * n).reshape(B, n, n)
            rows = np.arange(B)[:, None]
            return draws[rows, first, np.arange(n)[None, :]]
        out = np.empty((B, n), dtype=np.int64)
        cols = np.arange(n)
        for b in range(B):
            uniq, inv = np.unique(leaves[b], return_inverse=True)
            draws = self.sample(rng, uniq.size)
            out[b] = draws[inv, cols]
        return out


class DenseSampler(ConfigurationSampler):
    """Inverse-CDF sampling on the k^n weight vector."""

    def __init__(self, mu: DenseMeasure):
        self.mu = mu
        self.n, self.k = mu.n, mu.k
        self._cdf = np.cumsum(mu.weights)
        self._conf = configurations(mu.n, mu.k)

    def sample(self, rng, size):
        u = rng.random(size) * self._cdf[-1]
        idx = np.searchsorted(self._cdf, u, side="right")
        idx = np.minimum(idx, self._cdf.size - 1)
        return self._conf[idx]


class ProductSampler(ConfigurationSampler):
    """Independent sites; the stationary measure pi for its marginals."""

    def __init__(self, seq: MarginalSequence):
        self.seq = seq
        self.n, self.k = seq.n, seq.k
        self._cdf = np.array([m.cdf for m in seq.marginals]).reshape(seq.n, seq.k)

    def sample(self, rng, size):
        return quantile_index(self._cdf, rng.random((size, self.n)))

    def sample_roots(self, rng, leaves):
        # sites are independent under pi whatever leaves they pick
        return self.sample(rng, np.asarray(leaves).shape[0])


# -- graphical construction ------------------------------------------------


def sample_root(
    sampler: ConfigurationSampler,
    t: int,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Configuration(s) at the root of a depth-t binary tree with mu leaves.

    Each site i picks a uniform leaf U_i among N = 2^t and copies that
    leaf's spin. The law of the result is mu_t.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    B = 1 if size is None else size
    leaves = rng.integers(0, 2**t, size=(B, sampler.n), dtype=np.int64)
    out = sampler.sample_roots(rng, leaves)
    return out[0] if size is None else out


def sample_environment(
    sampler: ConfigurationSampler,
    t: int,
    rng: np.random.Generator,
    source: str = "",
    keep_leaves: bool = True,
    chunk: int = 1 << 16,
) -> Environment:
    """N = 2^t i.i.d. leaf configurations from the sampler's law.

    With ``keep_leaves=False`` the leaves are drawn in chunks and only the
    per-site spin counts are retained.
    """
    N = 2**t
    if keep_leaves:
        leaves = sampler.sample(rng, N).astype(np.uint8)
        return Environment.from_leaves(leaves, sampler.k, t, source)
    counts = np.zeros((sampler.n, sampler.k), dtype=np.int64)
    done = 0
    while done < N:
        m = min(chunk, N - done)
        block = sampler.sample(rng, m)
        for l in range(sampler.k):
            counts[:, l] += (block == l).sum(axis=0)
        done += m
    return Environment.from_counts(counts, t, source)


# -- fragmentation ---------------------------------------------------------


@dataclass
class FragmentationState:
    """Random partition of the sites after ``time`` binary splits."""

    partition: np.ndarray
    time: int = 0

    @classmethod
    def start(cls, n: int) -> "FragmentationState":
        return cls(np.zeros(n, dtype=np.int64), 0)

    def step(self, rng: np.random.Generator) -> "FragmentationState":
        bits = rng.integers(0, 2, size=self.partition.size)
        _, labels = np.unique(self.partition * 2 + bits, return_inverse=True)
        return FragmentationState(labels.reshape(-1), self.time + 1)

    @property
    def block_count(self) -> int:
        return int(np.unique(self.partition).size)

    @property
    def fragmented(self) -> bool:
        return self.block_count == self.partition.size


def fragmentation_times(n: int, runs: int, rng: np.random.Generator) -> np.ndarray:
    """Independent samples of tau_frag for ``n`` sites.

    Tracks only the n(n-1)/2 "still together" indicators: a pair survives a
    step when the fresh uniform subset puts both sites on the same side.
    """
    if n < 1:
        raise ValueError("n must be positive")
    tau = np.zeros(runs, dtype=np.int64)
    if n == 1:
        return tau
    iu, ju = np.triu_indices(n, 1)
    together = np.ones((runs, iu.size), dtype=bool)
    active = np.arange(runs)
    t = 0
    while active.size:
        t += 1
        bits = rng.integers(0, 2, size=(active.size, n), dtype=np.int8)
        tog = together[active] & (bits[:, iu] == bits[:, ju])
        together[active] = tog
        done = ~tog.any(axis=1)
        tau[active[done]] = t
        active = active[~done]
    return tau


def fragmentation_time(n: int, rng: np.random.Generator) -> int:
    return int(fragmentation_times(n, 1, rng)[0])
