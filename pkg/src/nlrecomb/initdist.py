"""Structured initial distributions with prescribed single-site marginals.

Comonotonic coupling drives every site of a block by one uniform U through
its quantile function; with identical marginals it is the monochromatic
mixture. Block-wise products of such couplings are the "basket" inits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import ConfigurationSampler, DenseSampler, ProductSampler, quantile_index
from .errors import DimensionMismatch
from .measures import (
    DEFAULT_CAP,
    DenseMeasure,
    MarginalSequence,
    SiteMarginal,
    SpinSpace,
    check_capacity,
    config_index,
)
from .onb import build_basis

KINDS = ("comonotonic-global", "monochromatic", "basket-blockwise", "product-stationary", "dense")
_BREAK_TOL = 1e-15
_SLOT_BUDGET = 1 << 22


# -- interval machinery ----------------------------------------------------


def _breakpoints(cdfs: Sequence[np.ndarray]) -> np.ndarray:
    pts = np.unique(np.concatenate([np.zeros(1)] + [np.asarray(c) for c in cdfs]))
    pts[-1] = 1.0
    # merge breakpoints that only differ by rounding
    keep = np.concatenate([[True], np.diff(pts) > _BREAK_TOL])
    pts = pts[keep]
    pts[-1] = 1.0
    return pts


def _interval_atoms(cdf_table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pieces of [0, 1] on which every quantile function is constant.

    Returns (spin indices per piece: (pieces, n), piece lengths).
    """
    pts = _breakpoints(list(cdf_table))
    mids = 0.5 * (pts[:-1] + pts[1:])
    idx = quantile_index(cdf_table, np.broadcast_to(mids[:, None], (mids.size, cdf_table.shape[0])))
    return idx, np.diff(pts)


def comonotonic_cross_moments(
    p_i: SiteMarginal, p_l: SiteMarginal, space: SpinSpace
) -> np.ndarray:
    """E[f_m^i(sigma_i) f_m'^l(sigma_l)] for m, m' >= 1 under comonotonic coupling.

    The integrand is piecewise constant in U, so summing over the common
    refinement of both CDF partitions is exact.
    """
    fi = build_basis(space, p_i).table[1:]
    fl = build_basis(space, p_l).table[1:]
    idx, length = _interval_atoms(np.stack([p_i.cdf, p_l.cdf]))
    return (fi[:, idx[:, 0]] * length) @ fl[:, idx[:, 1]].T


def comonotonic_pair_correlation(p_i, p_l, space: SpinSpace) -> float:
    """E[g_i g_l] for the standardized spins g = f_1 of two comonotonic sites."""
    p_i = p_i if isinstance(p_i, SiteMarginal) else SiteMarginal(tuple(p_i))
    p_l = p_l if isinstance(p_l, SiteMarginal) else SiteMarginal(tuple(p_l))
    if p_i.k != space.k or p_l.k != space.k:
        raise DimensionMismatch("marginals and spin space disagree on k")
    return float(comonotonic_cross_moments(p_i, p_l, space)[0, 0])


def _grid_points(delta: float, k: int, resolution: int) -> list[np.ndarray]:
    lo = int(np.ceil(delta * resolution - 1e-9))
    hi = int(np.floor((1.0 - delta) * resolution + 1e-9))
    pts = []
    for head in itertools.product(range(lo, hi + 1), repeat=k - 1):
        last = resolution - sum(head)
        if lo <= last <= hi:
            pts.append(np.array(head + (last,), dtype=float) / resolution)
    return pts


def rho_estimate(delta: float, k: int, space: SpinSpace | None = None, resolution: int = 40) -> float:
    """Grid minimum of the comonotonic f_1 correlation over P_delta x P_delta.

    A numerical proxy for the uniform constant, not a certified bound. The
    grid holds marginals with entries in (1/resolution) Z inside
    [delta, 1 - delta], so the grid at resolution r is contained in the grid
    at any multiple of r.
    """
    space = space or SpinSpace.range(k)
    if space.k != k:
        raise DimensionMismatch("space.k != k")
    if not 0.0 < delta <= 1.0 / k:
        raise ValueError(f"need 0 < delta <= 1/k, got {delta}")
    pts = _grid_points(delta, k, resolution)
    if not pts:
        raise ValueError(f"no grid point of resolution {resolution} lies in P_delta")
    marg = [SiteMarginal(tuple(p)) for p in pts]
    g = [build_basis(space, m).table[1] for m in marg]
    cdf = [m.cdf for m in marg]
    best = np.inf
    for a in range(len(marg)):
        for b in range(a, len(marg)):
            idx, length = _interval_atoms(np.stack([cdf[a], cdf[b]]))
            val = float(np.sum(g[a][idx[:, 0]] * g[b][idx[:, 1]] * length))
            best = min(best, val)
    return best


# -- samplers --------------------------------------------------------------


def comonotonic_sampler(seq: MarginalSequence, sites: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """One comonotonic draw on ``sites``: a single U, sigma_i = F_i^{-1}(U)."""
    sites = list(sites)
    cdf = np.array([seq.marginals[i].cdf for i in sites]).reshape(len(sites), seq.k)
    u = rng.random()
    return quantile_index(cdf, np.full(len(sites), u))


class BlockComonotonicSampler(ConfigurationSampler):
    """Independent comonotonic blocks; sites outside every block are i.i.d. p_i."""

    def __init__(self, seq: MarginalSequence, blocks: Sequence[Sequence[int]]):
        self.seq = seq
        self.n, self.k = seq.n, seq.k
        self.blocks = tuple(tuple(int(i) for i in b) for b in blocks)
        self.site_block = np.full(self.n, -1, dtype=np.int64)
        for j, b in enumerate(self.blocks):
            if np.any(self.site_block[list(b)] >= 0):
                raise ValueError("blocks overlap")
            self.site_block[list(b)] = j
        self.a = len(self.blocks)
        self._cdf = np.array([m.cdf for m in seq.marginals]).reshape(self.n, self.k)
        self._in_block = self.site_block >= 0
        self._free = ~self._in_block

    def _finish(self, rng, u: np.ndarray) -> np.ndarray:
        if self._free.any():
            u[:, self._free] = rng.random((u.shape[0], int(self._free.sum())))
        return quantile_index(self._cdf, u)

    def sample(self, rng, size):
        u = np.empty((size, self.n))
        if self.a:
            U = rng.random((size, self.a))
            u[:, self._in_block] = U[:, self.site_block[self._in_block]]
        return self._finish(rng, u)

    def sample_roots(self, rng, leaves):
        leaves = np.asarray(leaves, dtype=np.int64)
        B = leaves.shape[0]
        u = np.empty((B, self.n))
        if self.a:
            sb = self.site_block[self._in_block]
            keys = leaves[:, self._in_block] * self.a + sb[None, :]
            width = int(keys.max()) + 1
            vals = np.empty(keys.shape)
            if width <= 4 * self.n:
                # one uniform per (leaf, block) slot, in row batches of bounded size
                step = max(1, _SLOT_BUDGET // width)
                for r in range(0, B, step):
                    V = rng.random((min(step, B - r), width))
                    vals[r : r + step] = np.take_along_axis(V, keys[r : r + step], axis=1)
            else:
                for b in range(B):
                    uniq, inv = np.unique(keys[b], return_inverse=True)
                    vals[b] = rng.random(uniq.size)[inv]
            u[:, self._in_block] = vals
        return self._finish(rng, u)


# -- dense constructors ----------------------------------------------------


def comonotonic_dense(seq: MarginalSequence, cap: int = DEFAULT_CAP) -> DenseMeasure:
    """Exact comonotonic law: atoms on the staircase, weights = U-interval lengths."""
    check_capacity(seq.k, seq.n, cap)
    cdf = np.array([m.cdf for m in seq.marginals]).reshape(seq.n, seq.k)
    idx, length = _interval_atoms(cdf)
    w = np.zeros(seq.k**seq.n)
    np.add.at(w, config_index(idx, seq.k), length)
    return DenseMeasure(seq.space, seq.n, w)


def monochromatic_dense(space: SpinSpace, p, n: int, cap: int = DEFAULT_CAP) -> DenseMeasure:
    """sum_l p(s_l) delta_{(s_l, ..., s_l)}."""
    p = p if isinstance(p, SiteMarginal) else SiteMarginal(tuple(p))
    check_capacity(space.k, n, cap)
    w = np.zeros(space.k**n)
    for l, pl in enumerate(p.probs):
        w[config_index([l] * n, space.k)] = pl
    return DenseMeasure(space, n, w)


def random_marginal_respecting(
    seq: MarginalSequence,
    rng: np.random.Generator,
    sparsity: float = 1.0,
    tol: float = 1e-14,
    max_iter: int = 10_000,
    cap: int = DEFAULT_CAP,
) -> DenseMeasure:
    """Random dense measure in P^(n) by iterative proportional fitting.

    Starts from a random positive tensor (heavier tails for larger
    ``sparsity``) and rescales each site's marginal in turn until every
    single-site marginal matches ``seq`` within ``tol``.
    """
    check_capacity(seq.k, seq.n, cap)
    shape = (seq.k,) * seq.n
    t = rng.exponential(size=shape) ** (1.0 + sparsity)
    t /= t.sum()
    target = seq.probs
    axes = tuple(range(seq.n))
    for _ in range(max_iter):
        worst = 0.0
        for i in range(seq.n):
            other = axes[:i] + axes[i + 1 :]
            m = t.sum(axis=other)
            worst = max(worst, float(np.abs(m - target[i]).max()))
            view = [1] * seq.n
            view[i] = seq.k
            t = t * (target[i] / m).reshape(view)
        if worst < tol:
            break
    t /= t.sum()
    return DenseMeasure(seq.space, seq.n, t.reshape(-1))


# -- structured inits ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StructuredInit:
    """An initial law in P^(n) with enough structure to sample at any n."""

    kind: str
    seq: MarginalSequence
    blocks: tuple[tuple[int, ...], ...] = ()
    params: dict = field(default_factory=dict)
    measure: DenseMeasure | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.seq.n

    def sampler(self) -> ConfigurationSampler:
        if self.kind == "dense":
            return DenseSampler(self.measure)
        if self.kind == "product-stationary":
            return ProductSampler(self.seq)
        return BlockComonotonicSampler(self.seq, self.blocks)

    def dense(self, cap: int = DEFAULT_CAP) -> DenseMeasure:
        """Exact law on S^n (small n only)."""
        if self.measure is not None:
            return self.measure
        check_capacity(self.seq.k, self.seq.n, cap)
        factors: list[tuple[list[int], np.ndarray]] = []
        covered = set()
        for b in self.blocks:
            sub = comonotonic_dense(self.seq.restrict(b), cap)
            factors.append((list(b), sub.tensor))
            covered.update(b)
        for i in range(self.n):
            if i not in covered:
                factors.append(([i], self.seq.marginals[i].array))
        t = np.ones(())
        order: list[int] = []
        for sites, tensor in factors:
            t = np.multiply.outer(t, tensor)
            order.extend(sites)
        t = np.transpose(t, np.argsort(order))
        return DenseMeasure(self.seq.space, self.n, t.reshape(-1))


def comonotonic_init(seq: MarginalSequence) -> StructuredInit:
    return StructuredInit("comonotonic-global", seq, (tuple(range(seq.n)),))


def monochromatic_init(space: SpinSpace, p, n: int) -> StructuredInit:
    seq = MarginalSequence.homogeneous(space, p, n)
    return StructuredInit("monochromatic", seq, (tuple(range(n)),))


def product_init(seq: MarginalSequence) -> StructuredInit:
    return StructuredInit("product-stationary", seq)


def dense_init(mu: DenseMeasure, seq: MarginalSequence) -> StructuredInit:
    return StructuredInit("dense", seq, measure=mu)


def basket_init(seq: MarginalSequence, b: int) -> StructuredInit:
    """a = floor(n/b) consecutive comonotonic blocks of size b; leftovers i.i.d."""
    if b < 1:
        raise ValueError("block size must be at least 1")
    a = seq.n // b
    blocks = tuple(tuple(range(j * b, (j + 1) * b)) for j in range(a))
    return StructuredInit(
        "basket-blockwise", seq, blocks, {"b": b, "a": a, "leftover": seq.n - a * b}
    )
