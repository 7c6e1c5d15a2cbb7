"""Spin spaces, marginal sequences and dense measures on S^n.

Configurations are indexed as base-k integers with site 0 as the most
significant digit, which is exactly numpy's C-order flattening of a tensor of
shape ``(k,) * n``. Sites are 0-based throughout the package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import CapacityExceeded, DegenerateMarginal, DimensionMismatch

DEFAULT_CAP = 2**24
PROB_TOL = 1e-12
MEASURE_TOL = 1e-10


def check_capacity(k: int, n: int, cap: int = DEFAULT_CAP) -> int:
    size = k**n
    if size > cap:
        raise CapacityExceeded(f"k^n = {k}^{n} = {size} exceeds cap {cap}")
    return size


@dataclass(frozen=True)
class SpinSpace:
    """Ordered set of k >= 2 distinct real spin values."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise ValueError("a spin space needs at least two values")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"spin values must be strictly increasing: {vals}")

    @classmethod
    def range(cls, k: int) -> "SpinSpace":
        return cls(tuple(range(k)))

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def index_of(self, value: float) -> int:
        return self.values.index(float(value))


@dataclass(frozen=True)
class SiteMarginal:
    """Nondegenerate distribution on the k spin values.

    ``delta`` is derived from the probabilities: the largest d with every
    probability in [d, 1 - d].
    """

    probs: tuple[float, ...]
    delta: float = field(init=False)

    def __post_init__(self):
        p = tuple(float(x) for x in self.probs)
        object.__setattr__(self, "probs", p)
        if len(p) < 2:
            raise DegenerateMarginal("a marginal needs at least two entries")
        if not all(0.0 < x < 1.0 for x in p):
            raise DegenerateMarginal(f"probabilities must lie in (0, 1): {p}")
        if abs(sum(p) - 1.0) > PROB_TOL:
            raise DegenerateMarginal(f"probabilities sum to {sum(p)!r}, not 1")
        object.__setattr__(self, "delta", min(min(p), 1.0 - max(p)))

    @property
    def k(self) -> int:
        return len(self.probs)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c


@dataclass(frozen=True)
class MarginalSequence:
    """Per-site marginals p_1..p_n over one shared spin space."""

    space: SpinSpace
    marginals: tuple[SiteMarginal, ...]

    def __post_init__(self):
        ms = tuple(
            m if isinstance(m, SiteMarginal) else SiteMarginal(tuple(m))
            for m in self.marginals
        )
        object.__setattr__(self, "marginals", ms)
        for m in ms:
            if m.k != self.space.k:
                raise DimensionMismatch(
                    f"marginal has {m.k} entries but the spin space has {self.space.k}"
                )

    @classmethod
    def homogeneous(cls, space: SpinSpace, p: Sequence[float], n: int) -> "MarginalSequence":
        m = p if isinstance(p, SiteMarginal) else SiteMarginal(tuple(p))
        return cls(space, (m,) * n)

    @classmethod
    def from_array(cls, space: SpinSpace, probs) -> "MarginalSequence":
        return cls(space, tuple(SiteMarginal(tuple(row)) for row in np.asarray(probs)))

    @classmethod
    def random(
        cls, space: SpinSpace, n: int, delta: float, rng: np.random.Generator
    ) -> "MarginalSequence":
        """Random marginals inside P_delta (every entry in [delta, 1 - delta])."""
        k = space.k
        if not 0.0 < delta < 1.0 / k:
            raise ValueError(f"need 0 < delta < 1/k, got {delta}")
        # delta + (1 - k delta) * Dirichlet keeps entries in [delta, 1 - (k-1) delta]
        d = rng.dirichlet(np.ones(k), size=n)
        probs = delta + (1.0 - k * delta) * d
        probs /= probs.sum(axis=1, keepdims=True)
        return cls.from_array(space, probs)

    @property
    def n(self) -> int:
        return len(self.marginals)

    @property
    def k(self) -> int:
        return self.space.k

    @property
    def delta(self) -> float:
        return min(m.delta for m in self.marginals)

    @property
    def probs(self) -> np.ndarray:
        return np.array([m.probs for m in self.marginals], dtype=float).reshape(self.n, self.k)

    @property
    def is_homogeneous(self) -> bool:
        return len(set(self.marginals)) <= 1

    def restrict(self, sites: Iterable[int]) -> "MarginalSequence":
        return MarginalSequence(self.space, tuple(self.marginals[i] for i in sites))


@dataclass(frozen=True, eq=False)
class DenseMeasure:
    """Probability vector over S^n, indexed in canonical (site 0 major) order."""

    space: SpinSpace
    n: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.size != self.space.k**self.n:
            raise DimensionMismatch(
                f"expected {self.space.k}^{self.n} weights, got {w.size}"
            )
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > MEASURE_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_tensor(cls, space: SpinSpace, tensor) -> "DenseMeasure":
        t = np.asarray(tensor, dtype=float)
        return cls(space, t.ndim, t.reshape(-1))

    @classmethod
    def unnormalized(cls, space: SpinSpace, n: int, weights) -> "DenseMeasure":
        """Explicit renormalization; construction never rescales silently."""
        w = np.asarray(weights, dtype=float).reshape(-1)
        return cls(space, n, w / w.sum())

    @classmethod
    def point_mass(cls, space: SpinSpace, sigma: Sequence[int]) -> "DenseMeasure":
        n = len(sigma)
        w = np.zeros(space.k**n)
        w[config_index(sigma, space.k)] = 1.0
        return cls(space, n, w)

    @property
    def k(self) -> int:
        return self.space.k

    @property
    def tensor(self) -> np.ndarray:
        return self.weights.reshape((self.k,) * self.n)

    def renormalized(self) -> "DenseMeasure":
        return DenseMeasure(self.space, self.n, self.weights / self.weights.sum())

    def site_marginals(self) -> np.ndarray:
        """(n, k) table of single-site marginals."""
        t = self.tensor
        axes = tuple(range(self.n))
        return np.stack([t.sum(axis=axes[:i] + axes[i + 1 :]) for i in range(self.n)])

    def __eq__(self, other):
        if not isinstance(other, DenseMeasure):
            return NotImplemented
        return (
            self.space == other.space
            and self.n == other.n
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


def configurations(n: int, k: int) -> np.ndarray:
    """All k^n configurations as a (k^n, n) array in canonical order."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    idx = np.arange(k**n)
    powers = k ** np.arange(n - 1, -1, -1)
    return (idx[:, None] // powers[None, :]) % k


def config_index(sigma, k: int):
    """Canonical index of configuration(s) ``sigma`` (last axis = sites)."""
    s = np.asarray(sigma, dtype=np.int64)
    n = s.shape[-1]
    powers = k ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return s @ powers


def product_measure(seq: MarginalSequence, cap: int = DEFAULT_CAP) -> DenseMeasure:
    """The stationary product measure pi = p_1 x ... x p_n."""
    check_capacity(seq.k, seq.n, cap)
    w = np.ones(1)
    for m in seq.marginals:
        w = np.multiply.outer(w, m.array).reshape(-1)
    return DenseMeasure(seq.space, seq.n, w)


def marginalize(mu: DenseMeasure, sites: Iterable[int]) -> DenseMeasure:
    """Marginal of ``mu`` on ``sites`` (kept in increasing site order).

    An empty site set yields the trivial measure on zero sites.
    """
    keep = sorted(set(int(i) for i in sites))
    if any(i < 0 or i >= mu.n for i in keep):
        raise IndexError(f"sites {keep} out of range for n={mu.n}")
    drop = tuple(i for i in range(mu.n) if i not in keep)
    t = mu.tensor.sum(axis=drop) if drop else mu.tensor
    return DenseMeasure(mu.space, len(keep), np.asarray(t).reshape(-1))


def _check_same_shape(mu: DenseMeasure, nu: DenseMeasure) -> None:
    if mu.n != nu.n or mu.space != nu.space:
        raise DimensionMismatch(
            f"measures differ: n={mu.n} vs {nu.n}, spins {mu.space.values} vs {nu.space.values}"
        )


def tv_distance(mu: DenseMeasure, nu: DenseMeasure) -> float:
    """Total variation distance, half the l1 distance of the mass functions."""
    _check_same_shape(mu, nu)
    return float(min(1.0, 0.5 * np.abs(mu.weights - nu.weights).sum()))


class MarginalCheck(NamedTuple):
    ok: bool
    deviation: float


def check_marginal_constraint(
    mu: DenseMeasure, seq: MarginalSequence, tol: float = 1e-10
) -> MarginalCheck:
    """Does every single-site marginal of ``mu`` match ``seq`` within ``tol``?"""
    if mu.n != seq.n or mu.k != seq.k:
        raise DimensionMismatch(f"measure has n={mu.n}, k={mu.k}; sequence n={seq.n}, k={seq.k}")
    dev = float(np.abs(mu.site_marginals() - seq.probs).max()) if mu.n else 0.0
    return MarginalCheck(dev <= tol, dev)


# -- serialization ---------------------------------------------------------

_MAGIC = b"NLRM"


def write_measure_csv(path, mu: DenseMeasure) -> None:
    """Header (n, k, spin values) then one weight per line in canonical order."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"n,{mu.n}\n")
        fh.write(f"k,{mu.k}\n")
        fh.write("spins," + ",".join(repr(v) for v in mu.space.values) + "\n")
        fh.write("weight\n")
        for w in mu.weights:
            fh.write(f"{float(w)!r}\n")


def read_measure_csv(path) -> DenseMeasure:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    n = int(lines[0].split(",")[1])
    k = int(lines[1].split(",")[1])
    spins = tuple(float(x) for x in lines[2].split(",")[1:])
    if lines[3] != "weight" or len(spins) != k:
        raise ValueError(f"{path}: malformed measure header")
    w = np.array([float(x) for x in lines[4:]])
    return DenseMeasure(SpinSpace(spins), n, w)


def write_measure_binary(path, mu: DenseMeasure) -> None:
    """Little-endian: magic, uint32 n, uint32 k, k float64 spins, k^n float64 weights."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", mu.n, mu.k))
        fh.write(np.asarray(mu.space.values, dtype="<f8").tobytes())
        fh.write(np.asarray(mu.weights, dtype="<f8").tobytes())


def read_measure_binary(path) -> DenseMeasure:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a measure file")
        n, k = struct.unpack("<II", fh.read(8))
        spins = np.frombuffer(fh.read(8 * k), dtype="<f8")
        w = np.frombuffer(fh.read(), dtype="<f8")
    return DenseMeasure(SpinSpace(tuple(spins)), n, w.copy())
