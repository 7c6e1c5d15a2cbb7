"""Orthonormal polynomial bases of L^2(S, p) built by Gram-Schmidt.

A basis is stored as its value table ``table[m, l] = f_m(s_l)``; every
downstream computation only evaluates basis functions on S.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateMarginal, DimensionMismatch, NumericalBreakdown
from .measures import MarginalSequence, SiteMarginal, SpinSpace

BREAKDOWN_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class OrthonormalBasis:
    """Value table of f_0 = 1, f_1, ..., f_{k-1} orthonormal under ``marginal``.

    Row m is a polynomial of degree exactly m in the spin value with a
    positive leading coefficient.
    """

    site: int
    space: SpinSpace
    marginal: SiteMarginal
    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def k(self) -> int:
        return self.space.k

    def evaluate(self, m: int, spin_index: int) -> float:
        if not (0 <= m < self.k and 0 <= spin_index < self.k):
            raise IndexError(f"(m, l) = ({m}, {spin_index}) out of range for k={self.k}")
        return float(self.table[m, spin_index])

    def gram(self) -> np.ndarray:
        """<f_m, f_m'>_p for all m, m'; the identity for a valid basis."""
        return (self.table * self.marginal.array) @ self.table.T

    def inverse(self) -> np.ndarray:
        """M^{-1} = P M^T for the value matrix M."""
        return self.marginal.array[:, None] * self.table.T

    @property
    def f1(self) -> np.ndarray:
        """Standardized spin (s - mean) / sd evaluated on S."""
        return self.table[1]


def _inner(u: np.ndarray, v: np.ndarray, p: np.ndarray) -> float:
    return float(np.sum(u * v * p))


def build_basis(space: SpinSpace, p: SiteMarginal | Sequence[float], site: int = 0) -> OrthonormalBasis:
    """Gram-Schmidt on 1, s, ..., s^{k-1} under <g, h>_p = sum g h p.

    Monomials are taken in the standardized variable (s - mean)/sd, which
    spans the same nested polynomial spaces and keeps the leading
    coefficient sign, but is far better conditioned. Modified Gram-Schmidt
    with one re-orthogonalization pass.
    """
    if not isinstance(p, SiteMarginal):
        p = SiteMarginal(tuple(p))
    if p.k != space.k:
        raise DimensionMismatch(f"marginal has {p.k} entries, spin space has {space.k}")
    if p.delta <= 0:
        raise DegenerateMarginal("marginal must be strictly positive")
    w = p.array
    s = space.array
    mean = float(np.sum(w * s))
    sd = float(np.sqrt(np.sum(w * (s - mean) ** 2)))
    if sd <= 0:
        raise NumericalBreakdown("spin variance vanished")
    x = (s - mean) / sd

    k = space.k
    table = np.empty((k, k))
    table[0] = 1.0
    for j in range(1, k):
        v = x**j
        ref = np.sqrt(_inner(v, v, w))
        for _ in range(2):
            for i in range(j):
                v = v - _inner(v, table[i], w) * table[i]
        norm = np.sqrt(_inner(v, v, w))
        if norm < BREAKDOWN_TOL * max(ref, 1.0):
            raise NumericalBreakdown(
                f"Gram-Schmidt norm {norm:.3e} at degree {j}; spin values nearly coincide"
            )
        table[j] = v / norm
    return OrthonormalBasis(site, space, p, table)


def mean_vector_table(seq: MarginalSequence) -> list[OrthonormalBasis]:
    """One basis per site; sites with equal marginals share the same object."""
    cache: dict[SiteMarginal, OrthonormalBasis] = {}
    out = []
    for i, m in enumerate(seq.marginals):
        if m not in cache:
            cache[m] = build_basis(seq.space, m, site=i)
        out.append(cache[m])
    return out


def stack_tables(bases: Sequence[OrthonormalBasis]) -> np.ndarray:
    """(n, k, k) array ``F[i, m, l] = f_m^i(s_l)``."""
    return np.stack([b.table for b in bases])


def dump_bases_csv(path, bases: Sequence[OrthonormalBasis]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["site", "m", "l", "value"])
        for i, b in enumerate(bases):
            for m in range(b.k):
                for l in range(b.k):
                    wr.writerow([i, m, l, repr(float(b.table[m, l]))])
