import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import marginals
from nlrecomb.errors import DimensionMismatch, NumericalBreakdown
from nlrecomb.measures import MarginalSequence, SiteMarginal, SpinSpace
from nlrecomb.onb import build_basis, dump_bases_csv, mean_vector_table, stack_tables


def test_symmetric_pm1():
    b = build_basis(SpinSpace((-1.0, 1.0)), (0.5, 0.5))
    np.testing.assert_allclose(b.table, [[1, 1], [-1, 1]], atol=1e-15)


@pytest.mark.parametrize("p", [0.1, 0.3, 0.5, 0.8])
def test_two_point_closed_form(p):
    b = build_basis(SpinSpace((0.0, 1.0)), (p, 1 - p))
    np.testing.assert_allclose(
        b.f1, [-math.sqrt((1 - p) / p), math.sqrt(p / (1 - p))], rtol=1e-12
    )


def test_uniform_three_point():
    b = build_basis(SpinSpace.range(3), (1 / 3, 1 / 3, 1 / 3))
    s = np.arange(3.0)
    np.testing.assert_allclose(b.f1, (s - 1) / math.sqrt(2 / 3), atol=1e-14)
    assert np.sum(b.f1**2) / 3 == pytest.approx(1.0)


def test_evaluate_bounds():
    b = build_basis(SpinSpace.range(2), (0.5, 0.5))
    assert b.evaluate(1, 1) == pytest.approx(1.0)
    with pytest.raises(IndexError):
        b.evaluate(2, 0)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        build_basis(SpinSpace.range(3), (0.5, 0.5))


def test_breakdown_on_coincident_spins():
    with pytest.raises(NumericalBreakdown):
        build_basis(SpinSpace((0.0, 1e-16, 1.0)), (1 / 3, 1 / 3, 1 / 3))


def test_shared_tables_and_dump(tmp_path):
    sp = SpinSpace.range(3)
    seq = MarginalSequence.homogeneous(sp, (0.2, 0.3, 0.5), 4)
    bases = mean_vector_table(seq)
    assert all(b is bases[0] for b in bases)
    mixed = MarginalSequence(
        sp, (SiteMarginal((0.2, 0.3, 0.5)), SiteMarginal((0.6, 0.2, 0.2)), SiteMarginal((0.2, 0.3, 0.5)))
    )
    mb = mean_vector_table(mixed)
    assert mb[0] is mb[2] and mb[0] is not mb[1]
    for b in mb:
        np.testing.assert_allclose(b.gram(), np.eye(3), atol=1e-12)
    assert stack_tables(mb).shape == (3, 3, 3)
    dump_bases_csv(tmp_path / "b.csv", mb)
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 1 + 3 * 9


@given(st.integers(2, 6).flatmap(lambda k: marginals(k=k, delta=0.01)))
def test_orthonormal_bounded_invertible(p):
    k = len(p)
    b = build_basis(SpinSpace.range(k), p)
    np.testing.assert_allclose(b.gram(), np.eye(k), atol=1e-10)
    assert np.all(np.abs(b.table) <= 1 / math.sqrt(b.marginal.delta) + 1e-9)
    np.testing.assert_allclose(b.inverse() @ b.table, np.eye(k), atol=1e-10)
    assert np.all(b.table[0] == 1.0)
    # positive leading coefficient: f_1 is increasing in the spin value
    assert np.all(np.diff(b.f1) > 0)


@given(marginals(k=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4, unique=True))
def test_degree_structure(p, values):
    values = sorted(values)
    if min(np.diff(values)) < 1e-2:
        return
    sp = SpinSpace(tuple(values))
    b = build_basis(sp, p)
    V = np.vander(np.asarray(values), 4, increasing=True)
    coef = np.linalg.solve(V, b.table.T)  # column m = monomial coefficients of f_m
    for m in range(4):
        assert coef[m, m] > 0
        assert np.all(np.abs(coef[m + 1 :, m]) < 1e-6 * max(1.0, np.abs(coef[:, m]).max()))
