import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfmsfem.coarse import parse_method, solve_msfem
from perfmsfem.geometry import EMPTY, DomainSpec, Periodic
from perfmsfem.mesh import build_coarse_mesh, build_fine_grid, lattice_cells
from perfmsfem.metrics import (WHOLE, Region, broken_h1, error_split, layer_peclet, layer_region,
                               prolong, relative_error)


def nodal_dg(n, fn):
    grid = build_fine_grid(n)
    return fn(grid.points[:, 0], grid.points[:, 1])[grid.cells]


def test_piecewise_constant_has_zero_seminorm(rng):
    n = 8
    dg = np.repeat(rng.random((2 * n * n, 1)), 3, axis=1)
    assert broken_h1(dg) == 0.0


def test_linear_field_unit_seminorm():
    assert broken_h1(nodal_dg(16, lambda x, y: x)) == pytest.approx(1.0, rel=1e-14)


def test_two_element_cr_solution_by_hand():
    plain = DomainSpec(1.0, Periodic(EMPTY))
    sol = solve_msfem(plain, build_coarse_mesh(1), parse_method("MsFEM[weak]"), 1.0, 1.0, None, 2)
    # -lap u = 1 on two triangles: u = c Phi_diag with c = 1/(12 sqrt 2), |u|^2 = 4 c^2
    assert sol.coefficients[0] == pytest.approx(1 / (12 * math.sqrt(2)), rel=1e-12)
    assert broken_h1(sol.dg_field()) == pytest.approx(1 / math.sqrt(72), abs=1e-10)


def test_relative_error_definition(rng):
    u = nodal_dg(16, lambda x, y: np.sin(3 * x) * y)
    assert relative_error(u, u) == 0.0
    assert relative_error(np.zeros_like(u), u) == pytest.approx(1.0)
    assert math.isnan(relative_error(u, np.ones_like(u)))


def test_layer_region_examples():
    r = layer_region((2 * math.e, 0.0), 1.0)
    assert r.peclet == pytest.approx(math.e) and r.delta == pytest.approx(1 / math.e, rel=1e-12)
    with mpmath.workdps(50):
        pe = 128 * mpmath.sqrt(2)
        delta = mpmath.log(pe) / pe
    r = layer_region((1.0, 1.0), 1 / 256)
    assert r.peclet == pytest.approx(float(pe), rel=1e-14) and round(r.peclet, 3) == 181.019
    assert r.delta == pytest.approx(float(delta), rel=1e-12)
    assert abs(r.delta - 0.028716) < 1e-5  # quoted figure; the 50-digit value is 0.02871850
    big = layer_region((1.0, 1.0), 1e6)
    assert big.flagged and big.kind == "whole"
    assert layer_region((100.0, 0.0), 1.0).delta == pytest.approx(math.log(50) / 50)


def test_layer_width_values():
    assert layer_region((3.0, 0.0), 1.0).delta == pytest.approx(math.log(1.5) / 1.5)
    assert layer_peclet((3.0, 4.0), 0.5) == pytest.approx(5.0)


def test_region_membership():
    r = Region("inside", 0.1)
    pts = np.array([[0.95, 0.1], [0.1, 0.95], [0.5, 0.5]])
    assert list(r.contains(pts)) == [True, True, False]
    assert list(r.complement().contains(pts)) == [False, False, True]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.03, 0.2))  # layer at least one cell wide
def test_region_additivity_and_monotonicity(seed, alpha):
    n = 16
    g = np.random.default_rng(seed)
    u_ref = g.standard_normal((2 * n * n, 3))
    u_h = u_ref + 0.3 * g.standard_normal((2 * n * n, 3))
    fluid = g.random(2 * n * n) > 0.2
    err = error_split(u_h, u_ref, (1.0, 1.0), alpha, fluid)
    inside = layer_region((1.0, 1.0), alpha, "inside")
    parts = {k: broken_h1(u_ref, reg, fluid) for k, reg in
             (("whole", WHOLE), ("in", inside), ("out", inside.complement()))}
    lhs = err["e_whole"] ** 2 * parts["whole"] ** 2
    rhs = err["e_in"] ** 2 * parts["in"] ** 2 + err["e_out"] ** 2 * parts["out"] ** 2
    assert lhs == pytest.approx(rhs, rel=1e-10)
    for reg in (inside, inside.complement()):
        assert broken_h1(u_h, reg, fluid) <= broken_h1(u_h, WHOLE, fluid)


def test_prolong_is_exact_for_p1_fields():
    f = lambda x, y: 2 * x - 3 * y + 0.5
    assert np.allclose(prolong(nodal_dg(4, f), 16), nodal_dg(16, f), atol=1e-14)
    with pytest.raises(ValueError):
        prolong(nodal_dg(4, f), 6)


def test_errors_compare_across_lattices():
    f = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    coarse, fine = nodal_dg(16, f), nodal_dg(64, f)
    assert relative_error(coarse, fine) == pytest.approx(relative_error(prolong(coarse, 64), fine))
