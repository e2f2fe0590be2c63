"""One test per acceptance criterion; tolerances are the contractual ones."""

import time
from pathlib import Path

import numpy as np
import pytest

from perfmsfem.basis import BasisConfig, compute_cr_basis, constraint_residual
from perfmsfem.coarse import assemble_coarse, build_elements, parse_method, solve_msfem, tau_K
from perfmsfem.fem import AdvectionField
from perfmsfem.geometry import EMPTY, O1, O2, DomainSpec, Periodic, RandomThinned
from perfmsfem.harness import load_config, paper_f, run_experiment, with_overrides, write_report
from perfmsfem.homogenize import (b_star_from_cellwise, decompose_drift, effective_tensors,
                                  rate_study_dirichlet, rate_study_neumann, solve_neumann_correctors)
from perfmsfem.mesh import build_coarse_mesh, build_fine_mesh, default_refinement
from perfmsfem.metrics import broken_h1, error_split, l2_norm, layer_region
from perfmsfem.reference import solve_reference

from test_coarse import textbook_cr

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PLAIN = DomainSpec(1.0, Periodic(EMPTY))


def test_1_cr_constraints_all_patterns():
    t0 = time.perf_counter()
    coarse = build_coarse_mesh(4)
    eps = 0.07
    m = default_refinement(0.25, eps)
    cfg = BasisConfig("advdiff", bubbles="advdiff_bubble")
    worst, count = 0.0, 0
    for pattern in (Periodic(O1), Periodic(O2), RandomThinned(O1, 0.5, 7)):
        for bc in ("dirichlet", "neumann"):
            spec = DomainSpec(eps, pattern, bc)
            for t in range(coarse.n_triangles):
                mesh = build_fine_mesh(coarse, t, spec, m)
                basis = compute_cr_basis(coarse, mesh, spec, 0.1, (10.0, 10.0), cfg)
                worst = max(worst, constraint_residual(basis, mesh, bc))
                count += 1
    assert count == 6 * 32
    assert worst <= 1e-9
    assert time.perf_counter() - t0 <= 120


def test_2_oracle_equivalences():
    # (a) unperforated, b = 0: the textbook nonconforming P1 system
    coarse = build_coarse_mesh(3)
    method = parse_method("MsFEM[weak]")
    elements = build_elements(coarse, PLAIN, 1.0, None, method.basis.resolved(PLAIN), 2)
    system, _, _ = assemble_coarse(PLAIN, coarse, elements, method, 1.0, 1.0, None)
    A, _ = textbook_cr(coarse)
    assert np.abs(system.matrix.toarray() - A).max() <= 1e-10

    # (b) b = 0: AdvMsFEM and MsFEM give the same coefficients
    coarse = build_coarse_mesh(4)
    spec = DomainSpec(0.1, Periodic(O1))
    zero = (0.0, 0.0)
    ms = solve_msfem(spec, coarse, parse_method("MsFEM"), paper_f, 0.5, zero, 4)
    adv = solve_msfem(spec, coarse, parse_method("AdvMsFEM"), paper_f, 0.5, zero, 4)
    assert np.abs(ms.coefficients - adv.coefficients).max() <= 1e-10

    # (c) b = 0: c_flux and a_flux bases coincide
    c_flux = solve_msfem(spec, coarse, parse_method("AdvMsFEM+advB"), paper_f, 0.5, zero, 4)
    a_flux = solve_msfem(spec, coarse, parse_method("AdvMsFEM+advB[aH]"), paper_f, 0.5, zero, 4)
    for ec, ea in zip(c_flux.elements, a_flux.elements):
        assert np.abs(ec.basis.functions - ea.basis.functions).max() <= 1e-10
        assert np.abs(ec.basis.bubble - ea.basis.bubble).max() <= 1e-10
    assert np.abs(c_flux.coefficients - a_flux.coefficients).max() <= 1e-10


def _sym_min_eig(matrix, active):
    M = matrix.toarray()[np.ix_(active, active)]
    return np.linalg.eigvalsh(0.5 * (M + M.T))[0]


def test_3_coercivity_and_tau_limits():
    fields = {"constant": AdvectionField((1.0, 1.0), scale=10.0),
              "compressive": AdvectionField(lambda x: np.stack([4 - 8 * x[:, 0], 2 - 8 * x[:, 1]], 1))}
    for N in (2, 4, 8):
        coarse = build_coarse_mesh(N)
        spec = DomainSpec(1 / 16, Periodic(O1))
        m = default_refinement(1 / N, spec.epsilon, 8)
        for b in fields.values():
            for name in ("MsFEM+advB", "AdvMsFEM+advB"):  # the plain c_H form
                method = parse_method(name)
                elements = build_elements(coarse, spec, 0.05, b, method.basis.resolved(spec), m)
                system, _, active = assemble_coarse(spec, coarse, elements, method, 1.0, 0.05, b)
                assert _sym_min_eig(system.matrix, active) > 0, (N, name)
    H, alpha = 0.1, 0.5
    for x in (1e-4, 1e-5):  # diffusive limit H^2 / (12 alpha)
        bnorm = 2 * alpha * x / H
        assert tau_K(bnorm, H, alpha) == pytest.approx(H * H / (12 * alpha), rel=1e-6)
    for x in (1e7, 1e9):  # advective limit H / (2 |b|)
        bnorm = 2 * alpha * x / H
        assert tau_K(bnorm, H, alpha) == pytest.approx(H / (2 * bnorm), rel=1e-6)


def test_4_homogenization_identities():
    b = np.array([1.0, 1.0])
    alpha = 0.5
    empty = solve_neumann_correctors(alpha, EMPTY, 16)
    A, bs = effective_tensors(empty, alpha, b)
    assert np.abs(A - alpha * np.eye(2)).max() <= 1e-10
    assert np.abs(bs - b).max() <= 1e-10

    corr = solve_neumann_correctors(alpha, O1, 32)
    A, bs = effective_tensors(corr, alpha, b)
    assert abs(A[0, 0] - A[1, 1]) <= 1e-6 * alpha
    assert max(abs(A[0, 1]), abs(A[1, 0])) <= 1e-6 * alpha
    assert np.abs(bs - A.T @ b / alpha).max() <= 1e-8

    _, B, _, residual = decompose_drift(b, O1, 32)
    assert residual <= 1e-8
    assert np.abs(b_star_from_cellwise(corr, B) - bs).max() <= 1e-8


def test_5_rate_studies():
    t0 = time.perf_counter()
    eps = [1 / 8, 1 / 16, 1 / 32]
    cfg = load_config(CONFIGS / "rates_dirichlet.cfg")
    dirichlet = rate_study_dirichlet(cfg.alpha[0], cfg.b, O1, paper_f, eps, cfg.cells_per_period)
    assert dirichlet.rate >= 1.3
    cfg = load_config(CONFIGS / "rates_neumann.cfg")
    neumann = rate_study_neumann(cfg.alpha[0], O1, paper_f, eps, cfg.b, cfg.cells_per_period)
    assert neumann.strictly_decreasing
    assert time.perf_counter() - t0 <= 15 * 60


def _sweep(name, methods):
    cfg = with_overrides(load_config(CONFIGS / f"{name}.cfg"), motifs=["O1", "O2"], methods=methods)
    report = run_experiment(cfg)
    assert report.ok, [r["status"] for r in report.rows if r["status"] != "ok"]
    table = {}
    for r in report.rows:
        table.setdefault((r["motif"], r["H"], r["alpha"]), {})[r["method"]] = r
    return table


def test_6_method_ordering():
    t0 = time.perf_counter()
    bad = []

    # bubbles at fixed eps and alpha over four coarse sizes
    for key, row in _sweep("dirichlet_bubbles", ["MsFEM", "MsFEM+advB", "AdvMsFEM+advB"]).items():
        e = {m: r["e_whole"] for m, r in row.items()}
        if not e["AdvMsFEM+advB"] < e["MsFEM+advB"] < e["MsFEM"]:
            bad.append(("dirichlet", key, e))

    # alpha sweep: advective bases stay accurate, diffusive ones blow up
    table = _sweep("dirichlet_peclet", ["MsFEM+advB", "AdvMsFEM+advB"])
    for motif in ("O1", "O2"):
        rows = sorted((k[2], v) for k, v in table.items() if k[0] == motif)
        adv = [v["AdvMsFEM+advB"]["e_whole"] for _, v in rows]
        plain = [v["MsFEM+advB"]["e_whole"] for _, v in rows]
        if max(adv) >= 0.5:
            bad.append(("peclet", motif, "AdvMsFEM+advB", adv))
        if not (np.all(np.diff(plain) < 0) and plain[0] >= 0.8):
            bad.append(("peclet", motif, "MsFEM+advB", plain))

    # Neumann: errors away from the outflow layer
    for key, row in _sweep("neumann_peclet", ["MsFEM", "Stab(MsFEM)", "AdvMsFEM+advB"]).items():
        e = {m: r["e_out"] for m, r in row.items()}
        if not e["AdvMsFEM+advB"] < e["Stab(MsFEM)"] < e["MsFEM"]:
            bad.append(("neumann", key, e))

    assert not bad, bad
    assert time.perf_counter() - t0 <= 30 * 60


def test_7_region_additivity_and_report_determinism(tmp_path, monkeypatch):
    coarse = build_coarse_mesh(4)
    spec = DomainSpec(1 / 8, Periodic(O1))
    b = AdvectionField((1.0, 1.0), scale=8.0)
    ref = solve_reference(spec, 0.05, b, paper_f, 128)
    sol = solve_msfem(spec, coarse, parse_method("MsFEM"), paper_f, 0.05, b, 5)
    diff = sol.dg_field() - ref.dg_field()
    fluid = ref.grid.cell_fluid
    inside = layer_region(b, 0.05, "inside")
    assert not inside.flagged
    whole = broken_h1(diff, fluid=fluid) ** 2
    parts = broken_h1(diff, inside, fluid) ** 2 + broken_h1(diff, inside.complement(), fluid) ** 2
    assert abs(whole - parts) <= 1e-10 * whole
    split = error_split(sol.dg_field(), ref.dg_field(), b, 0.05, fluid)
    assert 0 < split["e_in"] and 0 < split["e_out"]

    cfg = load_config(CONFIGS / "smoke.cfg")
    texts = []
    for k in range(2):
        monkeypatch.setenv("MSFEM_CACHE_DIR", str(tmp_path / f"cache{k}"))
        paths = write_report(run_experiment(cfg, workers=1 + k), tmp_path / f"out{k}")
        texts.append(paths["report"].read_bytes())
    assert texts[0] == texts[1]


def test_8_dirichlet_eps_squared_scaling():
    ratios = []
    for eps in (1 / 8, 1 / 16, 1 / 32):
        spec = DomainSpec(eps, Periodic(O1))
        b = AdvectionField((1.0, 1.0), scale=1 / eps)
        ref = solve_reference(spec, 0.25, b, paper_f, max(256, int(16 / eps)))
        ratios.append(l2_norm(ref.dg_field(), fluid=ref.grid.cell_fluid) / eps ** 2)
    assert max(ratios) <= 1.2 * min(ratios)
