"""Experiment configs, cached basis precomputation, sweeps and report files.

Config files are flat ``key = value`` text. Lists are comma separated,
optionally bracketed. Numbers accept ``0.25``, ``1/16`` and ``2^-5``;
``2^-5..2^2`` expands to the powers ``2^-5, 2^-4, ..., 2^2`` and ``3..6``
to the integers ``3, 4, 5, 6``. A key suffixed with ``.paper`` replaces the
plain key when the paper-scale grids are requested. ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cache
from .basis import BasisConfig, compute_local_basis
from .coarse import MethodSpec, build_elements, parse_method, solve_msfem
from .fem import AdvectionField
from .geometry import DomainSpec, Periodic, RandomThinned, motif_by_name
from .mesh import build_coarse_mesh, build_fine_mesh
from .metrics import error_split
from .reference import ResolutionError, required_resolution, solve_reference

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed experiment config; the message names the line and key."""


# ---------------------------------------------------------------------------
# value grammar


_POW = re.compile(r"^\s*([-+]?[0-9.]+)\s*\^\s*([-+]?[0-9.]+)\s*$")


def parse_number(text: str) -> float:
    t = text.strip()
    m = _POW.match(t)
    if m:
        return float(m.group(1)) ** float(m.group(2))
    if "/" in t:
        num, den = t.split("/", 1)
        return parse_number(num) / parse_number(den)
    return float(t)


def _split_items(text: str) -> list[str]:
    t = text.strip()
    if t.startswith("[") and t.endswith("]"):
        t = t[1:-1]
    items, depth, cur = [], 0, []
    for ch in t:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            items.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        items.append("".join(cur).strip())
    return items


def parse_number_list(text: str) -> list[float]:
    out = []
    for item in _split_items(text):
        if ".." in item:
            lo, hi = (s.strip() for s in item.split("..", 1))
            a, b = _POW.match(lo), _POW.match(hi)
            if a and b:
                if a.group(1) != b.group(1):
                    raise ValueError(f"range {item!r} mixes bases")
                base = float(a.group(1))
                out.extend(base ** k for k in range(int(a.group(2)), int(b.group(2)) + 1))
            else:
                out.extend(float(k) for k in range(int(lo), int(hi) + 1))
        else:
            out.append(parse_number(item))
    return out


def paper_f(x, y):
    return np.sin(0.5 * np.pi * x) * np.sin(0.5 * np.pi * y)


_F_NAMESPACE = {name: getattr(np, name) for name in
                ("sin", "cos", "exp", "log", "sqrt", "tanh", "pi", "abs")}


def make_f(text: str):
    """``paper``, a constant, or an expression in ``x`` and ``y``."""
    t = text.strip()
    if t == "paper":
        return paper_f
    try:
        return parse_number(t)
    except ValueError:
        pass
    code = compile(t, "<f>", "eval")
    for name in code.co_names:
        if name not in _F_NAMESPACE and name not in ("x", "y"):
            raise ValueError(f"f may only use x, y and {sorted(_F_NAMESPACE)}; got {name!r}")

    def f(x, y):
        return eval(code, {"__builtins__": {}}, {**_F_NAMESPACE, "x": x, "y": y})
    f.__qualname__ = f"expr[{t}]"
    return f


def make_pattern(text: str, seed: int):
    """``O1``, ``O2``, ``rO1(0.5)`` or ``random(O1, keep=0.5, seed=42)``."""
    t = text.strip()
    m = re.fullmatch(r"random\((.*)\)", t)
    if not m:
        return Periodic(motif_by_name(t))
    parts = _split_items(m.group(1))
    motif = motif_by_name(parts[0])
    keep, s = 0.5, seed
    for p in parts[1:]:
        k, _, v = p.partition("=")
        k = k.strip()
        if k == "keep":
            keep = parse_number(v)
        elif k == "seed":
            s = int(v)
        else:
            raise ValueError(f"unknown random pattern option {k!r}")
    return RandomThinned(motif, keep, s)


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    problem: str = "dirichlet"
    b: tuple[float, float] = (1.0, 1.0)
    b_mode: str = "scaled"  # b_hat = b / eps ("scaled") or b ("constant")
    f: str = "paper"
    alpha: list = field(default_factory=lambda: [0.25])
    eps: list = field(default_factory=lambda: [0.03])
    H: list = field(default_factory=lambda: [1 / 8])
    motifs: list = field(default_factory=lambda: ["O1"])
    methods: list = field(default_factory=lambda: ["MsFEM"])
    n: int = 256
    n_max: int = 1024
    workers: int = 1
    out: str = "results"
    seed: int = 0
    cell_resolution: int = 32
    cells_per_period: int = 16

    def validate(self):
        if self.problem not in ("dirichlet", "neumann"):
            raise ConfigError(f"problem must be dirichlet or neumann, got {self.problem!r}")
        if self.b_mode not in ("scaled", "constant"):
            raise ConfigError("b_mode must be scaled or constant")
        for key in ("alpha", "eps", "H", "motifs", "methods"):
            if not getattr(self, key):
                raise ConfigError(f"sweep list {key!r} is empty")
        for name in self.methods:
            try:
                parse_method(name, self.problem)
            except ValueError as exc:
                raise ConfigError(f"methods: {exc}") from exc
        for m in self.motifs:
            try:
                make_pattern(m, self.seed)
            except ValueError as exc:
                raise ConfigError(f"motifs: {exc}") from exc
        for h in self.H:
            N = 1.0 / h
            if abs(N - round(N)) > 1e-9:
                raise ConfigError(f"H={h} is not 1/N for an integer N")
        try:
            make_f(self.f)
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"f: {exc}") from exc
        return self

    def field_for(self, eps: float) -> AdvectionField:
        scale = 1.0 / eps if self.b_mode == "scaled" else 1.0
        return AdvectionField(self.b, scale=scale)

    def points(self):
        """Parameter points in deterministic order: motif, eps, alpha, H."""
        return list(itertools.product(self.motifs, self.eps, self.alpha, self.H))

    def spec(self, motif: str, eps: float) -> DomainSpec:
        return DomainSpec(eps, make_pattern(motif, self.seed), self.problem)


_LIST_KEYS = {"alpha", "eps", "H"}
_INT_KEYS = {"n", "n_max", "workers", "seed", "cell_resolution", "cells_per_period"}


def parse_config(text: str, paper_scale: bool = False, source: str = "<config>") -> ExperimentConfig:
    plain: dict[str, tuple[int, str]] = {}
    paper: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        target = plain
        if key.endswith(".paper"):
            key, target = key[: -len(".paper")], paper
        target[key] = (lineno, value)
    if paper_scale:
        plain.update(paper)
    cfg = ExperimentConfig()
    known = set(ExperimentConfig.__dataclass_fields__)
    for key, (lineno, value) in plain.items():
        where = f"{source}:{lineno}: {key}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        try:
            if key in _LIST_KEYS:
                val = parse_number_list(value)
            elif key in _INT_KEYS:
                val = int(parse_number(value))
            elif key == "b":
                val = tuple(parse_number(v) for v in _split_items(value))
                if len(val) != 2:
                    raise ValueError("b needs two components")
            elif key in ("motifs", "methods"):
                val = _split_items(value)
            else:
                val = value
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        setattr(cfg, key, val)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path, paper_scale: bool = False) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), paper_scale, str(path))


# ---------------------------------------------------------------------------
# resolution and basis jobs


def point_resolution(cfg: ExperimentConfig, N: int, alpha: float, b: AdvectionField) -> tuple[int, int]:
    """Smallest ``n = N 2^m`` meeting both ``cfg.n`` and the reference Peclet bound."""
    need = max(cfg.n, required_resolution(alpha, b))
    m = max(0, math.ceil(math.log2(need / N) - 1e-12))
    n = N * 2 ** m
    if n > cfg.n_max:
        raise ResolutionError(f"point needs n={n} > n_max={cfg.n_max}", n)
    return n, m


def cache_root(cfg: ExperimentConfig) -> Path:
    return cache.default_root() or Path(cfg.out) / "cache"


@dataclass(frozen=True)
class ElementJob:
    spec: DomainSpec
    N: int
    t: int
    cfg: BasisConfig
    m: int
    alpha: float
    b: AdvectionField
    root: str

    @property
    def key(self) -> dict:
        return cache.basis_key(self.spec.key(), self.cfg.key(), self.m, self.alpha,
                               self.b.descriptor(), self.N, self.t)


def run_element_job(job: ElementJob):
    """Load or compute one element basis; returns ``(t, seconds, hit, error)``."""
    t0 = time.perf_counter()
    try:
        if cache.cache_load(job.root, job.key) is not None:
            return job.t, time.perf_counter() - t0, True, None
        coarse = build_coarse_mesh(job.N)
        mesh = build_fine_mesh(coarse, job.t, job.spec, job.m)
        basis = compute_local_basis(coarse, job.t, job.spec, job.alpha, job.b, job.cfg, job.m, mesh)
        cache.cache_store(job.root, job.key, basis)
        return job.t, time.perf_counter() - t0, False, None
    except Exception as exc:  # isolated per element
        return job.t, time.perf_counter() - t0, False, f"{type(exc).__name__}: {exc}"


def _basis_configs(cfg: ExperimentConfig, spec: DomainSpec) -> list[BasisConfig]:
    seen = {}
    for name in cfg.methods:
        bc = parse_method(name, cfg.problem).basis.resolved(spec)
        seen.setdefault(bc.key(), bc)
    return list(seen.values())


def element_jobs(cfg: ExperimentConfig) -> list[ElementJob]:
    root = str(cache_root(cfg))
    jobs = []
    for motif, eps, alpha, H in cfg.points():
        spec = cfg.spec(motif, eps)
        N = int(round(1.0 / H))
        b = cfg.field_for(eps)
        try:
            _, m = point_resolution(cfg, N, alpha, b)
        except ResolutionError:
            continue  # reported by run_experiment
        for bc in _basis_configs(cfg, spec):
            jobs.extend(ElementJob(spec, N, t, bc, m, float(alpha), b, root) for t in range(2 * N * N))
    return jobs


def _map_jobs(jobs: list[ElementJob], workers: int):
    if workers <= 1 or len(jobs) < 2:
        return [run_element_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_element_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))


def precompute_bases(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    """Fill the basis cache for every element job of ``cfg``; idempotent."""
    workers = cfg.workers if workers is None else workers
    jobs = element_jobs(cfg)
    t0 = time.perf_counter()
    results = _map_jobs(jobs, workers)
    wall = time.perf_counter() - t0
    times = [r[1] for r in results]
    failures = [(j.t, r[3]) for j, r in zip(jobs, results) if r[3]]
    hits = sum(1 for r in results if r[2])
    busy = float(sum(times))
    return {"jobs": len(jobs), "hits": hits, "computed": len(jobs) - hits - len(failures),
            "failed": failures, "wall_s": wall, "element_s": busy,
            "speedup": busy / wall if wall > 0 else float("nan"),
            "element_times": times, "root": str(cache_root(cfg))}


def load_bases(cfg: ExperimentConfig, spec, N, bc, m, alpha, b):
    """Element bases from the cache, computing misses. Returns ``(bases, hit_rate)``."""
    root = str(cache_root(cfg))
    bases, hits = [], 0
    for t in range(2 * N * N):
        job = ElementJob(spec, N, t, bc, m, float(alpha), b, root)
        basis = cache.cache_load(root, job.key)
        if basis is None:
            _, _, _, err = run_element_job(job)
            if err:
                raise RuntimeError(f"element {t}: {err}")
            basis = cache.cache_load(root, job.key)
        else:
            hits += 1
        bases.append(basis)
    return bases, hits / len(bases)


# ---------------------------------------------------------------------------
# experiments and reports


REPORT_COLUMNS = ["method", "problem", "motif", "eps", "H", "N", "alpha", "n", "b_norm",
                  "e_whole", "e_in", "e_out", "delta", "peclet", "layer_flag",
                  "n_dofs", "n_total", "cache_hit_rate", "status"]
TIMING_COLUMNS = ["method", "motif", "eps", "H", "alpha", "reference_s", "offline_s", "online_s"]


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r["status"] == "ok" for r in self.rows)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else "%.10g" % v
    return str(v)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, precompute: bool = True) -> ErrorReport:
    """Every method at every parameter point; failures become flagged rows."""
    report = ErrorReport(meta={"name": cfg.name, "norm": "euclidean |b|"})
    if precompute:
        report.meta["precompute"] = {k: v for k, v in precompute_bases(cfg, workers).items()
                                     if k != "element_times"}
    f = make_f(cfg.f)
    refs = {}
    for motif, eps, alpha, H in cfg.points():
        spec = cfg.spec(motif, eps)
        N = int(round(1.0 / H))
        b = cfg.field_for(eps)
        base = {"problem": cfg.problem, "motif": motif, "eps": eps, "H": H, "N": N,
                "alpha": alpha, "b_norm": b.sup_norm()}
        try:
            n, m = point_resolution(cfg, N, alpha, b)
            key = (spec.key(), float(alpha), n)
            t0 = time.perf_counter()
            if key not in refs:
                refs[key] = solve_reference(spec, alpha, b, f, n)
            ref, t_ref = refs[key], time.perf_counter() - t0
        except Exception as exc:
            for name in cfg.methods:
                report.rows.append(_failed_row(base, name, exc))
                report.timings.append({"method": name, **_tkeys(base), "reference_s": float("nan"),
                                       "offline_s": float("nan"), "online_s": float("nan")})
            continue
        coarse = build_coarse_mesh(N)
        for name in cfg.methods:
            try:
                method = parse_method(name, cfg.problem)
                bc = method.basis.resolved(spec)
                t0 = time.perf_counter()
                bases, hit = load_bases(cfg, spec, N, bc, m, alpha, b)
                elements = build_elements(coarse, spec, alpha, b, bc, m, bases)
                t_load = time.perf_counter() - t0
                sol = solve_msfem(spec, coarse, method, f, alpha, b, m, elements)
                err = error_split(sol.dg_field(), ref.dg_field(), b, alpha, ref.grid.cell_fluid)
                report.rows.append({**base, "method": name, "n": n, **err,
                                    "n_dofs": sol.diagnostics["n_dofs"],
                                    "n_total": sol.diagnostics["n_total"],
                                    "cache_hit_rate": hit, "status": "ok"})
                report.timings.append({"method": name, **_tkeys(base), "reference_s": t_ref,
                                       "offline_s": t_load, "online_s": sol.diagnostics["online_s"]})
            except Exception as exc:
                log.warning("row %s at %s failed: %s", name, base, exc)
                report.rows.append(_failed_row({**base, "n": n}, name, exc))
                report.timings.append({"method": name, **_tkeys(base), "reference_s": t_ref,
                                       "offline_s": float("nan"), "online_s": float("nan")})
    return report


def _tkeys(base):
    return {k: base[k] for k in ("motif", "eps", "H", "alpha")}


def _failed_row(base, name, exc):
    row = {c: float("nan") for c in REPORT_COLUMNS}
    row.update(base)
    row.update({"method": name, "layer_flag": False, "n_dofs": 0, "n_total": 0,
                "status": f"failed:{type(exc).__name__}"})
    if isinstance(exc, ResolutionError):
        row["n"] = exc.required_n
    return row


def write_tsv(rows: list[dict], columns: list[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def read_table(path) -> list[dict]:
    """Rows of a TSV written by :func:`emit_table`, numbers converted."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = int(v) if re.fullmatch(r"-?\d+", v) else float(v)
            except ValueError:
                conv[k] = v
        out.append(conv)
    return out


def _sweep_axis(rows) -> str:
    for axis in ("H", "alpha", "eps"):
        if len({r[axis] for r in rows}) > 1:
            return axis
    return "H"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9+.=-]+", "_", str(text)).strip("_")


def emit_table(report: ErrorReport, path, fmt: str = "tsv") -> list[Path]:
    """Write ``report`` as one TSV file or as per-method plot-data files.

    For ``plotdata``, ``path`` is a directory; each file holds the swept
    axis (H, alpha or eps) against the whole/outside/inside errors.
    """
    if fmt == "tsv":
        return [write_tsv(report.rows, REPORT_COLUMNS, path)]
    if fmt != "plotdata":
        raise ValueError("format must be 'tsv' or 'plotdata'")
    outdir = Path(path)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = report.rows
    if not rows:
        return []
    axis = _sweep_axis(rows)
    others = [a for a in ("motif", "eps", "alpha", "H") if a != axis
              and len({r[a] for r in rows}) > 1]
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["method"],) + tuple(r[a] for a in others), []).append(r)
    written = []
    for key, grp in groups.items():
        name = "__".join([_slug(key[0])] + [f"{a}={_slug(_fmt(v))}" for a, v in zip(others, key[1:])])
        p = outdir / f"{name}.dat"
        with open(p, "w") as fh:
            fh.write(f"# {axis}\te_whole\te_out\te_in\n")
            for r in sorted(grp, key=lambda r: r[axis]):
                fh.write("\t".join(_fmt(r[c]) for c in (axis, "e_whole", "e_out", "e_in")) + "\n")
        written.append(p)
    return written


def write_report(report: ErrorReport, outdir) -> dict[str, Path]:
    """``report.tsv`` (deterministic), ``report_timings.tsv`` and plot data."""
    outdir = Path(outdir)
    paths = {"report": emit_table(report, outdir / "report.tsv")[0],
             "timings": write_tsv(report.timings, TIMING_COLUMNS, outdir / "report_timings.tsv")}
    emit_table(report, outdir / "plotdata", "plotdata")
    return paths


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None}).validate()


def worker_count(requested: int | None, cfg: ExperimentConfig) -> int:
    n = requested if requested is not None else cfg.workers
    return max(1, int(n))


# ---------------------------------------------------------------------------
# homogenization tables

HOMOG_COLUMNS = ["motif", "alpha", "resolution", "porosity", "A11", "A12", "A21", "A22", "b1", "b2",
                 "b_identity_gap", "status"]
RATE_COLUMNS = ["problem", "motif", "alpha", "eps", "error", "baseline", "rate", "status"]


def run_homog(cfg: ExperimentConfig) -> list[dict]:
    """Effective coefficients per (motif, alpha) from the Neumann correctors."""
    from .homogenize import effective_tensors, solve_neumann_correctors
    rows = []
    for motif, alpha in itertools.product(cfg.motifs, cfg.alpha):
        row = {"motif": motif, "alpha": alpha, "resolution": cfg.cell_resolution}
        try:
            pattern = make_pattern(motif, cfg.seed)
            corr = solve_neumann_correctors(alpha, pattern.motif, cfg.cell_resolution)
            A, bs = effective_tensors(corr, alpha, cfg.b)
            gap = np.abs(bs - A.T @ np.asarray(cfg.b) / alpha).max()
            row.update({"porosity": corr.porosity, "A11": A[0, 0], "A12": A[0, 1], "A21": A[1, 0],
                        "A22": A[1, 1], "b1": bs[0], "b2": bs[1], "b_identity_gap": gap,
                        "status": "ok"})
        except Exception as exc:
            row.update({c: float("nan") for c in HOMOG_COLUMNS[3:-1]})
            row["status"] = f"failed:{type(exc).__name__}"
        rows.append(row)
    return rows


def run_rates(cfg: ExperimentConfig) -> list[dict]:
    """Corrector-expansion errors over ``cfg.eps`` for every (motif, alpha)."""
    from .homogenize import rate_study_dirichlet, rate_study_neumann
    f = make_f(cfg.f)
    rows = []
    for motif, alpha in itertools.product(cfg.motifs, cfg.alpha):
        base = {"problem": cfg.problem, "motif": motif, "alpha": alpha}
        try:
            m = make_pattern(motif, cfg.seed).motif
            if cfg.problem == "dirichlet":
                table = rate_study_dirichlet(alpha, cfg.b, m, f, cfg.eps, cfg.cells_per_period)
                ok = table.rate >= 1.3
            else:
                table = rate_study_neumann(alpha, m, f, cfg.eps, cfg.b, cfg.cells_per_period)
                ok = table.strictly_decreasing
            status = "ok" if ok else "failed:trend"
            for eps, e, ref in zip(table.eps, table.errors, table.baseline):
                rows.append({**base, "eps": eps, "error": e, "baseline": ref, "rate": table.rate,
                             "status": status})
        except Exception as exc:
            for eps in cfg.eps:
                rows.append({**base, "eps": eps, "error": float("nan"), "baseline": float("nan"),
                             "rate": float("nan"), "status": f"failed:{type(exc).__name__}"})
    return rows
