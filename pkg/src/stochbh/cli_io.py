"""Run configuration, data ingestion, CSV emission and the ``stochbh`` command."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import difflib
import math
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import fem2d
from . import stochastic_grids as sg
from .datasets import synthetic_bh_table
from .karhunen_loeve import KLExpansion, information_content
from .material_law import MeasuredBHTable, NonMonotoneError, PowerLaw
from .nonlinear_solver import SolveConfig, SolveReport, solve_nonlinear
from .uq_driver import (
    LSHAPE_SOURCE,
    PLAPLACE_SOURCE,
    CollocationError,
    StudyResult,
    StudySpec,
    lshape_law_factory,
    plaplace_exact,
    run_study,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONCONVERGED = 4

STUDIES = ("plaplace", "lshape", "kl")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def fmt(x: Any) -> str:
    """Round-trip exact text for floats, plain ``str`` otherwise."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# configuration ------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RunConfig:
    study: str = "plaplace"
    output_dir: str = "out"
    bh_csv: Optional[str] = None
    mesh_n: int = 64
    refinements: tuple[int, ...] = (0,)
    grid: str = "tensor"
    q_min: int = 1
    q_max: int = 8
    reference_level: Optional[int] = None  # None: successive differences
    scheme: str = "newton"
    tol: float = 1e-12
    max_iter: int = 200
    p: float = 4.0
    correlation_length: float = 0.5
    kl_dim: int = 60
    kl_modes: int = 0  # 0: information-content truncation
    kl_samples: int = 5
    workers: int = 1
    seed: int = 2015

    def __post_init__(self) -> None:
        checks = [
            (self.study in STUDIES, f"study must be one of {STUDIES}"),
            (self.grid in ("tensor", "smolyak"), "grid must be tensor or smolyak"),
            (self.scheme in ("kacanov", "newton"), "scheme must be kacanov or newton"),
            (self.mesh_n >= 1, "mesh_n must be >= 1"),
            (0 <= self.q_min <= self.q_max, "need 0 <= q_min <= q_max"),
            (self.tol > 0, "tol must be positive"),
            (self.max_iter >= 1, "max_iter must be >= 1"),
            (self.p > 1, "p must exceed 1"),
            (self.correlation_length > 0, "correlation_length must be positive"),
            (self.kl_dim >= 4, "kl_dim must be >= 4"),
            (self.kl_modes >= 0 and self.kl_samples >= 0, "kl_modes and kl_samples must be >= 0"),
            (self.workers >= 1, "workers must be >= 1"),
            (all(r >= 0 for r in self.refinements) and len(self.refinements) > 0, "refinements must be >= 0"),
            (self.reference_level is None or self.reference_level >= 0, "reference_level must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.bh_csv is not None and not Path(self.bh_csv).is_file():
            raise ConfigError(f"bh_csv not found: {self.bh_csv}")

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(range(self.q_min, self.q_max + 1))

    def solve_config(self) -> SolveConfig:
        return SolveConfig(scheme=self.scheme, tol_increment=self.tol, max_iter=self.max_iter)

    def study_spec(self) -> StudySpec:
        return StudySpec(
            problem=self.study,
            mesh_n=self.mesh_n,
            refinements=self.refinements,
            grid_kind=self.grid,
            levels=self.levels,
            reference_level=self.reference_level,
            solver=self.solve_config(),
            workers=self.workers,
        )

    def echo(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            else:
                text = fmt(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
REQUIRED = ("study",)


def _convert(key: str, text: str) -> Any:
    default = FIELDS[key].default
    text = text.strip()
    try:
        if key in ("bh_csv", "reference_level"):
            if text.lower() in ("", "none"):
                return None
            return int(text) if key == "reference_level" else text
        if key == "refinements":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def _unknown_key(key: str) -> ConfigError:
    hint = difflib.get_close_matches(key, list(FIELDS), n=1, cutoff=0.5)
    suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
    return ConfigError(f"unknown key {key!r}{suggestion} valid keys: {', '.join(FIELDS)}")


def _read_pairs(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case for the error message
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return dict(parser["run"])


def parse_config(text: str | None = None, overrides: Sequence[str] = (), require: bool = True) -> RunConfig:
    """Resolve ``key = value`` text plus ``key=value`` overrides (overrides win)."""
    pairs = _read_pairs(text) if text else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for key in pairs:
        if key not in FIELDS:
            raise _unknown_key(key)
    if require:
        missing = [k for k in REQUIRED if k not in pairs]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    values = {k: _convert(k, v) for k, v in pairs.items()}
    if "reference_level" not in values and values.get("study", "plaplace") == "plaplace":
        values["reference_level"] = 10
    return RunConfig(**values)


# data ---------------------------------------------------------------------------------


def ingest_bh_csv(path: str | Path) -> MeasuredBHTable:
    """B-H table: header row, column 0 field magnitudes, columns 1..Q samples."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3:
        raise DataError(f"{path}: need a header row and at least two data rows")
    width = len(rows[0])
    if width < 2:
        raise DataError(f"{path}: need at least one sample column")
    data = np.empty((len(rows) - 1, width))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != width:
            raise DataError(f"{path}: row {i} has {len(row)} cells, header has {width}")
        for j, cell in enumerate(row):
            try:
                data[i - 1, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i}, column {j}: not a number: {cell!r}") from None
    if not np.all(np.isfinite(data)):
        i, j = np.argwhere(~np.isfinite(data))[0]
        raise DataError(f"{path}: row {i + 1}, column {j}: non-finite value")
    dpts = np.diff(data[:, 0])
    if np.any(dpts <= 0):
        i = int(np.flatnonzero(dpts <= 0)[0])
        raise DataError(f"{path}: row {i + 2}, column 0: field values must increase strictly")
    dvals = np.diff(data[:, 1:], axis=0)
    if np.any(dvals < 0):
        i, j = np.argwhere(dvals < 0)[0]
        raise DataError(f"{path}: row {i + 2}, column {j + 1}: sample decreases")
    return MeasuredBHTable(data[:, 0], data[:, 1:])


def write_bh_csv(path: str | Path, table: MeasuredBHTable) -> None:
    header = ["s"] + [f"sample_{j + 1}" for j in range(table.n_samples)]
    rows = [[table.points[i], *table.samples[i]] for i in range(table.n_points)]
    write_csv(path, header, rows)


def write_csv(path: str | Path, header: Sequence[str], rows) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(x) for x in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_field(path: str | Path, mesh: fem2d.TriMesh, values: np.ndarray) -> None:
    rows = ((i, *mesh.vertices[i], values[i]) for i in range(mesh.n_vertices))
    write_csv(path, ["vertex_id", "x1", "x2", "value"], rows)


def read_field(path: str | Path) -> np.ndarray:
    _, rows = read_csv(path)
    return np.array([float(r[3]) for r in rows])


def write_mesh(prefix: str | Path, mesh: fem2d.TriMesh) -> None:
    prefix = str(prefix)
    write_csv(
        prefix + "_vertices.csv",
        ["vertex_id", "x1", "x2", "boundary"],
        ((i, *mesh.vertices[i], int(mesh.boundary[i])) for i in range(mesh.n_vertices)),
    )
    write_csv(
        prefix + "_triangles.csv",
        ["triangle_id", "v0", "v1", "v2"],
        ((k, *mesh.triangles[k]) for k in range(mesh.n_triangles)),
    )


def write_grid(path: str | Path, grid: sg.CollocationGrid) -> None:
    members: list[list[str]] = [[] for _ in range(len(grid))]
    if grid.kind == "smolyak":
        for comp in grid.components:
            tag = "-".join(str(j) for j in comp.multiindex)
            for k in comp.point_index:
                members[k].append(tag)
    header = ["point_index", *(f"y_{m + 1}" for m in range(grid.M)), "weight", "component_multiindex"]
    rows = ((k, *grid.points[k], grid.weights[k], ";".join(members[k])) for k in range(len(grid)))
    write_csv(path, header, rows)


def write_reports(path: str | Path, reports: Sequence[SolveReport]) -> None:
    rows = ((k, r.iterations, r.final_increment, int(r.converged)) for k, r in enumerate(reports))
    write_csv(path, ["point_index", "iterations", "final_increment", "converged"], rows)


def write_kl(directory: str | Path, kl: KLExpansion, samples: np.ndarray, n_probe: int = 201) -> None:
    d = Path(directory)
    info = information_content(kl.eigenvalues)
    write_csv(d / "kl_spectrum.csv", ["n", "lambda_n", "info_content_cumulative"],
              ((n + 1, kl.eigenvalues[n], info[n]) for n in range(info.size)))
    s = np.linspace(kl.space.a, kl.space.b, n_probe)
    curves = [kl.sample_law(y).f(s) for y in samples]
    header = ["s", *(f"f_sample_{k + 1}" for k in range(len(curves)))]
    write_csv(d / "kl_samples.csv", header, ((s[i], *(c[i] for c in curves)) for i in range(n_probe)))


def emit_study(result: StudyResult | None, directory: str | Path, spec: StudySpec | None = None,
               with_time: bool = True) -> list[Path]:
    """Write ``summary.csv``, per-level field CSVs, error tables, grids and solve reports.

    ``with_time=False`` blanks the wall-time column so reruns are byte-identical.
    """
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {d}: {exc}") from exc
    written = [d / "summary.csv"]
    rows = [] if result is None else result.rows
    write_csv(
        d / "summary.csv",
        ["mesh_level", "level", "N_q", "error", "slope_estimate", "time_s"],
        ((r.mesh_level, r.q, r.n_points, r.error, r.slope_estimate, r.time_s if with_time else "") for r in rows),
    )
    if result is None:
        return written
    spec = spec or result.spec
    M = 1 if spec.problem == "plaplace" else 2
    gamma = (3.0, 5.0) if spec.problem == "plaplace" else None
    for level, mesh in result.meshes.items():
        write_mesh(d / f"mesh{level}", mesh)
        table = [(r.q, r.error) for r in result.rows if r.mesh_level == level]
        write_csv(d / f"errors_mesh{level}.csv", ["q", "error"], table)
        written.append(d / f"errors_mesh{level}.csv")
    for (level, q), (mean, var) in sorted(result.fields.items()):
        mesh = result.meshes[level]
        write_field(d / f"E_mesh{level}_q{q}.csv", mesh, mean)
        write_field(d / f"Var_mesh{level}_q{q}.csv", mesh, var)
        write_reports(d / f"reports_mesh{level}_q{q}.csv", result.reports.get((level, q), []))
        written.append(d / f"E_mesh{level}_q{q}.csv")
    for q in spec.levels:
        grid = sg.tensor_grid(q, M, gamma) if spec.grid_kind == "tensor" else sg.smolyak_grid(q, M, gamma)
        write_grid(d / f"grid_q{q}.csv", grid)
    return written


# commands -----------------------------------------------------------------------------


def _load_table(cfg: RunConfig) -> MeasuredBHTable:
    return ingest_bh_csv(cfg.bh_csv) if cfg.bh_csv else synthetic_bh_table(seed=cfg.seed)


def cmd_kl(cfg: RunConfig) -> int:
    table = _load_table(cfg)
    kl = KLExpansion.from_table(
        table, length=cfg.correlation_length, dim=cfg.kl_dim, M=cfg.kl_modes or None
    )
    rng = np.random.default_rng(cfg.seed)
    y = rng.uniform(-math.sqrt(3), math.sqrt(3), size=(cfg.kl_samples, kl.M))
    write_kl(cfg.output_dir, kl, y)
    print(f"M = {kl.M}  delta = {float(kl.delta)!r}  lambda_1 = {float(kl.eigenvalues[0])!r}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig) -> int:
    if cfg.study == "plaplace":
        mesh = fem2d.mesh_unit_square(cfg.mesh_n)
        exact, grad = plaplace_exact(cfg.p)
        u, rep = solve_nonlinear(mesh, PowerLaw(cfg.p), PLAPLACE_SOURCE, exact, cfg.solve_config())
        err = fem2d.norms(mesh, u, exact, grad)
        print(f"h = {mesh.h!r}  H1 error = {err.h1!r}  iterations = {rep.iterations}")
    elif cfg.study == "lshape":
        mesh = fem2d.mesh_lshape(cfg.mesh_n)
        for _ in range(max(cfg.refinements)):
            mesh = fem2d.refine_uniform(mesh)
        u, rep = solve_nonlinear(mesh, lshape_law_factory((0.0, 0.0)), LSHAPE_SOURCE, 0.0, cfg.solve_config())
        print(f"h = {mesh.h!r}  max u = {u.values.max()!r}  iterations = {rep.iterations}")
    else:
        raise ConfigError("solve needs study = plaplace or lshape")
    out = Path(cfg.output_dir)
    write_mesh(out / "mesh", mesh)
    write_field(out / "solution.csv", mesh, u.values)
    write_reports(out / "report.csv", [rep])
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def cmd_study(cfg: RunConfig) -> int:
    if cfg.study == "kl":
        return cmd_kl(cfg)
    result = run_study(cfg.study_spec())
    emit_study(result, cfg.output_dir)
    for r in result.rows:
        print(f"mesh {r.mesh_level}  q = {r.q:2d}  N = {r.n_points:4d}  error = {r.error:.3e}")
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    from .checks import run_checks

    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAILED


COMMANDS = {"kl": cmd_kl, "solve": cmd_solve, "study": cmd_study, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochbh", description="Stochastic nonlinear magnetostatics toolkit")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("-c", "--config", help="flat key = value config file")
    ap.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    ap.add_argument("-o", "--output", help="output directory (same as --set output_dir=...)")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.output:
        overrides.append(f"output_dir={args.output}")
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else None
        cfg = parse_config(text, overrides, require=args.command in ("study", "solve") and args.config is not None)
        if args.command != "check":
            Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
            (Path(cfg.output_dir) / "config.echo").write_text(cfg.echo(), encoding="utf-8")
        return COMMANDS[args.command](cfg)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NonMonotoneError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CollocationError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
