"""Command line entry point: verification suites, convergence studies, tables.

Every subcommand reads an optional JSON config (``--config``) and applies flag
overrides on top.  Data go to files under ``--out``; logging goes to stderr.
The exit status is nonzero iff a config error occurs or an asserted invariant
fails.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, HDGError, NonConvergence
from .spaces import FAMILIES, MAX_K, family_shape

log = logging.getLogger("mdhdg")

PROBLEMS = ("diffusion", "stokes", "navier-stokes", "verify-spaces", "inequality-constants")
SUBCOMMAND_PROBLEM = {"verify": "verify-spaces", "constants": "inequality-constants", "diffusion": "diffusion",
                      "stokes": "stokes", "ns": "navier-stokes"}
FORMATS = ("csv", "json", "markdown")


@dataclass
class StudyConfig:
    problem: str = "verify-spaces"
    family: str | None = None
    k: int | None = None
    shape: str | None = None
    levels: list = field(default_factory=lambda: [4, 8, 16])
    nu: float | None = 1.0
    alpha_mode: str = "minimal"
    manufactured: str = "trig"
    tol: float = 1e-10
    maxit: int = 30
    omega: float = 1.0
    seed: int = 0
    out: str = "results"
    format: str = "csv"

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"field 'problem': expected one of {PROBLEMS}, got {self.problem!r}")
        if self.family is not None and self.family not in FAMILIES:
            raise ConfigError(f"field 'family': unknown family {self.family!r}")
        if self.k is not None and not (isinstance(self.k, int) and 0 <= self.k <= MAX_K):
            raise ConfigError(f"field 'k': expected an integer in 0..{MAX_K}, got {self.k!r}")
        if self.shape is not None and self.shape not in ("triangle", "square"):
            raise ConfigError(f"field 'shape': expected triangle or square, got {self.shape!r}")
        if self.family is not None and self.shape is not None and family_shape(self.family) != self.shape:
            raise ConfigError(f"field 'shape': {self.family} lives on {family_shape(self.family)}s")
        lv = self.levels
        if not isinstance(lv, list) or not lv or not all(isinstance(n, int) and n >= 1 for n in lv):
            raise ConfigError("field 'levels': expected a nonempty list of positive integers")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ConfigError("field 'levels': must be strictly increasing")
        if self.problem in ("stokes", "navier-stokes"):
            if self.nu is None:
                raise ConfigError("field 'nu': required for flow problems")
        if self.nu is not None and not (isinstance(self.nu, (int, float)) and self.nu > 0):
            raise ConfigError(f"field 'nu': must be positive, got {self.nu!r}")
        if self.alpha_mode not in ("minimal", "scaled-full", "zero"):
            raise ConfigError(f"field 'alpha_mode': unknown mode {self.alpha_mode!r}")
        if self.manufactured not in ("trig", "kovasznay"):
            raise ConfigError(f"field 'manufactured': unknown problem {self.manufactured!r}")
        if not (isinstance(self.tol, (int, float)) and self.tol > 0):
            raise ConfigError("field 'tol': must be positive")
        if not (isinstance(self.maxit, int) and self.maxit >= 1):
            raise ConfigError("field 'maxit': must be a positive integer")
        if not (isinstance(self.omega, (int, float)) and 0 < self.omega <= 1):
            raise ConfigError("field 'omega': must lie in (0, 1]")
        if self.format not in FORMATS:
            raise ConfigError(f"field 'format': expected one of {FORMATS}")
        return self


def load_config(path):
    """StudyConfig fields from a JSON file; parse errors carry line and column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(StudyConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}: unknown field {key!r}")
    return data


def make_config(problem, config_path=None, overrides=None):
    data = {}
    if config_path:
        data.update(load_config(config_path))
    if problem is not None:
        if "problem" in data and data["problem"] != problem:
            raise ConfigError(f"field 'problem': config says {data['problem']!r}, subcommand needs {problem!r}")
        data["problem"] = problem
    if config_path and data.get("problem") in ("stokes", "navier-stokes") and "nu" not in data \
            and (overrides or {}).get("nu") is None:
        raise ConfigError("field 'nu': missing (required for flow problems)")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = StudyConfig(**data)
    return cfg.validate()


def worker_count():
    """Worker threads, capped by HDG_THREADS."""
    raw = os.environ.get("HDG_THREADS")
    n = os.cpu_count() or 1
    if raw is None:
        return n
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"HDG_THREADS: expected an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError("HDG_THREADS: must be at least 1")
    return min(n, cap)


def _map(fun, items):
    # results come back in input order, so outputs do not depend on scheduling
    nw = min(worker_count(), len(items))
    if nw <= 1:
        return [fun(x) for x in items]
    with ThreadPoolExecutor(max_workers=nw) as ex:
        return list(ex.map(fun, items))


# -- tables ----------------------------------------------------------------------

@dataclass
class Table:
    """Rows of scalar values plus optional per-pair observed orders."""

    name: str
    columns: list
    rows: list = field(default_factory=list)
    order_columns: list = field(default_factory=list)
    orders: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    ok: bool = True

    def __post_init__(self):
        self.rows = [{k: _plain(v) for k, v in r.items()} for r in self.rows]
        self.orders = [{k: _plain(v) for k, v in o.items()} for o in self.orders]
        self.ok = bool(self.ok)

    def to_dict(self):
        return {"schema_version": 1, "name": self.name, "columns": list(self.columns), "rows": self.rows,
                "order_columns": list(self.order_columns), "orders": self.orders, "meta": self.meta, "ok": self.ok}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["columns"], d.get("rows", []), d.get("order_columns", []), d.get("orders", []),
                   d.get("meta", {}), d.get("ok", True))


def _plain(v):
    """numpy scalars -> builtin scalars so that tables serialize identically."""
    return v.item() if isinstance(v, np.generic) else v


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _csv_text(t):
    show_orders = len(t.rows) >= 2 and t.order_columns
    header = list(t.columns) + ([f"order_{c}" for c in t.order_columns] if show_orders else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, r in enumerate(t.rows):
        line = [_cell(r.get(c)) for c in t.columns]
        if show_orders:
            o = t.orders[i - 1] if i >= 1 else {}
            line += [_cell(o.get(c)) for c in t.order_columns]
        w.writerow(line)
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4e}" if v != 0 and (abs(v) < 1e-3 or abs(v) >= 1e4) else f"{v:.4g}"
    return "" if v is None else str(v)


def _markdown_text(t):
    show_orders = len(t.rows) >= 2 and t.order_columns
    header = list(t.columns) + ([f"order_{c}" for c in t.order_columns] if show_orders else [])
    out = [f"## {t.name}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for i, r in enumerate(t.rows):
        line = [_fmt(r.get(c)) for c in t.columns]
        if show_orders:
            o = t.orders[i - 1] if i >= 1 else {}
            line += [_fmt(o.get(c)) for c in t.order_columns]
        out.append("| " + " | ".join(line) + " |")
    return "\n".join(out) + "\n"


def emit_tables(tables, fmt="csv", out="."):
    """Write each table to ``out/<name>.<ext>``; returns the written paths."""
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}")
    if isinstance(tables, Table):
        tables = [tables]
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    ext = {"csv": "csv", "json": "json", "markdown": "md"}[fmt]
    paths = []
    for t in tables:
        if fmt == "csv":
            text = _csv_text(t)
        elif fmt == "json":
            text = json.dumps(t.to_dict(), indent=1, allow_nan=True) + "\n"
        else:
            text = _markdown_text(t)
        p = outdir / f"{t.name}.{ext}"
        p.write_text(text)
        paths.append(p)
    return paths


def read_table(path):
    return Table.from_dict(json.loads(Path(path).read_text()))


# -- studies ---------------------------------------------------------------------

def _families(cfg, default):
    fams = [cfg.family] if cfg.family else list(default)
    if cfg.shape:
        fams = [f for f in fams if family_shape(f) == cfg.shape]
    return fams


def _degrees(cfg, fam):
    lo = 1 if fam.startswith("BDM") else 0
    if cfg.k is not None:
        return [cfg.k] if cfg.k >= lo else []
    return list(range(lo, 4))


def study_verify(cfg, constants=False):
    from .spaces import get_local_spaces
    from .verify import inequality_constants, verify_mdecomposition

    rows = []
    ok = True
    for fam in _families(cfg, FAMILIES):
        for k in _degrees(cfg, fam):
            sp = get_local_spaces(fam, k, np.eye(2))
            rep = verify_mdecomposition(sp)
            row = {"family": fam, "k": k, "pass": rep.passed, "max_residual": rep.max_residual,
                   "dim_V": sp.nV, "dim_W": sp.nW, "dim_M": sp.nM, "dim_MS": sp.Ms.shape[0]}
            if constants:
                row["C_H1"], row["C_PF"] = inequality_constants(sp)
            ok &= rep.passed
            rows.append(row)
            log.info("%s%d: %s (max residual %.2e)", fam, k, "pass" if rep.passed else "FAIL", rep.max_residual)
    cols = ["family", "k", "pass", "max_residual", "dim_V", "dim_W", "dim_M", "dim_MS"]
    if constants:
        cols += ["C_H1", "C_PF"]
    return [Table("constants" if constants else "verify", cols, rows, ok=ok)]


def _diffusion_level(args):
    from .diffusion import conservation_check, l2_errors, residuals, sine_problem, solve_diffusion
    from .mesh import build_structured_mesh

    fam, k, n, alpha = args
    u, q, f = sine_problem()
    mesh = build_structured_mesh(family_shape(fam), n)
    sol = solve_diffusion(mesh, fam, k, f=f, g=u, alpha_mode=alpha)
    eu, eq = l2_errors(sol, u, q)
    res = residuals(sol)
    return {"family": fam, "k": k, "n": n, "h": mesh.h, "n_trace_dofs": sol.spaces.n_trace,
            "err_u": eu, "err_q": eq, "conservation": conservation_check(sol),
            "residual": max(res.values())}


def study_diffusion(cfg):
    from .analysis import observed_orders

    tables = []
    ok = True
    fams = _families(cfg, ("RT", "HDG"))
    for fam in fams:
        for k in ([cfg.k] if cfg.k is not None else [1]):
            rows = _map(_diffusion_level, [(fam, k, n, cfg.alpha_mode) for n in cfg.levels])
            good = all(r["conservation"] <= 1e-11 and r["residual"] <= 1e-10 for r in rows)
            ok &= good
            cols = ["family", "k", "n", "h", "n_trace_dofs", "err_u", "err_q", "conservation", "residual"]
            tables.append(Table(f"diffusion_{fam}{k}", cols, rows, ["err_u", "err_q"],
                                observed_orders(rows, ["err_u", "err_q"]), {"alpha_mode": cfg.alpha_mode}, good))
    return tables


def _flow_level(args):
    from .analysis import error_report, manufactured_problem
    from .mesh import build_structured_mesh
    from .navierstokes import NSDiscretization, solve_navier_stokes, solve_stokes

    kind, fam, k, n, cfg = args
    prob = manufactured_problem(cfg.manufactured, cfg.nu)
    mesh = build_structured_mesh(family_shape(fam), n)
    disc = NSDiscretization(mesh, fam, k)
    g = None if prob.homogeneous else prob.u
    if kind == "stokes":
        # Stokes data: drop the convective part of the forcing
        sol = solve_stokes(mesh, fam, k, cfg.nu, f=prob.f_stokes, g=g, disc=disc)
        iters, ratio, checks = 1, None, True
    else:
        try:
            sol = solve_navier_stokes(mesh, fam, k, cfg.nu, f=prob.f, g=g, tol=cfg.tol, maxit=cfg.maxit,
                                      relaxation=cfg.omega, disc=disc)
        except NonConvergence as exc:
            log.error("n=%d: %s", n, exc)
            return {"n": n, "h": mesh.h, "converged": False, "iterations": len(exc.trace)}
        iters = len(sol.trace)
        ratios = [t["ratio"] for t in sol.trace if t["ratio"] is not None]
        ratio = ratios[-1] if ratios else None
        checks = all(t["energy_ok"] for t in sol.trace) or not prob.homogeneous
    row = error_report(disc.spaces, sol, prob)
    div_b, jump = disc.beta_diagnostics(disc.postprocess(sol.u, sol.uhat))
    pnorm = float(np.linalg.norm(sol.p))
    pm = abs(disc.pressure_mean(sol.p))
    inv_ok = div_b <= 1e-10 and jump <= 1e-10 and pm <= 1e-12 * max(pnorm, 1e-300) and checks
    row.update({"n": n, "converged": True, "iterations": iters, "last_ratio": ratio, "max_div_beta": div_b,
                "beta_jump": jump, "pressure_mean": pm, "invariants_ok": bool(inv_ok)})
    return row


def study_flow(cfg, kind):
    from .analysis import ORDER_COLUMNS, observed_orders

    default = ("HDG",)
    tables = []
    ok = True
    for fam in _families(cfg, default):
        for k in ([cfg.k] if cfg.k is not None else [1]):
            if k < 1:
                raise ConfigError("field 'k': flow problems need k >= 1")
            rows = _map(_flow_level, [(kind, fam, k, n, cfg) for n in cfg.levels])
            good = all(r.get("converged") and r.get("invariants_ok") for r in rows)
            ok &= good
            cols = ["n", "h", "n_elements", "n_trace_dofs", "converged", "iterations", "last_ratio",
                    *ORDER_COLUMNS, "max_div_beta", "beta_jump", "pressure_mean", "energy", "invariants_ok"]
            conv = [r for r in rows if r.get("converged")]
            orders = observed_orders(conv, ORDER_COLUMNS) if len(conv) == len(rows) else []
            name = f"{'ns' if kind == 'ns' else 'stokes'}_{cfg.manufactured}_{fam}{k}"
            tables.append(Table(name, cols, rows, list(ORDER_COLUMNS), orders,
                                {"nu": cfg.nu, "tol": cfg.tol, "omega": cfg.omega}, good))
    return tables


def run_study(cfg):
    """Run one configured study; returns (exit status, written paths)."""
    np.random.seed(cfg.seed)
    if cfg.problem == "verify-spaces":
        tables = study_verify(cfg)
    elif cfg.problem == "inequality-constants":
        tables = study_verify(cfg, constants=True)
    elif cfg.problem == "diffusion":
        tables = study_diffusion(cfg)
    elif cfg.problem == "stokes":
        tables = study_flow(cfg, "stokes")
    else:
        tables = study_flow(cfg, "ns")
    paths = emit_tables(tables, cfg.format, cfg.out)
    for p in paths:
        log.info("wrote %s", p)
    return (0 if all(t.ok for t in tables) else 1), paths


# -- argument parsing ----------------------------------------------------------------

def _levels(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="mdhdg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("verify", "certify M-decompositions of the local spaces"),
                        ("constants", "discrete H1 / Poincare-Friedrichs constants"),
                        ("diffusion", "diffusion convergence study"),
                        ("stokes", "Stokes convergence study"),
                        ("ns", "Navier-Stokes convergence study")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--family")
        s.add_argument("--k", type=int)
        s.add_argument("--shape", choices=("triangle", "square"))
        s.add_argument("--levels", type=_levels)
        s.add_argument("--nu", type=float)
        s.add_argument("--alpha-mode", dest="alpha_mode")
        s.add_argument("--problem-name", dest="manufactured", choices=("trig", "kovasznay"))
        s.add_argument("--tol", type=float)
        s.add_argument("--maxit", type=int)
        s.add_argument("--omega", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--format", choices=FORMATS)
    r = sub.add_parser("report", help="re-emit saved JSON tables in another format")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--format", choices=FORMATS, default="markdown")
    r.add_argument("--out", default=".")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            tables = [read_table(p) for p in args.inputs]
            emit_tables(tables, args.format, args.out)
            return 0 if all(t.ok for t in tables) else 1
        over = {f.name: getattr(args, f.name, None) for f in fields(StudyConfig)}
        over.pop("problem")
        cfg = make_config(SUBCOMMAND_PROBLEM[args.command], args.config, over)
        log.info("config %s", json.dumps(asdict(cfg), sort_keys=True))
        status, _ = run_study(cfg)
        return status
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        log.error("%s", exc)
        return 2
    except HDGError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
