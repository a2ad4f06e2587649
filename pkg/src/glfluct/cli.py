"""Command-line front end: predict | simulate | compare | validate | parse | calibrate.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import (
    QuadratureError,
    SigmaResult,
    exact_fluctuation_moment,
    sigma_closed_poly,
    sigma_direct,
    sigma_free,
)
from .intertwine import DimensionCapError, IndexMismatchError, RSParams
from .matrix_lab import (
    SCHEMES,
    SimConfig,
    SimulationError,
    _z,
    estimate,
    fluctuation_moment,
    poly_values,
    simulate_paths,
)
from .trace_algebra import Letter, ParseError, TracePoly, conjugate, format_poly, parse

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
Z_GATE = 4.0
AGREE_TOL = 1e-7


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    r: float = 1.0
    s: float = 0.0
    T: list = field(default_factory=lambda: [1.0])
    polys: list = field(default_factory=list)
    N: list = field(default_factory=lambda: [64])
    samples: int = 2000
    steps: int = 200
    scheme: str = "multiplicative_exp"
    seed: int = 0
    dmax: int | None = None
    tol: float = 1e-9
    batches: int = 20
    out: str = "out"
    format: str = "csv"

    @property
    def rs(self) -> RSParams:
        return RSParams(self.r, self.s)

    @property
    def times(self) -> dict:
        return {j + 1: float(t) for j, t in enumerate(self.T)}

    def parsed(self) -> list:
        J = set(self.times)
        out = []
        for text in self.polys:
            try:
                out.append(parse(text, J))
            except ParseError as e:
                raise ConfigError(f"cannot parse {text!r}: {e}") from e
        return out

    def validate(self) -> list:
        if not (self.r >= 0 and self.s >= 0 and self.r + self.s > 0):
            raise ConfigError("need r, s >= 0 and r + s > 0")
        if not self.T or any(not (t >= 0 and math.isfinite(t)) for t in self.T):
            raise ConfigError("T must be a nonempty list of finite nonnegative times")
        if any(int(n) < 1 for n in self.N):
            raise ConfigError("N must be >= 1")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if self.samples < 1 or self.steps < 1 or self.batches < 2:
            raise ConfigError("samples, steps must be >= 1 and batches >= 2")
        Ps = self.parsed()
        if Ps:
            degs = sorted((P.degree for P in Ps), reverse=True)
            need = degs[0] + (degs[1] if len(degs) > 1 else degs[0])
            if self.dmax is not None and self.dmax < need:
                raise ConfigError(f"dmax={self.dmax} below the covariance degree {need}")
        return Ps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> dict:
    import yaml

    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) if str(path).endswith((".yml", ".yaml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return data


def build_config(args) -> RunConfig:
    data = load_config(args.config) if getattr(args, "config", None) else {}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("r", "s", "samples", "steps", "scheme", "seed", "dmax", "tol", "out", "format", "batches"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    if getattr(args, "T", None):
        data["T"] = args.T
    if getattr(args, "N", None):
        data["N"] = args.N
    if getattr(args, "poly", None):
        data["polys"] = args.poly
    for key in ("T", "N"):
        if key in data and not isinstance(data[key], list):
            data[key] = [data[key]]
    try:
        cfg = RunConfig(**data)
        cfg.N = [int(n) for n in cfg.N]
        cfg.T = [float(t) for t in cfg.T]
        cfg.r, cfg.s, cfg.tol = float(cfg.r), float(cfg.s), float(cfg.tol)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


# --------------------------------------------------------------------------
# output helpers


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (str, int)) and not isinstance(x, bool):
        return str(x)
    return repr(float(x))


def write_table(path: Path, cols: list, rows: list, fmt: str, meta: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
        path.with_suffix(".csv").write_text(buf.getvalue())
    else:
        recs = [{c: (v if not isinstance(v, float) or math.isfinite(v) else str(v)) for c, v in zip(cols, row)}
                for row in rows]
        path.with_suffix(".json").write_text(json.dumps(recs, indent=2, sort_keys=True))
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))


def _meta(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "config": cfg.to_dict(), **extra}


def one_variable_coeffs(P: TracePoly):
    """(coeffs, star) if P = sum c_n tr(X^n) or sum c_n tr(X*^n) on a single index, else None."""
    coeffs: dict = {}
    star = None
    idx = P.index_set()
    if len(idx) > 1:
        return None
    for mono, c in P.items():
        if len(mono) == 0:
            continue
        if len(mono) > 1:
            return None
        w = mono[0]
        stars = {l.star for l in w}
        if len(stars) > 1:
            return None
        st = stars.pop()
        if star is not None and st != star:
            return None
        star = st
        coeffs[len(w)] = c
    if not coeffs:
        return None
    out = [0j] * (max(coeffs) + 1)
    for n, c in coeffs.items():
        out[n] = c
    return out, bool(star)


def closed_sigma(P, Q, rs, T, tol):
    """Closed-form sigma(P, Q) when both are one-variable; None otherwise."""
    a, b = one_variable_coeffs(P), one_variable_coeffs(Q)
    if a is None or b is None or P.index_set() != Q.index_set():
        return None
    (p, sp), (q, sq) = a, b
    Tj = T[next(iter(P.index_set()))]
    if not sp and sq:
        return sigma_closed_poly(p, [np.conj(c) for c in q], "mixed", rs, Tj, tol)
    if sp and not sq:
        return sigma_closed_poly(q, [np.conj(c) for c in p], "mixed", rs, Tj, tol)
    if not sp:
        return sigma_closed_poly(p, q, "plain", rs, Tj, tol)
    return sigma_closed_poly([np.conj(c) for c in p], [np.conj(c) for c in q], "star_star", rs, Tj, tol)


def sigma_rows(Ps, rs, T, tol, corrupt: float = 1.0):
    """Rows (kind, i, j, method, N, re, im, est_error) for the limit sigma, plus agreement failures."""
    rows, failures = [], []
    conj = [conjugate(P) for P in Ps]
    k = len(Ps)
    for kind, right in (("cov", conj), ("pcov", Ps)):
        for i in range(k):
            for j in range(i if kind == "pcov" else 0, k):
                res: list[SigmaResult] = [sigma_direct(Ps[i], right[j], rs, T, tol), sigma_free(Ps[i], right[j], rs, T, tol)]
                c = closed_sigma(Ps[i], right[j], rs, T, tol)
                if c is not None:
                    res.append(c)
                for r in res:
                    v = r.value * corrupt
                    rows.append([kind, format_poly(Ps[i]), format_poly(Ps[j]), r.method, "inf",
                                 v.real, v.imag, r.est_error])
                diff = max(abs(a.value - b.value) for a in res for b in res)
                if diff > max(AGREE_TOL, 10 * tol):
                    failures.append(f"{kind}({format_poly(Ps[i])}, {format_poly(Ps[j])}): methods differ by {diff:.3e}")
    return rows, failures


SIGMA_COLS = ["kind", "poly_i", "poly_j", "method", "N", "re", "im", "est_error"]


# --------------------------------------------------------------------------
# commands


def cmd_predict(cfg: RunConfig, args) -> int:
    Ps = cfg.validate()
    if not Ps:
        raise ConfigError("no test functions")
    rs, T = cfg.rs, cfg.times
    rows, failures = sigma_rows(Ps, rs, T, cfg.tol)
    conj = [conjugate(P) for P in Ps]
    for N in cfg.N:
        for kind, right in (("cov", conj), ("pcov", Ps)):
            for i in range(len(Ps)):
                for j in range(i if kind == "pcov" else 0, len(Ps)):
                    v = exact_fluctuation_moment([Ps[i], right[j]], rs, T, N)
                    rows.append([kind, format_poly(Ps[i]), format_poly(Ps[j]), "exact", N, v.real, v.imag, 0.0])
    out = Path(cfg.out) / "predict"
    write_table(out, SIGMA_COLS, rows, cfg.format, _meta(cfg, "predict", agreement_failures=failures))
    for row in rows:
        if row[3] == "direct" and row[0] == "cov":
            print(f"sigma({row[1]}, ({row[2]})*) = {row[5]:.10g}{row[6]:+.3g}i")
    if failures:
        for f in failures:
            print("FAIL", f, file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _sim_config(cfg: RunConfig, **over) -> SimConfig:
    if len(cfg.N) != 1:
        raise ConfigError("simulation needs a single N")
    kw = dict(N=cfg.N[0], rs=cfg.rs, T=cfg.times, steps_per_unit_time=cfg.steps, samples=cfg.samples,
              scheme=cfg.scheme, seed=cfg.seed)
    kw.update(over)
    return SimConfig(**kw)


def cmd_simulate(cfg: RunConfig, args) -> int:
    Ps = cfg.validate()
    scfg = _sim_config(cfg)
    ds = simulate_paths(scfg, workers=args.workers)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if getattr(args, "save_dataset", False):
        ds.save(outdir / "paths.glbm")
    if Ps:
        rep = estimate(ds, Ps, batches=cfg.batches, exact=True, limit=False, tol=cfg.tol)
        ext = "csv" if cfg.format == "csv" else "json"
        rep.write(outdir / f"simulate.{ext}", cfg.format)
        (outdir / "simulate.meta.json").write_text(json.dumps(_meta(cfg, "simulate"), indent=2, sort_keys=True))
        for row in rep.mean_rows():
            print(f"{row[0]}: mean {row[1]:.6f}{row[2]:+.6f}i  pred {row[4]:.6f}{row[5]:+.6f}i  z={row[6]:.2f}")
    return EXIT_OK


COMPARE_COLS = ["row", "quantity", "poly_i", "poly_j", "re_est", "im_est", "stderr",
                "re_exact", "im_exact", "z_exact", "re_limit", "im_limit", "z_limit"]


def cmd_compare(cfg: RunConfig, args) -> int:
    Ps = cfg.validate()
    if not Ps:
        raise ConfigError("no test functions")
    corrupt = float(getattr(args, "corrupt_sigma", None) or 1.0)
    rs, T = cfg.rs, cfg.times
    scfg = _sim_config(cfg)
    N = scfg.N
    ds = simulate_paths(scfg, workers=args.workers)
    V = poly_values(ds, Ps)
    rep = estimate(ds, Ps, batches=cfg.batches, exact=True, limit=True, tol=cfg.tol, values=V)
    rep.cov_limit = rep.cov_limit * corrupt
    rep.pcov_limit = rep.pcov_limit * corrupt
    rows = []
    for m in rep.mean_rows():
        rows.append(["mean", "mean", m[0], "", m[1], m[2], m[3], m[4], m[5], m[6], None, None, None])
    for c in rep.cov_rows():
        rows.append([c[0], "second_moment"] + c[1:])
    # odd moments: E[X_P X_P conj X_P] vanishes in the limit
    for i, P in enumerate(Ps):
        trip = [P, P, conjugate(P)]
        est_c, se_c = fluctuation_moment(ds, trip, batches=cfg.batches,
                                         values=np.stack([V[:, i], V[:, i], np.conj(V[:, i])], axis=1))
        ex = exact_fluctuation_moment(trip, rs, T, N)
        rows.append(["third", "third_moment", format_poly(P), format_poly(P), est_c.real, est_c.imag, se_c,
                     ex.real, ex.imag, float(_z(est_c, ex, se_c)), 0.0, 0.0, float(_z(est_c, 0.0, se_c))])
    sig_rows, failures = sigma_rows(Ps, rs, T, cfg.tol, corrupt=1.0)
    bad = []
    for row in rows:
        for zi in (9, 12):
            z = row[zi]
            if z is not None and not (z <= Z_GATE):
                bad.append(f"{row[0]} {row[2]}, {row[3]}: z={z:.2f} ({COMPARE_COLS[zi]})")
    bad += failures
    out = Path(cfg.out) / "compare"
    write_table(out, COMPARE_COLS, rows, cfg.format,
                _meta(cfg, "compare", z_gate=Z_GATE, failures=bad, degenerate=rep.degenerate))
    print(f"compare: {len(rows)} rows, {len(bad)} failures")
    for b in bad:
        print("FAIL", b, file=sys.stderr)
    return EXIT_NUMERIC if bad else EXIT_OK


def cmd_parse(cfg, args) -> int:
    J = set(args.indices) if args.indices else None
    for text in args.expr:
        try:
            P = parse(text, J)
        except ParseError as e:
            raise ConfigError(str(e)) from e
        if args.format == "json":
            terms = [{"monomial": [[[l.index, l.star] for l in w] for w in m],
                      "re": c.real, "im": c.imag} for m, c in P.items()]
            print(json.dumps({"text": format_poly(P), "degree": P.degree, "terms": terms}, sort_keys=True))
        else:
            print(format_poly(P))
    return EXIT_OK


def cmd_validate(cfg, args) -> int:
    from .validation import run_validation

    results = run_validation(convention=args.convention, seed=args.seed or 0, quick=not args.full)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        Path(args.out, "validate.json").write_text(
            json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True))
    print(f"validate: {len(results) - len(failed)}/{len(results)} passed (convention={args.convention})")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_calibrate(cfg, args) -> int:
    """Monte Carlo check of E tr U(t) = e^{-t/2} for unitary Brownian motion."""
    N = args.N[0] if args.N else 16
    times = args.T or [0.5, 1.0, 2.0]
    samples = args.samples or 400
    steps = args.steps or 100
    P = TracePoly.var([Letter(1, False)])
    rows, ok = [], True
    for t in times:
        sc = SimConfig(N=N, rs=(1, 0), T={1: t}, steps_per_unit_time=steps, samples=samples, seed=args.seed or 0)
        ds = simulate_paths(sc)
        v = poly_values(ds, [P])[:, 0]
        n = len(v)
        est, se = v.real.mean(), v.real.std(ddof=1) / math.sqrt(n)
        z_half = abs(est - math.exp(-t / 2)) / se
        z_lit = abs(est - math.exp(-t)) / se
        ok &= z_half <= Z_GATE and z_lit > Z_GATE
        rows.append([t, est, se, math.exp(-t / 2), z_half, math.exp(-t), z_lit])
        print(f"t={t}: E tr U = {est:.5f} +- {se:.5f}; e^(-t/2) z={z_half:.2f}; e^(-t) z={z_lit:.2f}")
    print("convention: generator 1/2 Laplacian" + (" confirmed" if ok else " NOT confirmed"))
    return EXIT_OK if ok else EXIT_NUMERIC


# --------------------------------------------------------------------------


def _common(p, sim=False):
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--r", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--N", type=int, nargs="+")
    p.add_argument("--T", type=float, nargs="+", help="time per index")
    p.add_argument("--poly", action="append", help="trace polynomial, e.g. 'tr(X1 X1*)' (repeatable)")
    p.add_argument("--samples", type=int)
    p.add_argument("--steps", type=int, help="steps per unit time")
    p.add_argument("--seed", type=int)
    p.add_argument("--dmax", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--batches", type=int)
    p.add_argument("--workers", type=int, default=1, help="processes for simulation (results do not depend on it)")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here 2 means numerical failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="glfluct", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("predict", help="limit covariances by three methods, plus exact finite-N values")
    _common(p)
    p = sub.add_parser("simulate", help="simulate the SDE and estimate means and covariances")
    _common(p)
    p.add_argument("--save-dataset", action="store_true", help="also write paths.glbm")
    p = sub.add_parser("compare", help="MC vs exact finite-N vs limit, gated on |z| <= 4")
    _common(p)
    p.add_argument("--corrupt-sigma", type=float, help=argparse.SUPPRESS)
    p = sub.add_parser("validate", help="run the invariant suite")
    p.add_argument("--convention", choices=("half", "paper-literal"), default="half")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="larger sweeps (slower)")
    p.add_argument("--out")
    p = sub.add_parser("parse", help="parse and print canonical trace polynomials")
    p.add_argument("expr", nargs="+")
    p.add_argument("--indices", type=int, nargs="+")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p = sub.add_parser("calibrate", help="Monte Carlo check of the generator convention")
    p.add_argument("--N", type=int, nargs="+")
    p.add_argument("--T", type=float, nargs="+")
    p.add_argument("--samples", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    return ap


COMMANDS = {
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "validate": cmd_validate,
    "parse": cmd_parse,
    "calibrate": cmd_calibrate,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args) if args.command in ("predict", "simulate", "compare") else None
        return COMMANDS[args.command](cfg, args)
    except (SimulationError, QuadratureError, DimensionCapError, FloatingPointError, NumericalFailure) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, IndexMismatchError, FileNotFoundError, ValueError) as e:
        # ValueError: parameter checks in SimConfig and friends
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
