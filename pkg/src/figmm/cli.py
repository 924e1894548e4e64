"""Command-line interface: ``figmm impute|select-g|estimate|variance|simulate``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from .conditional import conditional_penalty, run_em_conditional
from .em import EmConfig, run_em
from .errors import ConfigurationError, FigmmError
from .estimators import parse_estimand, solve_estimating_equation, solve_weighted
from .io import read_csv, read_imputation, write_imputation, write_table
from .jackknife import JackknifeConfig, jackknife
from .select import default_penalty, select_g
from .simulation import ESTIMANDS, METHODS, SimModelSpec, StudyConfig, run_study

log = logging.getLogger("figmm")


@dataclass
class RunConfig:
    seed: int = 0
    M: int = 50
    G: int | None = None
    gmax: int = 8
    max_iter: int = 500
    tol: float = 1e-6
    allocation_mode: str = "deterministic"
    alpha_update: str = "posterior"
    restarts: int = 5
    jackknife: bool = True
    groups: int | None = None
    level: float = 0.95
    missing_token: str = "NA"
    categorical: str | None = None
    log_transform: bool = False
    threads: int | None = None
    output_dir: str = "."

    def validate(self):
        if self.G is not None and self.G < 1:
            raise ConfigurationError("G must be >= 1")
        if self.gmax < 1 or self.gmax > 50:
            raise ConfigurationError("gmax must lie in 1..50")
        if not 0 < self.level < 1:
            raise ConfigurationError("level must lie in (0, 1)")
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if self.groups is not None and self.groups < 2:
            raise ConfigurationError("groups must be >= 2")
        self.em_config()
        return self

    def em_config(self):
        return EmConfig(M=self.M, max_iter=self.max_iter, loglik_rel_tol=self.tol,
                        seed=self.seed, allocation_mode=self.allocation_mode,
                        restarts=self.restarts, alpha_update=self.alpha_update)

    def jk_config(self):
        return JackknifeConfig(level=self.level, groups=self.groups)


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _coerce(name, text):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    text = text.strip()
    if "None" in kind and text.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            return _BOOL[text.lower()]
    except (ValueError, KeyError):
        raise ConfigurationError(f"config key {name!r}: bad value {text!r}") from None
    return text


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    with open(path) as fh:
        for num, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ConfigurationError(f"{path}:{num}: expected key=value")
            if key not in known:
                raise ConfigurationError(f"{path}:{num}: unknown config key {key!r}")
            out[key] = _coerce(key, value)
    return out


def build_config(args):
    values = read_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values).validate()


# --------------------------------------------------------------------------
# shared steps
# --------------------------------------------------------------------------
def _load(cfg, args):
    if not args.input:
        raise ConfigurationError("--input is required")
    return read_csv(args.input, cfg.missing_token, cfg.categorical, log_transform=cfg.log_transform)


def _meta(cfg, data=None, **extra):
    meta = {"figmm_version": __version__, "seed": cfg.seed, "M": cfg.M}
    if data is not None:
        meta.update(n=data.n, p=data.p, columns=" ".join(data.columns))
        if cfg.log_transform:
            meta["scale"] = "log"
    meta.update(extra)
    return meta


def _out(cfg, name):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, name)


def _fit(cfg, data):
    """Fit with the configured G, or select G by BIC first."""
    em = cfg.em_config()
    conditional = data.category is not None
    report = None
    if conditional:
        L = len(data.levels[0])
        if cfg.G is None:
            report = _select_conditional(data, cfg, em, L)
            result = report[1]
            report = report[0]
        else:
            result = run_em_conditional(data, cfg.G, em, seed_key=(cfg.G,))
    elif cfg.G is None:
        report = select_g(data, range(1, min(cfg.gmax, data.n - 1) + 1), em)
        result = report.selected.result
    else:
        result = run_em(data, cfg.G, em, seed_key=(cfg.G,))
    for w in result.warnings:
        log.warning(w)
    return result, report


def _select_conditional(data, cfg, em, L):
    pen = conditional_penalty(L)
    rows, best = [], None
    for G in range(1, min(cfg.gmax, data.n - 1) + 1):
        try:
            res = run_em_conditional(data, G, em, seed_key=(G,))
        except FigmmError as exc:
            log.warning("G=%d failed: %s", G, exc)
            continue
        bic = -2.0 * res.loglik + np.log(data.n) * pen(G, data.p)
        rows.append((G, bic))
        if best is None or bic < best[1] - 1e-9:
            best = (G, bic, res)
    if best is None:
        raise FigmmError("every candidate G failed")
    return _ConditionalReport(rows, best[0]), best[2]


@dataclass
class _ConditionalReport:
    rows: list
    G_hat: int

    def table(self):
        return self.rows


def _estimands(args, data):
    specs = args.estimand or [f"mean:{c}" for c in data.columns]
    return [parse_estimand(s, data.columns) for s in specs]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------
def cmd_impute(cfg, args):
    data = _load(cfg, args)
    result, report = _fit(cfg, data)
    model = result.model
    model.save(_out(cfg, "model.txt"))
    meta = _meta(cfg, data, G=model.G)
    write_imputation(_out(cfg, "imputation.csv"), result.imputation, meta)
    rows = [("G", model.G), ("selected_by_bic", report is not None),
            ("iterations", result.n_iter), ("converged", result.converged),
            ("final_loglik", float(result.loglik)), ("warnings", " | ".join(result.warnings))]
    write_table(_out(cfg, "report.csv"), ["key", "value"], rows, meta)
    return 0


def cmd_select_g(cfg, args):
    data = _load(cfg, args)
    em = cfg.em_config()
    if data.category is not None:
        report, _ = _select_conditional(data, cfg, em, len(data.levels[0]))
        rows = [(G, float(b)) for G, b in report.table()]
    else:
        report = select_g(data, range(1, min(cfg.gmax, data.n - 1) + 1), em)
        rows = [(c.G, float(c.bic) if c.ok else "NA") for c in report.candidates]
        for w in report.warnings:
            log.warning(w)
    rows.append(("selected", report.G_hat))
    write_table(_out(cfg, "bic.csv"), ["G", "BIC"], rows, _meta(cfg, data, gmax=cfg.gmax))
    print(report.G_hat)
    return 0


def cmd_estimate(cfg, args):
    if args.imputation:
        ids, comp, idx, w, v, meta = read_imputation(args.imputation)
        columns = args.columns.split(",") if args.columns else meta.get("columns", "").split()
        if len(columns) != v.shape[1]:
            columns = [f"y{j + 1}" for j in range(v.shape[1])]
        specs = args.estimand or [f"mean:{c}" for c in columns]
        rows = []
        for s in specs:
            U = parse_estimand(s, columns)
            est = solve_weighted(U, v, w).theta_hat[U.primary]
            rows.append((s, float(est)))
        write_table(_out(cfg, "estimates.csv"), ["estimand", "estimate"], rows,
                    {"figmm_version": __version__, "source": os.path.basename(args.imputation)})
        return 0
    data = _load(cfg, args)
    result, _ = _fit(cfg, data)
    rows = []
    for U in _estimands(args, data):
        est = solve_estimating_equation(result.imputation, U).theta_hat[U.primary]
        rows.append((U.name, float(est)))
    write_table(_out(cfg, "estimates.csv"), ["estimand", "estimate"], rows,
                _meta(cfg, data, G=result.model.G))
    return 0


def cmd_variance(cfg, args):
    data = _load(cfg, args)
    result, _ = _fit(cfg, data)
    Us = _estimands(args, data)
    jk = jackknife(data, result.imputation, result.model, Us, cfg.jk_config())
    rows = [(e.name, e.estimate, e.se, float(e.interval[0]), float(e.interval[1]), e.failures)
            for e in jk.estimands]
    if jk.failures:
        log.warning("%d of %d replicates failed to converge", jk.failures, jk.K)
    write_table(_out(cfg, "variance.csv"), ["estimand", "estimate", "se", "lower", "upper",
                                            "replicate_failures"], rows,
                _meta(cfg, data, G=result.model.G, level=cfg.level, replicates=jk.K))
    return 0


def _read_external(path, B):
    """Per-replicate external estimates: columns replicate, estimand, estimate[, lower, upper]."""
    import csv

    est = np.full((B, len(ESTIMANDS)), np.nan)
    lo, hi = est.copy(), est.copy()
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header = rows[0]
    for r in rows[1:]:
        rec = dict(zip(header, r))
        b, j = int(rec["replicate"]), ESTIMANDS.index(rec["estimand"])
        est[b, j] = float(rec["estimate"])
        if rec.get("lower"):
            lo[b, j], hi[b, j] = float(rec["lower"]), float(rec["upper"])
    return est, lo, hi


def cmd_simulate(cfg, args):
    spec = SimModelSpec(args.model, args.n)
    methods = tuple(m.strip() for m in args.methods.split(",")) if args.methods else METHODS
    em = cfg.em_config() if args.config or args.tol is not None else EmConfig(
        M=cfg.M, loglik_rel_tol=1e-5, seed=cfg.seed, restarts=cfg.restarts)
    threads = cfg.threads or os.cpu_count() or 1
    study = StudyConfig(B=args.B, seed=cfg.seed, methods=methods, em=em,
                        jackknife=cfg.jk_config(), gmax=cfg.gmax, level=cfg.level,
                        variance=cfg.jackknife, threads=threads)
    res = run_study(spec, study)
    if args.external:
        name = args.external_name
        res.add_external(name, *_read_external(args.external, args.B))
    rates = res.missing_rates.mean(axis=0)
    meta = {"figmm_version": __version__, "model": spec.model, "n": spec.n, "B": args.B,
            "seed": cfg.seed, "M": em.M, "gmax": cfg.gmax,
            "truth": " ".join(f"{t:.10g}" for t in res.truth),
            "missing_rate_y2": f"{rates[1]:.4f}", "missing_rate_y3": f"{rates[2]:.4f}",
            "failures": " ".join(f"{m}={k}" for m, k in res.failures.items())}
    rows = [(m, e, r, c) for m, e, r, c in res.table()]
    write_table(_out(cfg, "table.csv"), ["method", "estimand", "rmse_ratio", "coverage"], rows, meta)
    hist = sorted(res.g_histogram().items())
    write_table(_out(cfg, "g_histogram.csv"), ["G", "count"], hist, meta)
    return 0


COMMANDS = {"impute": cmd_impute, "select-g": cmd_select_g, "estimate": cmd_estimate,
            "variance": cmd_variance, "simulate": cmd_simulate}


def build_parser():
    parser = argparse.ArgumentParser(prog="figmm", description="Fractional imputation with "
                                     "Gaussian mixture models.")
    parser.add_argument("--version", action="version", version=f"figmm {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="CSV file with a header row")
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--missing-token", dest="missing_token")
    common.add_argument("--threads", type=int)
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--M", type=int, help="imputations per incomplete record")
    common.add_argument("--G", type=int, help="number of components (default: select by BIC)")
    common.add_argument("--gmax", type=int, help="largest G considered by BIC")
    common.add_argument("--tol", type=float, help="relative log-likelihood tolerance")
    common.add_argument("--categorical", help="name of a categorical covariate column")
    common.add_argument("--log-transform", dest="log_transform", action="store_const", const=True)
    common.add_argument("--level", type=float, help="confidence level")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("impute", parents=[common], help="fit the mixture and write fractional imputations")
    sub.add_parser("select-g", parents=[common], help="BIC table over G")
    for name in ("estimate", "variance"):
        p = sub.add_parser(name, parents=[common],
                           help="point estimates" if name == "estimate" else "jackknife variance")
        p.add_argument("--estimand", action="append",
                       help="mean:k, prop:k:c or corr:k:l (column name or 1-based index)")
        if name == "estimate":
            p.add_argument("--imputation", help="existing long-form imputation CSV")
            p.add_argument("--columns", help="comma-separated item names for --imputation")
    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo study")
    p.add_argument("--model", choices=("M1", "M2", "M3", "M4"), default="M1")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--no-jackknife", dest="jackknife", action="store_const", const=False)
    p.add_argument("--external", help="per-replicate estimates from another method (CSV)")
    p.add_argument("--external-name", default="MICE")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="figmm: %(levelname)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "simulate" and args.gmax is None and not args.config:
            cfg.gmax = 6
        return COMMANDS[args.command](cfg, args)
    except (FigmmError, OSError, ValueError) as exc:
        print(f"figmm: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
