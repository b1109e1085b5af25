"""Command-line front end: theory curves, simulations and diagnostics.

Every command writes a CSV (and an SVG plot where it makes sense) into
``--out``.  Exit codes: 0 success, 2 usage error, 3 every row failed,
4 numerical error.
"""
import argparse
import csv
import itertools
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .data import DESIGN_KINDS, DataModel, DesignLaw, NoiseLaw
from .errors import DomainError, NumericalError, SubevoError
from .losses import LossModel
from .quadrature import QuadratureSpec
from .resampling import (bivariate_prox_diagnostic, run_bagging_experiment,
                         run_pair_experiment, subset_size, worker_count)
from .state_evolution import (RegimeParams, affine_reference, bagged_risk_limit, risk_curve,
                              solve_eta, solve_system)

EXIT_OK, EXIT_USAGE, EXIT_ALL_FAILED, EXIT_NUMERICAL = 0, 2, 3, 4

CURVE_COLUMNS = ("mode", "loss", "delta", "noise_df", "noise_scale", "signal_norm", "design")
THEORY_COLUMNS = ("q", "eta", "sigma2", "gamma", "a", "eta_sigma2", "status") + CURVE_COLUMNS
PAIR_COLUMNS = ("q", "n", "p", "reps", "ok", "failed",
                "corr_mean", "corr_sd", "corr_se", "inner_mean", "inner_sd", "inner_se",
                "est_eta_sigma2_mean", "est_eta_sigma2_se", "est_sigma2_mean", "est_sigma2_se",
                "theory_eta", "theory_sigma2", "theory_eta_sigma2", "status") + CURVE_COLUMNS
BAGGING_COLUMNS = ("q", "n", "p", "M", "reps", "ok", "failed",
                   "bagged_risk_mean", "bagged_risk_sd", "bagged_risk_se",
                   "max_decomposition_gap", "theory_risk", "status") + CURVE_COLUMNS
DIAGNOSTIC_COLUMNS = ("q", "n", "p", "overlap", "eta", "sigma", "gamma", "a",
                      "ks_first", "ks_second", "ks_between",
                      "corr_empirical", "corr_reference", "corr_gap", "status") + CURVE_COLUMNS

# each recipe is a list of argument vectors replayed through the normal commands
RECIPES = {
    "fig1": [["theory", "--mode", "robust", "--loss", "huber", "--noise-df", "2",
              "--noise-scale", "1,1.5,2,5,10", "--delta", "5", "--q-grid", "0.22:1:0.02"]],
    "fig2": [["simulate-pair", "--mode", "robust", "--loss", "huber", "--noise-df", "2",
              "--noise-scale", "3", "--n", "5000", "--p", "1000", "--reps", "100",
              "--q-grid", "0.3:1:0.1"]],
    "fig3": [["simulate-pair", "--mode", "logistic", "--signal-norm", "1,2",
              "--n", "5000", "--p", "500", "--reps", "100", "--q-grid", "0.4:1:0.1"]],
    "figA1": [["theory", "--mode", "robust", "--loss", "huber", "--noise-df", "3",
               "--noise-scale", "1,1.5,2,5,10", "--delta", "5", "--q-grid", "0.22:1:0.02"]],
    "figA2": [["simulate-pair", "--mode", "robust", "--loss", "pseudo_huber",
               "--noise-df", "2", "--noise-scale", "4", "--n", "5000", "--p", "1000",
               "--reps", "10", "--q-grid", "0.3:1:0.1"]],
    "figA3": [["simulate-pair", "--mode", "robust", "--loss", "huber", "--noise-df", "2",
               "--noise-scale", "3", "--n", "500", "--p", "100", "--reps", "100",
               "--q-grid", "0.3:1:0.1", "--tag", "figA3_n500"],
              ["simulate-pair", "--mode", "robust", "--loss", "huber", "--noise-df", "2",
               "--noise-scale", "3", "--n", "1000", "--p", "200", "--reps", "100",
               "--q-grid", "0.3:1:0.1", "--tag", "figA3_n1000"]],
    "figA4": [["simulate-pair", "--mode", "robust", "--loss", "huber", "--noise-df", "2",
               "--noise-scale", "1", "--n", "5000", "--p", "1000", "--reps", "100",
               "--design", "rademacher,uniform,student_t", "--q-grid", "0.3:1:0.1"]],
    "figB": [["theory", "--mode", "logistic", "--delta", "15,20,25,30",
              "--signal-norm", "0,0.1,0.2,0.3,0.4", "--q-grid", "0.1:1:0.02"]],
}


class UsageError(Exception):
    pass


def parse_grid(text):
    """``start:stop:step`` (stop included) or a comma list; values rounded to 10 places."""
    text = text.strip()
    if not text:
        raise UsageError("empty q grid")
    if ":" in text:
        try:
            start, stop, step = (float(x) for x in text.split(":"))
        except ValueError:
            raise UsageError(f"q grid must be start:stop:step, got {text!r}")
        if not step > 0:
            raise UsageError("q grid step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        values = [round(start + k * step, 10) for k in range(max(count, 0))]
    else:
        values = [round(v, 10) for v in parse_floats(text)]
    if not values:
        raise UsageError("empty q grid")
    bad = [v for v in values if not 0 < v <= 1]
    if bad:
        raise UsageError(f"q values must lie in (0, 1], got {bad[0]:g}")
    return values


def parse_floats(text):
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}")
    if not out:
        raise UsageError("empty list")
    return out


def parse_words(text):
    return [w.strip() for w in text.split(",") if w.strip()]


@dataclass(frozen=True)
class ExperimentConfig:
    """One curve: a fully validated model, loss and sampling setting."""

    command: str
    model: DataModel
    loss: LossModel
    delta: float
    q_grid: tuple
    n: int
    p: int
    M: int
    reps: int
    seed: int
    quad: QuadratureSpec
    noise_df: float
    noise_scale: float

    def curve_fields(self):
        signal = self.model.signal_norm if self.model.mode == "logistic" else float("nan")
        df = self.noise_df if self.model.mode == "robust" else float("nan")
        scale = self.noise_scale if self.model.mode == "robust" else float("nan")
        return {"mode": self.model.mode, "loss": self.loss.name, "delta": self.delta,
                "noise_df": df, "noise_scale": scale, "signal_norm": signal,
                "design": self.model.design.kind}

    def label(self):
        if self.model.mode == "robust":
            parts = [f"scale={self.noise_scale:g}"]
        else:
            parts = [f"nu={self.model.signal_norm:g}"]
        parts.append(f"delta={self.delta:g}")
        if self.model.design.kind != "gaussian":
            parts.append(self.model.design.kind)
        return ", ".join(parts)


def _common(parser):
    parser.add_argument("--mode", choices=("robust", "logistic"), default="robust")
    parser.add_argument("--loss", default=None,
                        help="huber, pseudo_huber, scaled_pseudo_huber or logistic")
    parser.add_argument("--lam", type=float, default=1.0,
                        help="lambda of the scaled pseudo-Huber loss")
    parser.add_argument("--noise-df", default="2", help="t degrees of freedom (list allowed)")
    parser.add_argument("--noise-scale", default="1", help="noise scale (list allowed)")
    parser.add_argument("--signal-norm", default="1", help="logistic |beta*| (list allowed)")
    parser.add_argument("--delta", default=None, help="n/p (list allowed for theory)")
    parser.add_argument("--q", default=None, help="single q or comma list")
    parser.add_argument("--q-grid", default=None, help="start:stop:step, stop included")
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--p", type=int, default=None)
    parser.add_argument("--M", type=int, default=10)
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--design", default="gaussian",
                        help="gaussian, rademacher, uniform or student_t (list allowed)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--scale", type=float, default=1.0,
                        help="multiply n, p and reps by this factor")
    parser.add_argument("--gh-nodes", type=int, default=QuadratureSpec.gh_nodes)
    parser.add_argument("--gl-nodes", type=int, default=QuadratureSpec.gl_nodes)
    parser.add_argument("--tag", default=None, help=argparse.SUPPRESS)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="subevo",
        description="Asymptotics of subsampled M-estimators: theory and simulation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("theory", "solve the state evolution over a q grid"),
                       ("simulate-pair", "two-subsample correlation experiment"),
                       ("simulate-bagging", "risk of the bagged estimate"),
                       ("diagnostic", "bivariate prox diagnostic on the overlap")):
        _common(sub.add_parser(name, help=text))
    fig = sub.add_parser("figure", help="run a stored recipe")
    fig.add_argument("recipe", choices=sorted(RECIPES))
    fig.add_argument("--out", default=".")
    fig.add_argument("--scale", type=float, default=1.0)
    fig.add_argument("--seed", type=int, default=0)
    return parser


def _scaled(value, factor, floor):
    return max(floor, int(round(value * factor)))


def build_configs(args):
    """Expand list-valued options into validated :class:`ExperimentConfig` objects."""
    if args.q_grid is not None and args.q is not None:
        raise UsageError("give --q or --q-grid, not both")
    if args.q_grid is not None:
        q_grid = parse_grid(args.q_grid)
    elif args.q is not None:
        q_grid = parse_grid(args.q)
    else:
        raise UsageError("--q or --q-grid is required")
    if not args.scale > 0:
        raise UsageError("--scale must be positive")
    quad = QuadratureSpec(args.gh_nodes, args.gl_nodes)
    loss_name = args.loss or ("huber" if args.mode == "robust" else "logistic")
    loss = LossModel.from_name(loss_name, args.lam)
    if loss.is_robust != (args.mode == "robust"):
        raise UsageError(f"loss {loss_name!r} does not fit mode {args.mode!r}")
    designs = parse_words(args.design) or ["gaussian"]
    for d in designs:
        if d not in DESIGN_KINDS:
            raise UsageError(f"unknown design {d!r}")
    theory = args.command == "theory"
    n, p = args.n, args.p
    if not theory:
        if p is None:
            p = 200
        if n is None:
            deltas = parse_floats(args.delta or "5")
            if len(deltas) != 1:
                raise UsageError("simulations take a single --delta")
            n = int(round(deltas[0] * p))
        n, p = _scaled(n, args.scale, 2), _scaled(p, args.scale, 1)
        deltas = [n / p]
        if args.delta is not None and args.n is not None:
            given = parse_floats(args.delta)
            if len(given) != 1 or abs(given[0] - args.n / (args.p or 200)) > 1e-9:
                raise UsageError("--delta disagrees with --n / --p")
        reps = _scaled(args.reps, args.scale, 2)
        for q in q_grid:
            if subset_size(n, q) <= p:
                raise UsageError(f"floor(q n) must exceed p; fails at q = {q:g}")
        if args.M < 1:
            raise UsageError("--M must be at least 1")
    else:
        deltas = parse_floats(args.delta or "5")
        n = p = 0
        reps = 0
    if args.mode == "robust":
        dfs, scales = parse_floats(args.noise_df), parse_floats(args.noise_scale)
        signals = [0.0]
    else:
        dfs, scales = [float("nan")], [float("nan")]
        signals = parse_floats(args.signal_norm)
    configs = []
    for delta, df, sc, nu, design in itertools.product(deltas, dfs, scales, signals, designs):
        law = DesignLaw(design)
        if args.mode == "robust":
            model = DataModel.robust(NoiseLaw(df, sc), law)
        else:
            model = DataModel.logistic(nu, law)
        if not delta > 0:
            raise UsageError("--delta must be positive")
        configs.append(ExperimentConfig(args.command, model, loss, delta, tuple(q_grid), n, p,
                                        args.M, reps, args.seed, quad, df, sc))
    return configs


def _fmt(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return "nan"
    return repr(v) if v == int(v) and abs(v) < 1e15 else f"{v:.12g}"


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _figure(nrows=1, ncols=2):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(nrows, ncols, figsize=(5 * ncols, 4 * nrows), squeeze=False)
    return plt, fig, axes.ravel()


def _save(plt, fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _theory_point(cfg, q):
    params = RegimeParams(cfg.delta, q, cfg.model, cfg.loss, cfg.quad)
    state = solve_system(params)
    return state, solve_eta(params, state).eta


def cmd_theory(configs, out, tag):
    rows = []
    for cfg in configs:
        valid = [q for q in cfg.q_grid if _valid_params(cfg, q)]
        base = RegimeParams(cfg.delta, valid[0], cfg.model, cfg.loss, cfg.quad) \
            if valid else None
        if base is None:
            rows += [dict(q=q, eta=np.nan, sigma2=np.nan, gamma=np.nan, a=np.nan,
                          eta_sigma2=np.nan, status="invalid", **cfg.curve_fields())
                     for q in cfg.q_grid]
            continue
        for r in risk_curve(base, cfg.q_grid):
            rows.append(dict(q=r.q, eta=r.eta, sigma2=r.sigma2, gamma=r.gamma, a=r.a,
                             eta_sigma2=r.eta_sigma2, status=r.status, **cfg.curve_fields()))
    write_csv(os.path.join(out, f"{tag}.csv"), THEORY_COLUMNS, rows)
    plt, fig, (ax1, ax2) = _figure()
    for cfg in configs:
        sel = [r for r in rows if r["status"] == "ok" and _same_curve(r, cfg)]
        q = [r["q"] for r in sel]
        ax1.plot(q, [r["eta"] for r in sel], label=cfg.label())
        ax2.plot(q, [r["eta_sigma2"] for r in sel], label=cfg.label())
    robust = [c for c in configs if c.model.mode == "robust"]
    for delta in sorted({c.delta for c in robust}):
        qq = np.linspace(1.0 / delta, 1.0, 100)
        ax1.plot(qq, affine_reference(qq, delta), "k--", lw=1, label=f"affine, delta={delta:g}")
    ax1.set(xlabel="q", ylabel="eta")
    ax2.set(xlabel="q", ylabel="sigma^2 eta")
    ax1.legend(fontsize=7)
    ax2.legend(fontsize=7)
    _save(plt, fig, os.path.join(out, f"{tag}.svg"))
    return rows


def _valid_params(cfg, q):
    try:
        RegimeParams(cfg.delta, q, cfg.model, cfg.loss, cfg.quad)
    except DomainError:
        return False
    return True


def _same_curve(row, cfg):
    ref = cfg.curve_fields()
    for k, v in ref.items():
        w = row[k]
        if isinstance(v, str):
            if v != w:
                return False
        elif not (v == w or (math.isnan(v) and math.isnan(w))):
            return False
    return True


def _stats(records, attr):
    vals = np.array([getattr(r, attr) for r in records if r.status == "ok"], dtype=float)
    if vals.ndim > 1:
        vals = vals.mean(axis=1)
    if vals.size == 0:
        return np.nan, np.nan, np.nan
    sd = float(vals.std(ddof=1)) if vals.size > 1 else np.nan
    return float(vals.mean()), sd, sd / math.sqrt(vals.size) if vals.size > 1 else np.nan


def _theory_or_nan(cfg, q):
    if not _valid_params(cfg, q):
        return None, np.nan
    try:
        return _theory_point(cfg, q)
    except NumericalError:
        return None, np.nan


def cmd_simulate_pair(configs, out, tag):
    rows = []
    for cfg in configs:
        for q in cfg.q_grid:
            records, summary = run_pair_experiment(cfg.model, cfg.loss, cfg.n, cfg.p, q,
                                                   cfg.reps, cfg.seed)
            state, eta = _theory_or_nan(cfg, q)
            s2 = state.sigma2 if state is not None else np.nan
            corr = _stats(records, "corr")
            inner = _stats(records, "inner")
            row = dict(q=q, n=cfg.n, p=cfg.p, reps=summary.reps, ok=summary.ok,
                       failed=summary.failed,
                       corr_mean=corr[0], corr_sd=corr[1], corr_se=corr[2],
                       inner_mean=inner[0], inner_sd=inner[1], inner_se=inner[2],
                       est_eta_sigma2_mean=summary.mean["est_eta_sigma2"],
                       est_eta_sigma2_se=summary.se["est_eta_sigma2"],
                       est_sigma2_mean=summary.mean["est_sigma2"],
                       est_sigma2_se=summary.se["est_sigma2"],
                       theory_eta=eta, theory_sigma2=s2, theory_eta_sigma2=eta * s2,
                       status="ok" if summary.ok else "all_failed", **cfg.curve_fields())
            rows.append(row)
    write_csv(os.path.join(out, f"{tag}.csv"), PAIR_COLUMNS, rows)
    plt, fig, (ax1, ax2) = _figure()
    for cfg in configs:
        sel = [r for r in rows if _same_curve(r, cfg)]
        q = np.array([r["q"] for r in sel])
        lab = cfg.label()
        ax1.errorbar(q, [r["corr_mean"] for r in sel], yerr=[r["corr_sd"] for r in sel],
                     fmt="o", ms=3, capsize=2, label=f"simulation, {lab}")
        ax1.plot(q, [r["theory_eta"] for r in sel], "-", label=f"theory, {lab}")
        ax2.errorbar(q, [r["inner_mean"] for r in sel], yerr=[r["inner_sd"] for r in sel],
                     fmt="o", ms=3, capsize=2, label=f"simulation, {lab}")
        ax2.plot(q, [r["est_eta_sigma2_mean"] for r in sel], "x", label=f"estimate, {lab}")
        ax2.plot(q, [r["theory_eta_sigma2"] for r in sel], "-", label=f"theory, {lab}")
    ax1.set(xlabel="q", ylabel="correlation")
    ax2.set(xlabel="q", ylabel="inner product")
    ax1.legend(fontsize=7)
    ax2.legend(fontsize=7)
    _save(plt, fig, os.path.join(out, f"{tag}.svg"))
    return rows


def cmd_simulate_bagging(configs, out, tag):
    rows = []
    for cfg in configs:
        for q in cfg.q_grid:
            records, summary = run_bagging_experiment(cfg.model, cfg.loss, cfg.n, cfg.p, q,
                                                      cfg.M, cfg.reps, cfg.seed)
            state, eta = _theory_or_nan(cfg, q)
            if state is None:
                limit = np.nan
            else:
                bias2 = (state.a - cfg.model.signal_norm) ** 2 \
                    if cfg.model.mode == "logistic" else 0.0
                limit = bagged_risk_limit(eta, state.sigma2, cfg.M, bias2)
            risk = _stats(records, "bagged_risk")
            gaps = [abs(r.bagged_risk - r.decomposition) for r in records if r.status == "ok"]
            rows.append(dict(q=q, n=cfg.n, p=cfg.p, M=cfg.M, reps=summary.reps, ok=summary.ok,
                             failed=summary.failed, bagged_risk_mean=risk[0],
                             bagged_risk_sd=risk[1], bagged_risk_se=risk[2],
                             max_decomposition_gap=max(gaps) if gaps else np.nan,
                             theory_risk=limit,
                             status="ok" if summary.ok else "all_failed",
                             **cfg.curve_fields()))
    write_csv(os.path.join(out, f"{tag}.csv"), BAGGING_COLUMNS, rows)
    plt, fig, axes = _figure(1, 1)
    ax = axes[0]
    for cfg in configs:
        sel = [r for r in rows if _same_curve(r, cfg)]
        q = [r["q"] for r in sel]
        ax.errorbar(q, [r["bagged_risk_mean"] for r in sel],
                    yerr=[r["bagged_risk_sd"] for r in sel], fmt="o", ms=3, capsize=2,
                    label=f"simulation, {cfg.label()}")
        ax.plot(q, [r["theory_risk"] for r in sel], "-", label=f"theory, {cfg.label()}")
    ax.set(xlabel="q", ylabel=f"bagged risk (M={configs[0].M})")
    ax.legend(fontsize=7)
    _save(plt, fig, os.path.join(out, f"{tag}.svg"))
    return rows


def cmd_diagnostic(configs, out, tag):
    rows = []
    for cfg in configs:
        for q in cfg.q_grid:
            rep = bivariate_prox_diagnostic(cfg.model, cfg.loss, cfg.n, cfg.p, q, cfg.seed,
                                            quad=cfg.quad)
            rows.append(dict(q=q, n=cfg.n, p=cfg.p, overlap=rep.overlap, eta=rep.eta,
                             sigma=rep.sigma, gamma=rep.gamma, a=rep.a,
                             ks_first=rep.ks_first, ks_second=rep.ks_second,
                             ks_between=rep.ks_between, corr_empirical=rep.corr_empirical,
                             corr_reference=rep.corr_reference, corr_gap=rep.corr_gap,
                             status="ok", **cfg.curve_fields()))
    write_csv(os.path.join(out, f"{tag}.csv"), DIAGNOSTIC_COLUMNS, rows)
    return rows


COMMANDS = {"theory": cmd_theory, "simulate-pair": cmd_simulate_pair,
            "simulate-bagging": cmd_simulate_bagging, "diagnostic": cmd_diagnostic}


def run(argv):
    """Parse and execute; returns the exit code (argparse errors raise SystemExit(2))."""
    args = build_parser().parse_args(argv)
    if args.command == "figure":
        codes = []
        for recipe in RECIPES[args.recipe]:
            extra = ["--out", args.out, "--scale", repr(args.scale), "--seed", str(args.seed)]
            if "--tag" not in recipe:
                extra += ["--tag", args.recipe]
            codes.append(run(recipe + extra))
        return max(codes)
    try:
        worker_count()
        configs = build_configs(args)
    except (UsageError, DomainError) as exc:
        print(f"subevo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    tag = args.tag or args.command.replace("-", "_")
    try:
        rows = COMMANDS[args.command](configs, args.out, tag)
    except NumericalError as exc:
        print(f"subevo: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SubevoError as exc:
        print(f"subevo: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if not any(r["status"] == "ok" for r in rows):
        print("subevo: every row failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


def main(argv=None):
    sys.exit(run(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
