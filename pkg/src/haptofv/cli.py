"""Command-line entry point.

Exit codes: 0 pass, 1 verdict failure, 2 config or input error, 3 run abort.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import Monitor
from .io import (
    ConfigError,
    TrajectoryFormatError,
    load_config,
    parse_config,
    load_trajectory,
    save_trajectory,
    write_key_values,
    write_table,
)
from .plotting import plot_diagnostics, plot_loglog, plot_series, plot_state
from .studies import (
    PRESETS,
    Scenario,
    epsilon_study,
    formulation_crosscheck,
    ode_oracle,
    refinement_study,
    weak_study,
)
from .tensor import SingularSampleError, beta_admissible_range, default_battery, fit_divergence_estimate, validate_psd
from .weakcheck import audit, default_library

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("haptofv")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load(args):
    if args.preset and args.config:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        from importlib import resources

        res = resources.files("haptofv").joinpath("presets", f"{args.preset}.cfg")
        if not res.is_file():
            raise ConfigError(f"unknown preset {args.preset!r}; available: {', '.join(PRESETS)}")
        cfg = parse_config(res.read_text(), f"preset:{args.preset}")
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("a config is required (--config PATH or --preset NAME)")
    if args.set:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip().replace(".", "__")] = v.strip()
        cfg = cfg.with_overrides(**overrides)
    scenario = Scenario.from_config(cfg)
    try:
        scenario.validate()
    except SingularSampleError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, scenario


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg["output.dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# --------------------------------------------------------------------------
# run / diagnose


def cmd_run(args) -> int:
    cfg, sc = _load(args)
    out = _out_dir(args, cfg)
    grid = sc.grid()
    monitor = Monitor(sc.tensor(grid), sc.params, grid)
    traj = sc.simulate(hooks=[monitor])
    (out / "config.cfg").write_text(cfg.dumps())
    save_trajectory(out, traj, vtk=cfg["output.vtk"])
    diag = monitor.report(traj.report)
    diag.to_csv(out / "diagnostics.csv")
    summary = {"scenario": sc.name, "nx": grid.nx, "ny": grid.ny, "domain": sc.domain,
               "outputs": len(traj.states), **traj.report.as_dict()}
    summary.update({f"verdict.{v.name}": "PASS" if v.passed else "FAIL" for v in diag.verdicts})
    summary["passed"] = int(diag.passed)
    write_key_values(out / "run_report.txt", summary)
    if cfg["output.figures"] and traj.states:
        final = traj.primal_states()[-1]
        plot_state(final, grid, out / "state_final.png", title=f"t = {final.t:.3g}")
        plot_diagnostics(diag.columns, out / "diagnostics.png")
    _say(args, diag.summary())
    log.info("wall time %.2f s, %d steps", traj.report.wall_time, traj.report.steps)
    if traj.report.aborted:
        print(f"run aborted: {traj.report.abort_reason}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK if diag.passed else EXIT_FAIL


def _trajectory(args, cfg, sc):
    directory = Path(args.trajectory or args.out or cfg["output.dir"])
    grid = sc.grid()
    return load_trajectory(directory, grid, sc.params, sc.tensor(grid)), directory


def cmd_diagnose(args) -> int:
    cfg, sc = _load(args)
    traj, directory = _trajectory(args, cfg, sc)
    out = Path(args.out) if args.out else directory
    out.mkdir(parents=True, exist_ok=True)
    monitor = Monitor(traj.tensor, sc.params, traj.grid)
    for s in traj.states:
        monitor(s)
    diag = monitor.report(traj.report)
    diag.to_csv(out / "diagnostics.csv")
    _say(args, diag.summary())
    return EXIT_OK if diag.passed else EXIT_FAIL


def cmd_weakcheck(args) -> int:
    cfg, sc = _load(args)
    traj, directory = _trajectory(args, cfg, sc)
    out = Path(args.out) if args.out else directory
    out.mkdir(parents=True, exist_ok=True)
    if len(traj.states) < 2:
        raise TrajectoryFormatError("a weak audit needs at least two stored outputs")
    lib = default_library(cfg["weakcheck.k"], sc.params.T, seed=sc.seed, box=traj.grid.domain.bounds)
    system = cfg["weakcheck.system"]
    if system not in ("generated", "target"):
        raise ConfigError(f"weakcheck.system must be generated or target, got {system!r}")
    report = audit(traj, lib, refinement=traj.grid.nx, threads=args.threads, system=system)
    report.to_csv(out / "residuals.csv")
    worst = report.max_residual()
    threshold = cfg["weakcheck.threshold"]
    passed = worst <= threshold
    _say(args, f"{'PASS' if passed else 'FAIL'} weakcheck: max normalized residual {worst:.3e} "
               f"(threshold {threshold:g}, {len(lib)} test functions)")
    return EXIT_OK if passed else EXIT_FAIL


# --------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    cfg, sc = _load(args)
    kind = cfg["study.kind"]
    if kind is None:
        raise ConfigError("study.kind is required (epsilon, refinement, crosscheck, weak, ode)")
    out = _out_dir(args, cfg)
    figures = cfg["output.figures"]
    threads = args.threads
    if kind == "epsilon":
        eps_list = cfg["study.eps_list"]
        if not eps_list:
            raise ConfigError("study.eps_list is required for an epsilon study")
        try:
            st = epsilon_study(sc, eps_list, cfg["study.r_metric"], threads=threads)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if st.aborted:
            raise CLIError(f"member run aborted: {st.aborted}", EXIT_ABORT)
        write_table(out / "study_epsilon.csv", st.header, st.rows())
        slope = "" if st.slope is None else f"{st.slope:.4f}"
        write_key_values(out / "study_summary.txt", {
            "kind": kind, "r_metric": st.r_metric, "violations": st.violations,
            "slope": slope, "passed": int(st.passed)})
        if figures and st.distances:
            plot_loglog(st.eps[:-1], st.distances, out / "study_epsilon.png", r"$\varepsilon_j$",
                        r"$d_j$", slope=1.0)
        msg = f"epsilon study: {len(st.distances)} distances, {st.violations} increases, slope {slope or 'n/a'}"
        passed = st.passed
    elif kind == "refinement":
        st = _guard(lambda: refinement_study(sc, cfg["study.levels"], threads=threads,
                                             min_order=cfg["study.min_order"]))
        write_table(out / "study_refinement.csv", st.header, st.rows())
        if figures and len(st.differences) > 1:
            plot_loglog([2.0 / n for n in st.levels[:-1]], st.differences, out / "study_refinement.png",
                        "$h$", r"$\|u_h - u_{h/2}\|_1$", slope=1.0)
        state = "converged to round-off" if st.converged_to_roundoff else f"order {st.order}"
        msg = f"refinement study: differences {st.differences}, {state}"
        passed = st.passed
    elif kind == "crosscheck":
        st = _guard(lambda: formulation_crosscheck(sc, levels=cfg["study.levels"], threads=threads))
        write_table(out / "study_crosscheck.csv", st.header, st.rows())
        if figures:
            plot_series(st.levels, {"discrepancy": st.discrepancy}, out / "study_crosscheck.png",
                        "cells per side", r"$\max|u - a e^{\chi w}|$", logy=True)
        msg = f"crosscheck: discrepancies {st.discrepancy}"
        passed = st.passed
    elif kind == "weak":
        st = _guard(lambda: weak_study(sc, cfg["study.levels"], k=cfg["weakcheck.k"],
                                       threshold=cfg["weakcheck.threshold"], threads=threads,
                                       system=cfg["weakcheck.system"]))
        st.min_order = cfg["study.min_order"]
        write_table(out / "study_weak.csv", st.header, st.rows())
        st.report.to_csv(out / "residuals.csv")
        if figures:
            plot_series(st.levels, {"u": [st.max_u(n) for n in st.levels], "w": [st.max_w(n) for n in st.levels]},
                        out / "study_weak.png", "cells per side", "max normalized residual", logy=True)
        msg = f"weak study: orders u {st.orders('residual_u')}, w {st.orders('residual_w')}"
        passed = st.passed
    elif kind == "ode":
        grid = sc.grid()
        u0, w0 = sc.initial(grid)
        m = grid.mask
        if np.ptp(u0[m]) != 0 or np.ptp(w0[m]) != 0:
            raise ConfigError("an ode study needs spatially uniform initial data")
        traj = sc.simulate()
        if traj.report.aborted:
            raise CLIError(f"run aborted: {traj.report.abort_reason}", EXIT_ABORT)
        uo, wo = ode_oracle(float(u0[m][0]), float(w0[m][0]), sc.params)
        X, Y = grid.centers
        d = np.where(m, X**2 + Y**2, np.inf)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        uf, wf = float(traj.final.u[i, j]), float(traj.final.w[i, j])
        rel_u = abs(uf - uo) / max(abs(uo), 1e-300)
        passed = rel_u <= 1e-3 and abs(wf - wo) <= 1e-3
        write_table(out / "study_ode.csv", ["quantity", "grid", "oracle", "error"],
                    [["u", uf, uo, rel_u], ["w", wf, wo, abs(wf - wo)]])
        msg = f"ode study: u {uf:.6f} vs {uo:.6f}, w {wf:.6f} vs {wo:.6f}"
    else:
        raise ConfigError(f"unknown study.kind {kind!r}")
    _say(args, f"{'PASS' if passed else 'FAIL'} {msg}")
    return EXIT_OK if passed else EXIT_FAIL


def _guard(fn):
    try:
        return fn()
    except RuntimeError as exc:
        if "aborted" in str(exc):
            raise CLIError(str(exc), EXIT_ABORT) from None
        raise


# --------------------------------------------------------------------------
# fit-tensor


def cmd_fit_tensor(args) -> int:
    cfg, sc = _load(args)
    beta = args.beta if args.beta is not None else cfg["params.beta"]
    if beta is None:
        raise ConfigError("beta is required (params.beta or --beta)")
    out = _out_dir(args, cfg)
    grid = sc.grid(args.n)
    D = sc.base_tensor(grid)
    psd = validate_psd(D, grid)
    battery = default_battery(seed=sc.seed, n=args.fields, box=grid.domain.bounds)
    try:
        fit = fit_divergence_estimate(D, beta, battery, grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_table(out / "fit_tensor.csv", ["field", "numerator", "quadratic_beta", "ratio"],
                [[r.name, r.numerator, r.quadratic, r.ratio] for r in fit.records])
    summary = {"tensor": sc.tensor_kind, "beta": beta, "C": fit.C, "worst_field": fit.worst().name,
               "n_fields": fit.n_fields, "psd": int(psd.passed), "min_eigenvalue": psd.min_eigenvalue}
    if sc.tensor_kind in ("D1", "D2"):
        lo, hi = beta_admissible_range(sc.tensor_kind, sc.s, 2)
        summary["beta_range"] = f"({lo!r}, {hi!r})"
        summary["beta_admissible"] = int(lo < beta < hi)
    write_key_values(out / "fit_summary.txt", summary)
    _say(args, "\n".join(f"{k} = {v}" for k, v in summary.items()))
    ok = psd.passed and math.isfinite(fit.C) and summary.get("beta_admissible", 1) == 1
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="haptofv", description="Haptotaxis finite-volume simulator and audits.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--preset", metavar="NAME", help=f"shipped preset ({', '.join(PRESETS)})")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (default output.dir)")
    common.add_argument("--threads", metavar="N", type=int, default=1, help="worker threads")
    common.add_argument("--quiet", action="store_true", help="suppress the verdict summary")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="integrate a scenario and write outputs").set_defaults(fn=cmd_run)
    sub.add_parser("study", parents=[common], help="run the configured study").set_defaults(fn=cmd_study)
    for name, fn, text in (("weakcheck", cmd_weakcheck, "weak-form residuals of a stored run"),
                           ("diagnose", cmd_diagnose, "recompute diagnostics of a stored run")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("trajectory", nargs="?", help="run directory (default output.dir)")
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("fit-tensor", parents=[common], help="fit the divergence-estimate constant")
    sp.add_argument("--beta", type=float, help="exponent (default params.beta)")
    sp.add_argument("--n", type=int, help="cells per side (default grid.nx)")
    sp.add_argument("--fields", type=int, default=100, help="battery size")
    sp.set_defaults(fn=cmd_fit_tensor)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, TrajectoryFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
