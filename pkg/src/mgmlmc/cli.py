"""Command-line experiment runner.

Configuration is a flat ``key = value`` file; any key can be overridden
with ``--set key=value``.  Every run writes its resolved configuration to
``manifest.json`` so it can be replayed exactly.
"""
import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import calib, fem, mc, mesh, randfield, solver

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
METHODS = ("slmc", "mlmc", "mgmlmc", "calibrate-beta", "calibrate-gamma", "compare")
DEFAULT_BETA = {"L2": 2.02, "Linf": 1.65, "H1": 1.30}


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def _norms(text):
    out = tuple(t.strip() for t in text.split(",") if t.strip())
    for n in out:
        if n not in mc.NORMS:
            raise ValueError(f"unknown norm {n!r} (choose from {', '.join(mc.NORMS)})")
    return out


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (parser, default)
SCHEMA = {
    "method": (str, "mgmlmc"),
    "h0": (float, 0.25),
    "c_h": (int, 2),
    "L": (int, 2),
    "nu": (float, 1.0),
    "g": (float, 1.0),
    "alpha": (float, 1.0),
    "z": (float, 0.0),
    "variance": (float, 0.1),
    "length_x": (float, 0.2),
    "length_y": (float, 0.2),
    "e_L": (_opt_float, None),
    "N_SL": (_opt_int, None),
    "norm": (str, "L2"),
    "beta": (_opt_float, None),
    "gamma": (_opt_float, None),
    "pilot_N": (int, 50),
    "seed": (int, 0),
    "output": (str, "out"),
    "workers": (int, 1),
    "pre": (int, 2),
    "post": (int, 2),
    "tol": (float, 1e-8),
    "max_cycles": (int, 50),
    "beta_sigmas": (_floats, (0.02, 0.8, 1.2)),
    "beta_samples": (int, 40),
    "beta_inner": (int, 50),
    "beta_levels": (int, 2),
    "beta_norms": (_norms, mc.NORMS),
    "gamma_L": (int, 3),
    "gamma_samples": (int, 3),
}


def _parse_pairs(pairs, source):
    out = {}
    for where, text in pairs:
        if "=" not in text:
            raise ConfigError(f"{source}{where}: expected key = value, got {text!r}")
        k, v = (t.strip() for t in text.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"{source}{where}: unknown key {k!r}")
        try:
            out[k] = SCHEMA[k][0](v)
        except ValueError as exc:
            raise ConfigError(f"{source}{where}: bad value for {k!r}: {exc}") from None
    return out


def read_config(path=None, overrides=(), method=None, targets=True):
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    if path is not None:
        lines = []
        with open(path) as fh:
            for n, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if line:
                    lines.append((f":{n}", line))
        cfg.update(_parse_pairs(lines, str(path)))
    cfg.update(_parse_pairs([(f" #{i + 1}", o) for i, o in enumerate(overrides)], "--set"))
    if method is not None:
        cfg["method"] = method
    validate(cfg, targets)
    return cfg


def validate(cfg, targets=True):
    m = cfg["method"]
    if m not in METHODS:
        raise ConfigError(f"field 'method': {m!r} is not one of {', '.join(METHODS)}")
    if cfg["norm"] not in mc.NORMS:
        raise ConfigError(f"field 'norm': {cfg['norm']!r} is not one of {', '.join(mc.NORMS)}")
    if cfg["L"] < 0:
        raise ConfigError("field 'L': must be >= 0")
    if cfg["c_h"] != 2:
        raise ConfigError("field 'c_h': the runner uses c_h = 2")
    for k in ("h0", "nu", "g", "variance", "length_x", "length_y", "tol"):
        if not cfg[k] > 0:
            raise ConfigError(f"field {k!r}: must be positive")
    if cfg["alpha"] < 0:
        raise ConfigError("field 'alpha': must be nonnegative")
    if cfg["workers"] < 1:
        raise ConfigError("field 'workers': must be >= 1")
    if cfg["pre"] < 0 or cfg["post"] < 0 or cfg["pre"] + cfg["post"] < 1:
        raise ConfigError("fields 'pre'/'post': need pre, post >= 0 and pre + post >= 1")
    if targets:
        if m in ("mlmc", "mgmlmc", "compare") and cfg["e_L"] is None and cfg["N_SL"] is None:
            raise ConfigError(f"method {m!r} needs a sampling target: set field 'e_L' or field 'N_SL'")
        if m == "compare" and cfg["N_SL"] is None:
            raise ConfigError("method 'compare' needs field 'N_SL'")
        if m == "slmc" and cfg["N_SL"] is None:
            raise ConfigError("method 'slmc' needs field 'N_SL'")
    if cfg["e_L"] is not None and not cfg["e_L"] > 0:
        raise ConfigError("field 'e_L': must be positive")
    if cfg["N_SL"] is not None and cfg["N_SL"] < 1:
        raise ConfigError("field 'N_SL': must be >= 1")
    if cfg["pilot_N"] < 2:
        raise ConfigError("field 'pilot_N': must be >= 2")
    if m == "calibrate-beta" and cfg["beta_levels"] < 1:
        raise ConfigError("field 'beta_levels': must be >= 1")
    if m == "calibrate-gamma" and cfg["gamma_L"] < 3:
        raise ConfigError("field 'gamma_L': gamma is fitted on levels 1..gamma_L, need gamma_L >= 3")
    try:
        mesh.build_hierarchy(h0=cfg["h0"], L=0)
    except mesh.GeometryError as exc:
        raise ConfigError(f"field 'h0': {exc}") from None


# -- output helpers ----------------------------------------------------------------

def fmt(x):
    return format(float(x), ".17g")


def dumps(obj, indent=0):
    """JSON text with every float at 17 significant digits and sorted keys."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        return fmt(x)
    if obj is None:
        return "null"
    return json.dumps(obj)


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj) + "\n")


def write_estimate(path, est, hier):
    lv = hier.levels[est.L]
    s = lv.field_slices()
    coords = {"phi": lv.phi_space.coords, "ux": lv.u_space.coords,
              "uy": lv.u_space.coords, "p": lv.p_space.coords}
    with open(path, "w") as fh:
        fh.write("node,field,x,y,mean\n")
        for f in fem.FIELDS:
            vals = est.mean[s[f]]
            for i, (v, (x, y)) in enumerate(zip(vals, coords[f])):
                fh.write(f"{i},{f},{fmt(x)},{fmt(y)},{fmt(v)}\n")


def read_estimate(path):
    out = {f: [] for f in fem.FIELDS}
    with open(path) as fh:
        next(fh)
        for line in fh:
            node, f, _, _, v = line.rstrip("\n").split(",")
            out[f].append(float(v))
    return {f: np.array(v) for f, v in out.items()}


def write_levels(path, est, plan=None, norm="L2"):
    with open(path, "w") as fh:
        fh.write("level,N,v_hat,C,v_model\n")
        for l, t in enumerate(est.terms):
            C = t.flops / t.N
            vm = fmt(plan.v[l]) if plan is not None else ""
            fh.write(f"{l},{t.N},{fmt(t.variance[norm])},{fmt(C)},{vm}\n")


def write_solves(path, reports):
    solver.write_reports(reports, path)


class Timing:
    """Wall-clock notes go to a text log so the CSV/JSON outputs stay reproducible."""

    def __init__(self, outdir):
        self.path = os.path.join(outdir, "timing.log")
        self.rows = []

    def add(self, what, seconds):
        self.rows.append((what, seconds))

    def write(self):
        with open(self.path, "w") as fh:
            for what, s in self.rows:
                fh.write(f"{what}\t{s:.3f} s\n")


# -- pipelines ---------------------------------------------------------------------

def _experiment(cfg, L=None):
    params = fem.PhysicalParams(nu=cfg["nu"], g=cfg["g"], alpha=cfg["alpha"], z=cfg["z"])
    cov = randfield.CovarianceSpec(cfg["variance"], cfg["length_x"], cfg["length_y"])
    cycle = solver.CycleConfig(pre=cfg["pre"], post=cfg["post"], tol=cfg["tol"],
                               max_cycles=cfg["max_cycles"])
    return mc.setup(cfg["L"] if L is None else L, h0=cfg["h0"], c_h=cfg["c_h"], cov=cov,
                    params=params, cfg=cycle)


def _beta(cfg):
    return cfg["beta"] if cfg["beta"] is not None else DEFAULT_BETA[cfg["norm"]]


def measure_gamma(cfg, exp=None, timing=None):
    """Op-count cost per sample on the multigrid levels 1..gamma_L."""
    L = max(cfg["gamma_L"], 3)
    if exp is None or exp.L < L:
        exp = _experiment(cfg, L)
    reports = []
    for l in range(1, L + 1):
        for i in range(cfg["gamma_samples"]):
            _, reps, _ = mc._solve_term_sample(exp, cfg["seed"], mc.PILOT_TERM + 1, i, l, False, False)
            reports += reps
    est = calib.estimate_gamma(reports, h=exp.h)
    if timing is not None:
        for hl, s in zip(est.h, est.seconds):
            timing.add(f"solve at h = {hl:g} (mean of {cfg['gamma_samples']})", s)
        if est.gamma_seconds is not None:
            timing.add(f"gamma from wall clock = {est.gamma_seconds:.4f}", 0.0)
    return est, reports


def _gamma_json(est):
    return {"h": est.h, "levels": est.levels, "op_counts": est.costs, "gamma": est.gamma, "r2": est.r2}


def _plan(cfg, exp, v_L_hat, gamma):
    norm = cfg["norm"]
    v0, _, reps = mc.pilot_variance(exp, 0, cfg["pilot_N"], norm, cfg["seed"], cfg["workers"])
    e_L = cfg["e_L"] if cfg["e_L"] is not None else mc.sampling_error_target(v_L_hat, cfg["N_SL"])
    vm = mc.VarianceModel(v0=v0, beta=_beta(cfg), h=exp.h, norm=norm)
    plan = mc.allocate(vm, mc.CostModel(h=exp.h, gamma=gamma), e_L)
    return plan, v0, reps


def _manifest(cfg, extra=None):
    m = {"config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()},
         "seeds": {"base_seed": cfg["seed"],
                   "seed_key": "base_seed << 64 | term << 32 | sample_index"}}
    if extra:
        m.update(extra)
    return m


def run_estimator(cfg, out, timing):
    method, L, norm = cfg["method"], cfg["L"], cfg["norm"]
    t0 = time.perf_counter()
    exp = _experiment(cfg)
    timing.add("setup", time.perf_counter() - t0)
    reports, extra = [], {}
    if method == "slmc":
        t0 = time.perf_counter()
        est = mc.slmc(exp, L, cfg["N_SL"], cfg["seed"], cfg["workers"])
        timing.add("slmc", time.perf_counter() - t0)
        reports += est.reports
        write_levels(os.path.join(out, "levels.csv"), est, norm=norm)
        eff = {"T_c": {"slmc": est.flops}, "e_L": est.sampling_error(norm), "norm": norm}
    else:
        v_L_hat = None
        if cfg["e_L"] is None:
            v_L_hat, _, reps = mc.pilot_variance(exp, L, cfg["pilot_N"], norm, cfg["seed"] + 1, cfg["workers"])
            reports += reps
        g_est = None
        gamma = cfg["gamma"]
        if gamma is None:
            g_est, reps = measure_gamma(cfg, exp if exp.L >= 3 else None, timing)
            gamma = g_est.gamma
        plan, v0, reps = _plan(cfg, exp, v_L_hat, gamma)
        reports += reps
        t0 = time.perf_counter()
        fn = mc.mgmlmc if method == "mgmlmc" else mc.mlmc
        est = fn(exp, plan, cfg["seed"], cfg["workers"])
        timing.add(method, time.perf_counter() - t0)
        reports += est.reports
        write_levels(os.path.join(out, "levels.csv"), est, plan, norm)
        eff = {"T_c": {method: est.flops}, "e_L": plan.e_L, "N": list(plan.N), "v0": v0,
               "beta": _beta(cfg), "gamma": gamma, "norm": norm,
               "predicted_cost_model_units": plan.predicted_cost}
        if g_est is not None:
            extra["gamma"] = _gamma_json(g_est)
    write_estimate(os.path.join(out, "estimate.csv"), est, exp.hier)
    write_json(os.path.join(out, "efficiency.json"), eff)
    write_solves(os.path.join(out, "solves.jsonl"), reports)
    return extra


def run_compare(cfg, out, timing):
    L, norm = cfg["L"], cfg["norm"]
    t0 = time.perf_counter()
    exp = _experiment(cfg)
    timing.add("setup", time.perf_counter() - t0)
    reports = []
    gamma, g_est = cfg["gamma"], None
    if gamma is None:
        g_est, _ = measure_gamma(cfg, exp if exp.L >= 3 else None, timing)
        gamma = g_est.gamma
    t0 = time.perf_counter()
    sl = mc.slmc(exp, L, cfg["N_SL"], cfg["seed"], cfg["workers"])
    timing.add("slmc", time.perf_counter() - t0)
    reports += sl.reports
    v_L_hat = sl.terms[0].variance[norm]
    plan, v0, reps = _plan(cfg, exp, v_L_hat, gamma)
    reports += reps
    # the multilevel runs use an independent seed stream from the single-level run
    runs = {"slmc": sl}
    for name, fn in (("mlmc", mc.mlmc), ("mgmlmc", mc.mgmlmc)):
        t0 = time.perf_counter()
        runs[name] = fn(exp, plan, cfg["seed"] + 1, cfg["workers"])
        timing.add(name, time.perf_counter() - t0)
        reports += runs[name].reports
    rep = mc.cost_report(runs, beta=_beta(cfg))
    rep.update({"e_L": plan.e_L, "N": list(plan.N), "N_SL": cfg["N_SL"], "v0": v0, "v_L_hat": v_L_hat,
                "beta": _beta(cfg), "gamma": gamma, "norm": norm, "L": L,
                "relative_difference": mc.relative_difference(sl.mean, runs["mgmlmc"].mean, exp.hier, L),
                "achieved_sampling_error": {k: v.sampling_error(norm) for k, v in runs.items()},
                "mgmlmc_vs_mlmc_max_abs": float(np.max(np.abs(runs["mgmlmc"].mean - runs["mlmc"].mean))),
                "mean_fine_cycles": {k: [t.cycles for t in v.terms] for k, v in runs.items()}})
    write_estimate(os.path.join(out, "estimate.csv"), runs["mgmlmc"], exp.hier)
    for k in ("slmc", "mlmc"):
        write_estimate(os.path.join(out, f"estimate_{k}.csv"), runs[k], exp.hier)
    write_levels(os.path.join(out, "levels.csv"), runs["mgmlmc"], plan, norm)
    write_json(os.path.join(out, "efficiency.json"), rep)
    write_solves(os.path.join(out, "solves.jsonl"), reports)
    return {"gamma": _gamma_json(g_est)} if g_est is not None else {}


def run_beta(cfg, out, timing):
    t0 = time.perf_counter()
    cov = randfield.CovarianceSpec(cfg["variance"], cfg["length_x"], cfg["length_y"])
    cycle = solver.CycleConfig(pre=cfg["pre"], post=cfg["post"], tol=cfg["tol"], max_cycles=cfg["max_cycles"])
    est = calib.estimate_beta(sigmas=cfg["beta_sigmas"], n_samples=cfg["beta_samples"],
                              levels=cfg["beta_levels"], norms=cfg["beta_norms"], base_seed=cfg["seed"],
                              n_inner=cfg["beta_inner"], h0=cfg["h0"], cov=cov, cfg=cycle)
    timing.add("calibrate-beta", time.perf_counter() - t0)
    with open(os.path.join(out, "beta.csv"), "w") as fh:
        fh.write("sigma,f_sample,norm,beta\n")
        for sigma in est.sigmas:
            for n in cfg["beta_norms"]:
                for j, b in enumerate(est.per_sample[(sigma, n)]):
                    fh.write(f"{fmt(sigma)},{j},{n},{fmt(b)}\n")
    summary = {"mean_beta": est.beta,
               "mean_beta_per_sigma": {fmt(s): {n: est.mean(n, s) for n in cfg["beta_norms"]} for s in est.sigmas},
               "h": est.h, "n_samples": est.n_samples, "n_inner": est.n_inner, "excluded": est.excluded}
    write_json(os.path.join(out, "beta_summary.json"), summary)
    for n in cfg["beta_norms"]:
        print(f"beta[{n}] = {est.beta[n]:.4f}")
    return {}


def run_gamma(cfg, out, timing):
    t0 = time.perf_counter()
    est, reports = measure_gamma(cfg, None, timing)
    timing.add("calibrate-gamma", time.perf_counter() - t0)
    write_json(os.path.join(out, "gamma.json"), _gamma_json(est))
    write_solves(os.path.join(out, "solves.jsonl"), reports)
    print(f"gamma (op counts) = {est.gamma:.4f}, R^2 = {est.r2:.4f}")
    return {}


PIPELINES = {"slmc": run_estimator, "mlmc": run_estimator, "mgmlmc": run_estimator,
             "compare": run_compare, "calibrate-beta": run_beta, "calibrate-gamma": run_gamma}


def execute(cfg):
    out = cfg["output"]
    os.makedirs(out, exist_ok=True)
    timing = Timing(out)
    extra = PIPELINES[cfg["method"]](cfg, out, timing)
    write_json(os.path.join(out, "manifest.json"), _manifest(cfg, extra))
    timing.write()


# -- argument parsing ----------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("config", nargs="?", help="flat key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("-o", "--output", help="output directory (same as --set output=DIR)")


def build_parser():
    p = argparse.ArgumentParser(prog="mgmlmc", description="Monte Carlo experiments for coupled "
                                "free/porous flow with log-normal conductivity.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the method named by the 'method' key (slmc, mlmc, mgmlmc, ...)")
    _add_config_args(r)
    for name, what in (("calibrate-beta", "fit the variance decay exponent on the auxiliary Darcy problem"),
                       ("calibrate-gamma", "fit the cost growth exponent from solver operation counts"),
                       ("compare", "run SLMC, MLMC and MGMLMC at matched sampling error")):
        _add_config_args(sub.add_parser(name, help=what))
    d = sub.add_parser("dump-field", help="write one conductivity sample as CSV (x, y, K)")
    _add_config_args(d)
    d.add_argument("--level", type=int, default=None, help="restrict to one level's points")
    d.add_argument("--index", type=int, default=0, help="sample index")
    m = sub.add_parser("dump-mesh", help="write one mesh level as plain text")
    _add_config_args(m)
    m.add_argument("--level", type=int, default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"output={args.output}")
    method = {"run": None, "dump-field": None, "dump-mesh": None}.get(args.command, args.command)
    try:
        cfg = read_config(args.config, overrides, method,
                          targets=args.command not in ("dump-field", "dump-mesh"))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "dump-mesh":
            return _dump_mesh(cfg, args.level)
        if args.command == "dump-field":
            return _dump_field(cfg, args.level, args.index)
        execute(cfg)
    except (mc.SampleFailure, solver.ConvergenceError, solver.SolverSetupError,
            randfield.IndefiniteCovarianceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _dump_mesh(cfg, level):
    if not 0 <= level <= cfg["L"]:
        print(f"config error: --level {level} outside [0, {cfg['L']}]", file=sys.stderr)
        return EXIT_CONFIG
    hier = mesh.build_hierarchy(h0=cfg["h0"], c_h=cfg["c_h"], L=level)
    os.makedirs(cfg["output"], exist_ok=True)
    mesh.export_mesh(hier.levels[level], os.path.join(cfg["output"], f"mesh_level{level}.txt"))
    return EXIT_OK


def _dump_field(cfg, level, index):
    if level is not None and not 0 <= level <= cfg["L"]:
        print(f"config error: --level {level} outside [0, {cfg['L']}]", file=sys.stderr)
        return EXIT_CONFIG
    hier = mesh.build_hierarchy(h0=cfg["h0"], c_h=cfg["c_h"], L=cfg["L"] if level is None else level)
    cov = randfield.CovarianceSpec(cfg["variance"], cfg["length_x"], cfg["length_y"])
    pts = randfield.build_point_set(hier)
    factor = randfield.factorize(randfield.covariance_matrix(pts, cov), keep_R=False)
    s = randfield.sample(factor, randfield.seed_key(cfg["seed"], 0, index), index=index)
    os.makedirs(cfg["output"], exist_ok=True)
    name = f"field_{index}.csv" if level is None else f"field_{index}_level{level}.csv"
    randfield.write_sample_csv(s, pts, os.path.join(cfg["output"], name), level)
    return EXIT_OK
