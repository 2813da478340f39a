"""Single-level, multilevel and multigrid-multilevel Monte Carlo estimators.

Estimator terms draw their conductivity samples from disjoint seed
streams: term 0 is the level-0 term, term ``l`` the correction
``Q_l - Q_{l-1}``.  Both halves of a correction use one FieldSample.  The
multigrid variant warm-starts the fine solve of each correction with the
prolongated coarse solution of the same sample.
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import fem, mesh, randfield, solver

NORMS = ("L2", "Linf", "H1")
PILOT_TERM = 2 ** 31


class SampleFailure(RuntimeError):
    def __init__(self, msg, term=None, index=None):
        super().__init__(msg)
        self.term, self.index = term, index


@dataclass
class Experiment:
    """Everything that is fixed across samples: meshes, field factor, level data."""
    hier: object
    points: object
    factor: object
    discs: list
    cfg: object
    cache: object
    cov: object
    params: object

    @property
    def L(self):
        return self.hier.L

    @property
    def h(self):
        return np.array([lv.h for lv in self.hier.levels])

    def sample(self, base_seed, term, index, level):
        key = randfield.seed_key(base_seed, term, index)
        return randfield.sample(self.factor, key, upto=self.points.level_end[level], index=index)

    def systems(self, s, top):
        return [self.discs[l].assemble(*randfield.level_view(s, self.points, l)) for l in range(top + 1)]

    def assembly_flops(self, top):
        return float(sum(self.discs[l].assembly_flops for l in range(top + 1)))


def setup(L, h0=0.25, c_h=2, cov=None, params=None, data=None, cfg=None, domain=None):
    hier = mesh.build_hierarchy(domain, h0=h0, c_h=c_h, L=L)
    cov = randfield.CovarianceSpec() if cov is None else cov
    pts = randfield.build_point_set(hier)
    R = randfield.covariance_matrix(pts, cov)
    factor = randfield.factorize(R, keep_R=False)
    params = fem.PhysicalParams() if params is None else params
    discs = [fem.Discretization(lv, params, data) for lv in hier.levels]
    return Experiment(hier=hier, points=pts, factor=factor, discs=discs,
                      cfg=solver.CycleConfig() if cfg is None else cfg,
                      cache=solver.PressureCache(), cov=cov, params=params)


# -- models and plans ------------------------------------------------------------

@dataclass
class CostModel:
    h: np.ndarray
    gamma: float
    measured: np.ndarray | None = None   # op counts per level, if any
    seconds: np.ndarray | None = None

    @property
    def C(self):
        h = np.asarray(self.h, dtype=float)
        return (h / h[0]) ** (-self.gamma)

    @classmethod
    def fit(cls, h, costs, seconds=None):
        g = fit_exponent(1.0 / np.asarray(h, dtype=float), costs)
        return cls(h=np.asarray(h, dtype=float), gamma=g, measured=np.asarray(costs, dtype=float),
                   seconds=None if seconds is None else np.asarray(seconds, dtype=float))


@dataclass
class VarianceModel:
    v0: float
    beta: float
    h: np.ndarray
    norm: str = "L2"

    @property
    def v(self):
        h = np.asarray(self.h, dtype=float)
        return self.v0 * (h / h[0]) ** self.beta


@dataclass
class MlmcPlan:
    e_L: float
    N: tuple
    v: np.ndarray
    C: np.ndarray
    N_real: np.ndarray
    predicted_cost: float

    @property
    def L(self):
        return len(self.N) - 1

    def sampling_error(self):
        return float(np.sum(self.v / np.asarray(self.N, dtype=float)))


def fit_exponent(x, y):
    """Least-squares slope of log y against log x."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def allocate(v, c, e_L):
    """Optimal sample counts for the target sampling error ``e_L``."""
    if not e_L > 0:
        raise ValueError("target sampling error e_L must be positive")
    v = np.asarray(v.v if isinstance(v, VarianceModel) else v, dtype=float)
    C = np.asarray(c.C if isinstance(c, CostModel) else c, dtype=float)
    if v.shape != C.shape:
        raise ValueError("variance and cost models cover different levels")
    if np.any(v <= 0) or np.any(C <= 0):
        raise ValueError("variances and costs must be positive")
    total = float(np.sum(np.sqrt(v * C)))
    N_real = np.sqrt(v / C) * total / e_L
    N = np.maximum(1, np.ceil(N_real)).astype(int)
    # ceil can land one ulp under the real target; bump until the constraint holds
    for _ in range(4):
        if np.sum(v / N) <= e_L:
            break
        N[np.argmax(v / N)] += 1
    return MlmcPlan(e_L=float(e_L), N=tuple(int(n) for n in N), v=v, C=C,
                    N_real=N_real, predicted_cost=total ** 2 / e_L)


def sampling_error_target(v_L_hat, N_SL):
    if not (v_L_hat > 0 and N_SL > 0):
        raise ValueError("need a positive variance and sample count")
    return v_L_hat / N_SL


# -- estimates ---------------------------------------------------------------------

@dataclass
class TermStats:
    level: int
    N: int
    mean: np.ndarray          # on the term's own fine level
    variance: dict            # norm -> unbiased E||D - mean D||^2
    flops: float = 0.0
    assembly_flops: float = 0.0
    sampling_flops: float = 0.0
    cycles: float = 0.0


@dataclass
class Estimate:
    method: str
    L: int
    mean: np.ndarray          # full DoF vector on the finest level
    level_means: list         # per term, prolongated to the finest level
    terms: list
    flops: float
    seconds: float
    reports: list = field(default_factory=list)

    @property
    def N(self):
        return tuple(t.N for t in self.terms)

    @property
    def level_variances(self):
        return [t.variance for t in self.terms]

    @property
    def assembly_flops(self):
        return float(sum(t.assembly_flops for t in self.terms))

    @property
    def sampling_flops(self):
        return float(sum(t.sampling_flops for t in self.terms))

    def fields(self, hier):
        return fem.Solution.from_vector(hier.levels[self.L], self.mean)

    def sampling_error(self, norm="L2"):
        return float(sum(t.variance[norm] / t.N for t in self.terms))


def _vector_norms(exp, level, vec):
    lv = exp.hier.levels[level]
    sol = fem.Solution.from_vector(lv, vec)
    return {k: fem.combined_norm(sol, lv, k, exp.discs[level]) for k in NORMS}


def _summarize(exp, level, rows):
    """Mean and unbiased norm variances of the per-sample vectors ``rows``."""
    N = len(rows)
    mean = np.zeros_like(rows[0])
    for r in rows:
        mean += r
    mean /= N
    var = {k: 0.0 for k in NORMS}
    if N >= 2:
        for r in rows:
            for k, v in _vector_norms(exp, level, r - mean).items():
                var[k] += v * v
        var = {k: v / (N - 1) for k, v in var.items()}
    return mean, var


def _solve_term_sample(exp, base_seed, term, index, level, correction, warm):
    """One sample of one estimator term; returns (vector on ``level``, reports, counts)."""
    s = exp.sample(base_seed, term, index, level)
    systems = exp.systems(s, level)
    ops = [solver.build_lsc(S, exp.cache) for S in systems]
    counter = solver.OpCounter()
    for op in ops:
        counter.add("setup", op.setup_flops)
    P = exp.hier.prolongations
    reports = []
    try:
        fine = solver.Multigrid(ops, P, counter)
        x0 = None
        coarse_vec = None
        if correction:
            coarse = solver.Multigrid(ops[:level], P, counter, coarse=fine.coarse)
            coarse_vec, rep = solver.solve(coarse, systems[level - 1].b, cfg=exp.cfg, sample=index)
            reports.append(rep)
            if warm:
                x0 = P[level] @ coarse_vec
        x, rep = solver.solve(fine, systems[level].b, x0=x0, cfg=exp.cfg, sample=index)
        reports.append(rep)
    except (solver.ConvergenceError, solver.SolverSetupError, np.linalg.LinAlgError) as exc:
        raise SampleFailure(f"term {term} sample {index} (seed {base_seed}): {exc}", term, index) from exc
    out = x - P[level] @ coarse_vec if correction else x
    counts = (counter.flops, exp.assembly_flops(level), float(randfield.sampling_flops(s.size)))
    return out, reports, counts


# The experiment is bound at module level so forked workers inherit it.
_WORKER = {}


def _worker(args):
    return _solve_term_sample(_WORKER["exp"], *args)


def _map(exp, jobs, workers):
    if workers <= 1:
        return [_solve_term_sample(exp, *j) for j in jobs]
    import multiprocessing as mp
    _WORKER["exp"] = exp
    with mp.get_context("fork").Pool(workers) as pool:
        # imap keeps index order, so the reduction below is order independent of scheduling
        return list(pool.imap(_worker, jobs, chunksize=4))


def _run_term(exp, base_seed, term, level, N, correction, warm, workers):
    jobs = [(base_seed, term, i, level, correction, warm) for i in range(N)]
    results = _map(exp, jobs, workers)
    rows = [r[0] for r in results]
    reports = [rep for r in results for rep in r[1]]
    mean, var = _summarize(exp, level, rows)
    fine_reports = reports[1::2] if correction else reports
    stats = TermStats(level=level, N=N, mean=mean, variance=var,
                      flops=float(sum(r[2][0] for r in results)),
                      assembly_flops=float(sum(r[2][1] for r in results)),
                      sampling_flops=float(sum(r[2][2] for r in results)),
                      cycles=float(np.mean([r.cycles for r in fine_reports])))
    return stats, reports


def _to_finest(exp, level, vec):
    P = exp.hier.prolongation_to(level, exp.L)
    return P @ vec


def slmc(exp, level, N, base_seed, workers=1):
    """Plain Monte Carlo with N samples solved on ``level``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    t0 = time.perf_counter()
    stats, reports = _run_term(exp, base_seed, 0, level, N, False, False, workers)
    mean = stats.mean.copy()
    return Estimate(method="slmc", L=level, mean=mean, level_means=[mean], terms=[stats],
                    flops=stats.flops, seconds=time.perf_counter() - t0, reports=reports)


def _multilevel(exp, plan, base_seed, warm, workers, method):
    L = plan.L
    if L > exp.L:
        raise ValueError(f"plan has {L + 1} levels, hierarchy only {exp.L + 1}")
    t0 = time.perf_counter()
    terms, level_means, reports = [], [], []
    for l, N in enumerate(plan.N):
        stats, reps = _run_term(exp, base_seed, l, l, int(N), l > 0, warm, workers)
        terms.append(stats)
        reports += reps
        level_means.append(exp.hier.prolongation_to(l, L) @ stats.mean)
    mean = level_means[0].copy()
    for m in level_means[1:]:
        mean = mean + m
    return Estimate(method=method, L=L, mean=mean, level_means=level_means, terms=terms,
                    flops=float(sum(t.flops for t in terms)),
                    seconds=time.perf_counter() - t0, reports=reports)


def mlmc(exp, plan, base_seed, workers=1):
    """Multilevel estimator; every solve starts from zero."""
    return _multilevel(exp, plan, base_seed, False, workers, "mlmc")


def mgmlmc(exp, plan, base_seed, workers=1):
    """Multilevel estimator with coarse-to-fine warm starts inside each correction."""
    return _multilevel(exp, plan, base_seed, True, workers, "mgmlmc")


def pilot_variance(exp, level, N_pilot, norm, base_seed, workers=1):
    """Unbiased variance of the level QoI in ``norm`` from ``N_pilot`` samples."""
    if N_pilot < 2:
        raise ValueError("pilot needs at least 2 samples")
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    stats, reports = _run_term(exp, base_seed, PILOT_TERM, level, N_pilot, False, False, workers)
    return stats.variance[norm], stats, reports


def telescoping_mean(pair, N, base_seed, n_normals):
    """MLMC for a scalar model ``pair(level, Y) -> (Q_l, Q_{l-1})``.

    Uses the same seed layout as the PDE estimators: term ``l`` draws its
    samples from stream ``l``.  Returns the estimate, the per-term means
    and the per-term unbiased variances.
    """
    means, variances = [], []
    for level, n in enumerate(N):
        d = np.empty(n)
        for i in range(n):
            Y = randfield.standard_normals(randfield.seed_key(base_seed, level, i), n_normals)
            fine, coarse = pair(level, Y)
            d[i] = fine - coarse if level > 0 else fine
        means.append(float(d.mean()))
        variances.append(float(d.var(ddof=1)) if n > 1 else 0.0)
    return float(sum(means)), means, variances


def relative_difference(a, b, hier, level):
    """Per-field ||a - b|| / ||a|| of two finest-level DoF vectors."""
    s = hier.levels[level].field_slices()
    out = {}
    for f in fem.FIELDS:
        ref = np.linalg.norm(a[s[f]])
        out[f] = float(np.linalg.norm(a[s[f]] - b[s[f]]) / ref) if ref > 0 else float(np.linalg.norm(b[s[f]]))
    return out


def cost_report(runs, beta=None, d=2):
    """Total costs and ratios of completed estimator runs, keyed by method name."""
    T = {k: float(v.flops) for k, v in runs.items()}
    out = {"T_c": T}
    if "slmc" in T:
        for k in ("mlmc", "mgmlmc"):
            if k in T:
                out[f"{k}/slmc"] = T[k] / T["slmc"]
    if "mlmc" in T and "mgmlmc" in T:
        out["mgmlmc/mlmc"] = T["mgmlmc"] / T["mlmc"]
    L = max(v.L for v in runs.values())
    if beta is not None and L >= 1:
        out["theory_factor"] = 2.0 ** (L * d + beta * (L - 1) / 2.0) / (L * d)
    out["assembly_flops"] = {k: v.assembly_flops for k, v in runs.items()}
    out["sampling_flops"] = {k: v.sampling_flops for k, v in runs.items()}
    return out


def required_N_SL(e_L, v_L_hat):
    r = v_L_hat / e_L
    # a ratio one ulp above an integer should not cost an extra sample
    return int(round(r)) if math.isclose(r, round(r), rel_tol=1e-12) else int(math.ceil(r))
