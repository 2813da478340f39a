"""Calibration of the variance-decay exponent beta and the cost exponent gamma.

beta comes from an auxiliary scalar Darcy problem driven by piecewise
constant white noise on the level-0 porous triangles.  For each forcing
sample an inner ensemble of conductivity samples gives per-level
correction variances, and beta is the log-log slope of those variances
against h.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fem, mesh, randfield, solver
from .mc import NORMS, fit_exponent

F_TERM = 1
K_TERM = 2


@dataclass
class WhiteNoiseForcing:
    """f = sigma * sum_i V_i^{-1/2} chi_i X_i over the level-0 porous triangles."""
    sigma: float
    X: np.ndarray
    volumes: np.ndarray
    cells: np.ndarray       # level-0 triangle ids of the tessellation

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("white-noise amplitude must be positive")
        if len(self.X) != len(self.cells):
            raise ValueError("one normal per cell is required")

    @classmethod
    def draw(cls, level0, sigma, key):
        cells = level0.porous_tris
        return cls(sigma=sigma, X=randfield.standard_normals(key, len(cells)),
                   volumes=level0.areas[cells], cells=cells)

    @classmethod
    def from_values(cls, level0, sigma, X):
        cells = level0.porous_tris
        return cls(sigma=sigma, X=np.asarray(X, dtype=float), volumes=level0.areas[cells], cells=cells)

    @property
    def cell_values(self):
        return self.sigma * self.X / np.sqrt(self.volumes)

    def on_level(self, level):
        """Value of f on each porous triangle of ``level`` (phi-space order)."""
        lookup = np.full(int(self.cells.max()) + 1, -1)
        lookup[self.cells] = np.arange(len(self.cells))
        anc = level.ancestor[level.phi_space.tris]
        return self.cell_values[lookup[anc]]


@dataclass
class BetaEstimate:
    beta: dict                  # norm -> mean over forcing samples (per sigma)
    per_sample: dict            # (sigma, norm) -> array over forcing samples
    variances: np.ndarray       # (n_f, n_levels, n_norms) at sigma = 1
    sigmas: tuple
    h: np.ndarray
    n_samples: int
    n_inner: int
    excluded: int = 0

    def mean(self, norm, sigma=None):
        if sigma is None:
            return self.beta[norm]
        return float(np.mean(self.per_sample[(sigma, norm)]))


@dataclass
class GammaEstimate:
    h: np.ndarray
    costs: np.ndarray
    gamma: float
    r2: float
    seconds: np.ndarray | None = None
    gamma_seconds: float | None = None
    levels: list = field(default_factory=list)


class DarcyHierarchy:
    """Scalar Darcy operators on levels 0..top of a hierarchy."""

    def __init__(self, hier, top=None):
        self.hier = hier
        self.top = hier.L if top is None else top
        self.discs = [fem.DarcyDiscretization(lv) for lv in hier.levels[: self.top + 1]]
        self.P = [None] + [hier.space_prolongations[l]["phi"] for l in range(1, self.top + 1)]

    def multigrid(self, K_quads, counter=None):
        ops = [solver.ScalarOperator(d.matrix(K), d.dirichlet) for d, K in zip(self.discs, K_quads)]
        return solver.Multigrid(ops, self.P, counter)


def darcy_solve(dh, level, K_quads, f, cfg=None, mg=None):
    """Solve -div(K grad phi) = f on ``level`` with homogeneous Dirichlet data."""
    cfg = solver.CycleConfig() if cfg is None else cfg
    if mg is None:
        mg = dh.multigrid(K_quads[: level + 1])
    sub = solver.Multigrid(mg.ops[: level + 1], dh.P, mg.counter, coarse=mg._direct)
    b = dh.discs[level].rhs(f.on_level(dh.hier.levels[level]))
    if not np.any(b):
        return np.zeros_like(b), None
    x, rep = solver.solve(sub, b, cfg=cfg)
    mg._direct = sub._direct
    return x, rep


def _phi_norms(disc, phi):
    vals, grads, w = disc.parent.field_values("phi", phi)
    l2sq = float(np.sum(w * vals ** 2))
    semi = float(np.sum(w * np.sum(grads ** 2, axis=-1)))
    linf = max(float(np.max(np.abs(vals))), float(np.max(np.abs(phi))))
    return np.array([np.sqrt(l2sq), linf, np.sqrt(l2sq + semi)])


def correction_variances(dh, factor, pts, f, base_seed, f_index, n_inner, cfg=None):
    """Unbiased variances (levels x norms) of Q_l - Q_{l-1} over an inner K ensemble.

    Row 0 holds the variance of Q_0 itself.
    """
    top = dh.top
    deltas = [[] for _ in range(top + 1)]
    for k in range(n_inner):
        key = randfield.seed_key(base_seed, K_TERM, f_index * n_inner + k)
        s = randfield.sample(factor, key, upto=pts.level_end[top], index=k)
        K = [randfield.level_view(s, pts, l)[0] for l in range(top + 1)]
        mg = dh.multigrid(K)
        prev = None
        for l in range(top + 1):
            phi, _ = darcy_solve(dh, l, K, f, cfg, mg)
            deltas[l].append(phi if prev is None else phi - dh.P[l] @ prev)
            prev = phi
    out = np.zeros((top + 1, len(NORMS)))
    for l, rows in enumerate(deltas):
        rows = np.array(rows)
        centred = rows - rows.mean(axis=0)
        out[l] = sum(_phi_norms(dh.discs[l], c) ** 2 for c in centred) / (len(rows) - 1)
    return out


def slope(h, v):
    """log-log slope of v against h; invariant under v -> c v."""
    return fit_exponent(h, v)


def estimate_beta(sigmas=(0.02, 0.8, 1.2), n_samples=40, levels=2, norms=NORMS, base_seed=0,
                  n_inner=50, h0=0.25, cov=None, cfg=None, hier=None, progress=None):
    """Fit beta per norm over v_0 = Var Q_0 and the corrections v_1..v_levels."""
    if levels < 1:
        raise ValueError("beta needs at least two levels")
    if n_samples < 1 or n_inner < 2:
        raise ValueError("need n_samples >= 1 and n_inner >= 2")
    hier = mesh.build_hierarchy(h0=h0, L=levels) if hier is None else hier
    cov = randfield.CovarianceSpec() if cov is None else cov
    pts = randfield.build_point_set(hier)
    factor = randfield.factorize(randfield.covariance_matrix(pts, cov), keep_R=False)
    dh = DarcyHierarchy(hier, levels)
    h = np.array([lv.h for lv in hier.levels[: levels + 1]])
    cols = [NORMS.index(n) for n in norms]
    V = np.zeros((n_samples, levels + 1, len(NORMS)))
    for j in range(n_samples):
        # the Darcy solution is linear in f, so one unit-amplitude solve serves every sigma
        f = WhiteNoiseForcing.draw(hier.levels[0], 1.0, randfield.seed_key(base_seed, F_TERM, j))
        V[j] = correction_variances(dh, factor, pts, f, base_seed, j, n_inner, cfg)
        if progress:
            progress(j)
    per_sample, beta, excluded = {}, {}, 0
    for sigma in sigmas:
        for c, name in zip(cols, norms):
            vals = []
            for j in range(n_samples):
                v = sigma ** 2 * V[j, :, c]
                if np.any(v <= 0) or not np.all(np.isfinite(v)):
                    excluded += 1
                    warnings.warn(f"forcing sample {j}: degenerate variance, excluded from beta")
                    continue
                vals.append(slope(h, v))
            per_sample[(sigma, name)] = np.array(vals)
    for name in norms:
        beta[name] = float(np.mean([per_sample[(s, name)].mean() for s in sigmas]))
    return BetaEstimate(beta=beta, per_sample=per_sample, variances=V, sigmas=tuple(sigmas), h=h,
                        n_samples=n_samples, n_inner=n_inner, excluded=excluded)


def estimate_gamma(reports=None, h=None, costs=None, seconds=None):
    """gamma = slope of log C_l against log(1/h_l) over >= 3 levels.

    Either pass SolveReports (with ``h`` indexed by level) or per-level
    ``costs`` directly.
    """
    if reports is not None:
        levels = sorted({r.level for r in reports})
        costs = [np.mean([r.flops for r in reports if r.level == l]) for l in levels]
        seconds = [np.mean([r.seconds for r in reports if r.level == l]) for l in levels]
        h = np.asarray(h, dtype=float)[levels]
    else:
        levels = list(range(len(costs)))
    h = np.asarray(h, dtype=float)
    costs = np.asarray(costs, dtype=float)
    if len(costs) < 3:
        raise ValueError("gamma fit needs costs on at least 3 levels")
    x, y = np.log(1.0 / h), np.log(costs)
    g, c0 = np.polyfit(x, y, 1)
    resid = y - (g * x + c0)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    gs = None
    if seconds is not None:
        seconds = np.asarray(seconds, dtype=float)
        gs = fit_exponent(1.0 / h, seconds) if np.all(seconds > 0) else None
    return GammaEstimate(h=h, costs=costs, gamma=float(g), r2=float(r2), seconds=seconds,
                         gamma_seconds=gs, levels=list(levels))
