"""Geometric multigrid for the coupled block system.

Relaxation is distributive Gauss-Seidel with the least-squares commutator
right operator ``M``::

        [ I  0   0              ]
    M = [ 0  I   B_p'           ]
        [ 0  0  -(B_p B_p')^{-1} B_p A_s B_p' ]

so that ``S = L M`` has ``B_p B_p'`` in its pressure-pressure position.  A
forward Gauss-Seidel sweep on ``S y = b`` is carried out in correction
form and mapped back through ``M``; the iterate kept by the cycle is the
original unknown ``x = M y``, so ``b - S y = b - L x`` at all times.
"""
import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverSetupError(RuntimeError):
    pass


class SmootherError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class OpCounter:
    """Deterministic floating-point operation tally."""
    flops: float = 0.0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind, n):
        self.flops += n
        self.by_kind[kind] = self.by_kind.get(kind, 0.0) + n


def _count(counter, kind, n):
    if counter is not None:
        counter.add(kind, float(n))


@dataclass(frozen=True)
class CycleConfig:
    pre: int = 2
    post: int = 2
    cycle: str = "V"
    tol: float = 1e-8
    max_cycles: int = 50

    def __post_init__(self):
        if self.pre < 0 or self.post < 0 or self.pre + self.post < 1:
            raise ValueError("need pre, post >= 0 and pre + post >= 1")
        if self.cycle != "V":
            raise NotImplementedError(f"{self.cycle}-cycles are reserved; only V is implemented")
        if not self.tol > 0 or self.max_cycles < 1:
            raise ValueError("tol must be positive and max_cycles >= 1")


@dataclass
class SolveReport:
    level: int
    sample: int
    cycles: int
    converged: bool
    residuals: list
    flops: float
    seconds: float
    warm_start: bool = False

    @property
    def initial_residual(self):
        return self.residuals[0]

    @property
    def final_residual(self):
        return self.residuals[-1]

    @property
    def contractions(self):
        r = self.residuals
        return [r[i + 1] / r[i] for i in range(len(r) - 1) if r[i] > 0]

    @property
    def mean_contraction(self):
        c = self.contractions
        if not c:
            return 0.0
        return float(np.exp(np.mean(np.log(np.maximum(c, 1e-300)))))

    def to_json(self, wall_clock=False):
        d = asdict(self)
        if not wall_clock:
            d.pop("seconds")
        return json.dumps(d, sort_keys=True)


def _lower_solver(T, what):
    """Triangular solve with the lower triangle ``T`` (csr)."""
    d = T.diagonal()
    if np.any(d == 0):
        raise SmootherError(f"zero diagonal entry in the {what} block")
    lu = spla.splu(T.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0.0,
                   options=dict(SymmetricMode=True))
    return lu.solve


def factor_flops(lu):
    """Operation estimate of a sparse LU: sum over pivots of |L col| * |U row|."""
    lc = np.diff(lu.L.indptr) - 1
    ur = np.bincount(lu.U.indices, minlength=lu.U.shape[0])
    return float(np.sum(lc * ur) + lu.U.shape[0])


def lu_flops(lu):
    return 2.0 * (lu.L.nnz + lu.U.nnz)


class _DirectSolver:
    def __init__(self, A):
        A = sp.csc_matrix(A)
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                self.lu = spla.splu(A)
            except (RuntimeError, spla.MatrixRankWarning) as exc:
                raise np.linalg.LinAlgError(f"singular matrix: {exc}") from exc
        d = np.abs(self.lu.U.diagonal())
        if d.min() <= 1e-13 * d.max():
            raise np.linalg.LinAlgError("matrix is numerically singular")
        self.setup_flops = factor_flops(self.lu)
        self.solve_flops = lu_flops(self.lu)

    def solve(self, b, counter=None):
        _count(counter, "direct", self.solve_flops)
        return self.lu.solve(b)


class PressureCache:
    """K-independent pieces of the distributive smoother, one entry per level."""

    def __init__(self):
        self._store = {}

    def get(self, key, Bp, Bpt):
        hit = self._store.get(key)
        if hit is None:
            BB = (Bp @ Bpt).tocsr()
            BB.sort_indices()
            try:
                direct = _DirectSolver(BB)
            except np.linalg.LinAlgError as exc:
                raise SolverSetupError(f"B_p B_p' is singular: {exc}") from exc
            tril = sp.tril(BB, format="csr")
            hit = (BB, direct, _lower_solver(tril, "B_p B_p'"), tril.nnz)
            self._store[key] = hit
        return hit


class LscOperator:
    """One level of the coupled system with its distributive smoother."""

    def __init__(self, sys, cache=None):
        self.sys = sys
        s = sys.level.field_slices()
        self.nw = s["p"].start
        self.nu0 = s["ux"].start
        self.n = sys.matrix.shape[0]
        L = sys.matrix
        self.matrix = L
        self.dirichlet = sys.dirichlet
        self.A = L[: self.nw, : self.nw].tocsr()
        self.Bw = L[self.nw:, : self.nw].tocsr()
        self.Bp = sys.Bp
        self.Bpt = sys.Bpt
        self.A_s = sys.A_s
        key = (sys.level.index, sys.level.ndof, sys.dirichlet.tobytes())
        cache = PressureCache() if cache is None else cache
        self.BB, self.BB_direct, self.BB_lower, self._nnz_BB_lower = cache.get(key, self.Bp, self.Bpt)
        tril = sp.tril(self.A, format="csr")
        self.A_lower = _lower_solver(tril, "(phi, u)")
        self._nnz_A_lower = tril.nnz
        self.setup_flops = 2.0 * tril.nnz
        self.pinned = False

    # -- right operator ----------------------------------------------------------
    def _schur_apply(self, q, counter=None):
        """(B_p B_p')^{-1} B_p A_s B_p' q."""
        v = self.Bp @ (self.A_s @ (self.Bpt @ q))
        _count(counter, "matvec", 2 * (self.Bpt.nnz + self.A_s.nnz + self.Bp.nnz))
        return self.BB_direct.solve(v, counter)

    def apply_M(self, y, counter=None):
        y = np.asarray(y, dtype=float)
        x = y.copy()
        q = y[self.nw:]
        x[self.nu0: self.nw] += self.Bpt @ q
        x[self.nw:] = -self._schur_apply(q, counter)
        _count(counter, "matvec", 2 * self.Bpt.nnz)
        return x

    def apply_S(self, y):
        return self.matrix @ self.apply_M(y)

    def S_dense(self):
        """Dense S = L M, for small levels only."""
        n = self.n
        M = np.column_stack([self.apply_M(e) for e in np.eye(n)])
        return self.matrix @ M

    # -- relaxation ----------------------------------------------------------------
    def residual(self, x, b, counter=None):
        _count(counter, "matvec", 2 * self.matrix.nnz)
        return b - self.matrix @ x

    def relax(self, x, b, sweeps, counter=None, forward=True):
        """``sweeps`` forward Gauss-Seidel sweeps on S y = b, applied to x = M y."""
        x = np.array(x, dtype=float)
        nw = self.nw
        for _ in range(sweeps):
            r = self.residual(x, b, counter)
            dw = self.A_lower(r[:nw])
            rq = r[nw:] - self.Bw @ dw
            dq = self.BB_lower(rq)
            _count(counter, "smooth", 2 * (self._nnz_A_lower + self.Bw.nnz + self._nnz_BB_lower))
            x[:nw] += dw
            x[self.nu0: nw] += self.Bpt @ dq
            x[nw:] -= self._schur_apply(dq, counter)
            _count(counter, "matvec", 2 * self.Bpt.nnz)
        return x

    def direct(self):
        try:
            return _DirectSolver(self.matrix)
        except np.linalg.LinAlgError:
            pass
        # constant-pressure mode: fix the mean of p with a rank-one term
        lv = self.sys.level
        w = np.zeros(self.n)
        areas = lv.areas[lv.p_space.tris]
        np.add.at(w, self.nw + lv.p_space.cells, np.repeat(areas[:, None] / 3.0, 3, axis=1))
        scale = np.abs(self.A.diagonal()).mean() / (w @ w)
        W = sp.csr_matrix(w[:, None])
        pinned = (self.matrix + scale * (W @ W.T)).tocsr()
        try:
            solver_ = _DirectSolver(pinned)
        except np.linalg.LinAlgError as exc:
            raise SolverSetupError(f"coarse system singular after pressure pinning: {exc}") from exc
        self.pinned = True
        return solver_


class ScalarOperator:
    """Symmetric Gauss-Seidel multigrid level for an SPD scalar matrix."""

    def __init__(self, A, dirichlet):
        self.matrix = sp.csr_matrix(A)
        self.dirichlet = np.asarray(dirichlet, dtype=bool)
        self.n = self.matrix.shape[0]
        lo = sp.tril(self.matrix, format="csr")
        up = sp.triu(self.matrix, format="csr")
        self._lower = _lower_solver(lo, "scalar")
        self._upper = spla.splu(up.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True)).solve
        self._nnz = lo.nnz
        self.setup_flops = 2.0 * (lo.nnz + up.nnz)

    def residual(self, x, b, counter=None):
        _count(counter, "matvec", 2 * self.matrix.nnz)
        return b - self.matrix @ x

    def relax(self, x, b, sweeps, counter=None, forward=True):
        x = np.array(x, dtype=float)
        solve = self._lower if forward else self._upper
        for _ in range(sweeps):
            r = self.residual(x, b, counter)
            x += solve(r)
            _count(counter, "smooth", 2 * self._nnz)
        return x

    def direct(self):
        return _DirectSolver(self.matrix)


def build_lsc(sys, cache=None):
    return LscOperator(sys, cache)


def smooth(op, b, y, sweeps):
    """Forward Gauss-Seidel on S y = b; returns the updated y."""
    x = op.apply_M(y)
    x = op.relax(x, b, sweeps)
    # recover y from x: pressure part through the Schur block, the rest by subtraction
    q_new = _solve_schur(op, x[op.nw:])
    y_new = x.copy()
    y_new[op.nw:] = q_new
    y_new[op.nu0: op.nw] -= op.Bpt @ q_new
    return y_new


def _solve_schur(op, xp):
    """q with -(B B')^{-1} B A_s B' q = xp."""
    G = (op.Bp @ op.A_s @ op.Bpt).tocsc()
    return spla.spsolve(G, -(op.BB @ xp))


class Multigrid:
    """Operators on levels 0..top for one sample plus the inter-level transfers."""

    def __init__(self, ops, prolongations, counter=None, coarse=None):
        self.ops = list(ops)
        self.P = [None] + [sp.csr_matrix(p) for p in prolongations[1: len(self.ops)]]
        self.R = [None] + [p.T.tocsr() for p in self.P[1:]]
        self.counter = counter
        # a level-0 factorization may be shared between stacks of the same sample
        self._direct = coarse

    @property
    def top(self):
        return len(self.ops) - 1

    @property
    def coarse(self):
        if self._direct is None:
            self._direct = self.ops[0].direct()
            _count(self.counter, "factor", self._direct.setup_flops)
        return self._direct

    def vcycle(self, level, x, b, cfg):
        op = self.ops[level]
        if level == 0:
            return self.coarse.solve(b, self.counter)
        x = op.relax(x, b, cfg.pre, self.counter, forward=True)
        r = op.residual(x, b, self.counter)
        rc = self.R[level] @ r
        rc[self.ops[level - 1].dirichlet] = 0.0
        _count(self.counter, "transfer", 2 * self.R[level].nnz)
        ec = self.vcycle(level - 1, np.zeros_like(rc), rc, cfg)
        e = self.P[level] @ ec
        e[op.dirichlet] = 0.0
        _count(self.counter, "transfer", 2 * self.P[level].nnz)
        x = x + e
        return op.relax(x, b, cfg.post, self.counter, forward=False)


def vcycle(mg, level, b, x0, cfg):
    return mg.vcycle(level, np.asarray(x0, dtype=float), np.asarray(b, dtype=float), cfg)


def solve(mg, b, x0=None, cfg=None, sample=-1, raise_on_failure=True):
    """V-cycles on the top level until ||b - L x|| <= tol ||b||."""
    cfg = CycleConfig() if cfg is None else cfg
    counter = mg.counter if mg.counter is not None else OpCounter()
    mg.counter = counter
    start_flops = counter.flops
    t0 = time.perf_counter()
    level = mg.top
    op = mg.ops[level]
    b = np.asarray(b, dtype=float)
    warm = x0 is not None
    if x0 is None:
        x = np.zeros_like(b)
    else:
        x = np.array(x0, dtype=float)
    # Dirichlet rows are identity rows: start on the constraint
    x[op.dirichlet] = b[op.dirichlet]
    bnorm = np.linalg.norm(b)
    res = [float(np.linalg.norm(op.residual(x, b, counter)))]
    cycles = 0
    if level == 0:
        x = mg.coarse.solve(b, counter)
        res.append(float(np.linalg.norm(op.residual(x, b, counter))))
        cycles = 1
    while res[-1] > cfg.tol * bnorm and cycles < cfg.max_cycles:
        x = mg.vcycle(level, x, b, cfg)
        res.append(float(np.linalg.norm(op.residual(x, b, counter))))
        cycles += 1
        if not np.isfinite(res[-1]):
            break
    converged = bool(res[-1] <= cfg.tol * bnorm)
    report = SolveReport(level=level, sample=sample, cycles=cycles, converged=converged,
                         residuals=res, flops=counter.flops - start_flops,
                         seconds=time.perf_counter() - t0, warm_start=warm)
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"sample {sample}: no convergence on level {level} after {cycles} cycles "
            f"(relative residual {res[-1] / max(bnorm, 1e-300):.3e})", report)
    return x, report


def write_reports(reports, path, wall_clock=False):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json(wall_clock) + "\n")
