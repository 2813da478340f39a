"""Coupled Stokes-Darcy assembly on one mesh level for one conductivity sample.

Unknowns are ordered ``(phi_m, u_x, u_y, p_s)``; the assembled matrix has
the block form::

    [ A_m  B_1  0   ]
    [ B_2  A_s  B_p']
    [ 0    B_p  0   ]

with ``B_p' = B_p^T``.  ``B_p`` holds ``-(q, div v)`` so the saddle-point
matrix is symmetric apart from the interface coupling.  The interface
normal ``n_s`` points from the conduit into the porous medium.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import elements
from .mesh import POROUS

FIELDS = ("phi", "ux", "uy", "p")


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalParams:
    nu: float = 1.0
    g: float = 1.0
    alpha: float = 1.0
    z: float = 0.0
    d: int = 2

    def __post_init__(self):
        if self.nu <= 0 or self.g <= 0:
            raise ValueError("nu and g must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.d != 2:
            raise ValueError("only d = 2 is supported")

    def bj_coefficient(self, K):
        """alpha nu sqrt(d) / sqrt(trace Pi) with Pi = K nu / g times identity."""
        trace_pi = self.d * np.asarray(K) * self.nu / self.g
        return self.alpha * self.nu * np.sqrt(self.d) / np.sqrt(trace_pi)


def default_velocity_bc(x, y, domain=None):
    """u = (1, 0) on the conduit side walls, no-slip on the bottom wall."""
    x, y = np.asarray(x), np.asarray(y)
    y_bottom = -0.25 if domain is None else domain.y_bottom
    side = ~np.isclose(y, y_bottom)
    return np.where(side, 1.0, 0.0), np.zeros_like(np.asarray(x, dtype=float))


@dataclass
class ForcingData:
    f_m: object = 0.0
    f_s: object = None
    phi_bc: object = 0.0
    u_bc: object = None
    interface_dirichlet: bool = False

    def source(self, xy):
        return _evaluate(self.f_m, xy)

    def body_force(self, xy):
        if self.f_s is None:
            return np.zeros(xy.shape[:-1]), np.zeros(xy.shape[:-1])
        fx, fy = self.f_s(xy[..., 0], xy[..., 1])
        return np.broadcast_to(fx, xy.shape[:-1]), np.broadcast_to(fy, xy.shape[:-1])

    def head_bc(self, xy):
        return _evaluate(self.phi_bc, xy)

    def velocity_bc(self, xy, domain):
        if self.u_bc is None:
            return default_velocity_bc(xy[:, 0], xy[:, 1], domain)
        ux, uy = self.u_bc(xy[:, 0], xy[:, 1])
        return np.broadcast_to(ux, len(xy)).astype(float), np.broadcast_to(uy, len(xy)).astype(float)


def _evaluate(f, xy):
    if callable(f):
        return np.broadcast_to(np.asarray(f(xy[..., 0], xy[..., 1]), dtype=float), xy.shape[:-1])
    return np.full(xy.shape[:-1], float(f))


def _sym(loc):
    # element matrices built by einsum can differ from their transpose in the last bit
    return 0.5 * (loc + loc.transpose(0, 2, 1))


def _local_to_coo(row_cells, col_cells):
    r = np.broadcast_to(row_cells[:, :, None], row_cells.shape + (col_cells.shape[1],))
    c = np.broadcast_to(col_cells[:, None, :], (row_cells.shape[0], row_cells.shape[1], col_cells.shape[1]))
    return r.ravel(), c.ravel()


class _Pattern:
    """Fixed COO -> CSR map so repeated assembly only sums values."""

    def __init__(self, rows, cols, shape):
        self.shape = shape
        keys = rows.astype(np.int64) * shape[1] + cols
        uniq, self.perm = np.unique(keys, return_inverse=True)
        self.indptr = np.searchsorted(uniq // shape[1], np.arange(shape[0] + 1))
        self.indices = (uniq % shape[1]).astype(np.int32)

    def matrix(self, values):
        data = np.bincount(self.perm, weights=np.ravel(values), minlength=len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr.copy()), shape=self.shape)


@dataclass
class BlockSystem:
    level: object
    matrix: sp.csr_matrix
    b: np.ndarray
    raw: sp.csr_matrix             # before Dirichlet elimination
    dirichlet: np.ndarray          # bool mask over all DoFs
    dirichlet_values: np.ndarray   # full-length, zero off the mask
    params: PhysicalParams
    pinned: bool = False
    assembly_flops: float = 0.0

    def _block(self, r, c):
        s = self.level.field_slices()
        rs = {"phi": s["phi"], "u": slice(s["ux"].start, s["uy"].stop), "p": s["p"]}
        return self.matrix[rs[r], :][:, rs[c]].tocsr()

    @cached_property
    def A_m(self):
        return self._block("phi", "phi")

    @cached_property
    def B1(self):
        return self._block("phi", "u")

    @cached_property
    def B2(self):
        return self._block("u", "phi")

    @cached_property
    def A_s(self):
        return self._block("u", "u")

    @cached_property
    def Bp(self):
        return self._block("p", "u")

    @cached_property
    def Bpt(self):
        return self._block("u", "p")


@dataclass
class Solution:
    phi: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    p: np.ndarray
    level: int = 0
    sample: int = -1

    @classmethod
    def from_vector(cls, mesh_level, x, sample=-1):
        s = mesh_level.field_slices()
        return cls(*(np.array(x[s[f]]) for f in FIELDS), level=mesh_level.index, sample=sample)

    @property
    def vector(self):
        return np.concatenate([self.phi, self.ux, self.uy, self.p])


class Discretization:
    """K-independent data of one level, reused for every sample."""

    def __init__(self, level, params=None, data=None):
        self.level = level
        self.params = PhysicalParams() if params is None else params
        self.data = ForcingData() if data is None else data
        lv = level
        self.slices = lv.field_slices()
        self.ndof = lv.ndof
        area, grad_lam = lv.geometry
        w = elements.TRI7_WEIGHTS
        self.N2 = elements.p2_values(elements.TRI7_BARY)           # (7, 6)

        # porous
        pt = lv.phi_space.tris
        self.wm = area[pt][:, None] * w[None, :]                      # (ntm, 7)
        self.Gm = elements.p2_gradients(elements.TRI7_BARY, grad_lam[pt])
        off = self.slices["phi"].start
        self.phi_cells = lv.phi_space.cells + off

        # conduit
        ct = lv.u_space.tris
        ws = area[ct][:, None] * w[None, :]
        Gs = elements.p2_gradients(elements.TRI7_BARY, grad_lam[ct])
        ux_cells = lv.u_space.cells + self.slices["ux"].start
        uy_cells = lv.u_space.cells + self.slices["uy"].start
        p_cells = lv.p_space.cells + self.slices["p"].start
        self.ux_cells, self.uy_cells, self.p_cells = ux_cells, uy_cells, p_cells
        self.ws, self.Gs = ws, Gs

        # interface traces
        ipq = lv.interface_quad_points
        self.wi = lv.interface_quad_weights
        tp, tc = lv.interface_porous, lv.interface_conduit
        lam_c = elements.barycentric(lv.tri_coords[tc], ipq)
        lam_p = elements.barycentric(lv.tri_coords[tp], ipq)
        self.Nc = elements.p2_values(lam_c)                           # (ne, 3, 6)
        self.Np = elements.p2_values(lam_p)
        dNp = elements.p2_bary_derivatives(lam_p)                     # (ne, 3, 6, 3)
        self.Gp = np.einsum("eqak,ekd->eqad", dNp, grad_lam[tp])
        row_of = np.full(len(lv.triangles), -1)
        row_of[ct] = np.arange(len(ct))
        self.iface_ux = ux_cells[row_of[tc]]
        self.iface_uy = uy_cells[row_of[tc]]
        row_of[:] = -1
        row_of[pt] = np.arange(len(pt))
        self.iface_phi = self.phi_cells[row_of[tp]]

        self._build_fixed(Gs, ws, p_cells)
        self._build_patterns()
        self._build_dirichlet()
        self._build_rhs()

    # -- K independent pieces ------------------------------------------------
    def _build_fixed(self, Gs, ws, p_cells):
        nu = self.params.nu
        gx, gy = Gs[..., 0], Gs[..., 1]
        xx = np.einsum("tq,tqb,tqa->tba", ws, gx, gx)
        yy = np.einsum("tq,tqb,tqa->tba", ws, gy, gy)
        xy = np.einsum("tq,tqb,tqa->tba", ws, gy, gx)    # test d/dy, trial d/dx
        yx = xy.transpose(0, 2, 1)
        blocks = [
            (self.ux_cells, self.ux_cells, _sym(2 * nu * xx + nu * yy)),
            (self.uy_cells, self.uy_cells, _sym(nu * xx + 2 * nu * yy)),
            (self.ux_cells, self.uy_cells, nu * xy),
            (self.uy_cells, self.ux_cells, nu * yx),
        ]
        lam = elements.TRI7_BARY
        bx = -np.einsum("tq,qk,tqa->tka", ws, lam, gx)
        by = -np.einsum("tq,qk,tqa->tka", ws, lam, gy)
        blocks += [
            (p_cells, self.ux_cells, bx),
            (p_cells, self.uy_cells, by),
            (self.ux_cells, p_cells, bx.transpose(0, 2, 1)),
            (self.uy_cells, p_cells, by.transpose(0, 2, 1)),
        ]
        # interface normal-velocity coupling, n_s = (0, 1)
        g = self.params.g
        cpl = np.einsum("eq,eqb,eqa->eba", self.wi, self.Np, self.Nc)
        blocks += [
            (self.iface_phi, self.iface_uy, -g * cpl),
            (self.iface_uy, self.iface_phi, g * cpl.transpose(0, 2, 1)),
        ]
        rows, cols, vals = [], [], []
        for rc, cc, loc in blocks:
            r, c = _local_to_coo(rc, cc)
            rows.append(r)
            cols.append(c)
            vals.append(loc.ravel())
        n = self.ndof
        self.fixed = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(n, n))

    def _build_patterns(self):
        n = self.ndof
        r1, c1 = _local_to_coo(self.phi_cells, self.phi_cells)
        r2, c2 = _local_to_coo(self.iface_ux, self.iface_ux)
        r3, c3 = _local_to_coo(self.iface_ux, self.iface_phi)
        self._nK = (len(r1), len(r2), len(r3))
        self.kpattern = _Pattern(np.concatenate([r1, r2, r3]), np.concatenate([c1, c2, c3]), (n, n))

    def _build_dirichlet(self):
        lv, dom, data = self.level, self.level.domain, self.data
        n = self.ndof
        mask = np.zeros(n, dtype=bool)
        vals = np.zeros(n)
        c = lv.phi_space.coords
        on = (np.isclose(c[:, 0], dom.x_left) | np.isclose(c[:, 0], dom.x_right)
              | np.isclose(c[:, 1], dom.y_top))
        if data.interface_dirichlet:
            on |= np.isclose(c[:, 1], dom.y_interface)
        idx = np.flatnonzero(on)
        mask[self.slices["phi"].start + idx] = True
        vals[self.slices["phi"].start + idx] = data.head_bc(c[idx])
        c = lv.u_space.coords
        on = (np.isclose(c[:, 0], dom.x_left) | np.isclose(c[:, 0], dom.x_right)
              | np.isclose(c[:, 1], dom.y_bottom))
        if data.interface_dirichlet:
            on |= np.isclose(c[:, 1], dom.y_interface)
        idx = np.flatnonzero(on)
        ux, uy = data.velocity_bc(c[idx], dom)
        for f, v in (("ux", ux), ("uy", uy)):
            mask[self.slices[f].start + idx] = True
            vals[self.slices[f].start + idx] = v
        self.dirichlet, self.dirichlet_values = mask, vals
        self.keep = sp.diags((~mask).astype(float))
        self.dirichlet_diag = sp.diags(mask.astype(float))

    def _build_rhs(self):
        lv, data, g = self.level, self.data, self.params.g
        n = self.ndof
        b = np.zeros(n)
        qm = lv.quad_points[lv.phi_space.tris]
        fm = data.source(qm)
        np.add.at(b, self.phi_cells, g * np.einsum("tq,tq,qb->tb", self.wm, fm, self.N2))
        qs = lv.quad_points[lv.u_space.tris]
        fx, fy = data.body_force(qs)
        np.add.at(b, self.ux_cells, np.einsum("tq,tq,qb->tb", self.ws, fx, self.N2))
        np.add.at(b, self.uy_cells, np.einsum("tq,tq,qb->tb", self.ws, fy, self.N2))
        z = _evaluate(self.params.z, lv.interface_quad_points)
        np.add.at(b, self.iface_uy, np.einsum("eq,eq,eqb->eb", self.wi, g * z, self.Nc))
        self.rhs = b

    # -- per sample ------------------------------------------------------------
    def k_matrix(self, K_quad, K_iface):
        g = self.params.g
        loc_m = _sym(g * np.einsum("tq,tqad,tqbd->tab", self.wm * K_quad, self.Gm, self.Gm))
        c = self.params.bj_coefficient(K_iface)
        bj = _sym(np.einsum("eq,eqb,eqa->eba", self.wi * c, self.Nc, self.Nc))
        bjk = np.einsum("eq,eqb,eqa->eba", self.wi * c * K_iface, self.Nc, self.Gp[..., 0])
        return self.kpattern.matrix(np.concatenate([loc_m.ravel(), bj.ravel(), bjk.ravel()]))

    def assemble(self, K_quad, K_iface):
        K_quad = np.asarray(K_quad, dtype=float)
        K_iface = np.asarray(K_iface, dtype=float)
        if K_quad.shape != self.wm.shape or K_iface.shape != self.wi.shape:
            raise AssemblyError("conductivity values do not match the level's quadrature points")
        if not (np.all(np.isfinite(K_quad)) and np.all(K_quad > 0)
                and np.all(np.isfinite(K_iface)) and np.all(K_iface > 0)):
            raise AssemblyError("conductivity must be positive at every quadrature point")
        L = (self.fixed + self.k_matrix(K_quad, K_iface)).tocsr()
        gD = self.dirichlet_values
        b = self.keep @ (self.rhs - L @ gD) + gD
        Le = (self.keep @ L @ self.keep + self.dirichlet_diag).tocsr()
        Le.eliminate_zeros()
        Le.sort_indices()
        return BlockSystem(level=self.level, matrix=Le, b=b, raw=L, dirichlet=self.dirichlet,
                           dirichlet_values=gD, params=self.params,
                           assembly_flops=self.assembly_flops)

    @cached_property
    def assembly_flops(self):
        nK = sum(self._nK)
        return float(2 * 7 * nK + 2 * self.fixed.nnz)

    # -- norms -----------------------------------------------------------------
    def field_values(self, name, coef):
        """Values and gradients of a field at its subdomain's quadrature points."""
        lv = self.level
        if name == "phi":
            cells, G, w = lv.phi_space.cells, self.Gm, self.wm
            vals = coef[cells] @ self.N2.T
        elif name in ("ux", "uy"):
            cells, G, w = lv.u_space.cells, self.Gs, self.ws
            vals = coef[cells] @ self.N2.T
        elif name == "p":
            cells, w = lv.p_space.cells, self.ws
            vals = coef[cells] @ elements.TRI7_BARY.T
            grad_lam = lv.geometry[1][lv.p_space.tris]
            grads = np.einsum("tk,tkd->td", coef[cells], grad_lam)
            return vals, np.broadcast_to(grads[:, None, :], vals.shape + (2,)), w
        else:
            raise KeyError(name)
        grads = np.einsum("ta,tqad->tqd", coef[cells], G)
        return vals, grads, w


def assemble(level, K_quad, K_iface, params=None, data=None, disc=None):
    disc = Discretization(level, params, data) if disc is None else disc
    return disc.assemble(K_quad, K_iface)


def qoi(sol, which):
    if which == "phi":
        return sol.phi
    if which == "u":
        return np.stack([sol.ux, sol.uy])
    if which == "p":
        return sol.p
    raise KeyError(f"unknown quantity of interest {which!r}; expected 'phi', 'u' or 'p'")


def _norm_parts(disc, name, coef):
    vals, grads, w = disc.field_values(name, np.asarray(coef, dtype=float))
    l2sq = float(np.sum(w * vals ** 2))
    semi = float(np.sum(w * np.sum(grads ** 2, axis=-1)))
    linf = max(float(np.max(np.abs(vals), initial=0.0)), float(np.max(np.abs(coef), initial=0.0)))
    return l2sq, semi, linf


def norms(sol, level, disc=None):
    """(L2, Linf, H1) norms of each field: 'phi', 'u' (vector) and 'p'."""
    disc = Discretization(level) if disc is None else disc
    out = {}
    for name, parts in (("phi", ["phi"]), ("u", ["ux", "uy"]), ("p", ["p"])):
        l2sq = semi = linf = 0.0
        for f in parts:
            a, b, c = _norm_parts(disc, f, getattr(sol, f))
            l2sq, semi, linf = l2sq + a, semi + b, max(linf, c)
        out[name] = (np.sqrt(l2sq), linf, np.sqrt(l2sq + semi))
    return out


def combined_norm(sol, level, kind, disc=None):
    """Norm of the whole (phi, u, p) state: root-sum-square over fields, max for Linf."""
    per = norms(sol, level, disc)
    col = {"L2": 0, "Linf": 1, "H1": 2}[kind]
    if kind == "Linf":
        return max(v[col] for v in per.values())
    return float(np.sqrt(sum(v[col] ** 2 for v in per.values())))


def discrete_divergence(sol, sys):
    """Euclidean norm of the discrete divergence (q_k, div u_h) over all pressure basis functions."""
    s = sys.level.field_slices()
    B = sys.raw[s["p"], :][:, s["ux"].start:s["uy"].stop]
    return float(np.linalg.norm(B @ np.concatenate([sol.ux, sol.uy])))


def interface_flux_imbalance(sol, disc, K_iface):
    """int u_s . n_s - int (K grad phi) . n_m over the interface."""
    ux_cells = disc.iface_uy - disc.slices["uy"].start
    phi_cells = disc.iface_phi - disc.slices["phi"].start
    un = np.einsum("eqa,ea->eq", disc.Nc, sol.uy[ux_cells])
    dphidy = np.einsum("eqa,ea->eq", disc.Gp[..., 1], sol.phi[phi_cells])
    flux_m = K_iface * (-dphidy)
    return float(np.sum(disc.wi * (un - flux_m)))


def export_coo(matrix, path):
    m = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write(f"# {m.shape[0]} {m.shape[1]} {m.nnz}\n")
        for r, c, v in zip(m.row, m.col, m.data):
            fh.write(f"{r} {c} {v:.17g}\n")


# -- scalar Darcy problem --------------------------------------------------------

class DarcyDiscretization:
    """-div(K grad phi) = f on the porous rectangle, phi = 0 on its whole boundary."""

    def __init__(self, level):
        self.level = level
        self.parent = Discretization(level, data=ForcingData(interface_dirichlet=True))
        s = self.parent.slices["phi"]
        self.n = s.stop - s.start
        self.cells = level.phi_space.cells
        r, c = _local_to_coo(self.cells, self.cells)
        self.pattern = _Pattern(r, c, (self.n, self.n))
        mask = self.parent.dirichlet[s]
        self.dirichlet = mask
        self.keep = sp.diags((~mask).astype(float))
        self.dirichlet_diag = sp.diags(mask.astype(float))
        self.cell_area = level.areas[level.phi_space.tris]

    def matrix(self, K_quad):
        if not np.all(np.asarray(K_quad) > 0):
            raise AssemblyError("conductivity must be positive at every quadrature point")
        p = self.parent
        loc = _sym(np.einsum("tq,tqad,tqbd->tab", p.wm * K_quad, p.Gm, p.Gm))
        A = self.pattern.matrix(loc)
        return (self.keep @ A @ self.keep + self.dirichlet_diag).tocsr()

    def rhs(self, f_cell):
        """Load vector of a source that is constant on each porous triangle."""
        p = self.parent
        b = np.zeros(self.n)
        np.add.at(b, self.cells, np.einsum("tq,t,qb->tb", p.wm, f_cell, p.N2))
        b[self.dirichlet] = 0.0
        return b

    def flops(self):
        return float(2 * 7 * self.pattern.perm.size)
