"""Nested triangulations of the coupled conduit / porous-medium domain.

The domain is two stacked rectangles sharing the segment y = 0.  Level 0
is a structured grid of right triangles; every further level is obtained
by uniform subdivision of each triangle into ``c_h**2`` children, so the
levels are nested and quasi-uniform.

Degrees of freedom of a level are laid out as one global vector::

    [ phi (P2 on porous) | u_x (P2 on conduit) | u_y | p (P1 on conduit) ]

Interface nodes are owned separately by the porous and the conduit
spaces.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import elements

POROUS = 0
CONDUIT = 1

_KEY_SCALE = 1e10


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    x_left: float = 0.0
    x_right: float = 1.0
    y_bottom: float = -0.25
    y_interface: float = 0.0
    y_top: float = 0.75

    @property
    def porous_box(self):
        return (self.x_left, self.x_right, self.y_interface, self.y_top)

    @property
    def conduit_box(self):
        return (self.x_left, self.x_right, self.y_bottom, self.y_interface)

    @property
    def porous_area(self):
        return (self.x_right - self.x_left) * (self.y_top - self.y_interface)

    @property
    def interface_length(self):
        return self.x_right - self.x_left


@dataclass
class Space:
    """Lagrange space on the triangles of one subdomain."""

    degree: int
    tris: np.ndarray     # (n_cells,) triangle ids in the level
    cells: np.ndarray    # (n_cells, 3 or 6) node ids
    coords: np.ndarray   # (n_nodes, 2)

    @property
    def size(self):
        return len(self.coords)


def _vertex_keys(xy):
    return np.rint(np.asarray(xy) * _KEY_SCALE).astype(np.int64)


def _lagrange_space(vertices, triangles, tris, degree):
    local = triangles[tris]
    used, vidx = np.unique(local, return_inverse=True)
    vidx = vidx.reshape(local.shape)
    coords = [vertices[used]]
    cells = vidx
    if degree == 2:
        pairs = np.concatenate([np.sort(vidx[:, list(e)], axis=1) for e in elements.P2_EDGES])
        edges, eidx = np.unique(pairs, axis=0, return_inverse=True)
        eidx = eidx.reshape(len(elements.P2_EDGES), -1).T + len(used)
        cells = np.concatenate([vidx, eidx], axis=1)
        coords.append(0.5 * (vertices[used][edges[:, 0]] + vertices[used][edges[:, 1]]))
    return Space(degree=degree, tris=tris, cells=cells, coords=np.concatenate(coords))


@dataclass
class MeshLevel:
    index: int
    h: float
    vertices: np.ndarray
    triangles: np.ndarray
    subdomain: np.ndarray
    domain: DomainSpec = field(default_factory=DomainSpec)
    parent: np.ndarray | None = None
    ancestor: np.ndarray | None = None

    def __post_init__(self):
        self.ancestor = np.arange(len(self.triangles)) if self.ancestor is None else self.ancestor
        self._find_interface()

    # -- geometry ----------------------------------------------------------
    @cached_property
    def tri_coords(self):
        return self.vertices[self.triangles]

    @cached_property
    def geometry(self):
        return elements.triangle_geometry(self.tri_coords)

    @property
    def areas(self):
        return self.geometry[0]

    @cached_property
    def diameters(self):
        c = self.tri_coords
        edges = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=-1).max(axis=1)

    @cached_property
    def quad_points(self):
        return np.einsum("qk,tkd->tqd", elements.TRI7_BARY, self.tri_coords)

    @cached_property
    def quad_weights(self):
        return self.areas[:, None] * elements.TRI7_WEIGHTS[None, :]

    def _find_interface(self):
        d = self.domain
        tri = self.triangles
        on = np.isclose(self.vertices[:, 1], d.y_interface, atol=1e-12)
        edge_tri = {}
        for t in range(len(tri)):
            for i, j in elements.P2_EDGES:
                a, b = tri[t, i], tri[t, j]
                if on[a] and on[b]:
                    edge_tri.setdefault((min(a, b), max(a, b)), []).append(t)
        edges, porous, conduit = [], [], []
        for (a, b), ts in edge_tri.items():
            if len(ts) != 2:
                raise GeometryError(f"interface edge {(a, b)} has {len(ts)} neighbours")
            tags = self.subdomain[ts]
            if set(tags.tolist()) != {POROUS, CONDUIT}:
                raise GeometryError("interface edge not shared by both subdomains")
            if self.vertices[a, 0] > self.vertices[b, 0]:
                a, b = b, a
            edges.append((a, b))
            porous.append(ts[int(np.argmax(tags == POROUS))])
            conduit.append(ts[int(np.argmax(tags == CONDUIT))])
        order = np.argsort([self.vertices[a, 0] for a, _ in edges])
        self.interface_edges = np.array(edges, dtype=np.int64).reshape(-1, 2)[order]
        self.interface_porous = np.array(porous, dtype=np.int64)[order]
        self.interface_conduit = np.array(conduit, dtype=np.int64)[order]
        self.normal = np.array([0.0, 1.0])   # n_s: conduit -> porous
        self.tangent = np.array([1.0, 0.0])

    @cached_property
    def interface_quad_points(self):
        a = self.vertices[self.interface_edges[:, 0]]
        b = self.vertices[self.interface_edges[:, 1]]
        t = elements.GAUSS3_T
        return a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]

    @cached_property
    def interface_quad_weights(self):
        e = self.interface_edges
        length = np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)
        return length[:, None] * elements.GAUSS3_WEIGHTS[None, :]

    # -- boundary ----------------------------------------------------------
    def boundary_vertices(self):
        """Vertex ids per boundary segment (closures)."""
        d = self.domain
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        left, right = np.isclose(x, d.x_left), np.isclose(x, d.x_right)
        top, bottom = np.isclose(y, d.y_top), np.isclose(y, d.y_bottom)
        up = y >= d.y_interface - 1e-12
        down = y <= d.y_interface + 1e-12
        return {
            "gamma_m": np.flatnonzero(((left | right) & up) | top),
            "gamma_s1": np.flatnonzero(left & down),
            "gamma_s2": np.flatnonzero(bottom),
            "gamma_s3": np.flatnonzero(right & down),
            "interface": np.flatnonzero(np.isclose(y, d.y_interface)),
        }

    # -- finite element spaces ---------------------------------------------
    @cached_property
    def porous_tris(self):
        return np.flatnonzero(self.subdomain == POROUS)

    @cached_property
    def conduit_tris(self):
        return np.flatnonzero(self.subdomain == CONDUIT)

    @cached_property
    def phi_space(self):
        return _lagrange_space(self.vertices, self.triangles, self.porous_tris, 2)

    @cached_property
    def u_space(self):
        return _lagrange_space(self.vertices, self.triangles, self.conduit_tris, 2)

    @cached_property
    def p_space(self):
        return _lagrange_space(self.vertices, self.triangles, self.conduit_tris, 1)

    @property
    def n_phi(self):
        return self.phi_space.size

    @property
    def n_u(self):
        return self.u_space.size

    @property
    def n_p(self):
        return self.p_space.size

    @property
    def ndof(self):
        return self.n_phi + 2 * self.n_u + self.n_p

    @property
    def offsets(self):
        o = np.cumsum([0, self.n_phi, self.n_u, self.n_u, self.n_p])
        return {"phi": o[0], "ux": o[1], "uy": o[2], "p": o[3], "end": o[4]}

    def field_slices(self):
        o = self.offsets
        return {
            "phi": slice(o["phi"], o["ux"]),
            "ux": slice(o["ux"], o["uy"]),
            "uy": slice(o["uy"], o["p"]),
            "p": slice(o["p"], o["end"]),
        }


def _structured_level0(domain, h0):
    lx = domain.x_right - domain.x_left
    lengths = [lx, domain.y_top - domain.y_interface, domain.y_interface - domain.y_bottom]
    if not h0 > 0:
        raise GeometryError(f"mesh width h0 must be positive, got {h0}")
    counts = []
    for length in lengths:
        n = length / h0
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise GeometryError(f"h0={h0} does not divide side length {length}")
        counts.append(int(round(n)))
    nx, ny = counts[0], counts[1] + counts[2]
    xs = domain.x_left + h0 * np.arange(nx + 1)
    ys = domain.y_bottom + h0 * np.arange(ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    vid = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid[j, i], vid[j, i + 1], vid[j + 1, i + 1], vid[j + 1, i]
            tris.append((a, b, c))
            tris.append((a, c, d))
    tris = np.array(tris, dtype=np.int64)
    centroid_y = vertices[tris, 1].mean(axis=1)
    subdomain = np.where(centroid_y > domain.y_interface, POROUS, CONDUIT).astype(np.int8)
    return vertices, tris, subdomain


def _lattice(c):
    pts = [(i, j) for j in range(c + 1) for i in range(c + 1 - j)]
    index = {p: n for n, p in enumerate(pts)}
    up = [(index[i, j], index[i + 1, j], index[i, j + 1])
          for j in range(c) for i in range(c - j)]
    down = [(index[i + 1, j], index[i + 1, j + 1], index[i, j + 1])
            for j in range(c - 1) for i in range(c - 1 - j)]
    return np.array(pts, dtype=float) / c, np.array(up + down, dtype=np.int64)


def refine(level, c_h):
    """Uniformly subdivide every triangle of ``level`` into ``c_h**2`` children."""
    st, children = _lattice(c_h)
    coords = level.tri_coords
    a = coords[:, 0, :]
    pts = a[:, None, :] + st[None, :, 0, None] * (coords[:, 1, :] - a)[:, None, :] \
        + st[None, :, 1, None] * (coords[:, 2, :] - a)[:, None, :]
    nt, npt = pts.shape[:2]
    flat = pts.reshape(-1, 2)
    all_keys = np.concatenate([_vertex_keys(level.vertices), _vertex_keys(flat)])
    _, first, inverse = np.unique(all_keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    all_xy = np.concatenate([level.vertices, flat])
    vertices = all_xy[first[order]]
    lattice_ids = rank[inverse[len(level.vertices):]].reshape(nt, npt)
    triangles = lattice_ids[:, children].reshape(-1, 3)
    parent = np.repeat(np.arange(nt), len(children))
    return MeshLevel(
        index=level.index + 1,
        h=level.h / c_h,
        vertices=vertices,
        triangles=triangles,
        subdomain=level.subdomain[parent],
        domain=level.domain,
        parent=parent,
        ancestor=level.ancestor[parent],
    )


def _space_prolongation(coarse, fine, cspace, fspace):
    fine_cells = fspace.cells
    ftris = fspace.tris
    nodes, first = np.unique(fine_cells.ravel(), return_index=True)
    cell_of = first // fine_cells.shape[1]
    parents = fine.parent[ftris[cell_of]]
    # map parent triangle id -> row of the coarse space's cell table
    row_of = np.full(len(coarse.triangles), -1)
    row_of[cspace.tris] = np.arange(len(cspace.tris))
    crow = row_of[parents]
    lam = elements.barycentric(coarse.tri_coords[parents], fspace.coords[nodes][:, None, :])[:, 0, :]
    vals = elements.p2_values(lam) if cspace.degree == 2 else elements.p1_values(lam)
    cols = cspace.cells[crow]
    rows = np.repeat(nodes[:, None], cols.shape[1], axis=1)
    keep = np.abs(vals) > 1e-13
    P = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(fspace.size, cspace.size))
    return P


@dataclass
class MeshHierarchy:
    levels: list
    c_h: int
    domain: DomainSpec

    @property
    def L(self):
        return len(self.levels) - 1

    @cached_property
    def space_prolongations(self):
        """Per level l >= 1: dict of P for 'phi', 'u', 'p' from level l-1 to l."""
        out = [None]
        for lo, hi in zip(self.levels[:-1], self.levels[1:]):
            out.append({
                "phi": _space_prolongation(lo, hi, lo.phi_space, hi.phi_space),
                "u": _space_prolongation(lo, hi, lo.u_space, hi.u_space),
                "p": _space_prolongation(lo, hi, lo.p_space, hi.p_space),
            })
        return out

    @cached_property
    def prolongations(self):
        out = [None]
        for p in self.space_prolongations[1:]:
            out.append(sp.block_diag([p["phi"], p["u"], p["u"], p["p"]], format="csr"))
        return out

    @cached_property
    def vertex_maps(self):
        """vertex_maps[l][i] = id in level l of vertex i of level l-1."""
        out = [None]
        for lo, hi in zip(self.levels[:-1], self.levels[1:]):
            lookup = {tuple(k): n for n, k in enumerate(_vertex_keys(hi.vertices))}
            out.append(np.array([lookup[tuple(k)] for k in _vertex_keys(lo.vertices)]))
        return out

    def prolongation_to(self, level, target):
        """Composite prolongation matrix from ``level`` to ``target`` >= level."""
        P = sp.identity(self.levels[level].ndof, format="csr")
        for lv in range(level + 1, target + 1):
            P = self.prolongations[lv] @ P
        return P.tocsr()


def build_hierarchy(spec=None, h0=0.25, c_h=2, L=0):
    spec = DomainSpec() if spec is None else spec
    if int(L) != L or L < 0:
        raise ValueError(f"number of refinements L must be a nonnegative integer, got {L}")
    if int(c_h) != c_h or c_h < 2:
        raise ValueError(f"c_h must be an integer >= 2, got {c_h}")
    vertices, tris, sub = _structured_level0(spec, h0)
    levels = [MeshLevel(index=0, h=float(h0), vertices=vertices, triangles=tris,
                        subdomain=sub, domain=spec)]
    for _ in range(int(L)):
        levels.append(refine(levels[-1], int(c_h)))
    return MeshHierarchy(levels=levels, c_h=int(c_h), domain=spec)


def quadrature(level):
    """Quadrature points (nt, 7, 2) and weights (nt, 7) of every triangle."""
    return level.quad_points, level.quad_weights


def _check_transfer(hier, level, n, which):
    if not 1 <= level <= hier.L:
        raise ValueError(f"transfer level must be in [1, {hier.L}], got {level}")
    expected = hier.levels[level - 1 if which == "coarse" else level].ndof
    if n != expected:
        raise ValueError(f"{which} vector has length {n}, expected {expected}")


def prolongate(hier, level, coarse_vec):
    """Interpolate a level-(level-1) DoF vector onto level ``level``."""
    coarse_vec = np.asarray(coarse_vec, dtype=float)
    _check_transfer(hier, level, coarse_vec.shape[0], "coarse")
    return hier.prolongations[level] @ coarse_vec


def restrict(hier, level, fine_vec, scale=None):
    """Transpose of :func:`prolongate`, times ``scale``.

    The default ``scale = c_h**-2`` is the full-weighting average (rows of
    the linear block sum to one at interior nodes).  Residuals of finite
    element systems are integrated quantities and are transferred with
    ``scale=1``, which is what the multigrid solver does.
    """
    fine_vec = np.asarray(fine_vec, dtype=float)
    _check_transfer(hier, level, fine_vec.shape[0], "fine")
    if scale is None:
        scale = 1.0 / hier.c_h ** 2
    return scale * (hier.prolongations[level].T @ fine_vec)


def export_mesh(level, path):
    """Write vertex, triangle and interface-edge tables as plain text."""
    tag = {POROUS: "porous", CONDUIT: "conduit"}
    with open(path, "w") as fh:
        fh.write(f"# level {level.index} h {level.h!r}\n")
        fh.write(f"vertices {len(level.vertices)}\n")
        for i, (x, y) in enumerate(level.vertices):
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
        fh.write(f"triangles {len(level.triangles)}\n")
        for i, (t, s) in enumerate(zip(level.triangles, level.subdomain)):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {tag[int(s)]}\n")
        fh.write(f"interface_edges {len(level.interface_edges)}\n")
        for i, (e, pt, ct) in enumerate(zip(level.interface_edges, level.interface_porous,
                                            level.interface_conduit)):
            fh.write(f"{i} {e[0]} {e[1]} {pt} {ct}\n")
