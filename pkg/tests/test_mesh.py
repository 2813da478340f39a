import numpy as np
import pytest
import sympy

from mgmlmc import elements, mesh


def _ref_integral(coords, a, b, n=12):
    """Collapsed-square Gauss-Legendre rule, exact far beyond degree 5."""
    t, w = np.polynomial.legendre.leggauss(n)
    t, w = 0.5 * (t + 1), 0.5 * w
    s, r = np.meshgrid(t, t, indexing="ij")
    W = np.outer(w, w) * (1 - r)
    l1, l2 = s * (1 - r), r
    P0, P1, P2 = coords
    x = P0[0] + l1 * (P1[0] - P0[0]) + l2 * (P2[0] - P0[0])
    y = P0[1] + l1 * (P1[1] - P0[1]) + l2 * (P2[1] - P0[1])
    jac = abs((P1[0] - P0[0]) * (P2[1] - P0[1]) - (P2[0] - P0[0]) * (P1[1] - P0[1]))
    return jac * np.sum(W * x ** a * y ** b)


def _tri7(coords, f):
    area, _ = elements.triangle_geometry(coords[None])
    q = elements.TRI7_BARY @ coords
    return area[0] * np.sum(elements.TRI7_WEIGHTS * f(q[:, 0], q[:, 1]))


def test_tri7_weights_and_symbolic_monomial():
    assert np.isclose(elements.TRI7_WEIGHTS.sum(), 1.0, atol=1e-15)
    x, y = sympy.symbols("x y")
    exact = float(sympy.integrate(sympy.integrate(x ** 2 * y ** 2, (y, 0, 1 - x)), (x, 0, 1)))
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert abs(_tri7(coords, lambda a, b: a ** 2 * b ** 2) - exact) < 1e-15


def test_tri7_exact_to_degree_five_on_random_triangles():
    rng = np.random.default_rng(3)
    for _ in range(100):
        c = rng.uniform(-1, 1, (3, 2))
        if abs(elements.triangle_geometry(c[None])[0][0]) < 0.05:
            continue
        for a in range(6):
            for b in range(6 - a):
                ref = _ref_integral(c, a, b)
                got = _tri7(c, lambda x, y: x ** a * y ** b)
                assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))


def test_gauss3_exact_degree_five():
    for k in range(6):
        assert np.isclose(np.sum(elements.GAUSS3_WEIGHTS * elements.GAUSS3_T ** k), 1 / (k + 1), atol=1e-15)


def test_p2_partition_of_unity_and_nodality():
    rng = np.random.default_rng(0)
    lam = rng.dirichlet([1, 1, 1], 20)
    assert np.allclose(elements.p2_values(lam).sum(axis=1), 1.0)
    nodes = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [.5, .5, 0], [0, .5, .5], [.5, 0, .5]])
    assert np.allclose(elements.p2_values(nodes), np.eye(6))


def test_level_sizes_and_mesh_widths():
    h = mesh.build_hierarchy(L=2)
    assert [lv.h for lv in h.levels] == [0.25, 0.125, 0.0625]
    assert [len(lv.triangles) for lv in h.levels] == [32, 128, 512]
    for lv in h.levels:
        assert np.allclose(lv.diameters, lv.h * np.sqrt(2))
        assert np.isclose(lv.areas.sum(), 1.0)
        assert np.isclose(lv.areas[lv.porous_tris].sum(), 0.75)


def test_single_level_has_no_transfers():
    h = mesh.build_hierarchy(L=0)
    assert h.L == 0 and h.prolongations == [None]


@pytest.mark.parametrize("h0", [0.3, 0.0, -0.25])
def test_bad_h0(h0):
    with pytest.raises(mesh.GeometryError):
        mesh.build_hierarchy(h0=h0)


@pytest.mark.parametrize("kw", [dict(L=-1), dict(L=1.5), dict(c_h=1)])
def test_bad_refinement_parameters(kw):
    with pytest.raises(ValueError):
        mesh.build_hierarchy(**kw)


def test_nested_levels(hier2):
    for lo, hi in zip(hier2.levels[:-1], hier2.levels[1:]):
        hk = {tuple(k) for k in mesh._vertex_keys(hi.vertices)}
        assert all(tuple(k) in hk for k in mesh._vertex_keys(lo.vertices))
        # each child lies inside its parent
        lam = elements.barycentric(lo.tri_coords[hi.parent], hi.tri_coords)
        assert np.all(lam > -1e-12)
        assert np.all(hi.subdomain == lo.subdomain[hi.parent])


def test_conformity_and_interface(hier2):
    for lv in hier2.levels:
        count = {}
        for t in lv.triangles:
            for i, j in elements.P2_EDGES:
                e = (min(t[i], t[j]), max(t[i], t[j]))
                count[e] = count.get(e, 0) + 1
        assert max(count.values()) == 2
        ie = lv.interface_edges
        assert len(ie) == round(1 / lv.h)
        assert np.allclose(lv.vertices[ie][..., 1], 0.0)
        assert np.isclose(lv.interface_quad_weights.sum(), 1.0)
        assert np.array_equal(lv.normal, [0.0, 1.0])
        assert np.all(lv.subdomain[lv.interface_porous] == mesh.POROUS)
        assert np.all(lv.subdomain[lv.interface_conduit] == mesh.CONDUIT)


def test_interface_nodes_are_duplicated(hier2):
    lv = hier2.levels[0]
    on_phi = np.isclose(lv.phi_space.coords[:, 1], 0).sum()
    on_u = np.isclose(lv.u_space.coords[:, 1], 0).sum()
    assert on_phi == on_u == 2 * round(1 / lv.h) + 1


def test_quadrature_points_inside(hier2):
    lv = hier2.levels[1]
    q, w = mesh.quadrature(lv)
    assert q.shape == (len(lv.triangles), 7, 2) and np.isclose(w.sum(), 1.0)
    lam = elements.barycentric(lv.tri_coords, q)
    assert np.all(lam > 0)


def _interp(space, f):
    return f(space.coords[:, 0], space.coords[:, 1])


def test_prolongation_reproduces_coarse_polynomials(hier2):
    quad = lambda x, y: 1 + 2 * x - y + x * x - 3 * x * y + y * y
    lin = lambda x, y: 1 + 2 * x - y
    for l in (1, 2):
        lo, hi = hier2.levels[l - 1], hier2.levels[l]
        P = hier2.space_prolongations[l]
        assert np.allclose(P["phi"] @ _interp(lo.phi_space, quad), _interp(hi.phi_space, quad))
        assert np.allclose(P["u"] @ _interp(lo.u_space, quad), _interp(hi.u_space, quad))
        assert np.allclose(P["p"] @ _interp(lo.p_space, lin), _interp(hi.p_space, lin))
        ones = np.ones(lo.ndof)
        assert np.allclose(mesh.prolongate(hier2, l, ones), 1.0)


def test_restriction_is_scaled_transpose(hier2):
    rng = np.random.default_rng(1)
    e = rng.standard_normal(hier2.levels[0].ndof)
    P = hier2.prolongations[1].toarray()
    got = mesh.restrict(hier2, 1, mesh.prolongate(hier2, 1, e))
    assert np.allclose(got, 0.25 * P.T @ P @ e, rtol=1e-13, atol=1e-13)
    assert not np.any(mesh.restrict(hier2, 1, np.zeros(hier2.levels[1].ndof)))
    assert np.allclose(mesh.restrict(hier2, 1, P @ e, scale=1.0), P.T @ P @ e)


def test_full_weighting_rows_sum_to_one_for_linear_block(hier2):
    lo = hier2.levels[0]
    R = 0.25 * hier2.space_prolongations[1]["p"].T
    rows = np.asarray(R.sum(axis=1)).ravel()
    c = lo.p_space.coords
    inner = (c[:, 0] > 0) & (c[:, 0] < 1) & (c[:, 1] > -0.25) & (c[:, 1] < 0)
    assert np.allclose(rows[inner], 1.0)


def test_transfer_shape_errors(hier2):
    with pytest.raises(ValueError):
        mesh.prolongate(hier2, 1, np.zeros(3))
    with pytest.raises(ValueError):
        mesh.restrict(hier2, 3, np.zeros(hier2.levels[2].ndof))


def test_composite_prolongation(hier2):
    P = hier2.prolongation_to(0, 2)
    assert P.shape == (hier2.levels[2].ndof, hier2.levels[0].ndof)
    assert np.allclose(P @ np.ones(P.shape[1]), 1.0)


def test_boundary_segments(hier2):
    lv = hier2.levels[0]
    b = lv.boundary_vertices()
    assert np.allclose(lv.vertices[b["gamma_s2"], 1], -0.25)
    assert len(b["interface"]) == 5


def test_export_mesh(tmp_path, hier2):
    p = tmp_path / "m.txt"
    mesh.export_mesh(hier2.levels[0], p)
    text = p.read_text()
    assert "vertices 25" in text and "triangles 32" in text and "interface_edges 4" in text
