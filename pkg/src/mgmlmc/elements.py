"""Reference-element data: quadrature rules and Lagrange bases on triangles.

Everything here works in barycentric coordinates ``lam`` with shape
``(..., 3)``.  Local node order for the quadratic element is the three
vertices followed by the midpoints of edges (0,1), (1,2), (2,0).
"""
import numpy as np

_S15 = np.sqrt(15.0)

# 7-point symmetric rule, exact for polynomials of total degree <= 5.
# Weights are normalised to sum to 1 (multiply by the triangle area).
_A1 = (6.0 - _S15) / 21.0
_B1 = (9.0 + 2.0 * _S15) / 21.0
_A2 = (6.0 + _S15) / 21.0
_B2 = (9.0 - 2.0 * _S15) / 21.0
_W1 = (155.0 - _S15) / 1200.0
_W2 = (155.0 + _S15) / 1200.0

TRI7_BARY = np.array([
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    [_B1, _A1, _A1],
    [_A1, _B1, _A1],
    [_A1, _A1, _B1],
    [_B2, _A2, _A2],
    [_A2, _B2, _A2],
    [_A2, _A2, _B2],
])
TRI7_WEIGHTS = np.array([9.0 / 40.0, _W1, _W1, _W1, _W2, _W2, _W2])
TRI7_DEGREE = 5

# 3-point Gauss-Legendre on [0, 1], exact to degree 5.
GAUSS3_T = 0.5 + 0.5 * np.sqrt(3.0 / 5.0) * np.array([-1.0, 0.0, 1.0])
GAUSS3_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0

P2_EDGES = ((0, 1), (1, 2), (2, 0))


def p1_values(lam):
    return np.asarray(lam, dtype=float)


def p2_values(lam):
    lam = np.asarray(lam, dtype=float)
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack([
        l0 * (2 * l0 - 1),
        l1 * (2 * l1 - 1),
        l2 * (2 * l2 - 1),
        4 * l0 * l1,
        4 * l1 * l2,
        4 * l2 * l0,
    ], axis=-1)


def p2_bary_derivatives(lam):
    """d(basis)/d(lam_k), shape (..., 6, 3)."""
    lam = np.asarray(lam, dtype=float)
    out = np.zeros(lam.shape[:-1] + (6, 3))
    for i in range(3):
        out[..., i, i] = 4 * lam[..., i] - 1
    for n, (i, j) in enumerate(P2_EDGES):
        out[..., 3 + n, i] = 4 * lam[..., j]
        out[..., 3 + n, j] = 4 * lam[..., i]
    return out


def triangle_geometry(coords):
    """Areas and constant barycentric gradients for triangles.

    ``coords`` has shape (nt, 3, 2).  Returns ``area`` (nt,) and
    ``grad_lam`` (nt, 3, 2) with ``grad_lam[t, k]`` the gradient of the
    k-th barycentric coordinate.
    """
    x, y = coords[..., 0], coords[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    grad = np.empty(coords.shape[:1] + (3, 2))
    grad[:, 0, 0] = y[:, 1] - y[:, 2]
    grad[:, 1, 0] = y[:, 2] - y[:, 0]
    grad[:, 2, 0] = y[:, 0] - y[:, 1]
    grad[:, 0, 1] = x[:, 2] - x[:, 1]
    grad[:, 1, 1] = x[:, 0] - x[:, 2]
    grad[:, 2, 1] = x[:, 1] - x[:, 0]
    grad /= det[:, None, None]
    return 0.5 * np.abs(det), grad


def barycentric(coords, points):
    """Barycentric coordinates of ``points`` (nt, k, 2) in triangles (nt, 3, 2)."""
    a = coords[:, 0, :]
    t = np.stack([coords[:, 1, :] - a, coords[:, 2, :] - a], axis=-1)  # (nt, 2, 2)
    rhs = points - a[:, None, :]
    st = np.linalg.solve(t[:, None, :, :], rhs[..., None])[..., 0]
    return np.concatenate([1.0 - st.sum(axis=-1, keepdims=True), st], axis=-1)


def p2_gradients(lam, grad_lam):
    """Physical gradients of the six P2 basis functions.

    ``lam`` (nq, 3) reference points, ``grad_lam`` (nt, 3, 2).
    Returns (nt, nq, 6, 2).
    """
    dphi = p2_bary_derivatives(lam)  # (nq, 6, 3)
    return np.einsum("qak,tkd->tqad", dphi, grad_lam)
