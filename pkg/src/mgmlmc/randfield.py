"""Log-normal conductivity samples at the quadrature points of all levels.

One Gaussian vector is drawn jointly over the union of every level's
porous quadrature points and interface line points.  Points are ordered
coarse level first, so the Cholesky factor restricted to the leading
block generates the exact marginal on the coarse levels; a sample that is
needed only up to level ``l`` draws just that prefix.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import ndtri


class IndefiniteCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class CovarianceSpec:
    variance: float = 0.1
    length_x: float = 0.2
    length_y: float = 0.2

    def __post_init__(self):
        if not (self.variance > 0 and self.length_x > 0 and self.length_y > 0):
            raise ValueError("covariance parameters must be positive")

    def __call__(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        d = np.abs(x - y)
        return self.variance * np.exp(-d[..., 0] / self.length_x - d[..., 1] / self.length_y)


@dataclass
class PointSet:
    points: np.ndarray          # (M, 2) master list
    level_end: np.ndarray       # level_end[l]: number of master points used by levels <= l
    quad_maps: list             # per level: (nt_porous, 7) master indices
    interface_maps: list        # per level: (n_edges, 3) master indices

    @property
    def size(self):
        return len(self.points)

    @property
    def L(self):
        return len(self.quad_maps) - 1

    def level_indices(self, level):
        return np.concatenate([self.quad_maps[level].ravel(), self.interface_maps[level].ravel()])


@dataclass
class FieldFactor:
    R: np.ndarray | None
    theta: np.ndarray
    jitter: float
    variance: float

    @property
    def size(self):
        return self.theta.shape[0]


@dataclass
class FieldSample:
    index: int
    seed: int
    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray

    @property
    def size(self):
        return len(self.K)


def build_point_set(hier):
    keys = {}
    points = []
    quad_maps, interface_maps, level_end = [], [], []

    def register(xy):
        ids = np.empty(len(xy), dtype=np.int64)
        for n, (x, y) in enumerate(xy):
            k = (round(x * 1e12), round(y * 1e12))
            idx = keys.get(k)
            if idx is None:
                idx = keys[k] = len(points)
                points.append((x, y))
            ids[n] = idx
        return ids

    for lv in hier.levels:
        qp = lv.quad_points[lv.porous_tris]
        quad_maps.append(register(qp.reshape(-1, 2)).reshape(qp.shape[:2]))
        ip = lv.interface_quad_points
        interface_maps.append(register(ip.reshape(-1, 2)).reshape(ip.shape[:2]))
        level_end.append(len(points))
    return PointSet(points=np.array(points, dtype=float), level_end=np.array(level_end),
                    quad_maps=quad_maps, interface_maps=interface_maps)


def covariance_matrix(pts, cov, block=2048):
    """Dense covariance R[i, j] = r(x_i, x_j)."""
    xy = pts.points if isinstance(pts, PointSet) else np.asarray(pts, dtype=float)
    m = len(xy)
    R = np.empty((m, m))
    for s in range(0, m, block):
        e = min(m, s + block)
        dx = np.abs(xy[s:e, None, 0] - xy[None, :, 0])
        dy = np.abs(xy[s:e, None, 1] - xy[None, :, 1])
        np.exp(-dx / cov.length_x - dy / cov.length_y, out=R[s:e])
        R[s:e] *= cov.variance
    return R


def factorize(R, max_attempts=10, keep_R=True):
    """Cholesky factor of R, escalating a diagonal jitter if R is not numerically SPD."""
    R = np.asarray(R, dtype=float)
    m = R.shape[0]
    scale = np.finfo(float).eps * np.trace(R) / m
    variance = float(np.max(np.diag(R)))
    for attempt in range(max_attempts + 1):
        jitter = 0.0 if attempt == 0 else scale * 10.0 ** (attempt - 1)
        A = R + jitter * np.eye(m) if jitter else R
        try:
            theta = scipy.linalg.cholesky(A, lower=True, check_finite=False,
                                          overwrite_a=bool(jitter > 0 or not keep_R))
        except np.linalg.LinAlgError:
            continue
        # a pivot at rounding level means R was singular in floating point
        if np.min(np.diag(theta)) ** 2 > 10 * scale:
            return FieldFactor(R=R if keep_R else None, theta=theta, jitter=jitter, variance=variance)
    raise IndefiniteCovarianceError(f"Cholesky failed after {max_attempts} jitter escalations")


def seed_key(base_seed, term, index):
    """Injective 128-bit Philox key for (base seed, estimator term, sample index)."""
    if not (0 <= base_seed < 2 ** 64 and 0 <= term < 2 ** 32 and 0 <= index < 2 ** 32):
        raise ValueError("seed components out of range")
    return (int(base_seed) << 64) | (int(term) << 32) | int(index)


def standard_normals(key, n):
    """n standard normals by inverse-CDF of a counter-based uniform stream.

    The first k values do not depend on n.
    """
    raw = np.random.Philox(key=key).random_raw(n)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u)


def sample(factor, seed, upto=None, index=0):
    """Draw Z = theta Y, K = exp(Z) on the first ``upto`` master points."""
    n = factor.size if upto is None else int(upto)
    Y = standard_normals(seed, n)
    Z = factor.theta[:n, :n] @ Y
    return FieldSample(index=index, seed=seed, Y=Y, Z=Z, K=np.exp(Z))


def sample_from_normals(factor, Y, seed=0, index=0):
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    Z = factor.theta[:n, :n] @ Y
    return FieldSample(index=index, seed=seed, Y=Y, Z=Z, K=np.exp(Z))


def level_view(s, pts, level):
    """Conductivity at one level's porous quadrature points and interface points."""
    if not 0 <= level <= pts.L:
        raise ValueError(f"level {level} outside [0, {pts.L}]")
    if pts.level_end[level] > s.size:
        raise ValueError(f"sample covers {s.size} points, level {level} needs {pts.level_end[level]}")
    return s.K[pts.quad_maps[level]], s.K[pts.interface_maps[level]]


def sampling_flops(n):
    return 2 * n * n


def write_sample_csv(s, pts, path, level=None):
    idx = np.arange(s.size) if level is None else pts.level_indices(level)
    with open(path, "w") as fh:
        fh.write("x,y,K\n")
        for i in idx:
            x, y = pts.points[i]
            fh.write(f"{x:.17g},{y:.17g},{s.K[i]:.17g}\n")
