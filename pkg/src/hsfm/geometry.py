"""Projective geometry kernels for multi-view reconstruction.

Points are stored as (N, 3) row arrays, image coordinates as (N, 2) pixel
arrays, and cameras as 3x4 matrices acting on homogeneous column vectors.
A Euclidean camera with calibration K, rotation R and centre C projects as
K [R | -R C].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation


class GeometryError(Exception):
    pass


class PointAtInfinity(GeometryError):
    """Projective depth of a point vanished under projection."""


class Degenerate(GeometryError):
    """Input configuration admits no solution (e.g. zero baseline)."""


class DegenerateConfiguration(GeometryError):
    """Design matrix of a linear solver lost rank."""


class IllConditioned(GeometryError):
    """Linear system exceeded the condition-number limit."""

    def __init__(self, condition, limit):
        super().__init__(f"condition number {condition:.3e} exceeds {limit:.3e}")
        self.condition = condition
        self.limit = limit


class NoCheiralSolution(GeometryError):
    """No motion candidate places a majority of points in front of both cameras."""


class PoseDivergence(GeometryError):
    """Iterative pose solver failed to converge."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

EUCLIDEAN = "euclidean"
PROJECTIVE = "projective"


@dataclass
class Intrinsics:
    """Pinhole calibration: focals in pixels, principal point, skew."""

    fx: float
    fy: float
    skew: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.skew, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, float)
        K = K / K[2, 2]
        return cls(fx=K[0, 0], fy=K[1, 1], skew=K[0, 1], cx=K[0, 2], cy=K[1, 2])


@dataclass(eq=False)
class Camera:
    """A 3x4 camera, either Euclidean (K, R, C known) or purely projective."""

    P: np.ndarray
    kind: str = PROJECTIVE
    intrinsics: Intrinsics | None = None
    R: np.ndarray | None = None
    C: np.ndarray | None = None
    radial: float = 0.0

    @classmethod
    def euclidean(cls, intrinsics: Intrinsics, R, C, radial: float = 0.0) -> "Camera":
        R = np.asarray(R, float)
        C = np.asarray(C, float).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")
        P = compose_projection(intrinsics.K, R, C)
        return cls(P=P, kind=EUCLIDEAN, intrinsics=intrinsics, R=R, C=C, radial=radial)

    @classmethod
    def projective(cls, P) -> "Camera":
        P = np.asarray(P, float)
        if P.shape != (3, 4):
            raise ValueError("camera matrix must be 3x4")
        if np.linalg.matrix_rank(P) < 3:
            raise ValueError("camera matrix must have rank 3")
        return cls(P=P / np.linalg.norm(P), kind=PROJECTIVE)

    def center(self) -> np.ndarray:
        if self.C is not None:
            return self.C
        # right null vector of P, dehomogenized
        _, _, vt = np.linalg.svd(self.P)
        c = vt[-1]
        if abs(c[3]) < 1e-14:
            raise Degenerate("camera centre is at infinity")
        return c[:3] / c[3]

    def copy(self) -> "Camera":
        return Camera(
            P=self.P.copy(),
            kind=self.kind,
            intrinsics=None
            if self.intrinsics is None
            else Intrinsics(
                self.intrinsics.fx,
                self.intrinsics.fy,
                self.intrinsics.skew,
                self.intrinsics.cx,
                self.intrinsics.cy,
            ),
            R=None if self.R is None else self.R.copy(),
            C=None if self.C is None else self.C.copy(),
            radial=self.radial,
        )


PENDING = "pending"
TRIANGULATED = "triangulated"
REJECTED = "rejected"


@dataclass(eq=False)
class TiePoint:
    """A multi-image correspondence with optional 3D coordinates.

    ``track`` maps image id to the observed pixel position, so an image can
    appear at most once by construction.
    """

    track: dict
    position: np.ndarray | None = None
    status: str = PENDING
    track_index: int | None = None

    def __post_init__(self):
        if self.status == TRIANGULATED and self.position is None:
            raise ValueError("triangulated tie-point needs coordinates")


@dataclass(eq=False)
class Model:
    """A set of cameras plus tie-points in one reference frame."""

    cameras: dict = field(default_factory=dict)
    tie_points: list = field(default_factory=list)
    frame: str = EUCLIDEAN

    def triangulated(self) -> list:
        return [tp for tp in self.tie_points if tp.status == TRIANGULATED]

    def copy(self) -> "Model":
        return Model(
            cameras={i: c.copy() for i, c in self.cameras.items()},
            tie_points=[
                TiePoint(
                    track=dict(tp.track),
                    position=None if tp.position is None else tp.position.copy(),
                    status=tp.status,
                    track_index=tp.track_index,
                )
                for tp in self.tie_points
            ],
            frame=self.frame,
        )

    def validate(self):
        for tp in self.triangulated():
            observing = [i for i in tp.track if i in self.cameras]
            if len(observing) < 2:
                raise ValueError("triangulated tie-point seen by < 2 model cameras")
        if self.frame == EUCLIDEAN:
            if any(c.kind != EUCLIDEAN for c in self.cameras.values()):
                raise ValueError("Euclidean model contains projective cameras")


# ---------------------------------------------------------------------------
# Basic operations
# ---------------------------------------------------------------------------


def hom(points) -> np.ndarray:
    """Append a unit homogeneous coordinate to (N, d) or (d,) points."""
    points = np.asarray(points, float)
    if points.ndim == 1:
        return np.append(points, 1.0)
    return np.hstack([points, np.ones((points.shape[0], 1))])


def cross_matrix(v) -> np.ndarray:
    x, y, z = np.asarray(v, float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def compose_projection(K, R, C) -> np.ndarray:
    K = np.asarray(K, float)
    R = np.asarray(R, float)
    C = np.asarray(C, float).reshape(3)
    return K @ np.hstack([R, (-R @ C).reshape(3, 1)])


def rq3(M):
    """Decompose M (..., 3, 3) as K @ R, K upper triangular with positive
    diagonal and R a proper rotation.  Works on batches."""
    M = np.asarray(M, float)
    sign = np.sign(np.linalg.det(M))
    M = M * sign[..., None, None]
    m1, m2, m3 = M[..., 0, :], M[..., 1, :], M[..., 2, :]

    def _norm(v):
        return np.linalg.norm(v, axis=-1)

    k33 = _norm(m3)
    r3 = m3 / k33[..., None]
    k23 = np.einsum("...i,...i->...", m2, r3)
    u2 = m2 - k23[..., None] * r3
    k22 = _norm(u2)
    r2 = u2 / k22[..., None]
    k13 = np.einsum("...i,...i->...", m1, r3)
    k12 = np.einsum("...i,...i->...", m1, r2)
    u1 = m1 - k12[..., None] * r2 - k13[..., None] * r3
    k11 = _norm(u1)
    r1 = u1 / k11[..., None]

    zeros = np.zeros_like(k11)
    K = np.stack(
        [
            np.stack([k11, k12, k13], axis=-1),
            np.stack([zeros, k22, k23], axis=-1),
            np.stack([zeros, zeros, k33], axis=-1),
        ],
        axis=-2,
    )
    R = np.stack([r1, r2, r3], axis=-2)
    return K, R


def decompose_projection(P):
    """Split a finite 3x4 camera into (K, R, C) with K[2, 2] = 1."""
    P = np.asarray(P, float)
    M = P[:, :3]
    if abs(np.linalg.det(M)) < 1e-14 * max(np.linalg.norm(P), 1e-300):
        raise Degenerate("left 3x3 block of the camera is singular")
    K, R = rq3(M)
    C = -np.linalg.solve(M, P[:, 3])
    return K / K[2, 2], R, C


def camera_from_projection(P, radial: float = 0.0) -> Camera:
    """Build a Euclidean Camera by decomposing a full camera matrix."""
    K, R, C = decompose_projection(P)
    return Camera.euclidean(Intrinsics.from_matrix(K), R, C, radial=radial)


def apply_radial(xn, k1):
    """One-coefficient polynomial distortion in normalized camera coords."""
    r2 = np.sum(xn * xn, axis=-1, keepdims=True)
    return xn * (1.0 + k1 * r2)


def project(camera: Camera, points) -> np.ndarray:
    """Project 3D point(s) through a camera.

    Parameters
    ----------
    camera : Camera
    points : (3,) or (N, 3) array in scene units.

    Returns
    -------
    (2,) or (N, 2) pixel coordinates.  Radial distortion is applied for
    Euclidean cameras carrying a nonzero coefficient.

    Raises
    ------
    PointAtInfinity
        If any point has projective depth below 1e-12.
    """
    points = np.asarray(points, float)
    single = points.ndim == 1
    pts = points.reshape(-1, 3)

    if camera.kind == EUCLIDEAN and camera.radial != 0.0:
        y = (pts - camera.C) @ camera.R.T
        w = y[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise PointAtInfinity("point on the principal plane")
        xn = apply_radial(y[:, :2] / w[:, None], camera.radial)
        K = camera.intrinsics.K
        uv = xn @ K[:2, :2].T + K[:2, 2]
    else:
        x = hom(pts) @ camera.P.T
        w = x[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise PointAtInfinity("point on the principal plane")
        uv = x[:, :2] / w[:, None]
    return uv[0] if single else uv


def reprojection_errors(camera: Camera, points, observed) -> np.ndarray:
    """Pixel distance between projections and observations, per point."""
    proj = project(camera, points)
    return np.linalg.norm(np.atleast_2d(proj) - np.atleast_2d(observed), axis=1)


# ---------------------------------------------------------------------------
# Point conditioning (isotropic normalization used by every linear solver)
# ---------------------------------------------------------------------------


def normalize_points(points):
    """Translate to zero centroid and scale to mean norm sqrt(dim).

    Returns (T, normalized) where T is the (d+1)x(d+1) homogeneous transform
    such that normalized = points @ T[:d, :d].T + T[:d, d].
    """
    points = np.asarray(points, float)
    d = points.shape[1]
    centroid = points.mean(axis=0)
    centered = points - centroid
    mean_norm = np.mean(np.linalg.norm(centered, axis=1))
    scale = np.sqrt(d) / mean_norm if mean_norm > 1e-14 else 1.0
    T = np.eye(d + 1)
    T[:d, :d] *= scale
    T[:d, d] = -scale * centroid
    return T, centered * scale


# ---------------------------------------------------------------------------
# Two-view solvers
# ---------------------------------------------------------------------------


def solve_homography(pts1, pts2) -> np.ndarray:
    """Normalized DLT estimate of H with pts2 ~ H pts1 (>= 4 correspondences).

    Raises DegenerateConfiguration when the design matrix has a nullspace of
    dimension > 1, e.g. when 3 of a 4-point minimal sample are collinear.
    """
    pts1 = np.asarray(pts1, float)
    pts2 = np.asarray(pts2, float)
    n = pts1.shape[0]
    if n < 4:
        raise ValueError("homography needs >= 4 correspondences")
    T1, p1 = normalize_points(pts1)
    T2, p2 = normalize_points(pts2)
    A = np.zeros((2 * n, 9))
    x, y = p1[:, 0], p1[:, 1]
    u, v = p2[:, 0], p2[:, 1]
    A[0::2, 0] = x
    A[0::2, 1] = y
    A[0::2, 2] = 1.0
    A[0::2, 6] = -u * x
    A[0::2, 7] = -u * y
    A[0::2, 8] = -u
    A[1::2, 3] = x
    A[1::2, 4] = y
    A[1::2, 5] = 1.0
    A[1::2, 6] = -v * x
    A[1::2, 7] = -v * y
    A[1::2, 8] = -v
    _, s, vt = np.linalg.svd(A)
    if s[7] < 1e-9 * s[0]:
        raise DegenerateConfiguration("homography design matrix rank < 8")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    H = H / np.linalg.norm(H)
    if abs(H[2, 2]) > 1e-12:
        H = H * np.sign(H[2, 2])
    return H


def homography_transfer_error(H, pts1, pts2) -> np.ndarray:
    """Symmetric transfer distance sqrt(|Hx1-x2|^2 + |H^-1 x2 - x1|^2)."""
    H = np.asarray(H, float)
    Hinv = np.linalg.inv(H)
    f = hom(pts1) @ H.T
    b = hom(pts2) @ Hinv.T
    wf = np.where(np.abs(f[:, 2]) < 1e-14, 1e-14, f[:, 2])
    wb = np.where(np.abs(b[:, 2]) < 1e-14, 1e-14, b[:, 2])
    df = f[:, :2] / wf[:, None] - np.asarray(pts2, float)
    db = b[:, :2] / wb[:, None] - np.asarray(pts1, float)
    return np.sqrt(np.sum(df * df, axis=1) + np.sum(db * db, axis=1))


def sampson_homography(H, pts1, pts2) -> np.ndarray:
    """First-order geometric distance of correspondences to a homography.

    Unlike the symmetric transfer error this estimates the distance of the
    4D measurement to the model manifold, which is what an information
    criterion over heterogeneous models needs.
    """
    H = np.asarray(H, float)
    x1 = np.asarray(pts1, float)
    x2 = np.asarray(pts2, float)
    p = hom(x1) @ H.T
    u2, v2 = x2[:, 0], x2[:, 1]
    g = np.column_stack([v2 * p[:, 2] - p[:, 1], p[:, 0] - u2 * p[:, 2]])
    # J = d g / d (x1, y1, u2, v2), shape (n, 2, 4)
    n = len(x1)
    J = np.zeros((n, 2, 4))
    J[:, 0, 0] = v2 * H[2, 0] - H[1, 0]
    J[:, 0, 1] = v2 * H[2, 1] - H[1, 1]
    J[:, 0, 3] = p[:, 2]
    J[:, 1, 0] = H[0, 0] - u2 * H[2, 0]
    J[:, 1, 1] = H[0, 1] - u2 * H[2, 1]
    J[:, 1, 2] = -p[:, 2]
    JJt = np.einsum("nij,nkj->nik", J, J)
    a, b, d = JJt[:, 0, 0], JJt[:, 0, 1], JJt[:, 1, 1]
    det = np.maximum(a * d - b * b, 1e-14)
    # g' (J J')^-1 g with the closed-form 2x2 inverse
    e2 = (d * g[:, 0] ** 2 - 2 * b * g[:, 0] * g[:, 1] + a * g[:, 1] ** 2) / det
    return np.sqrt(np.maximum(e2, 0.0))


def _fundamental_rows(p1, p2):
    x, y = p1[:, 0], p1[:, 1]
    u, v = p2[:, 0], p2[:, 1]
    return np.column_stack(
        [u * x, u * y, u, v * x, v * y, v, x, y, np.ones_like(x)]
    )


def solve_fundamental(pts1, pts2) -> np.ndarray:
    """Normalized 8-point estimate of F with x2' F x1 = 0, rank 2 enforced."""
    pts1 = np.asarray(pts1, float)
    pts2 = np.asarray(pts2, float)
    if pts1.shape[0] < 8:
        raise ValueError("fundamental matrix needs >= 8 correspondences")
    T1, p1 = normalize_points(pts1)
    T2, p2 = normalize_points(pts2)
    A = _fundamental_rows(p1, p2)
    _, s, vt = np.linalg.svd(A)
    if s[7] < 1e-9 * s[0]:
        raise DegenerateConfiguration("fundamental design matrix rank < 8")
    F = vt[-1].reshape(3, 3)
    u, sf, vft = np.linalg.svd(F)
    F = u @ np.diag([sf[0], sf[1], 0.0]) @ vft
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def solve_fundamental_minimal(pts1, pts2) -> list:
    """7-point solver; returns the 1-3 real cubic-root solutions."""
    pts1 = np.asarray(pts1, float)
    pts2 = np.asarray(pts2, float)
    if pts1.shape[0] != 7:
        raise ValueError("minimal solver needs exactly 7 correspondences")
    T1, p1 = normalize_points(pts1)
    T2, p2 = normalize_points(pts2)
    A = _fundamental_rows(p1, p2)
    _, s, vt = np.linalg.svd(A)
    if s[6] < 1e-9 * s[0]:
        raise DegenerateConfiguration("7-point design matrix rank < 7")
    F1 = vt[-1].reshape(3, 3)
    F2 = vt[-2].reshape(3, 3)

    # det(a F1 + (1 - a) F2) is cubic in a; recover coefficients by sampling
    def d(a):
        return np.linalg.det(a * F1 + (1.0 - a) * F2)

    samples = np.array([0.0, 1.0, -1.0, 2.0])
    V = np.vander(samples, 4)  # columns a^3, a^2, a, 1
    coeffs = np.linalg.solve(V, np.array([d(a) for a in samples]))
    lead = np.max(np.abs(coeffs))
    if lead < 1e-14:
        raise DegenerateConfiguration("degenerate determinant polynomial")
    roots = np.roots(coeffs)
    real = [r.real for r in roots if abs(r.imag) < 1e-8 * max(1.0, abs(r))]
    if not real:
        raise DegenerateConfiguration("no real root for the 7-point cubic")
    out = []
    for a in real:
        F = a * F1 + (1.0 - a) * F2
        F = T2.T @ F @ T1
        nrm = np.linalg.norm(F)
        if nrm > 1e-14:
            out.append(F / nrm)
    if not out:
        raise DegenerateConfiguration("7-point solutions all vanished")
    return out


def sampson_distance(F, pts1, pts2) -> np.ndarray:
    """First-order geometric (Sampson) distance of correspondences to F."""
    F = np.asarray(F, float)
    x1 = hom(pts1)
    x2 = hom(pts2)
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ij,ij->i", x2, Fx1)
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    den = np.where(den < 1e-14, 1e-14, den)
    return np.abs(num) / np.sqrt(den)


def epipole_second(F) -> np.ndarray:
    """Epipole in the second image: the unit vector with e' F = 0."""
    _, _, vt = np.linalg.svd(np.asarray(F, float).T)
    return vt[-1]


def canonical_pair(F):
    """Projective camera pair (P1, P2) = ([I | 0], [[e2]x F | e2]) for F."""
    F = np.asarray(F, float)
    e2 = epipole_second(F)
    A2 = cross_matrix(e2) @ F
    P2 = np.hstack([A2, e2.reshape(3, 1)])
    if np.linalg.matrix_rank(P2) < 3:
        raise DegenerateConfiguration("canonical second camera is rank deficient")
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    return P1, P2


def essential_from_fundamental(F, K1, K2) -> np.ndarray:
    """E = K2' F K1, projected onto the essential manifold."""
    E = np.asarray(K2, float).T @ np.asarray(F, float) @ np.asarray(K1, float)
    u, s, vt = np.linalg.svd(E)
    sigma = 0.5 * (s[0] + s[1])
    return u @ np.diag([sigma, sigma, 0.0]) @ vt


def _triangulate_pair_linear(P1, P2, pts1, pts2):
    """Batched two-view DLT used for cheirality counting."""
    n = pts1.shape[0]
    A = np.zeros((n, 4, 4))
    A[:, 0] = pts1[:, 0, None] * P1[2] - P1[0]
    A[:, 1] = pts1[:, 1, None] * P1[2] - P1[1]
    A[:, 2] = pts2[:, 0, None] * P2[2] - P2[0]
    A[:, 3] = pts2[:, 1, None] * P2[2] - P2[1]
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1, :]
    w = np.where(np.abs(X[:, 3]) < 1e-14, 1e-14, X[:, 3])
    return X[:, :3] / w[:, None]


def relative_orientation(E, pts1_norm, pts2_norm):
    """Factor an essential matrix into the relative motion of camera 2.

    Parameters
    ----------
    E : 3x3 essential matrix (two equal singular values, one zero).
    pts1_norm, pts2_norm : (N, 2) K-normalized correspondences used to pick
        the cheirality-consistent candidate among the four factorizations.

    Returns
    -------
    (R, t) with P2 = [R | t] in normalized coordinates and |t| = 1.
    """
    E = np.asarray(E, float)
    u, s, vt = np.linalg.svd(E)
    if s[0] < 1e-14:
        raise Degenerate("essential matrix is zero (pure rotation?)")
    if s[2] > 1e-6 * s[0] or abs(s[0] - s[1]) > 1e-6 * s[0]:
        raise Degenerate("matrix does not satisfy the essential constraints")
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    candidates = [
        (u @ W @ vt, t),
        (u @ W @ vt, -t),
        (u @ W.T @ vt, t),
        (u @ W.T @ vt, -t),
    ]
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    pts1_norm = np.asarray(pts1_norm, float)
    pts2_norm = np.asarray(pts2_norm, float)
    counts = []
    for R, tc in candidates:
        P2 = np.hstack([R, tc.reshape(3, 1)])
        X = _triangulate_pair_linear(P1, P2, pts1_norm, pts2_norm)
        z1 = X[:, 2]
        z2 = (X @ R.T + tc)[:, 2]
        counts.append(int(np.sum((z1 > 0) & (z2 > 0))))
    best = int(np.argmax(counts))
    n = pts1_norm.shape[0]
    if counts[best] * 2 <= n:
        raise NoCheiralSolution(
            f"best candidate places only {counts[best]}/{n} points in front"
        )
    R, t = candidates[best]
    return R, t / np.linalg.norm(t)


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


@dataclass
class TriangulationResult:
    point: np.ndarray
    condition: float
    max_reproj_error: float


def triangulate(
    observations,
    condition_limit: float = 1e4,
    max_iterations: int = 10,
    tol: float = 1e-8,
) -> TriangulationResult:
    """Multi-view intersection by the iterated linear least-squares method.

    Each round solves the inhomogeneous DLT system with rows reweighted by
    the previous projective depths, until the weights settle.

    Parameters
    ----------
    observations : sequence of (Camera, (2,) pixel) pairs, >= 2 entries.
    condition_limit : gate on the condition number of the final system.

    Raises
    ------
    Degenerate  when all camera centres coincide (zero baseline).
    IllConditioned  when the final system condition exceeds the limit.
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs >= 2 observations")
    cams = [c for c, _ in observations]
    xs = np.array([np.asarray(x, float).reshape(2) for _, x in observations])
    centers = np.array([c.center() for c in cams])
    spread = np.max(np.linalg.norm(centers - centers[0], axis=1))
    if spread < 1e-12 * max(1.0, np.max(np.abs(centers))):
        raise Degenerate("zero baseline between observations")

    Ps = np.array([c.P for c in cams])
    m = len(cams)
    rows_a = np.empty((2 * m, 3))
    rows_b = np.empty(2 * m)
    rows_a[0::2] = xs[:, 0, None] * Ps[:, 2, :3] - Ps[:, 0, :3]
    rows_a[1::2] = xs[:, 1, None] * Ps[:, 2, :3] - Ps[:, 1, :3]
    rows_b[0::2] = Ps[:, 0, 3] - xs[:, 0] * Ps[:, 2, 3]
    rows_b[1::2] = Ps[:, 1, 3] - xs[:, 1] * Ps[:, 2, 3]

    weights = np.ones(m)
    X = None
    condition = np.inf
    for _ in range(max_iterations):
        w = np.repeat(weights, 2)
        Aw = rows_a / w[:, None]
        bw = rows_b / w
        X, _, _, sv = np.linalg.lstsq(Aw, bw, rcond=None)
        condition = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        depths = Ps[:, 2, :3] @ X + Ps[:, 2, 3]
        new_weights = np.where(np.abs(depths) < 1e-12, 1e-12, depths)
        if np.max(np.abs(new_weights - weights)) < tol:
            weights = new_weights
            break
        weights = new_weights

    if condition > condition_limit:
        raise IllConditioned(condition, condition_limit)
    errors = [float(np.linalg.norm(project(c, X) - x)) for c, x in zip(cams, xs)]
    return TriangulationResult(point=X, condition=float(condition), max_reproj_error=max(errors))


# ---------------------------------------------------------------------------
# Resection
# ---------------------------------------------------------------------------


def _procrustes_rotation(source_c, target_c):
    """Rotation R maximizing alignment of centered source to centered target."""
    B = target_c.T @ source_c
    u, _, vt = np.linalg.svd(B)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _ppnp(rays, points3d, max_iterations=200, tol=1e-9):
    """Procrustean PnP: alternate depth and pose updates until the camera
    frame points settle.  ``rays`` are K-normalized homogeneous directions.

    The alternation converges linearly, so it is run for a bounded number of
    rounds and the caller polishes the pose; divergence is declared only when
    the fit error fails to improve on its starting value.
    """
    n = rays.shape[0]
    ray_sq = np.einsum("ij,ij->i", rays, rays)
    s_mean = points3d.mean(axis=0)
    centered = points3d - s_mean
    for z0 in (1.0, -1.0):
        z = np.full(n, z0)
        prev_err = np.inf
        first_err = None
        R, t = np.eye(3), np.zeros(3)
        for _ in range(max_iterations):
            target = z[:, None] * rays
            t_mean = target.mean(axis=0)
            R = _procrustes_rotation(centered, target - t_mean)
            t = t_mean - R @ s_mean
            cam_pts = points3d @ R.T + t
            z = np.einsum("ij,ij->i", rays, cam_pts) / ray_sq
            err = float(np.linalg.norm(z[:, None] * rays - cam_pts))
            if first_err is None:
                first_err = err
            if abs(prev_err - err) < tol * max(1.0, err):
                break
            prev_err = err
        err = float(np.linalg.norm(z[:, None] * rays - (points3d @ R.T + t)))
        if not np.isfinite(err) or (first_err > 1e-12 and err > first_err):
            raise PoseDivergence("pose iteration did not improve the fit")
        if np.sum(z > 0) * 2 > n:
            return R, t
        # converged to the mirrored solution: restart with flipped depths
    raise PoseDivergence("pose solver converged behind the camera")


def resect_calibrated(points3d, points2d, intrinsics: Intrinsics, refine: bool = True):
    """External orientation from 3D-2D correspondences with known intrinsics.

    Procrustean alternation provides the initial pose, optionally polished by
    Levenberg-Marquardt on the pixel reprojection error.

    Returns
    -------
    (R, C) : world-to-camera rotation and camera centre.
    """
    points3d = np.asarray(points3d, float)
    points2d = np.asarray(points2d, float)
    if points3d.shape[0] < 3:
        raise ValueError("resection needs >= 3 points")
    _, sv, _ = np.linalg.svd(points3d - points3d.mean(axis=0))
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("3D points are collinear")
    K = intrinsics.K
    rays = hom(points2d) @ np.linalg.inv(K).T
    R, t = _ppnp(rays, points3d)

    if refine:
        rot0 = Rotation.from_matrix(R)

        def residual(params):
            Rc = (Rotation.from_rotvec(params[:3]) * rot0).as_matrix()
            cam = points3d @ Rc.T + params[3:]
            w = np.where(np.abs(cam[:, 2]) < 1e-12, 1e-12, cam[:, 2])
            uv = (cam[:, :2] / w[:, None]) @ K[:2, :2].T + K[:2, 2]
            return (uv - points2d).ravel()

        sol = least_squares(residual, np.hstack([np.zeros(3), t]), method="lm")
        R = (Rotation.from_rotvec(sol.x[:3]) * rot0).as_matrix()
        t = sol.x[3:]
    return R, -R.T @ t


def resect_projective_dlt(points3d, points2d) -> np.ndarray:
    """Full camera matrix by DLT from >= 6 3D-2D correspondences."""
    points3d = np.asarray(points3d, float)
    points2d = np.asarray(points2d, float)
    n = points3d.shape[0]
    if n < 6:
        raise ValueError("projective resection needs >= 6 points")
    T3, p3 = normalize_points(points3d)
    T2, p2 = normalize_points(points2d)
    X = hom(p3)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -p2[:, 0, None] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -p2[:, 1, None] * X
    _, s, vt = np.linalg.svd(A)
    if s[10] < 1e-9 * s[0]:
        raise DegenerateConfiguration("resection design matrix nullspace dim > 1")
    Pn = vt[-1].reshape(3, 4)
    P = np.linalg.inv(T2) @ Pn @ T3
    if np.linalg.matrix_rank(P) < 3:
        raise DegenerateConfiguration("estimated camera is rank deficient")
    return P / np.linalg.norm(P)


# ---------------------------------------------------------------------------
# Alignment of point sets
# ---------------------------------------------------------------------------


def absolute_orientation_similarity(points_a, points_b):
    """Least-squares similarity (s, R, t) with s R a + t ~ b (>= 3 points).

    The reflection case is resolved internally by the determinant correction
    of the Procrustes rotation; the returned scale is always positive.
    """
    A = np.asarray(points_a, float)
    B = np.asarray(points_b, float)
    if A.shape[0] < 3:
        raise ValueError("similarity needs >= 3 correspondences")
    a_mean = A.mean(axis=0)
    b_mean = B.mean(axis=0)
    Ac = A - a_mean
    Bc = B - b_mean
    _, sv, _ = np.linalg.svd(Ac)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear")
    cov = Bc.T @ Ac / A.shape[0]
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    D = np.diag([1.0, 1.0, d])
    R = u @ D @ vt
    var_a = np.mean(np.sum(Ac * Ac, axis=1))
    scale = np.trace(np.diag(s) @ D) / var_a
    if scale <= 0:
        raise DegenerateConfiguration("non-positive similarity scale")
    t = b_mean - scale * R @ a_mean
    return scale, R, t


def apply_similarity(points, scale, R, t) -> np.ndarray:
    return scale * (np.asarray(points, float) @ np.asarray(R, float).T) + np.asarray(
        t, float
    )


def projectivity_dlt_3d(points_a, points_b) -> np.ndarray:
    """4x4 collineation H with H a ~ b (>= 5 correspondences), |H|_F = 1."""
    A = np.asarray(points_a, float)
    B = np.asarray(points_b, float)
    n = A.shape[0]
    if n < 5:
        raise ValueError("3D projectivity needs >= 5 correspondences")
    Ta, an = normalize_points(A)
    Tb, bn = normalize_points(B)
    X = hom(an)
    Y = hom(bn)
    rows = np.zeros((3 * n, 16))
    for i in range(3):
        # Y[3] * (H X)_i - Y[i] * (H X)_3 = 0
        rows[i::3, 4 * i : 4 * i + 4] = Y[:, 3, None] * X
        rows[i::3, 12:16] = -Y[:, i, None] * X
    _, s, vt = np.linalg.svd(rows)
    if s[14] < 1e-9 * s[0]:
        raise DegenerateConfiguration("3D projectivity nullspace dim > 1")
    Hn = vt[-1].reshape(4, 4)
    H = np.linalg.inv(Tb) @ Hn @ Ta
    H = H / np.linalg.norm(H)
    flat = np.argmax(np.abs(H))
    return H * np.sign(H.ravel()[flat])


def apply_homography_points(H, points) -> np.ndarray:
    """Map (N, 3) points by a 4x4 collineation and dehomogenize."""
    Xh = hom(points) @ np.asarray(H, float).T
    w = np.where(np.abs(Xh[:, 3]) < 1e-14, 1e-14, Xh[:, 3])
    return Xh[:, :3] / w[:, None]


def similarity_from_matrix(T):
    """Split a 4x4 similarity [sR | t; 0 1] into (s, R, t)."""
    T = np.asarray(T, float)
    M = T[:3, :3] / T[3, 3]
    s = np.linalg.det(M) ** (1.0 / 3.0)
    return s, M / s, T[:3, 3] / T[3, 3]


# ---------------------------------------------------------------------------
# Cheirality
# ---------------------------------------------------------------------------


def point_depths(camera: Camera, points) -> np.ndarray:
    """Signed projective depth of points w.r.t. a camera (positive = front)."""
    P = camera.P
    M = P[:, :3]
    x = hom(np.atleast_2d(points)) @ P.T
    return np.sign(np.linalg.det(M)) * x[:, 2] / np.linalg.norm(M[2])


def reflect_model(model: Model) -> Model:
    """Flip every point to the other side of every camera.

    Points are negated; cameras get their last column negated, which for a
    Euclidean camera moves the centre to -C with the same rotation.  All
    projections are unchanged while every signed depth flips.
    """
    out = model.copy()
    flip = np.diag([1.0, 1.0, 1.0, -1.0])
    for img, cam in out.cameras.items():
        P = cam.P @ flip
        if cam.kind == EUCLIDEAN:
            out.cameras[img] = Camera.euclidean(
                cam.intrinsics, cam.R, -cam.C, radial=cam.radial
            )
        else:
            out.cameras[img] = Camera(P=P / np.linalg.norm(P), kind=PROJECTIVE)
    for tp in out.tie_points:
        if tp.position is not None:
            tp.position = -tp.position
    return out


@dataclass
class CheiralityInfo:
    flipped: bool
    tied: bool
    front_fraction: float


def cheirality_enforce(model: Model):
    """Reflect the model when most tie-points sit behind their cameras.

    A tie-point counts as "in front" when the majority of its observing
    cameras report positive depth.  An exact 50/50 split leaves the model
    unchanged and is flagged in the returned info.
    """
    tps = model.triangulated()
    if not tps:
        return model, CheiralityInfo(flipped=False, tied=False, front_fraction=1.0)
    front = 0
    behind = 0
    for tp in tps:
        pos = 0
        neg = 0
        for img in tp.track:
            cam = model.cameras.get(img)
            if cam is None:
                continue
            if point_depths(cam, tp.position)[0] > 0:
                pos += 1
            else:
                neg += 1
        if pos >= neg:
            front += 1
        else:
            behind += 1
    total = front + behind
    if behind > front:
        return reflect_model(model), CheiralityInfo(
            flipped=True, tied=False, front_fraction=behind / total
        )
    return model, CheiralityInfo(
        flipped=False, tied=(behind == front), front_fraction=front / total
    )


# ---------------------------------------------------------------------------
# Model transforms
# ---------------------------------------------------------------------------


def transform_model_similarity(model: Model, scale, R, t) -> Model:
    """Map a model by X -> s R X + t (cameras follow, projections preserved)."""
    out = model.copy()
    R = np.asarray(R, float)
    t = np.asarray(t, float).reshape(3)
    for img, cam in out.cameras.items():
        if cam.kind == EUCLIDEAN:
            out.cameras[img] = Camera.euclidean(
                cam.intrinsics,
                cam.R @ R.T,
                scale * (R @ cam.C) + t,
                radial=cam.radial,
            )
        else:
            T = np.eye(4)
            T[:3, :3] = scale * R
            T[:3, 3] = t
            P = cam.P @ np.linalg.inv(T)
            out.cameras[img] = Camera(P=P / np.linalg.norm(P), kind=PROJECTIVE)
    for tp in out.tie_points:
        if tp.position is not None:
            tp.position = scale * (R @ tp.position) + t
    return out


def transform_model_projective(model: Model, H) -> Model:
    """Map a model by the 4x4 collineation H; cameras become projective."""
    H = np.asarray(H, float)
    Hinv = np.linalg.inv(H)
    out = model.copy()
    for img, cam in out.cameras.items():
        P = cam.P @ Hinv
        out.cameras[img] = Camera(P=P / np.linalg.norm(P), kind=PROJECTIVE)
    for tp in out.tie_points:
        if tp.position is not None:
            tp.position = apply_homography_points(H, tp.position[None, :])[0]
    out.frame = PROJECTIVE
    return out
