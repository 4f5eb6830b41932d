"""Sparse Levenberg-Marquardt bundle adjustment.

Minimizes total squared pixel reprojection error over camera and point
parameters.  The normal equations are solved by Schur elimination of the
point blocks, which is what makes repeated adjustment of growing models
affordable.  Three camera parameterizations are supported:

- ``euclidean_fixed_k``: 6 dof per camera (rotation increment + centre),
  intrinsics and radial taken from the camera as constants;
- ``euclidean_free_k``: 6 + (focal, principal point, one radial
  coefficient), with zero skew and unit aspect;
- ``projective``: the 12 raw camera-matrix entries (11 effective dof; the
  overall scale direction is handled by the damping).

Fixed cameras contribute residuals (anchoring the free ones through shared
points) but own no parameters and are returned bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial.transform import Rotation

from . import geometry as geo

PARAM_EUCLIDEAN_FIXED_K = "euclidean_fixed_k"
PARAM_EUCLIDEAN_FREE_K = "euclidean_free_k"
PARAM_PROJECTIVE = "projective"

_ZERO_COST = 1e-20


class SingularNormalEquations(Exception):
    pass


@dataclass
class BaProblem:
    free_cameras: dict                 # image id -> Camera
    fixed_cameras: dict = field(default_factory=dict)
    tie_points: list = field(default_factory=list)   # triangulated TiePoints
    parameterization: str = PARAM_EUCLIDEAN_FIXED_K
    max_iterations: int = 100
    frozen_intrinsics: set = field(default_factory=set)  # image ids
    fix_gauge: bool | None = None      # default: only when no fixed cameras
    optimize_radial: bool = True       # include the radial coefficient in free-K


@dataclass
class BaReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    accepted_costs: list = field(default_factory=list)


@dataclass
class BaSolution:
    cameras: dict
    points: np.ndarray
    report: BaReport


# ---------------------------------------------------------------------------
# internal state
# ---------------------------------------------------------------------------


class _CamBlock:
    def __init__(self, image_id, camera, parameterization, pose_free, k_free,
                 radial_free=True):
        self.image_id = image_id
        self.parameterization = parameterization
        self.pose_free = pose_free
        self.k_free = k_free
        self.radial_free = radial_free and k_free
        self.offset = 0
        self.obs_points = None      # indices into the point array
        self.obs_uv = None
        if parameterization == PARAM_PROJECTIVE:
            self.P = camera.P / np.linalg.norm(camera.P)
            self.width = 12 if pose_free else 0
        else:
            self.R = camera.R.copy()
            self.C = camera.C.copy()
            intr = camera.intrinsics
            self.fx, self.fy = intr.fx, intr.fy
            self.skew = intr.skew
            self.cx, self.cy = intr.cx, intr.cy
            self.k1 = camera.radial
            if parameterization == PARAM_EUCLIDEAN_FREE_K and k_free:
                # single focal, centred principal point convention
                self.f = 0.5 * (self.fx + self.fy)
                self.width = (6 if pose_free else 0) + (4 if self.radial_free else 3)
            else:
                self.width = 6 if pose_free else 0

    # -- projection of this camera's observed points -----------------------

    def project(self, X, delta=None):
        if self.parameterization == PARAM_PROJECTIVE:
            P = self.P
            if delta is not None and self.pose_free:
                P = P + delta.reshape(3, 4)
            x = X @ P[:, :3].T + P[:, 3]
            w = np.where(np.abs(x[:, 2]) < 1e-12, 1e-12, x[:, 2])
            return x[:, :2] / w[:, None]
        R, C = self.R, self.C
        if self.k_free and self.parameterization == PARAM_EUCLIDEAN_FREE_K:
            f, cx, cy, k1 = self.f, self.cx, self.cy, self.k1
            fx = fy = f
            skew = 0.0
        else:
            fx, fy, skew, cx, cy, k1 = (
                self.fx, self.fy, self.skew, self.cx, self.cy, self.k1,
            )
        if delta is not None and self.width:
            pos = 0
            if self.pose_free:
                R = R @ Rotation.from_rotvec(delta[0:3]).as_matrix()
                C = C + delta[3:6]
                pos = 6
            if self.k_free and self.parameterization == PARAM_EUCLIDEAN_FREE_K:
                fx = fy = f = self.f + delta[pos]
                cx = self.cx + delta[pos + 1]
                cy = self.cy + delta[pos + 2]
                if self.radial_free:
                    k1 = self.k1 + delta[pos + 3]
        y = (X - C) @ R.T
        z = np.where(np.abs(y[:, 2]) < 1e-12, 1e-12, y[:, 2])
        xn = y[:, :2] / z[:, None]
        if k1 != 0.0:
            r2 = np.sum(xn * xn, axis=1, keepdims=True)
            xn = xn * (1.0 + k1 * r2)
        u = fx * xn[:, 0] + skew * xn[:, 1] + cx
        v = fy * xn[:, 1] + cy
        return np.column_stack([u, v])

    # -- analytic Jacobian blocks at delta = 0 ------------------------------

    def jacobian_blocks(self, X):
        """Returns (Jc, Jp): (n, 2, width) camera and (n, 2, 3) point blocks."""
        n = X.shape[0]
        if self.parameterization == PARAM_PROJECTIVE:
            Xh = np.hstack([X, np.ones((n, 1))])
            x = Xh @ self.P.T
            w = np.where(np.abs(x[:, 2]) < 1e-12, 1e-12, x[:, 2])
            u = x[:, 0] / w
            v = x[:, 1] / w
            Jp = np.zeros((n, 2, 3))
            Jp[:, 0, :] = (self.P[0, :3] - u[:, None] * self.P[2, :3]) / w[:, None]
            Jp[:, 1, :] = (self.P[1, :3] - v[:, None] * self.P[2, :3]) / w[:, None]
            if not self.pose_free:
                return np.zeros((n, 2, 0)), Jp
            Jc = np.zeros((n, 2, 12))
            Jc[:, 0, 0:4] = Xh / w[:, None]
            Jc[:, 0, 8:12] = -u[:, None] * Xh / w[:, None]
            Jc[:, 1, 4:8] = Xh / w[:, None]
            Jc[:, 1, 8:12] = -v[:, None] * Xh / w[:, None]
            return Jc, Jp

        R, C = self.R, self.C
        free_k = self.k_free and self.parameterization == PARAM_EUCLIDEAN_FREE_K
        if free_k:
            fx = fy = self.f
            skew, cx, cy, k1 = 0.0, self.cx, self.cy, self.k1
        else:
            fx, fy, skew, cx, cy, k1 = (
                self.fx, self.fy, self.skew, self.cx, self.cy, self.k1,
            )
        vvec = X - C
        y = vvec @ R.T
        z = np.where(np.abs(y[:, 2]) < 1e-12, 1e-12, y[:, 2])
        xn = y[:, :2] / z[:, None]
        # d xn / d y
        dxn_dy = np.zeros((n, 2, 3))
        dxn_dy[:, 0, 0] = 1.0 / z
        dxn_dy[:, 0, 2] = -xn[:, 0] / z
        dxn_dy[:, 1, 1] = 1.0 / z
        dxn_dy[:, 1, 2] = -xn[:, 1] / z
        # distortion
        if k1 != 0.0:
            r2 = np.sum(xn * xn, axis=1)
            dxd_dxn = (1.0 + k1 * r2)[:, None, None] * np.eye(2)[None] + (
                2.0 * k1
            ) * np.einsum("ni,nj->nij", xn, xn)
            xd = xn * (1.0 + k1 * r2)[:, None]
        else:
            r2 = np.sum(xn * xn, axis=1)
            dxd_dxn = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
            xd = xn
        A = np.array([[fx, skew], [0.0, fy]])
        dp_dxn = np.einsum("ij,njk->nik", A, dxd_dxn)
        dp_dy = np.einsum("nij,njk->nik", dp_dxn, dxn_dy)
        Jp = np.einsum("nij,jk->nik", dp_dy, R)
        if self.width == 0:
            return np.zeros((n, 2, 0)), Jp
        Jc = np.zeros((n, 2, self.width))
        pos = 0
        if self.pose_free:
            # d y / d rotation increment = -R [v]x ; d y / d C = -R
            crossv = np.zeros((n, 3, 3))
            crossv[:, 0, 1] = -vvec[:, 2]
            crossv[:, 0, 2] = vvec[:, 1]
            crossv[:, 1, 0] = vvec[:, 2]
            crossv[:, 1, 2] = -vvec[:, 0]
            crossv[:, 2, 0] = -vvec[:, 1]
            crossv[:, 2, 1] = vvec[:, 0]
            dy_dw = -np.einsum("ij,njk->nik", R, crossv)
            Jc[:, :, 0:3] = np.einsum("nij,njk->nik", dp_dy, dy_dw)
            Jc[:, :, 3:6] = -Jp
            pos = 6
        if free_k:
            Jc[:, 0, pos] = xd[:, 0]
            Jc[:, 1, pos] = xd[:, 1]
            Jc[:, 0, pos + 1] = 1.0
            Jc[:, 1, pos + 2] = 1.0
            if self.radial_free:
                Jc[:, 0, pos + 3] = fx * xn[:, 0] * r2
                Jc[:, 1, pos + 3] = fy * xn[:, 1] * r2
        return Jc, Jp

    def apply(self, delta):
        if self.width == 0 or delta.size == 0:
            return
        if self.parameterization == PARAM_PROJECTIVE:
            self.P = self.P + delta.reshape(3, 4)
            self.P = self.P / np.linalg.norm(self.P)
            return
        pos = 0
        if self.pose_free:
            self.R = self.R @ Rotation.from_rotvec(delta[0:3]).as_matrix()
            self.C = self.C + delta[3:6]
            pos = 6
        if self.k_free and self.parameterization == PARAM_EUCLIDEAN_FREE_K:
            self.f += delta[pos]
            self.cx += delta[pos + 1]
            self.cy += delta[pos + 2]
            if self.radial_free:
                self.k1 += delta[pos + 3]

    def to_camera(self, template) -> geo.Camera:
        if self.parameterization == PARAM_PROJECTIVE:
            return geo.Camera(P=self.P.copy(), kind=geo.PROJECTIVE)
        if self.k_free and self.parameterization == PARAM_EUCLIDEAN_FREE_K:
            intr = geo.Intrinsics(fx=self.f, fy=self.f, skew=0.0, cx=self.cx, cy=self.cy)
            return geo.Camera.euclidean(intr, self.R, self.C, radial=self.k1)
        intr = geo.Intrinsics(
            fx=self.fx, fy=self.fy, skew=self.skew, cx=self.cx, cy=self.cy
        )
        return geo.Camera.euclidean(intr, self.R, self.C, radial=self.k1)


class _State:
    def __init__(self, problem: BaProblem):
        self.problem = problem
        free_ids = sorted(problem.free_cameras)
        fixed_ids = sorted(problem.fixed_cameras)
        fix_gauge = problem.fix_gauge
        if fix_gauge is None:
            fix_gauge = len(fixed_ids) == 0
        self.gauge_id = free_ids[0] if (fix_gauge and free_ids) else None

        self.blocks = []
        for img in free_ids:
            cam = problem.free_cameras[img]
            pose_free = img != self.gauge_id
            if problem.parameterization == PARAM_PROJECTIVE:
                k_free = False
            else:
                k_free = (
                    problem.parameterization == PARAM_EUCLIDEAN_FREE_K
                    and img not in problem.frozen_intrinsics
                )
            self.blocks.append(
                _CamBlock(
                    img, cam, problem.parameterization, pose_free, k_free,
                    radial_free=problem.optimize_radial,
                )
            )
        self.fixed_blocks = []
        for img in fixed_ids:
            cam = problem.fixed_cameras[img]
            param = (
                PARAM_PROJECTIVE
                if cam.kind == geo.PROJECTIVE
                else PARAM_EUCLIDEAN_FIXED_K
            )
            self.fixed_blocks.append(_CamBlock(img, cam, param, False, False))

        self.points = np.array(
            [tp.position for tp in problem.tie_points], float
        ).reshape(-1, 3)
        n_pts = len(self.points)
        point_index = {id(tp): k for k, tp in enumerate(problem.tie_points)}

        # observations per camera block, ordered deterministically
        all_cams = {b.image_id: b for b in self.blocks + self.fixed_blocks}
        per_cam = {img: ([], []) for img in all_cams}
        for k, tp in enumerate(problem.tie_points):
            for img, uv in tp.track.items():
                if img in per_cam:
                    per_cam[img][0].append(k)
                    per_cam[img][1].append(np.asarray(uv, float))
        self.n_obs = 0
        for img, block in all_cams.items():
            idx, uv = per_cam[img]
            order = np.argsort(idx, kind="stable")
            block.obs_points = np.asarray(idx, int)[order]
            block.obs_uv = (
                np.asarray(uv, float)[order] if idx else np.zeros((0, 2))
            )
            self.n_obs += len(idx)

        # parameter layout: cameras then points
        offset = 0
        for b in self.blocks:
            b.offset = offset
            offset += b.width
        self.n_cam_params = offset
        self.n_params = offset + 3 * n_pts
        self._row_offsets = {}
        row = 0
        for b in self.blocks + self.fixed_blocks:
            self._row_offsets[b.image_id] = row
            row += 2 * len(b.obs_points)

        # gauge scale pinning for Euclidean problems without anchors
        self.scale_ref = None
        if (
            self.gauge_id is not None
            and problem.parameterization != PARAM_PROJECTIVE
            and len(self.blocks) >= 2
        ):
            c0 = self.blocks[0].C
            c1 = self.blocks[1].C
            self.scale_ref = (0, 1, float(np.linalg.norm(c1 - c0)))

    # -- residuals ----------------------------------------------------------

    def residuals(self, delta=None):
        r = np.zeros(2 * self.n_obs)
        if delta is None:
            pts = self.points
        else:
            pts = self.points + delta[self.n_cam_params :].reshape(-1, 3)
        for b in self.blocks + self.fixed_blocks:
            if len(b.obs_points) == 0:
                continue
            d = None
            if delta is not None and b.width:
                d = delta[b.offset : b.offset + b.width]
            proj = b.project(pts[b.obs_points], d)
            row = self._row_offsets[b.image_id]
            r[row : row + 2 * len(b.obs_points)] = (proj - b.obs_uv).ravel()
        return r

    def jacobian(self) -> csr_matrix:
        rows, cols, vals = [], [], []
        for b in self.blocks + self.fixed_blocks:
            n = len(b.obs_points)
            if n == 0:
                continue
            Jc, Jp = b.jacobian_blocks(self.points[b.obs_points])
            row0 = self._row_offsets[b.image_id]
            obs_rows = row0 + 2 * np.arange(n)
            if b.width:
                rr = np.repeat(obs_rows[:, None, None], 2, axis=1) + np.array(
                    [0, 1]
                ).reshape(1, 2, 1)
                cc = np.broadcast_to(
                    b.offset + np.arange(b.width), (n, 2, b.width)
                )
                rows.append(np.broadcast_to(rr, (n, 2, b.width)).ravel())
                cols.append(np.asarray(cc).ravel())
                vals.append(Jc.ravel())
            pc = self.n_cam_params + 3 * b.obs_points
            rr = np.repeat(obs_rows[:, None, None], 2, axis=1) + np.array(
                [0, 1]
            ).reshape(1, 2, 1)
            cc = pc[:, None, None] + np.arange(3).reshape(1, 1, 3)
            rows.append(np.broadcast_to(rr, (n, 2, 3)).ravel())
            cols.append(np.broadcast_to(cc, (n, 2, 3)).ravel())
            vals.append(Jp.ravel())
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return csr_matrix(
            (vals, (rows, cols)), shape=(2 * self.n_obs, self.n_params)
        )

    def apply(self, delta):
        for b in self.blocks:
            if b.width:
                b.apply(delta[b.offset : b.offset + b.width])
        self.points = self.points + delta[self.n_cam_params :].reshape(-1, 3)
        self._renormalize_scale()

    def _renormalize_scale(self):
        """Pin one baseline length; pure rescaling about the gauge camera
        leaves every reprojection unchanged."""
        if self.scale_ref is None:
            return
        a, b, d0 = self.scale_ref
        ca = self.blocks[a].C
        d = float(np.linalg.norm(self.blocks[b].C - ca))
        if d < 1e-12:
            return
        s = d0 / d
        if abs(s - 1.0) < 1e-15:
            return
        for blk in self.blocks:
            blk.C = ca + s * (blk.C - ca)
        self.points = ca + s * (self.points - ca)

    def solution(self, report) -> BaSolution:
        cameras = {}
        for b in self.blocks:
            cameras[b.image_id] = b.to_camera(self.problem.free_cameras[b.image_id])
        for img, cam in self.problem.fixed_cameras.items():
            cameras[img] = cam
        return BaSolution(cameras=cameras, points=self.points.copy(), report=report)


# ---------------------------------------------------------------------------
# normal-equation solvers
# ---------------------------------------------------------------------------


def _solve_schur(H, g, n_cam_params, n_points):
    """Solve (H) d = -g by eliminating the 3x3 point blocks."""
    nc = n_cam_params
    if n_points == 0:
        return np.linalg.solve(H, -g)
    if nc == 0:
        V = H.reshape(n_points, 3, n_points, 3)
        Vb = np.stack([V[p, :, p, :] for p in range(n_points)])
        return -np.einsum(
            "pkl,pl->pk", np.linalg.inv(Vb), g.reshape(n_points, 3)
        ).ravel()
    B = H[:nc, :nc]
    E = H[:nc, nc:]
    gp = g[nc:].reshape(n_points, 3)
    Hpp = H[nc:, nc:]
    Vb = np.stack([Hpp[3 * p : 3 * p + 3, 3 * p : 3 * p + 3] for p in range(n_points)])
    Vinv = np.linalg.inv(Vb)
    EV = E.reshape(nc, n_points, 3)
    EVinv = np.einsum("cpk,pkl->cpl", EV, Vinv)
    S = B - EVinv.reshape(nc, -1) @ EV.reshape(nc, -1).T
    rhs = -g[:nc] + np.einsum("cpl,pl->c", EVinv, gp)
    dc = np.linalg.solve(S, rhs)
    tmp = np.einsum("cpk,c->pk", EV, dc)
    dp = np.einsum("pkl,pl->pk", Vinv, -gp - tmp)
    return np.concatenate([dc, dp.ravel()])


def _solve_dense(H, g):
    """Reference dense solve of the same damped normal equations."""
    return np.linalg.solve(H, -g)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def adjust(problem: BaProblem, use_schur: bool = True) -> BaSolution:
    """Run damped Gauss-Newton (Levenberg-Marquardt) to convergence.

    Cost is the plain sum of squared pixel residuals; accepted steps are
    monotone non-increasing by construction.  Terminates on a relative cost
    change below 1e-9, on (near-)zero cost, or after ``max_iterations``, in
    which case the best iterate is returned with termination "not_converged".
    """
    state = _State(problem)
    if state.n_obs == 0 or state.n_params == 0:
        report = BaReport(0.0, 0.0, 0, "nothing_to_do")
        return state.solution(report)
    r = state.residuals()
    cost = float(r @ r)
    initial_cost = cost
    accepted = []
    if cost <= _ZERO_COST:
        return state.solution(BaReport(initial_cost, cost, 0, "zero_cost"))

    lam = 1e-3
    termination = "not_converged"
    iterations = 0
    n_points = len(state.points)
    for iterations in range(1, problem.max_iterations + 1):
        J = state.jacobian()
        g = np.asarray(J.T @ r).ravel()
        H = np.asarray((J.T @ J).todense())
        diag = np.maximum(np.diag(H), 1e-12)
        improved = False
        while lam < 1e14:
            Hd = H + np.diag(lam * diag)
            try:
                delta = (
                    _solve_schur(Hd, g, state.n_cam_params, n_points)
                    if use_schur
                    else _solve_dense(Hd, g)
                )
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            r_trial = state.residuals(delta)
            cost_trial = float(r_trial @ r_trial)
            if cost_trial < cost:
                state.apply(delta)
                r = state.residuals()
                prev = cost
                cost = float(r @ r)
                accepted.append(cost_trial)
                lam = max(lam / 10.0, 1e-12)
                improved = True
                if prev - cost_trial < 1e-9 * max(prev, 1e-30):
                    termination = "converged"
                if cost <= _ZERO_COST:
                    termination = "converged"
                break
            lam *= 10.0
        if not improved:
            if lam >= 1e14 and cost > _ZERO_COST and not accepted:
                raise SingularNormalEquations(
                    "no damped step could be solved or accepted"
                )
            termination = "converged" if accepted else "stalled"
            break
        if termination == "converged":
            break
    return state.solution(
        BaReport(initial_cost, cost, iterations, termination, accepted)
    )


def jacobian_check(problem: BaProblem, epsilon: float = 1e-7) -> float:
    """Max deviation between the analytic Jacobian and central differences,
    normalized by the largest analytic entry (small problems only)."""
    state = _State(problem)
    if state.n_params == 0:
        return 0.0
    J = np.asarray(state.jacobian().todense())
    Jn = np.zeros_like(J)
    for k in range(state.n_params):
        d = np.zeros(state.n_params)
        d[k] = epsilon
        Jn[:, k] = (state.residuals(d) - state.residuals(-d)) / (2 * epsilon)
    scale = max(1.0, float(np.max(np.abs(J))))
    return float(np.max(np.abs(J - Jn)) / scale)
