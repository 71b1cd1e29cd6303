"""Differentiable geometric primitives: quaternions, SE(3), splat projection.

Conventions used throughout the package:
  - Quaternions are (w, x, y, z), unit norm, canonicalized to w >= 0.
  - Poses are world-to-camera: p_cam = R @ p_world + t (OpenCV z-forward).
  - se(3) tangents are 6-vectors (rho, omega): translation first, rotation
    second, with the left-perturbation update T' = exp(delta) * T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Small-angle cutoff for exp/log series fallbacks (~sqrt(eps) with margin).
_ANGLE_EPS = 1e-10

# Low-pass regularization added to projected covariance diagonals, in px^2.
# Keeps every 2x2 screen covariance strictly positive-definite.
COV2D_LOWPASS = 0.3

# Splats closer than this camera-frame depth are culled.
Z_NEAR = 0.01


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z), normalized and canonicalized (w >= 0)."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        s = 1.0 / n
        if self.w * s < 0.0:
            s = -s
        object.__setattr__(self, "w", self.w * s)
        object.__setattr__(self, "x", self.x * s)
        object.__setattr__(self, "y", self.y * s)
        object.__setattr__(self, "z", self.z * s)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(q) -> "Quaternion":
        q = np.asarray(q, dtype=float).reshape(4)
        return Quaternion(q[0], q[1], q[2], q[3])

    def to_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: p_out = R(rotation) @ p_in + translation."""

    rotation: Quaternion
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(Quaternion.identity(), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_rotation(self.rotation)
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class Gaussian3D:
    """Explicit splat primitive. Scales are stored in log space."""

    mu: np.ndarray          # (3,) world position
    quat: Quaternion        # orientation
    log_scale: np.ndarray   # (3,), exp() gives per-axis std dev
    opacity: float          # in (0, 1]
    color: np.ndarray       # (3,) RGB in [0, 1]


@dataclass
class Projected2DGaussian:
    mean2d: np.ndarray   # (2,) pixel coords
    cov2d: np.ndarray    # (2, 2) symmetric, positive-definite
    depth: float         # camera-frame z


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a quaternion; input is normalized internally."""
    if isinstance(q, Quaternion):
        arr = q.to_array()
    else:
        arr = np.asarray(q, dtype=float).reshape(4)
    n = math.sqrt(float(arr @ arr))
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    w, x, y, z = arr / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotations(q: np.ndarray) -> np.ndarray:
    """Batch (N,4) unit quaternions -> (N,3,3) rotation matrices (no renorm)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain (N,3,3) gradients w.r.t. R entries back to (N,4) unit quats.

    Partial derivatives of each R entry w.r.t. (w,x,y,z); the quaternion is
    assumed unit (the projection onto the unit sphere is applied separately).
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = np.empty((q.shape[0], 4))
    g[:, 0] = 2 * (
        -z * dR[:, 0, 1] + y * dR[:, 0, 2]
        + z * dR[:, 1, 0] - x * dR[:, 1, 2]
        - y * dR[:, 2, 0] + x * dR[:, 2, 1]
    )
    g[:, 1] = 2 * (
        y * dR[:, 0, 1] + z * dR[:, 0, 2]
        + y * dR[:, 1, 0] - 2 * x * dR[:, 1, 1] - w * dR[:, 1, 2]
        + z * dR[:, 2, 0] + w * dR[:, 2, 1] - 2 * x * dR[:, 2, 2]
    )
    g[:, 2] = 2 * (
        -2 * y * dR[:, 0, 0] + x * dR[:, 0, 1] + w * dR[:, 0, 2]
        + x * dR[:, 1, 0] + z * dR[:, 1, 2]
        - w * dR[:, 2, 0] + z * dR[:, 2, 1] - 2 * y * dR[:, 2, 2]
    )
    g[:, 3] = 2 * (
        -2 * z * dR[:, 0, 0] - w * dR[:, 0, 1] + x * dR[:, 0, 2]
        + w * dR[:, 1, 0] - 2 * z * dR[:, 1, 1] + y * dR[:, 1, 2]
        + x * dR[:, 2, 0] + y * dR[:, 2, 1]
    )
    return g


def normalize_quats(q_raw: np.ndarray, eps: float = 1e-8):
    """Normalize (N,4) raw quaternions; rows with norm < eps fall back to
    identity. Returns (q_unit, norms, guarded_mask)."""
    norms = np.sqrt(np.sum(q_raw * q_raw, axis=1))
    guarded = norms < eps
    safe = np.where(guarded, 1.0, norms)
    q = q_raw / safe[:, None]
    if np.any(guarded):
        q[guarded] = np.array([1.0, 0.0, 0.0, 0.0])
    return q, norms, guarded


def normalize_quats_backward(q_raw, q_unit, norms, guarded, dq_unit):
    """Gradient of normalization: dL/dq_raw = (I - q q^T)/|q_raw| dL/dq.

    Guarded rows (identity fallback) receive zero gradient.
    """
    dot = np.sum(q_unit * dq_unit, axis=1, keepdims=True)
    safe = np.where(guarded, 1.0, norms)[:, None]
    g = (dq_unit - q_unit * dot) / safe
    g[guarded] = 0.0
    return g


def compose_covariance(q, log_scale: np.ndarray) -> np.ndarray:
    """3x3 covariance from orientation and per-axis log standard deviations."""
    R = quat_to_rotation(q)
    s = np.exp(np.asarray(log_scale, dtype=float).reshape(3))
    M = R * s[None, :]
    return M @ M.T


def compose_covariances(q: np.ndarray, log_scale: np.ndarray):
    """Batch covariance composition; returns (Sigma (N,3,3), R, M=R*S)."""
    R = quats_to_rotations(q)
    s = np.exp(log_scale)
    M = R * s[:, None, :]
    return M @ np.transpose(M, (0, 2, 1)), R, M


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _so3_exp(omega: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(omega @ omega))
    K = _skew(omega)
    if theta < _ANGLE_EPS:
        return np.eye(3) + K + 0.5 * (K @ K)
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + A * K + B * (K @ K)


def _so3_log(R: np.ndarray) -> np.ndarray:
    trace = float(np.trace(R))
    c = max(-1.0, min(1.0, 0.5 * (trace - 1.0)))
    theta = math.acos(c)
    if theta > math.pi - 1e-6:
        raise ValueError("rotation angle too close to pi for a stable log")
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _ANGLE_EPS:
        return 0.5 * v
    return (theta / (2.0 * math.sin(theta))) * v


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(omega @ omega))
    K = _skew(omega)
    if theta < _ANGLE_EPS:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    A = (1.0 - math.cos(theta)) / t2
    B = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + A * K + B * (K @ K)


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(omega @ omega))
    K = _skew(omega)
    if theta < _ANGLE_EPS:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = half / math.tan(half)
    B = (1.0 - cot) / (theta * theta)
    return np.eye(3) - 0.5 * K + B * (K @ K)


def rotation_to_quat(R: np.ndarray) -> Quaternion:
    """Shepperd's method; result canonicalized by the Quaternion ctor."""
    t = float(np.trace(R))
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return Quaternion(w, x, y, z)


def se3_exp(tangent: np.ndarray) -> SE3Pose:
    v = np.asarray(tangent, dtype=float).reshape(6)
    rho, omega = v[:3], v[3:]
    R = _so3_exp(omega)
    t = _so3_left_jacobian(omega) @ rho
    return SE3Pose(rotation_to_quat(R), t)


def se3_log(pose: SE3Pose) -> np.ndarray:
    R = quat_to_rotation(pose.rotation)
    omega = _so3_log(R)
    rho = _so3_left_jacobian_inv(omega) @ pose.translation
    return np.concatenate([rho, omega])


def se3_apply(pose: SE3Pose, point) -> np.ndarray:
    return quat_to_rotation(pose.rotation) @ np.asarray(point, dtype=float) + pose.translation


def se3_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    Ra = quat_to_rotation(a.rotation)
    Rb = quat_to_rotation(b.rotation)
    return SE3Pose(rotation_to_quat(Ra @ Rb), Ra @ b.translation + a.translation)


def se3_inverse(pose: SE3Pose) -> SE3Pose:
    R = quat_to_rotation(pose.rotation)
    return SE3Pose(rotation_to_quat(R.T), -(R.T @ pose.translation))


def se3_update(pose: SE3Pose, tangent: np.ndarray) -> SE3Pose:
    """Left-perturbation update: exp(tangent) * pose."""
    return se3_compose(se3_exp(tangent), pose)


def scene_radius(points) -> tuple[np.ndarray, float]:
    """Center (mean) and nearest-rank 97th percentile of centered L2 norms."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 2:
        raise ValueError("scene_radius needs at least 2 points")
    center = pts.mean(axis=0)
    norms = np.sort(np.linalg.norm(pts - center, axis=1))
    rank = math.ceil(0.97 * norms.size) - 1
    return center, float(norms[rank])


# ---------------------------------------------------------------------------
# Perspective projection of 3D Gaussians (EWA splatting) with full Jacobians.
# ---------------------------------------------------------------------------


@dataclass
class ProjectionCache:
    """Intermediates retained by project_batch for the backward pass."""

    K: CameraIntrinsics
    W: np.ndarray          # (3,3) camera rotation
    p_cam: np.ndarray      # (N,3)
    q_unit: np.ndarray     # (N,4)
    q_norms: np.ndarray
    q_guarded: np.ndarray
    s: np.ndarray          # (N,3) exp(log_scale)
    R: np.ndarray          # (N,3,3)
    M3: np.ndarray         # (N,3,3) R*S
    Sigma: np.ndarray      # (N,3,3)
    A: np.ndarray          # (N,2,3) J @ W
    J: np.ndarray          # (N,2,3)
    valid: np.ndarray      # (N,) bool


def project_batch(mu: np.ndarray, quat_raw: np.ndarray, log_scale: np.ndarray,
                  pose: SE3Pose, K: CameraIntrinsics, z_near: float = Z_NEAR):
    """Project a batch of Gaussians to screen space.

    Returns (mean2d (N,2), cov2d packed (N,3) as (a,b,c), depth (N,),
    cache). Splats at or behind z_near are flagged invalid in the cache and
    carry unspecified outputs; callers must mask on cache.valid.
    """
    N = mu.shape[0]
    W = quat_to_rotation(pose.rotation)
    p_cam = mu @ W.T + pose.translation
    z = p_cam[:, 2]
    valid = z > z_near
    zs = np.where(valid, z, 1.0)  # avoid div-by-zero on culled rows

    fx, fy = K.fx, K.fy
    mean2d = np.empty((N, 2))
    mean2d[:, 0] = fx * p_cam[:, 0] / zs + K.cx
    mean2d[:, 1] = fy * p_cam[:, 1] / zs + K.cy

    q_unit, q_norms, q_guarded = normalize_quats(quat_raw)
    Sigma, R, M3 = compose_covariances(q_unit, log_scale)

    J = np.zeros((N, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 1, 1] = fy / zs
    J[:, 0, 2] = -fx * p_cam[:, 0] / (zs * zs)
    J[:, 1, 2] = -fy * p_cam[:, 1] / (zs * zs)

    A = J @ W
    cov_full = A @ Sigma @ np.transpose(A, (0, 2, 1))
    cov2d = np.empty((N, 3))
    cov2d[:, 0] = cov_full[:, 0, 0] + COV2D_LOWPASS
    cov2d[:, 1] = cov_full[:, 0, 1]
    cov2d[:, 2] = cov_full[:, 1, 1] + COV2D_LOWPASS

    cache = ProjectionCache(K=K, W=W, p_cam=p_cam, q_unit=q_unit,
                            q_norms=q_norms, q_guarded=q_guarded,
                            s=np.exp(log_scale), R=R, M3=M3, Sigma=Sigma,
                            A=A, J=J, valid=valid)
    return mean2d, cov2d, z.copy(), cache


def project_backward(cache: ProjectionCache, quat_raw: np.ndarray,
                     d_mean2d: np.ndarray, d_cov2d: np.ndarray,
                     d_depth: np.ndarray, with_pose_grad: bool = False):
    """Backward pass of project_batch.

    d_cov2d is packed (da, db, dc) with db the total off-diagonal gradient.
    Returns (d_mu, d_quat_raw, d_log_scale, d_pose_tangent or None). The pose
    tangent gradient uses the left-perturbation convention (rho, omega) and
    is summed over valid splats. Culled splats contribute nothing.
    """
    W, J, A = cache.W, cache.J, cache.A
    p, valid = cache.p_cam, cache.valid
    fx, fy = cache.K.fx, cache.K.fy
    N = p.shape[0]

    v = valid.astype(float)
    gm = d_mean2d * v[:, None]
    gz = d_depth * v
    G = np.empty((N, 2, 2))
    G[:, 0, 0] = d_cov2d[:, 0] * v
    G[:, 0, 1] = 0.5 * d_cov2d[:, 1] * v
    G[:, 1, 0] = G[:, 0, 1]
    G[:, 1, 1] = d_cov2d[:, 2] * v

    # Sigma path: cov = A Sigma A^T  ->  dSigma = A^T G A, dA = 2 G A Sigma
    At = np.transpose(A, (0, 2, 1))
    dSigma = At @ G @ A
    dA = 2.0 * (G @ A @ cache.Sigma)

    # Sigma = M3 M3^T with M3 = R * s
    dM3 = 2.0 * (dSigma @ cache.M3)
    dR = dM3 * cache.s[:, None, :]
    dS_diag = np.einsum("nji,njk->nik", cache.R, dM3)
    d_log_scale = np.einsum("nkk->nk", dS_diag) * cache.s

    dq_unit = rotation_grad_to_quat(cache.q_unit, dR)
    d_quat_raw = normalize_quats_backward(quat_raw, cache.q_unit,
                                          cache.q_norms, cache.q_guarded,
                                          dq_unit)

    # A = J W: dJ = dA W^T; dW (cov path) = J^T dA
    dJ = dA @ W.T

    # J and mean2d depend on p_cam
    z = np.where(valid, p[:, 2], 1.0)
    z2 = z * z
    dp = np.empty((N, 3))
    dp[:, 0] = gm[:, 0] * fx / z - dJ[:, 0, 2] * fx / z2
    dp[:, 1] = gm[:, 1] * fy / z - dJ[:, 1, 2] * fy / z2
    dp[:, 2] = (-gm[:, 0] * fx * p[:, 0] / z2
                - gm[:, 1] * fy * p[:, 1] / z2
                - dJ[:, 0, 0] * fx / z2
                - dJ[:, 1, 1] * fy / z2
                + dJ[:, 0, 2] * 2.0 * fx * p[:, 0] / (z2 * z)
                + dJ[:, 1, 2] * 2.0 * fy * p[:, 1] / (z2 * z)
                + gz)
    dp *= v[:, None]

    d_mu = dp @ W

    d_pose = None
    if with_pose_grad:
        d_rho = dp.sum(axis=0)
        # Translation-induced rotation: omega x p_cam, plus the covariance
        # path through W' = (I + [omega]x) W.
        d_omega = np.cross(p, dp).sum(axis=0)
        dW = np.einsum("nji,njk->nik", J, dA) * v[:, None, None]
        F = W @ dW.sum(axis=0).T
        d_omega += np.array([F[1, 2] - F[2, 1],
                             F[2, 0] - F[0, 2],
                             F[0, 1] - F[1, 0]])
        d_pose = np.concatenate([d_rho, d_omega])

    d_log_scale *= v[:, None]
    d_quat_raw *= v[:, None]
    return d_mu, d_quat_raw, d_log_scale, d_pose


def project_gaussian(g: Gaussian3D, pose: SE3Pose, K: CameraIntrinsics,
                     z_near: float = Z_NEAR):
    """Project a single Gaussian. Returns None when culled by the near plane."""
    mean2d, cov2d, depth, cache = project_batch(
        g.mu.reshape(1, 3), g.quat.to_array().reshape(1, 4),
        g.log_scale.reshape(1, 3), pose, K, z_near)
    if not cache.valid[0]:
        return None
    cov = np.array([[cov2d[0, 0], cov2d[0, 1]], [cov2d[0, 1], cov2d[0, 2]]])
    return Projected2DGaussian(mean2d=mean2d[0], cov2d=cov, depth=float(depth[0]))
