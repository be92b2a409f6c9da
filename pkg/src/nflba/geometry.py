"""Scene and pose primitives: 3D Gaussians, SE(3) poses and their Lie maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised on invalid geometric input."""


class DegenerateNormalError(GeometryError):
    """The two smallest covariance eigenvalues coincide; no unique shortest axis."""


class CutLocusError(GeometryError):
    """Rotation angle too close to pi for a stable logarithm."""


def _finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise GeometryError("non-finite input")


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions; accepts (4,) or (N, 4), normalizes."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
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
    return R[0] if single else R


def quat_to_rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternions given dL/dR, batched (N, 4)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    # project through q / |q|
    return (dqn - qn * np.sum(dqn * qn, axis=1, keepdims=True)) / norm


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def covariance_of(scale, rotation) -> np.ndarray:
    """R diag(scale^2) R^T for one Gaussian (scale (3,), quaternion (4,))."""
    scale = np.asarray(scale, dtype=float)
    rotation = np.asarray(rotation, dtype=float)
    _finite(scale, rotation)
    if np.any(scale <= 0):
        raise GeometryError("scale must be strictly positive")
    if np.linalg.norm(rotation) == 0:
        raise GeometryError("zero quaternion")
    R = quat_to_rotmat(rotation)
    M = R * scale
    return M @ M.T


def covariances(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Batched covariance_of; returns (N, 3, 3)."""
    R = quat_to_rotmat(quats)
    M = R * scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def gaussian_normal(covariance, view_dir=None, tol: float = 1e-9) -> np.ndarray:
    """Unit eigenvector of the smallest eigenvalue of an SPD covariance.

    The sign is fixed so the normal faces the viewer: if ``view_dir`` (a
    vector from the viewer to the Gaussian) is given the result satisfies
    ``n . view_dir <= 0``, otherwise ``n_z <= 0``. Exact ties go toward -z.
    """
    cov = np.asarray(covariance, dtype=float)
    _finite(cov)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] - evals[0] <= tol * max(abs(evals[1]), 1.0):
        raise DegenerateNormalError("smallest two eigenvalues coincide")
    n = evecs[:, 0] / np.linalg.norm(evecs[:, 0])
    ref = np.array([0.0, 0.0, 1.0]) if view_dir is None else np.asarray(view_dir, float)
    d = float(n @ ref)
    if d > 0 or (d == 0 and n[2] > 0):
        n = -n
    return n


def normals_from_factors(scales: np.ndarray, quats: np.ndarray, rel_tol: float = 1e-9):
    """Shortest-axis normals from factored covariances, batched.

    Returns (normals (N,3) unsigned, axis index (N,), valid mask (N,)).
    Equivalent to the eigen route because the rotation columns are the eigenvectors.
    """
    R = quat_to_rotmat(quats)
    order = np.argsort(scales, axis=1, kind="stable")
    j = order[:, 0]
    s_sorted = np.take_along_axis(scales, order, axis=1)
    valid = (s_sorted[:, 1] - s_sorted[:, 0]) > rel_tol * s_sorted[:, 1]
    n = R[np.arange(len(j)), :, j]
    return n, j, valid


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation to ``M`` in the Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = R x_world + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        _finite(R, t)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise GeometryError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float).reshape(4, 4)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quat(cls, q, t) -> "Pose":
        return cls(quat_to_rotmat(np.asarray(q, float)), t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def quat(self) -> np.ndarray:
        return rotmat_to_quat(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        # re-projecting keeps long chains of compositions from drifting off SO(3)
        return Pose(project_to_so3(self.rotation @ other.rotation),
                    self.rotation @ other.translation + self.translation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        R = self.rotation
        return max(float(np.abs(R.T @ R - np.eye(3)).max()), abs(np.linalg.det(R) - 1.0))


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    b = (1 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * K + c * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    if theta >= np.pi - 1e-6:
        raise CutLocusError("rotation angle at or near pi")
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    return theta / (2.0 * np.sin(theta)) * w


def se3_exp(xi) -> Pose:
    """Exponential map of a translation-first twist (rho, phi)."""
    xi = np.asarray(xi, dtype=float)
    _finite(xi)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.rotation)
    rho = np.linalg.solve(_left_jacobian(phi), pose.translation)
    return np.concatenate([rho, phi])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix.

    atan2 of the axis and trace parts stays accurate near zero, where arccos
    of the trace loses half the digits.
    """
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def pixel_grid(self):
        """(xs, ys) pixel-center coordinates, each (H, W)."""
        return np.meshgrid(np.arange(self.width, dtype=float),
                           np.arange(self.height, dtype=float))

    def rays(self) -> np.ndarray:
        """K^-1 [x, y, 1] per pixel, (H, W, 3)."""
        xs, ys = self.pixel_grid()
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy,
                         np.ones_like(xs)], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass
class Gaussian3D:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: float

    @property
    def covariance(self) -> np.ndarray:
        return covariance_of(self.scale, self.rotation)


class GaussianScene:
    """Structure-of-arrays Gaussian map.

    Scales are stored as logs and opacities as raw values in (0, 1];
    quaternions are (w, x, y, z) and renormalized by :meth:`normalize`.
    """

    def __init__(self, means=None, log_scales=None, quats=None, colors=None, opacities=None):
        self.means = np.zeros((0, 3)) if means is None else np.asarray(means, float).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = (np.zeros((n, 3)) if log_scales is None
                           else np.asarray(log_scales, float).reshape(-1, 3))
        if quats is None:
            quats = np.tile([1.0, 0, 0, 0], (n, 1))
        self.quats = np.asarray(quats, float).reshape(-1, 4)
        self.colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, float).reshape(-1, 3)
        self.opacities = (np.full(n, 0.5) if opacities is None
                          else np.asarray(opacities, float).reshape(-1))
        self.generation = 0
        self._check()

    def _check(self):
        n = len(self.means)
        for name in ("log_scales", "quats", "colors", "opacities"):
            if len(getattr(self, name)) != n:
                raise GeometryError(f"{name} length mismatch")

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> "GaussianScene":
        gs = list(gaussians)
        if not gs:
            return cls()
        return cls(
            means=[g.mean for g in gs],
            log_scales=[np.log(np.asarray(g.scale, float)) for g in gs],
            quats=[g.rotation for g in gs],
            colors=[g.color for g in gs],
            opacities=[g.opacity for g in gs],
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i].copy(), np.exp(self.log_scales[i]),
                          self.quats[i].copy(), self.colors[i].copy(), float(self.opacities[i]))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianScene":
        out = GaussianScene(self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                            self.colors.copy(), self.opacities.copy())
        out.generation = self.generation
        return out

    def subset(self, idx: Sequence[int] | np.ndarray) -> "GaussianScene":
        idx = np.asarray(idx)
        out = GaussianScene(self.means[idx], self.log_scales[idx], self.quats[idx],
                            self.colors[idx], self.opacities[idx])
        out.generation = self.generation + 1
        return out

    def extend(self, other: "GaussianScene") -> None:
        self.means = np.concatenate([self.means, other.means])
        self.log_scales = np.concatenate([self.log_scales, other.log_scales])
        self.quats = np.concatenate([self.quats, other.quats])
        self.colors = np.concatenate([self.colors, other.colors])
        self.opacities = np.concatenate([self.opacities, other.opacities])
        self.generation += 1

    def keep(self, mask: np.ndarray) -> None:
        for name in ("means", "log_scales", "quats", "colors", "opacities"):
            setattr(self, name, getattr(self, name)[mask])
        self.generation += 1

    def normalize(self) -> None:
        # rows already at unit length are left bit-identical
        n = np.linalg.norm(self.quats, axis=1, keepdims=True)
        self.quats = np.where(np.abs(n - 1.0) > 1e-12, self.quats / n, self.quats)

    def arrays(self) -> dict:
        return {"means": self.means, "log_scales": self.log_scales, "quats": self.quats,
                "colors": self.colors, "opacities": self.opacities}

    def save(self, path) -> None:
        np.savez(path, **self.arrays())

    @classmethod
    def load(cls, path) -> "GaussianScene":
        with np.load(path) as f:
            return cls(f["means"], f["log_scales"], f["quats"], f["colors"], f["opacities"])
