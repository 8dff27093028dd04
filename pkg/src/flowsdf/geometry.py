"""Rotations, quaternions and the 7-DoF similarity pose mapping world points into the object frame."""

from dataclasses import dataclass, field

import numpy as np

# quaternions are stored (w, x, y, z)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
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


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_exp(phi):
    """Unit quaternion of the rotation vector ``phi`` (axis * angle)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    if theta < 1e-8:
        # second-order series keeps the map smooth at zero
        q = np.array([1.0 - theta**2 / 8.0, *(0.5 - theta**2 / 48.0) * phi])
    else:
        q = np.array([np.cos(theta / 2), *(np.sin(theta / 2) / theta) * phi])
    return q / np.linalg.norm(q)


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    return quat_exp(axis / np.linalg.norm(axis) * angle)


def rotation_about(axis, angle):
    return quat_to_matrix(axis_angle_quat(axis, angle))


@dataclass
class SimilarityPose:
    """Similarity transform x_obj = exp(log_scale) * R(rotation) @ x + translation.

    Maps world (or camera) points into the canonical object frame. The
    tangent used by the optimizers is 7-dimensional: a right-multiplied
    rotation increment, an additive translation and an additive log-scale.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    log_scale: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        self.rotation = q / n
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        self.log_scale = float(self.log_scale)
        if not np.isfinite(self.log_scale) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose must be finite")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t, scale):
        return cls(matrix_to_quat(R), t, float(np.log(scale)))

    @property
    def scale(self):
        return float(np.exp(self.log_scale))

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def apply(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.scale * (X @ self.R.T) + self.translation

    def apply_inverse(self, Y):
        Y = np.asarray(Y, dtype=np.float64)
        return ((Y - self.translation) @ self.R) / self.scale

    def inverse(self):
        Rt = self.R.T
        s = self.scale
        return SimilarityPose(matrix_to_quat(Rt), -(Rt @ self.translation) / s, -self.log_scale)

    def retract(self, delta):
        """Return the pose moved by a 7-vector tangent increment (rot 3, trans 3, log-scale 1)."""
        delta = np.asarray(delta, dtype=np.float64)
        q = quat_mul(self.rotation, quat_exp(delta[:3]))
        q = q / np.linalg.norm(q)
        return SimilarityPose(q, self.translation + delta[3:6], self.log_scale + delta[6])

    def point_jacobian(self, X):
        """d apply(x) / d tangent at zero increment, shape (n, 3, 7)."""
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        R = self.R
        s = self.scale
        J = np.zeros((n, 3, 7))
        # d/dphi of s R (I + [phi]x) x = -s R [x]x
        Rx = s * (X @ R.T)
        J[:, :, 0] = -s * np.cross(X, np.array([1.0, 0, 0])) @ R.T
        J[:, :, 1] = -s * np.cross(X, np.array([0, 1.0, 0])) @ R.T
        J[:, :, 2] = -s * np.cross(X, np.array([0, 0, 1.0])) @ R.T
        J[:, :, 3:6] = np.eye(3)
        J[:, :, 6] = Rx
        return J

    def as_vector(self):
        return np.concatenate([self.rotation, self.translation, [self.log_scale]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:4], v[4:7], v[7])
