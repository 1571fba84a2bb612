"""Rotation algebra, approach-space canonicalization, cones and sectors.

Conventions
-----------
- Quaternions are scalar-first ``(w, x, y, z)``; ``q`` and ``-q`` are the same
  rotation.
- A grasp is a 7-vector ``[qw, qx, qy, qz, px, py, pz]``. Batches are arrays
  of shape ``(..., 7)``. :class:`GraspPose` wraps a single grasp.
- The gripper approaches along its local +z axis and closes along local +x.
- The approach space is the frame in which a cone axis points along ``-y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEG_Y = np.array([0.0, -1.0, 0.0])
# Squared axis length below which K^2 loses precision to subnormals.
AXIS_UNDERFLOW = 1e-280

# Franka-like parallel-jaw skeleton (metres): palm, finger root, two finger
# bases, two fingertips.
CANONICAL_CONTROL_POINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.059],
        [0.0527, 0.0, 0.059],
        [-0.0527, 0.0, 0.059],
        [0.0527, 0.0, 0.1034],
        [-0.0527, 0.0, 0.1034],
    ]
)


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q, floor: float = 1e-8) -> np.ndarray:
    """Normalize quaternions; norms below ``floor`` map to the identity."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    small = n < floor
    out = q / np.where(small, 1.0, n)
    if np.any(small):
        ident = np.zeros_like(out)
        ident[..., 0] = 1.0
        out = np.where(small, ident, out)
    return out


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` with broadcasting."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for unit quaternions, shape ``(..., 3, 3)``.

    Only pairwise products of components appear, so ``q`` and ``-q`` give
    bit-identical matrices.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    R[..., 0, 1] = 2.0 * (xy - wz)
    R[..., 0, 2] = 2.0 * (xz + wy)
    R[..., 1, 0] = 2.0 * (xy + wz)
    R[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    R[..., 1, 2] = 2.0 * (yz - wx)
    R[..., 2, 0] = 2.0 * (xz - wy)
    R[..., 2, 1] = 2.0 * (yz + wx)
    R[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return R


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method, returns unit quaternions with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    M = R.reshape(-1, 3, 3)
    out = np.empty((M.shape[0], 4))
    tr = M[:, 0, 0] + M[:, 1, 1] + M[:, 2, 2]
    diag = np.stack([M[:, 0, 0], M[:, 1, 1], M[:, 2, 2]], axis=1)
    case = np.where(tr > diag.max(axis=1), 3, diag.argmax(axis=1))

    m = case == 3
    s = np.sqrt(1.0 + tr[m]) * 2.0
    out[m, 0] = 0.25 * s
    out[m, 1] = (M[m, 2, 1] - M[m, 1, 2]) / s
    out[m, 2] = (M[m, 0, 2] - M[m, 2, 0]) / s
    out[m, 3] = (M[m, 1, 0] - M[m, 0, 1]) / s

    m = case == 0
    s = np.sqrt(1.0 + M[m, 0, 0] - M[m, 1, 1] - M[m, 2, 2]) * 2.0
    out[m, 0] = (M[m, 2, 1] - M[m, 1, 2]) / s
    out[m, 1] = 0.25 * s
    out[m, 2] = (M[m, 0, 1] + M[m, 1, 0]) / s
    out[m, 3] = (M[m, 0, 2] + M[m, 2, 0]) / s

    m = case == 1
    s = np.sqrt(1.0 + M[m, 1, 1] - M[m, 0, 0] - M[m, 2, 2]) * 2.0
    out[m, 0] = (M[m, 0, 2] - M[m, 2, 0]) / s
    out[m, 1] = (M[m, 0, 1] + M[m, 1, 0]) / s
    out[m, 2] = 0.25 * s
    out[m, 3] = (M[m, 1, 2] + M[m, 2, 1]) / s

    m = case == 2
    s = np.sqrt(1.0 + M[m, 2, 2] - M[m, 0, 0] - M[m, 1, 1]) * 2.0
    out[m, 0] = (M[m, 1, 0] - M[m, 0, 1]) / s
    out[m, 1] = (M[m, 0, 2] + M[m, 2, 0]) / s
    out[m, 2] = (M[m, 1, 2] + M[m, 2, 1]) / s
    out[m, 3] = 0.25 * s

    out = out / np.linalg.norm(out, axis=1, keepdims=True)
    out *= np.where(out[:, :1] < 0.0, -1.0, 1.0)
    return out.reshape(batch + (4,))


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random rotations (normalized 4-D Gaussians)."""
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraspPose:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        p = np.asarray(self.p, dtype=float).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"grasp quaternion is not unit-norm: {q}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_array(cls, g) -> "GraspPose":
        g = np.asarray(g, dtype=float)
        return cls(g[:4], g[4:7])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        Rt = self.R.T
        return RigidTransform(Rt, -Rt @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    @property
    def quat(self) -> np.ndarray:
        return matrix_to_quat(self.R)


@dataclass(frozen=True)
class ConeConstraint:
    axis: np.ndarray
    half_angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("cone axis must be unit-norm")
        if not 0.0 < self.half_angle <= np.pi / 2:
            raise ValueError(f"half-angle {self.half_angle} outside (0, pi/2]")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "half_angle", float(self.half_angle))


@dataclass(frozen=True)
class SectorGrid:
    yaw_bins: int = 8
    pitch_bins: int = 4

    def __post_init__(self):
        if self.yaw_bins < 1 or self.pitch_bins < 1:
            raise ValueError("sector grid needs positive bin counts")

    @property
    def count(self) -> int:
        return self.yaw_bins * self.pitch_bins


# ---------------------------------------------------------------------------
# Grasp-level operations
# ---------------------------------------------------------------------------

def _as_grasp_array(g) -> np.ndarray:
    if isinstance(g, GraspPose):
        return g.as_array()
    return np.asarray(g, dtype=float)


def approach_vector(g) -> np.ndarray:
    """Grasp-frame z-axis expressed in the parent frame."""
    q = _as_grasp_array(g)[..., :4]
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)], axis=-1
    )


def closing_vector(g) -> np.ndarray:
    """Grasp-frame x-axis (finger closing direction)."""
    q = _as_grasp_array(g)[..., :4]
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)], axis=-1
    )


def approach_space_rotation(v_a) -> np.ndarray:
    """Rodrigues rotation taking ``v_a`` onto ``-y`` inside span(v_a, -y).

    Vectorized over leading axes. Uses the axis ``v_a × (-y)``. The form
    ``I + K + K^2 / (1 + cos)`` stays accurate arbitrarily close to ``+y``, so
    the half-turn about ``x`` is only used once the axis underflows.
    """
    v = np.asarray(v_a, dtype=float)
    batch = v.shape[:-1]
    v = v.reshape(-1, 3)
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    # k = v × (-y) = (vz, 0, -vx); |k| = sin(phi), <v, -y> = cos(phi) = -vy
    k = np.stack([vz, np.zeros_like(vx), -vx], axis=1)
    s2 = vx * vx + vz * vz
    one_plus_c = np.where(vy > 0.0, s2 / (1.0 + np.maximum(vy, 0.0)), 1.0 - vy)
    degenerate = (vy > 0.0) & (s2 < AXIS_UNDERFLOW)

    K = skew(k)
    KK = K @ K
    coeff = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, one_plus_c))
    R = np.eye(3) + K + KK * coeff[:, None, None]
    if np.any(degenerate):
        R[degenerate] = np.diag([1.0, -1.0, -1.0])
    return R.reshape(batch + (3, 3))


def approach_space_transform(v_a) -> RigidTransform:
    return RigidTransform(approach_space_rotation(np.asarray(v_a, dtype=float).reshape(3)))


def rotate_grasps(R, grasps) -> np.ndarray:
    """Apply rotation(s) ``R`` (``(3,3)`` or ``(..., 3, 3)``) to grasp arrays."""
    g = np.asarray(grasps, dtype=float)
    R = np.asarray(R, dtype=float)
    qr = matrix_to_quat(R)
    q = quat_normalize(quat_multiply(qr, g[..., :4]))
    p = np.einsum("...ij,...j->...i", R, g[..., 4:7])
    return np.concatenate([q, p], axis=-1)


def transform_grasp(T: RigidTransform, g):
    """``p' = R p + t``, ``q' = quat(R) ⊗ q``. Accepts a GraspPose or an array batch."""
    arr = _as_grasp_array(g)
    out = rotate_grasps(T.R, arr)
    out[..., 4:7] += T.t
    if isinstance(g, GraspPose):
        return GraspPose.from_array(out)
    return out


def transform_cloud(T: RigidTransform, points) -> np.ndarray:
    return T.apply(points)


def cone_contains(cone: ConeConstraint, v) -> np.ndarray | bool:
    """Inclusive membership: ``<v, axis> >= cos(half_angle)``."""
    d = np.asarray(v, dtype=float) @ cone.axis
    res = d >= np.cos(cone.half_angle)
    return bool(res) if np.ndim(res) == 0 else res


def _orthonormal_basis(pole: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(
        (np.abs(pole[:, 0]) < 0.9)[:, None], np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    )
    e1 = np.cross(pole, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(pole, e1)
    return e1, e2


def sample_direction_in_cone(pole, alpha, rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the spherical cap of half-angle ``alpha`` around ``pole``.

    ``pole`` may be ``(3,)`` or ``(n, 3)``; ``alpha`` broadcasts against the
    leading axis. ``cos(theta)`` is uniform on ``[cos(alpha), 1]`` and the
    azimuth is uniform on ``[0, 2*pi)``.
    """
    pole = np.asarray(pole, dtype=float)
    single = pole.ndim == 1
    P = pole.reshape(-1, 3)
    n = P.shape[0]
    a = np.broadcast_to(np.asarray(alpha, dtype=float), (n,))
    if np.any(a <= 0.0) or np.any(a > np.pi / 2 + 1e-12):
        raise ValueError("cone half-angle must lie in (0, pi/2]")
    u = rng.random(n)
    phi = 2.0 * np.pi * rng.random(n)
    cos_a = np.cos(a)
    cos_t = 1.0 - u * (1.0 - cos_a)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    e1, e2 = _orthonormal_basis(P)
    v = (
        cos_t[:, None] * P
        + (sin_t * np.cos(phi))[:, None] * e1
        + (sin_t * np.sin(phi))[:, None] * e2
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v[0] if single else v


def grasp_control_points(g, canonical: np.ndarray = CANONICAL_CONTROL_POINTS) -> np.ndarray:
    """Rigidly place the 6-point gripper skeleton at each grasp, ``(..., 6, 3)``."""
    arr = _as_grasp_array(g)
    R = quat_to_matrix(quat_normalize(arr[..., :4]))
    return np.einsum("...ij,kj->...ki", R, canonical) + arr[..., None, 4:7]


def perturb_grasps(grasps, sigma_t: float, sigma_r: float, rng: np.random.Generator) -> np.ndarray:
    """Isotropic Gaussian position noise plus a random-axis rotation of angle |N(0, sigma_r)|."""
    g = np.asarray(grasps, dtype=float)
    n = g.shape[0]
    p = g[:, 4:7] + sigma_t * rng.standard_normal((n, 3))
    axis = random_unit_vectors(rng, n)
    angle = np.abs(sigma_r * rng.standard_normal(n))
    q = quat_normalize(quat_multiply(quat_from_axis_angle(axis, angle), g[:, :4]))
    return np.concatenate([q, p], axis=1)


# ---------------------------------------------------------------------------
# Sectors
# ---------------------------------------------------------------------------

def yaw_pitch(v) -> tuple[np.ndarray, np.ndarray]:
    """Pitch from the ``-y`` pole in ``[0, pi]`` and yaw ``atan2(z, x)``."""
    v = np.asarray(v, dtype=float)
    pitch = np.arctan2(np.hypot(v[..., 0], v[..., 2]), -v[..., 1])
    yaw = np.arctan2(v[..., 2], v[..., 0])
    return yaw, pitch


def sector_of(v, grid: SectorGrid = SectorGrid()) -> np.ndarray | int:
    """Sector index ``pitch_bin * yaw_bins + yaw_bin`` for unit vectors.

    Bins are half-open and low-inclusive; the last pitch bin also takes the
    ``+y`` pole. At either pole the yaw bin is 0.
    """
    v = np.asarray(v, dtype=float)
    yaw, pitch = yaw_pitch(v)
    pitch_w = np.pi / grid.pitch_bins
    yaw_w = 2.0 * np.pi / grid.yaw_bins
    pb = np.minimum(np.floor(pitch / pitch_w).astype(np.int64), grid.pitch_bins - 1)
    yb = np.floor((yaw + np.pi) / yaw_w).astype(np.int64) % grid.yaw_bins
    at_pole = (v[..., 0] == 0.0) & (v[..., 2] == 0.0)
    yb = np.where(at_pole, 0, yb)
    idx = pb * grid.yaw_bins + yb
    return int(idx) if np.ndim(idx) == 0 else idx


def direction_from_yaw_pitch(yaw, pitch) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    s = np.sin(pitch)
    return np.stack([s * np.cos(yaw), -np.cos(pitch), s * np.sin(yaw)], axis=-1)


def sector_bounds(index: int, grid: SectorGrid) -> tuple[float, float, float, float]:
    """``(yaw_lo, yaw_hi, pitch_lo, pitch_hi)`` of one sector."""
    pb, yb = divmod(int(index), grid.yaw_bins)
    yaw_w = 2.0 * np.pi / grid.yaw_bins
    pitch_w = np.pi / grid.pitch_bins
    return (-np.pi + yb * yaw_w, -np.pi + (yb + 1) * yaw_w, pb * pitch_w, (pb + 1) * pitch_w)


def sector_cone(index: int, grid: SectorGrid, boundary_samples: int = 65) -> ConeConstraint:
    """Cone around the sector's angular centre that encloses the whole sector.

    The half-angle is the largest angle from the centre direction to the
    sector boundary (sampled densely, corners included), capped at pi/2.
    """
    y0, y1, p0, p1 = sector_bounds(index, grid)
    axis = direction_from_yaw_pitch(0.5 * (y0 + y1), 0.5 * (p0 + p1))
    t = np.linspace(0.0, 1.0, boundary_samples)
    yaws = np.concatenate([y0 + (y1 - y0) * t, y0 + (y1 - y0) * t, np.full_like(t, y0), np.full_like(t, y1)])
    pitches = np.concatenate([np.full_like(t, p0), np.full_like(t, p1), p0 + (p1 - p0) * t, p0 + (p1 - p0) * t])
    edge = direction_from_yaw_pitch(yaws, pitches)
    ang = np.arccos(np.clip(edge @ axis, -1.0, 1.0)).max()
    return ConeConstraint(axis / np.linalg.norm(axis), float(min(ang, np.pi / 2)))


def angle_between(a, b) -> np.ndarray:
    """Angle between unit vectors via atan2(|a×b|, a·b) for accuracy near 0 and pi."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))
