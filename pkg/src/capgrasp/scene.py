"""Procedural primitive objects and camera-frame point clouds."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import matrix_to_quat, quat_to_matrix, random_quaternions, random_unit_vectors

KINDS = ("box", "cylinder", "sphere")
KIND_CODE = {"box": 0, "cylinder": 1, "sphere": 2}
EXTENT_RANGE = (0.01, 0.15)


@dataclass(frozen=True)
class PrimitiveShape:
    """A convex primitive posed in some frame.

    ``dims`` holds half-extents for a box, ``(radius, half_height)`` for a
    cylinder (axis along local z) and ``(radius,)`` for a sphere.
    """

    kind: str
    dims: tuple
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        dims = tuple(float(d) for d in self.dims)
        expected = {"box": 3, "cylinder": 2, "sphere": 1}[self.kind]
        if len(dims) != expected:
            raise ValueError(f"{self.kind} needs {expected} dimensions, got {len(dims)}")
        lo, hi = EXTENT_RANGE
        if any(not lo <= d <= hi for d in dims):
            raise ValueError(f"extents {dims} outside [{lo}, {hi}] m")
        q = np.asarray(self.q, dtype=float).reshape(4)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "q", q / np.linalg.norm(q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def kind_code(self) -> int:
        return KIND_CODE[self.kind]

    @property
    def dims3(self) -> np.ndarray:
        """Dimensions padded to length 3 for the kernels."""
        out = np.zeros(3)
        out[: len(self.dims)] = self.dims
        return out

    @property
    def local_half_extents(self) -> np.ndarray:
        if self.kind == "box":
            return np.array(self.dims)
        if self.kind == "cylinder":
            r, h = self.dims
            return np.array([r, r, h])
        r = self.dims[0]
        return np.array([r, r, r])

    def transformed(self, R, t) -> "PrimitiveShape":
        """The same body after applying ``x -> R x + t``."""
        R = np.asarray(R, dtype=float)
        return PrimitiveShape(self.kind, self.dims, matrix_to_quat(R @ self.R), R @ self.t + np.asarray(t, float))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "pose": {"q": self.q.tolist(), "t": self.t.tolist()}}

    @classmethod
    def from_dict(cls, d: dict) -> "PrimitiveShape":
        return cls(d["kind"], tuple(d["dims"]), np.array(d["pose"]["q"]), np.array(d["pose"]["t"]))


@dataclass(frozen=True)
class CameraPose:
    """Camera pose in the world; the camera looks along its local +z."""

    position: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(4))

    @property
    def R(self) -> np.ndarray:
        """Camera-to-world rotation."""
        return quat_to_matrix(self.q)

    @classmethod
    def look_at(cls, position, target) -> "CameraPose":
        position = np.asarray(position, dtype=float)
        z = np.asarray(target, dtype=float) - position
        z /= np.linalg.norm(z)
        down = np.array([0.0, 0.0, -1.0])
        if abs(z @ down) > 0.999:
            down = np.array([0.0, 1.0, 0.0])
        y = down - (down @ z) * z
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        return cls(position, matrix_to_quat(np.stack([x, y, z], axis=1)))

    def world_to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.position) @ self.R

    def to_dict(self) -> dict:
        return {"pos": self.position.tolist(), "quat": self.q.tolist()}


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    centroid_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("point cloud is empty")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "centroid_offset", np.asarray(self.centroid_offset, dtype=float).reshape(3))
        if self.normals is not None:
            object.__setattr__(self, "normals", np.asarray(self.normals, dtype=float).reshape(-1, 3))

    def __len__(self) -> int:
        return self.points.shape[0]


def random_primitive(rng: np.random.Generator, kind: str | None = None) -> PrimitiveShape:
    """A desk-scale primitive that fits the default gripper along some axis."""
    kind = kind or KINDS[rng.integers(len(KINDS))]
    if kind == "sphere":
        dims = (rng.uniform(0.015, 0.035),)
    elif kind == "cylinder":
        dims = (rng.uniform(0.015, 0.035), rng.uniform(0.02, 0.08))
    else:
        dims = (rng.uniform(0.012, 0.035), rng.uniform(0.012, 0.035), rng.uniform(0.02, 0.08))
        dims = tuple(rng.permutation(dims))
    q = random_quaternions(rng, 1)[0]
    t = rng.uniform(-0.2, 0.2, 3)
    return PrimitiveShape(kind, dims, q, t)


def _box_faces(h):
    hx, hy, hz = h
    # (axis, sign, area)
    return [(0, 1.0, 4 * hy * hz), (0, -1.0, 4 * hy * hz),
            (1, 1.0, 4 * hx * hz), (1, -1.0, 4 * hx * hz),
            (2, 1.0, 4 * hx * hy), (2, -1.0, 4 * hx * hy)]


def surface_sample_local(shape: PrimitiveShape, count: int, rng: np.random.Generator):
    """Area-uniform surface points and outward normals in the shape frame.

    Also returns the patch index of each sample (box face 0..5; cylinder
    0 lateral, 1 top cap, 2 bottom cap; sphere 0).
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if shape.kind == "sphere":
        r = shape.dims[0]
        n = random_unit_vectors(rng, count)
        return r * n, n, np.zeros(count, dtype=np.int64)

    if shape.kind == "box":
        h = np.array(shape.dims)
        faces = _box_faces(h)
        areas = np.array([f[2] for f in faces])
        patch = rng.choice(6, size=count, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, (count, 3))
        pts = uv * h
        nrm = np.zeros((count, 3))
        for i, (axis, sign, _) in enumerate(faces):
            m = patch == i
            pts[m, axis] = sign * h[axis]
            nrm[m, axis] = sign
        return pts, nrm, patch

    r, hh = shape.dims
    areas = np.array([2 * np.pi * r * 2 * hh, np.pi * r * r, np.pi * r * r])
    patch = rng.choice(3, size=count, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2 * np.pi, count)
    zs = rng.uniform(-hh, hh, count)
    rad = r * np.sqrt(rng.random(count))
    pts = np.empty((count, 3))
    nrm = np.zeros((count, 3))
    lat = patch == 0
    pts[lat] = np.stack([r * np.cos(theta[lat]), r * np.sin(theta[lat]), zs[lat]], axis=1)
    nrm[lat] = np.stack([np.cos(theta[lat]), np.sin(theta[lat]), np.zeros(lat.sum())], axis=1)
    for pid, sign in ((1, 1.0), (2, -1.0)):
        m = patch == pid
        pts[m] = np.stack([rad[m] * np.cos(theta[m]), rad[m] * np.sin(theta[m]), np.full(m.sum(), sign * hh)], axis=1)
        nrm[m, 2] = sign
    return pts, nrm, patch


def surface_sample(shape: PrimitiveShape, count: int, rng: np.random.Generator):
    """Area-uniform surface points and outward unit normals in the shape's parent frame."""
    pts, nrm, _ = surface_sample_local(shape, count, rng)
    R = shape.R
    return pts @ R.T + shape.t, nrm @ R.T


def surface_residual(shape: PrimitiveShape, points) -> np.ndarray:
    """Distance-like residual of the analytic surface equation (0 on the surface)."""
    local = (np.asarray(points, dtype=float) - shape.t) @ shape.R
    if shape.kind == "sphere":
        return np.abs(np.linalg.norm(local, axis=1) - shape.dims[0])
    if shape.kind == "box":
        h = np.array(shape.dims)
        d = np.abs(local) - h
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return np.abs(outside + inside)
    r, hh = shape.dims
    dr = np.hypot(local[:, 0], local[:, 1]) - r
    dz = np.abs(local[:, 2]) - hh
    d = np.stack([dr, dz], axis=1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return np.abs(outside + inside)


def sample_camera_pose(rng: np.random.Generator, target, radius=(0.4, 0.8)) -> CameraPose:
    """Camera on a sphere of random radius around ``target``, looking at it."""
    direction = random_unit_vectors(rng, 1)[0]
    dist = rng.uniform(*radius)
    return CameraPose.look_at(np.asarray(target, float) + dist * direction, target)


def render_cloud(shape: PrimitiveShape, cam: CameraPose, n_points: int,
                 rng: np.random.Generator, oversample: int = 100) -> PointCloud:
    """Camera-frame points on the camera-facing surface of a convex primitive.

    Candidates are drawn in chunks until ``n_points`` visible ones exist;
    after ``oversample * n_points`` candidates without success the camera
    is treated as degenerate.
    """
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    chunk = max(4 * n_points, 256)
    budget = oversample * n_points
    drawn = 0
    got_p, got_n, have = [], [], 0
    while have < n_points:
        if drawn >= budget:
            raise RuntimeError(
                f"only {have} visible points after {drawn} candidates; camera view is degenerate"
            )
        k = min(chunk, budget - drawn)
        pts, nrm = surface_sample(shape, k, rng)
        drawn += k
        vis = np.einsum("ij,ij->i", nrm, cam.position - pts) > 0.0
        got_p.append(pts[vis])
        got_n.append(nrm[vis])
        have += int(vis.sum())
    pts = np.concatenate(got_p)[:n_points]
    nrm = np.concatenate(got_n)[:n_points]
    return PointCloud(cam.world_to_camera(pts), nrm @ cam.R)


def zero_center(cloud: PointCloud, grasps=None):
    """Shift the cloud (and grasp positions) so the cloud centroid is the origin.

    Returns ``(centered_cloud, shifted_grasps, offset)``; ``offset`` is the
    removed centroid and is accumulated into ``centroid_offset``.
    """
    centroid = cloud.points.mean(axis=0)
    out = PointCloud(cloud.points - centroid, cloud.normals, cloud.centroid_offset + centroid)
    shifted = None
    if grasps is not None:
        shifted = np.array(grasps, dtype=float, copy=True)
        shifted[..., 4:7] -= centroid
    return out, shifted, centroid
