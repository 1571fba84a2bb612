"""Analytic antipodal grasp oracle, ground-truth generation and dataset curation.

The oracle stands in for a physics stability test: a grasp succeeds when the
open jaw straddles the body, both contact normals lie inside the friction
cones of the closing direction, and neither the open fingers nor the palm
overlap the body.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .geometry import (
    GraspPose,
    matrix_to_quat,
    perturb_grasps,
    quat_multiply,
    quat_normalize,
    random_quaternions,
)
from .scene import (
    CameraPose,
    PointCloud,
    PrimitiveShape,
    random_primitive,
    render_cloud,
    sample_camera_pose,
    surface_sample,
    zero_center,
)

log = logging.getLogger(__name__)

# Gripper body (metres, grasp frame): fingertips sit at TIP_DEPTH along the
# approach axis, matching the fingertip control points.
TIP_DEPTH = 0.1034
FINGER_THICKNESS = 0.01
FINGER_SPAN = 0.02
PALM_THICKNESS = 0.01

MAX_REJECTIONS = 10**6
QUAT_TOL = 1e-9


@dataclass(frozen=True)
class GripperSpec:
    max_width: float = 0.08
    finger_depth: float = 0.046
    friction_mu: float = 0.5

    def __post_init__(self):
        if self.max_width <= 0 or self.finger_depth <= 0 or self.friction_mu <= 0:
            raise ValueError("gripper width, finger depth and friction must be positive")

    @property
    def cos_friction(self) -> float:
        return 1.0 / np.sqrt(1.0 + self.friction_mu**2)


def evaluate_grasps(shape: PrimitiveShape, grasps, gripper: GripperSpec = GripperSpec()) -> np.ndarray:
    """Oracle labels for a batch of grasps ``(M, 7)`` expressed in the shape's frame."""
    g = np.ascontiguousarray(np.asarray(grasps, dtype=float).reshape(-1, 7))
    flags = _kernels.evaluate_grasps_kernel(
        shape.kind_code, shape.dims3, np.ascontiguousarray(shape.R), shape.t, g,
        gripper.max_width, gripper.finger_depth, gripper.cos_friction,
        TIP_DEPTH, FINGER_THICKNESS, FINGER_SPAN, PALM_THICKNESS,
    )
    return flags.astype(bool)


def evaluate_grasp(shape: PrimitiveShape, g, gripper: GripperSpec = GripperSpec()) -> bool:
    arr = g.as_array() if isinstance(g, GraspPose) else np.asarray(g, dtype=float)
    return bool(evaluate_grasps(shape, arr[None], gripper)[0])


def _frames_with_closing_axis(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotation matrices whose x-axis is ``x`` and whose roll about it is uniform."""
    helper = np.where((np.abs(x[:, 2]) < 0.9)[:, None], np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    e1 = np.cross(x, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(x, e1)
    roll = rng.uniform(0.0, 2 * np.pi, x.shape[0])
    a = np.cos(roll)[:, None] * e1 + np.sin(roll)[:, None] * e2
    y = np.cross(a, x)
    return np.stack([x, y, a], axis=2)


def generate_ground_truth(shape: PrimitiveShape, count: int, gripper: GripperSpec,
                          rng: np.random.Generator, batch: int = 512) -> np.ndarray:
    """Oracle-passing grasps from antipodal contact pairs, ``(count, 7)``.

    A surface point is paired with the exit point of the inward normal ray;
    pairs within the jaw width and friction cones become grasps with a
    random roll about the closing axis and a random stand-off inside the
    finger pads. Every candidate is re-checked by the oracle.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    found, have, rejected = [], 0, 0
    R_s = np.ascontiguousarray(shape.R)
    while have < count:
        pts, nrm = surface_sample(shape, batch, rng)
        x = -nrm
        hit, _, s_out, _, n_out = _kernels.ray_cast_batch(
            shape.kind_code, shape.dims3, R_s, shape.t, np.ascontiguousarray(pts), np.ascontiguousarray(x)
        )
        ok = (hit == 1) & (s_out <= gripper.max_width) & (np.einsum("ij,ij->i", n_out, x) >= gripper.cos_friction)
        mid = pts + 0.5 * s_out[:, None] * x
        frames = _frames_with_closing_axis(x, rng)
        standoff = rng.uniform(0.0, gripper.finger_depth, batch)
        a = frames[:, :, 2]
        p = mid - (TIP_DEPTH - standoff)[:, None] * a
        cand = np.concatenate([matrix_to_quat(frames), p], axis=1)[ok]
        passed = cand[evaluate_grasps(shape, cand, gripper)] if len(cand) else cand
        rejected += batch - len(passed)
        found.append(passed)
        have += len(passed)
        if have < count and rejected >= MAX_REJECTIONS:
            raise RuntimeError(f"{shape.kind} {shape.dims}: no graspable pairs after {rejected} rejections")
    return np.concatenate(found)[:count]


def generate_negatives(shape: PrimitiveShape, count: int, gripper: GripperSpec, rng: np.random.Generator,
                       positives=None, batch: int = 256) -> np.ndarray:
    """Oracle-failing grasps: half random poses in the inflated box, half perturbed positives."""
    if count <= 0:
        return np.zeros((0, 7))
    n_random = count if positives is None or len(positives) == 0 else count // 2
    out = []
    for n_need, kind in ((n_random, "random"), (count - n_random, "perturbed")):
        have, rejected, parts = 0, 0, []
        while have < n_need:
            if kind == "random":
                local = rng.uniform(-1.0, 1.0, (batch, 3)) * 1.5 * shape.local_half_extents
                cand = np.concatenate([random_quaternions(rng, batch), local @ shape.R.T + shape.t], axis=1)
            else:
                base = positives[rng.integers(len(positives), size=batch)]
                cand = perturb_grasps(base, 0.02, 0.3, rng)
            keep = cand[~evaluate_grasps(shape, cand, gripper)]
            rejected += batch - len(keep)
            parts.append(keep)
            have += len(keep)
            if have < n_need and rejected >= MAX_REJECTIONS:
                raise RuntimeError(f"could not produce {kind} negatives for {shape.kind}")
        if n_need:
            out.append(np.concatenate(parts)[:n_need])
    return np.concatenate(out) if out else np.zeros((0, 7))


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class SceneRecord:
    """One rendered view of one object with labeled grasps in the centered camera frame."""

    scene_id: str
    object_id: str
    split: str
    shape: PrimitiveShape
    camera: CameraPose
    cloud: PointCloud
    grasps: np.ndarray
    labels: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return self.grasps[self.labels]

    @property
    def negatives(self) -> np.ndarray:
        return self.grasps[~self.labels]

    def shape_in_cloud_frame(self) -> PrimitiveShape:
        """The object expressed in the same frame as ``cloud`` and ``grasps``."""
        Rc = self.camera.R
        return self.shape.transformed(Rc.T, -Rc.T @ self.camera.position - self.cloud.centroid_offset)

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "object_id": self.object_id,
            "split": self.split,
            "shape": self.shape.to_dict(),
            "camera": self.camera.to_dict(),
            "centroid_offset": self.cloud.centroid_offset.tolist(),
            "points": [float(f"{v:.6g}") for v in self.cloud.points.ravel()],
            "grasps": [
                {"q": g[:4].tolist(), "p": g[4:7].tolist(), "label": bool(lab)}
                for g, lab in zip(self.grasps, self.labels)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneRecord":
        expected = {"scene_id", "object_id", "split", "shape", "camera", "centroid_offset", "points", "grasps"}
        if set(d) != expected:
            raise ValueError(f"record fields {sorted(d)} do not match the dataset schema")
        if d["split"] not in ("train", "test"):
            raise ValueError(f"unknown split {d['split']!r}")
        cam_q = np.array(d["camera"]["quat"], dtype=float)
        shape_q = np.array(d["shape"]["pose"]["q"], dtype=float)
        grasps = np.array([list(g["q"]) + list(g["p"]) for g in d["grasps"]], dtype=float).reshape(-1, 7)
        labels = np.array([bool(g["label"]) for g in d["grasps"]], dtype=bool)
        for name, q in (("camera", cam_q[None]), ("shape", shape_q[None]), ("grasp", grasps[:, :4])):
            bad = np.abs(np.linalg.norm(q, axis=1) - 1.0) > QUAT_TOL
            if np.any(bad):
                raise ValueError(f"scene {d['scene_id']}: non-unit {name} quaternion")
        pts = np.array(d["points"], dtype=float).reshape(-1, 3)
        # Six significant digits leave a small centroid residual; fold it back
        # into the offset so the loaded frame is exactly centered.
        cloud, grasps, _ = zero_center(PointCloud(pts, None, np.array(d["centroid_offset"], dtype=float)), grasps)
        return cls(
            d["scene_id"], d["object_id"], d["split"], PrimitiveShape.from_dict(d["shape"]),
            CameraPose(np.array(d["camera"]["pos"]), cam_q), cloud, grasps, labels,
        )


@dataclass
class GraspDataset:
    records: list

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    @property
    def object_ids(self) -> list:
        seen = []
        for r in self.records:
            if r.object_id not in seen:
                seen.append(r.object_id)
        return seen


def write_dataset(path, dataset: GraspDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> GraspDataset:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(SceneRecord.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{Path(path).name}:{lineno}: {exc}") from exc
    return GraspDataset(records)


def _build_object(index, shape, split, cams_per_object, grasps_per_object, negatives_per_object,
                  gripper, n_points, seed):
    rng = np.random.default_rng(seed)
    object_id = f"obj{index:03d}"
    pos = generate_ground_truth(shape, grasps_per_object, gripper, rng)
    neg = generate_negatives(shape, negatives_per_object, gripper, rng, positives=pos)
    grasps_w = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    records = []
    for c in range(cams_per_object):
        scene_id = f"{object_id}_cam{c:03d}"
        try:
            cam = sample_camera_pose(rng, shape.t)
            cloud = render_cloud(shape, cam, n_points, rng)
        except RuntimeError as exc:
            raise RuntimeError(f"scene {scene_id}: {exc}") from exc
        Rc = cam.R
        q = quat_normalize(quat_multiply(matrix_to_quat(Rc.T), grasps_w[:, :4]))
        p = (grasps_w[:, 4:7] - cam.position) @ Rc
        centered, g_cam, _ = zero_center(cloud, np.concatenate([q, p], axis=1))
        records.append(SceneRecord(scene_id, object_id, split, shape, cam, centered, g_cam, labels.copy()))
    return records


def curate_dataset(shapes, cams_per_object: int, grasps_per_object: int, negatives_per_object: int,
                   gripper: GripperSpec, rng: np.random.Generator, n_points: int = 512,
                   test_fraction: float = 0.25, threads: int = 1) -> GraspDataset:
    """Render every object from several cameras and attach camera-frame labeled grasps.

    Objects, not scenes, are held out: ``round(test_fraction * n_objects)``
    objects go to the test split. Each object draws from its own seed, so the
    result does not depend on ``threads``.
    """
    shapes = list(shapes)
    if not shapes:
        raise ValueError("need at least one shape")
    n = len(shapes)
    n_test = int(round(test_fraction * n))
    test_ids = set(rng.permutation(n)[:n_test].tolist())
    seeds = rng.integers(0, 2**63 - 1, size=n)
    jobs = [
        (i, s, "test" if i in test_ids else "train", cams_per_object, grasps_per_object,
         negatives_per_object, gripper, n_points, int(seeds[i]))
        for i, s in enumerate(shapes)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda j: _build_object(*j), jobs))
    else:
        parts = [_build_object(*j) for j in jobs]
    records = [r for part in parts for r in part]
    log.info("curated %d scenes from %d objects", len(records), n)
    return GraspDataset(records)


def random_shapes(n: int, rng: np.random.Generator) -> list:
    return [random_primitive(rng) for _ in range(n)]


def dataset_shape_check(dataset: GraspDataset, gripper: GripperSpec = GripperSpec()) -> dict:
    """Re-run the pipeline postconditions: centered clouds, positives pass, negatives fail."""
    worst_centroid = 0.0
    bad_pos = bad_neg = 0
    for rec in dataset.records:
        worst_centroid = max(worst_centroid, float(np.abs(rec.cloud.points.mean(axis=0)).max()))
        labels = evaluate_grasps(rec.shape_in_cloud_frame(), rec.grasps, gripper)
        bad_pos += int(np.sum(rec.labels & ~labels))
        bad_neg += int(np.sum(~rec.labels & labels))
    return {"max_centroid": worst_centroid, "bad_positives": bad_pos, "bad_negatives": bad_neg}


