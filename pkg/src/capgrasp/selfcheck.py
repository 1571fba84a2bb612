"""Fast randomized invariant suite behind ``capgrasp selfcheck``."""
from __future__ import annotations

import numpy as np

from .geometry import (
    NEG_Y,
    approach_space_rotation,
    approach_vector,
    grasp_control_points,
    matrix_to_quat,
    quat_to_matrix,
    random_quaternions,
    random_unit_vectors,
    sample_direction_in_cone,
)
from .oracle import GripperSpec, evaluate_grasp, evaluate_grasps, generate_ground_truth, generate_negatives
from .scene import PrimitiveShape, random_primitive
from .training import make_conditional_batch


def _check(failures, ok, message):
    if not ok:
        failures.append(message)


def run(trials: int, rng: np.random.Generator) -> list:
    """Returns a list of failure messages (empty when clean)."""
    failures = []
    v = random_unit_vectors(rng, trials)
    R = approach_space_rotation(v)
    _check(failures, np.abs(np.einsum("bij,bj->bi", R, v) - NEG_Y).max() < 1e-9, "approach rotation misaligns v_A")
    eye_err = np.abs(np.einsum("bki,bkj->bij", R, R) - np.eye(3)).max()
    _check(failures, eye_err < 1e-9, "approach rotation is not orthonormal")
    _check(failures, np.abs(np.linalg.det(R) - 1.0).max() < 1e-9, "approach rotation has det != 1")

    Rr = quat_to_matrix(random_quaternions(rng, trials))
    w = np.einsum("bij,bj->bi", Rr, v)
    keep = np.linalg.norm(w - np.array([0.0, 1.0, 0.0]), axis=1) > 1e-6
    M = approach_space_rotation(w[keep]) @ Rr[keep] @ np.swapaxes(R[keep], 1, 2)
    _check(failures, np.abs(M[:, :, 1] - [0.0, 1.0, 0.0]).max() < 1e-6, "SO(2) conjugation moves the y-axis")

    q = random_quaternions(rng, trials)
    qq = matrix_to_quat(quat_to_matrix(q))
    _check(failures, np.minimum(np.abs(qq - q).max(1), np.abs(qq + q).max(1)).max() < 1e-9,
           "matrix/quaternion round trip drifts")
    g = np.concatenate([q, rng.normal(size=(trials, 3))], axis=1)
    g_neg = g.copy()
    g_neg[:, :4] *= -1
    _check(failures, np.array_equal(grasp_control_points(g), grasp_control_points(g_neg)),
           "control points differ under quaternion sign flip")

    alpha = rng.uniform(1e-6, np.pi / 2, trials)
    d = sample_direction_in_cone(v, alpha, rng)
    _check(failures, np.all(np.einsum("ij,ij->i", d, v) >= np.cos(alpha) - 1e-12), "cone sample escaped its cone")

    pts = rng.normal(0.0, 0.03, (trials, 4, 3))
    _, gt, a, _ = make_conditional_batch(pts, g, np.pi / 2, rng)
    ang = np.arccos(np.clip(approach_vector(gt) @ NEG_Y, -1.0, 1.0))
    _check(failures, np.all(ang <= a + 1e-9), "conditional pair violates cone closure")

    gripper = GripperSpec()
    sphere = PrimitiveShape("sphere", (0.03,))
    _check(failures, evaluate_grasp(sphere, [1, 0, 0, 0, 0, 0, -0.095], gripper), "centred sphere grasp rejected")
    _check(failures, not evaluate_grasp(PrimitiveShape("sphere", (0.05,)), [1, 0, 0, 0, 0, 0, -0.095], gripper),
           "oversized sphere grasp accepted")
    for kind in ("box", "cylinder", "sphere"):
        shape = random_primitive(rng, kind)
        pos = generate_ground_truth(shape, 50, gripper, rng)
        neg = generate_negatives(shape, 50, gripper, rng, positives=pos)
        _check(failures, evaluate_grasps(shape, pos, gripper).all(), f"{kind}: ground truth fails the oracle")
        _check(failures, not evaluate_grasps(shape, neg, gripper).any(), f"{kind}: negative passes the oracle")
    return failures
