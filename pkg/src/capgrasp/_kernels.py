"""Scalar-loop geometry kernels (compiled with numba unless disabled).

Shape encoding used throughout: ``kind`` 0 box (half-extents), 1 cylinder
(radius, half-height, axis local z), 2 sphere (radius); ``dims`` length 3,
``R``/``t`` the body-to-parent rotation and translation.
"""
from __future__ import annotations

import math

import numpy as np

from ._jit import njit

BOX, CYLINDER, SPHERE = 0, 1, 2
RAY_TOL = 1e-9


@njit
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit
def quat_matrix(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    n = math.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    R = np.empty((3, 3))
    R[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


@njit
def ray_cast(kind, dims, R, t, origin, direction):
    """Intersect the line ``origin + s * direction`` (unit direction) with a primitive.

    Returns ``(hit, s_in, s_out, n_in, n_out)`` with outward unit normals at
    the entry and exit points, in the parent frame.
    """
    o = R.T @ (origin - t)
    d = R.T @ direction
    n_in = np.zeros(3)
    n_out = np.zeros(3)
    s_in = -np.inf
    s_out = np.inf
    if kind == SPHERE:
        r = dims[0]
        b = _dot(o, d)
        c = _dot(o, o) - r * r
        disc = b * b - c
        if disc < 0.0:
            return False, 0.0, 0.0, n_in, n_out
        sq = math.sqrt(disc)
        s_in = -b - sq
        s_out = -b + sq
        n_in = (o + s_in * d) / r
        n_out = (o + s_out * d) / r
    else:
        first_axis = 0
        if kind == CYLINDER:
            first_axis = 2
            # radial part of the cylinder
            r = dims[0]
            a = d[0] * d[0] + d[1] * d[1]
            b = o[0] * d[0] + o[1] * d[1]
            c = o[0] * o[0] + o[1] * o[1] - r * r
            if a < 1e-20:
                if c > 0.0:
                    return False, 0.0, 0.0, n_in, n_out
            else:
                disc = b * b - a * c
                if disc < 0.0:
                    return False, 0.0, 0.0, n_in, n_out
                sq = math.sqrt(disc)
                s_in = (-b - sq) / a
                s_out = (-b + sq) / a
                n_in[0] = (o[0] + s_in * d[0]) / r
                n_in[1] = (o[1] + s_in * d[1]) / r
                n_out[0] = (o[0] + s_out * d[0]) / r
                n_out[1] = (o[1] + s_out * d[1]) / r
        for i in range(first_axis, 3):
            hi = dims[1] if kind == CYLINDER else dims[i]
            if abs(d[i]) < 1e-15:
                if abs(o[i]) > hi:
                    return False, 0.0, 0.0, n_in, n_out
                continue
            t1 = (-hi - o[i]) / d[i]
            t2 = (hi - o[i]) / d[i]
            sgn = 1.0 if d[i] > 0.0 else -1.0
            lo = min(t1, t2)
            up = max(t1, t2)
            if lo > s_in:
                s_in = lo
                n_in[:] = 0.0
                n_in[i] = -sgn
            if up < s_out:
                s_out = up
                n_out[:] = 0.0
                n_out[i] = sgn
        if s_in > s_out + RAY_TOL or not (math.isfinite(s_in) and math.isfinite(s_out)):
            return False, 0.0, 0.0, n_in, n_out
    return True, s_in, s_out, R @ n_in, R @ n_out


@njit
def support(kind, dims, R, t, d):
    dl = R.T @ d
    s = np.empty(3)
    if kind == BOX:
        for i in range(3):
            s[i] = dims[i] if dl[i] >= 0.0 else -dims[i]
    elif kind == CYLINDER:
        rad = math.sqrt(dl[0] * dl[0] + dl[1] * dl[1])
        if rad > 1e-300:
            s[0] = dims[0] * dl[0] / rad
            s[1] = dims[0] * dl[1] / rad
        else:
            s[0] = 0.0
            s[1] = 0.0
        s[2] = dims[1] if dl[2] >= 0.0 else -dims[1]
    else:
        nrm = math.sqrt(_dot(dl, dl))
        for i in range(3):
            s[i] = dims[0] * dl[i] / nrm
    return R @ s + t


@njit
def _line_star(S, a, b):
    ab = b - a
    ao = -a
    if _dot(ab, ao) > 0.0:
        S[0] = b
        S[1] = a
        return 2, _cross(_cross(ab, ao), ab)
    S[0] = a
    return 1, ao


@njit
def _triangle(S, a, b, c):
    ab = b - a
    ac = c - a
    ao = -a
    abc = _cross(ab, ac)
    if _dot(_cross(abc, ac), ao) > 0.0:
        if _dot(ac, ao) > 0.0:
            S[0] = c
            S[1] = a
            return 2, _cross(_cross(ac, ao), ac)
        return _line_star(S, a, b)
    if _dot(_cross(ab, abc), ao) > 0.0:
        return _line_star(S, a, b)
    side = _dot(abc, ao)
    if side > 0.0:
        S[0] = c
        S[1] = b
        S[2] = a
        return 3, abc
    if side < 0.0:
        S[0] = b
        S[1] = c
        S[2] = a
        return 3, -abc
    return -1, abc


@njit
def gjk_intersect(ka, da, Ra, ta, kb, db, Rb, tb, max_iter=64):
    """Boolean GJK overlap test between two convex primitives (touching counts)."""
    S = np.zeros((4, 3))
    d = ta - tb
    if _dot(d, d) < 1e-30:
        d = np.array([1.0, 0.0, 0.0])
    a = support(ka, da, Ra, ta, d) - support(kb, db, Rb, tb, -d)
    S[0] = a
    n = 1
    d = -a
    for _ in range(max_iter):
        if _dot(d, d) < 1e-30:
            return True
        a = support(ka, da, Ra, ta, d) - support(kb, db, Rb, tb, -d)
        if _dot(a, d) < 0.0:
            return False
        S[n] = a
        n += 1
        if n == 2:
            ab = S[0] - S[1]
            ao = -S[1]
            if _dot(ab, ao) > 0.0:
                d = _cross(_cross(ab, ao), ab)
            else:
                S[0] = S[1]
                n = 1
                d = ao
        elif n == 3:
            n, d = _triangle(S, S[2].copy(), S[1].copy(), S[0].copy())
            if n < 0:
                return True
        else:
            a4 = S[3].copy()
            b4 = S[2].copy()
            c4 = S[1].copy()
            d4 = S[0].copy()
            ao = -a4
            ab = b4 - a4
            ac = c4 - a4
            ad = d4 - a4
            vol = abs(_dot(ab, _cross(ac, ad)))
            scale = math.sqrt(_dot(ab, ab) * _dot(ac, ac) * _dot(ad, ad))
            if vol <= 1e-14 * scale:
                # flat tetrahedron: drop the newest point and keep searching
                n = 3
                continue
            n_abc = _cross(ab, ac)
            if _dot(n_abc, ad) > 0.0:
                n_abc = -n_abc
            n_acd = _cross(ac, ad)
            if _dot(n_acd, ab) > 0.0:
                n_acd = -n_acd
            n_adb = _cross(ad, ab)
            if _dot(n_adb, ac) > 0.0:
                n_adb = -n_adb
            if _dot(n_abc, ao) > 0.0:
                n, d = _triangle(S, a4, b4, c4)
            elif _dot(n_acd, ao) > 0.0:
                n, d = _triangle(S, a4, c4, d4)
            elif _dot(n_adb, ao) > 0.0:
                n, d = _triangle(S, a4, d4, b4)
            else:
                return True
            if n < 0:
                return True
    return True


@njit
def sphere_box_overlap(center, radius, Rb, tb, hb):
    local = Rb.T @ (center - tb)
    d2 = 0.0
    for i in range(3):
        c = min(max(local[i], -hb[i]), hb[i])
        d2 += (local[i] - c) ** 2
    return d2 <= radius * radius


@njit
def _collides(kind, dims, Rs, ts, Rb, tb, hb):
    if kind == SPHERE:
        return sphere_box_overlap(ts, dims[0], Rb, tb, hb)
    return gjk_intersect(kind, dims, Rs, ts, BOX, hb, Rb, tb)


@njit
def evaluate_grasps_kernel(kind, dims, Rs, ts, grasps, max_width, finger_depth, cos_friction,
                           tip_depth, finger_thickness, finger_span, palm_thickness):
    """Antipodal success test for each grasp row ``[q(4), p(3)]``; returns uint8 flags.

    The closing line runs along the grasp x-axis at the pad depth closest to
    the body centre. Success needs two contacts inside the open jaw, both
    normals inside the friction cones, and no overlap between the body and
    the open fingers or the palm.
    """
    m = grasps.shape[0]
    out = np.zeros(m, dtype=np.uint8)
    half_w = 0.5 * max_width
    pad_lo = tip_depth - finger_depth
    hf = np.array([0.5 * finger_thickness, 0.5 * finger_span, 0.5 * finger_depth])
    hp = np.array([half_w + finger_thickness, 0.5 * finger_span, 0.5 * palm_thickness])
    for k in range(m):
        Rg = quat_matrix(grasps[k, :4])
        p = grasps[k, 4:7].copy()
        x = Rg[:, 0].copy()
        a = Rg[:, 2].copy()
        depth = _dot(ts - p, a)
        depth = min(max(depth, pad_lo), tip_depth)
        origin = p + depth * a
        hit, s_in, s_out, n_in, n_out = ray_cast(kind, dims, Rs, ts, origin, x)
        if not hit:
            continue
        if s_in < -half_w or s_out > half_w:
            continue
        if -_dot(n_in, x) < cos_friction or _dot(n_out, x) < cos_friction:
            continue
        clear = True
        for side in (-1.0, 1.0):
            c_local = np.array([side * (half_w + 0.5 * finger_thickness), 0.0, tip_depth - 0.5 * finger_depth])
            if _collides(kind, dims, Rs, ts, Rg, p + Rg @ c_local, hf):
                clear = False
                break
        if clear:
            c_palm = np.array([0.0, 0.0, pad_lo - 0.5 * palm_thickness])
            if _collides(kind, dims, Rs, ts, Rg, p + Rg @ c_palm, hp):
                clear = False
        if clear:
            out[k] = 1
    return out


@njit
def best_cover_kernel(gen_app, gen_pos, gen_score, gt_app, gt_pos, angle_threshold, distance_threshold):
    """Highest score among generated grasps covering each ground-truth grasp.

    Both thresholds are strict. Uncovered ground-truth grasps get ``-inf``.
    """
    n_gt = gt_app.shape[0]
    n_gen = gen_app.shape[0]
    out = np.full(n_gt, -np.inf)
    for j in range(n_gt):
        for i in range(n_gen):
            if gen_score[i] <= out[j]:
                continue
            dx = gen_pos[i, 0] - gt_pos[j, 0]
            dy = gen_pos[i, 1] - gt_pos[j, 1]
            dz = gen_pos[i, 2] - gt_pos[j, 2]
            if math.sqrt(dx * dx + dy * dy + dz * dz) >= distance_threshold:
                continue
            c = _cross(gen_app[i], gt_app[j])
            ang = math.atan2(math.sqrt(_dot(c, c)), _dot(gen_app[i], gt_app[j]))
            if ang < angle_threshold:
                out[j] = gen_score[i]
    return out


@njit
def ray_cast_batch(kind, dims, R, t, origins, directions):
    """Vector form of :func:`ray_cast`; misses come back with ``hit == 0``."""
    m = origins.shape[0]
    hit = np.zeros(m, dtype=np.uint8)
    s_in = np.zeros(m)
    s_out = np.zeros(m)
    n_in = np.zeros((m, 3))
    n_out = np.zeros((m, 3))
    for k in range(m):
        h, a, b, na, nb = ray_cast(kind, dims, R, t, origins[k], directions[k])
        if h:
            hit[k] = 1
            s_in[k] = a
            s_out[k] = b
            n_in[k] = na
            n_out[k] = nb
    return hit, s_in, s_out, n_in, n_out
