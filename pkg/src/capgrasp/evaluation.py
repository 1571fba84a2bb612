"""Coverage, success-over-coverage curves, kept ratio and the sector benchmark."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from ._jit import USE_NUMBA
from .geometry import ConeConstraint, SectorGrid, approach_vector, cone_contains, sector_cone, sector_of
from .model import sample_constrained_grasps
from .oracle import GripperSpec, evaluate_grasps
from .refine import ProposalConfig, mh_refine

REFINE_MODES = ("none", "unconstrained", "constrained")


@dataclass(frozen=True)
class CoverageParams:
    angle_threshold: float = math.radians(10.0)
    distance_threshold: float = 0.02

    def __post_init__(self):
        if self.angle_threshold <= 0 or self.distance_threshold <= 0:
            raise ValueError("coverage thresholds must be positive")


def _best_cover_numpy(gen_app, gen_pos, gen_score, gt_app, gt_pos, angle_thr, dist_thr, chunk=256):
    out = np.full(gt_app.shape[0], -np.inf)
    for s in range(0, gt_app.shape[0], chunk):
        ga, gp = gt_app[s:s + chunk], gt_pos[s:s + chunk]
        d = gen_pos[:, None, :] - gp[None, :, :]
        dist = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])
        c = np.cross(gen_app[:, None, :], ga[None, :, :])
        cn = np.sqrt(c[..., 0] * c[..., 0] + c[..., 1] * c[..., 1] + c[..., 2] * c[..., 2])
        dot = gen_app[:, None, 0] * ga[None, :, 0] + gen_app[:, None, 1] * ga[None, :, 1] \
            + gen_app[:, None, 2] * ga[None, :, 2]
        ok = (dist < dist_thr) & (np.arctan2(cn, dot) < angle_thr)
        out[s:s + chunk] = np.where(ok, gen_score[:, None], -np.inf).max(axis=0, initial=-np.inf)
    return out


def best_cover_scores(generated, scores, gt, params: CoverageParams = CoverageParams(),
                      use_numba: bool | None = None) -> np.ndarray:
    """For each ground-truth grasp, the top score of a generated grasp covering it (``-inf`` if none)."""
    gen = np.atleast_2d(np.asarray(generated, dtype=float))
    gt = np.asarray(gt, dtype=float).reshape(-1, 7)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    args = (np.ascontiguousarray(approach_vector(gen)), np.ascontiguousarray(gen[:, 4:7]), scores,
            np.ascontiguousarray(approach_vector(gt)), np.ascontiguousarray(gt[:, 4:7]),
            float(params.angle_threshold), float(params.distance_threshold))
    if gt.shape[0] == 0:
        return np.empty(0)
    use_numba = USE_NUMBA if use_numba is None else use_numba
    if use_numba:
        return _kernels.best_cover_kernel(*args)
    return _best_cover_numpy(*args)


def coverage(generated, gt, params: CoverageParams = CoverageParams(), use_numba: bool | None = None) -> np.ndarray:
    """Covered flag per ground-truth grasp: some generated grasp is within both strict thresholds."""
    gen = np.atleast_2d(np.asarray(generated, dtype=float))
    return np.isfinite(best_cover_scores(gen, np.zeros(gen.shape[0]), gt, params, use_numba))


@dataclass
class Curve:
    """Curve points ordered by decreasing threshold; index 0 is the empty-set anchor."""

    thresholds: np.ndarray
    coverage: np.ndarray
    success_rate: np.ndarray
    auc: float
    n_generated: int
    n_gt: int
    n_covered: int
    n_success: int


def curve_from_cover(scores, successes, cover_scores, n_gt: int) -> Curve:
    """Sweep the distinct scores from high to low.

    ``cover_scores`` come from :func:`best_cover_scores`, so a ground-truth
    grasp counts as covered at threshold ``t`` iff its entry is ``>= t``.
    The anchor at ``+inf`` has coverage 0 and borrows the success rate of
    the first nonempty threshold.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    successes = np.asarray(successes, dtype=bool).reshape(-1)
    if scores.size == 0:
        raise ValueError("no grasps to evaluate")
    if n_gt <= 0:
        raise ValueError("no ground-truth grasps to cover")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    thresholds, first = np.unique(-s_sorted, return_index=True)
    thresholds = -thresholds
    last = np.append(first[1:], s_sorted.size)
    kept = last.astype(float)
    succ = np.cumsum(successes[order])[last - 1]
    cover_sorted = np.sort(np.asarray(cover_scores, dtype=float))
    covered = cover_sorted.size - np.searchsorted(cover_sorted, thresholds, side="left")
    rate = succ / kept
    cov = covered / n_gt
    thresholds = np.concatenate([[np.inf], thresholds])
    cov = np.concatenate([[0.0], cov])
    rate = np.concatenate([[rate[0]], rate])
    terms = 0.5 * (rate[1:] + rate[:-1]) * np.diff(cov)
    return Curve(thresholds, cov, rate, math.fsum(terms.tolist()), int(scores.size), int(n_gt),
                 int(covered[-1]), int(successes.sum()))


def success_over_coverage(generated, scores, successes, gt, params: CoverageParams = CoverageParams(),
                          use_numba: bool | None = None) -> Curve:
    gen = np.asarray(generated, dtype=float).reshape(-1, 7)
    if gen.shape[0] == 0:
        raise ValueError("no grasps to evaluate")
    gt = np.asarray(gt, dtype=float).reshape(-1, 7)
    cover = best_cover_scores(gen, scores, gt, params, use_numba)
    return curve_from_cover(scores, successes, cover, gt.shape[0])


def kept_ratio(grasps, cone: ConeConstraint) -> float:
    g = np.asarray(grasps, dtype=float).reshape(-1, 7)
    if g.shape[0] == 0:
        raise ValueError("kept ratio of an empty grasp set")
    return float(np.mean(cone_contains(cone, approach_vector(g))))


# ---------------------------------------------------------------------------
# Sector benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkConfig:
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    coverage: CoverageParams = field(default_factory=CoverageParams)
    gripper: GripperSpec = field(default_factory=GripperSpec)
    n_input_points: int = 64
    seed: int = 0
    threads: int = 1


@dataclass
class BenchmarkReport:
    rows: list
    curves: list
    aggregate: dict
    skipped: list

    def write(self, prefix) -> list:
        """Write ``<prefix>_report.csv``, ``<prefix>_curves.csv`` and ``<prefix>_summary.json``."""
        paths = [f"{prefix}_report.csv", f"{prefix}_curves.csv", f"{prefix}_summary.json"]
        cols = ["object_id", "sector", "auc", "kept_ratio", "n_gt", "n_covered", "n_success", "n_generated"]
        with open(paths[0], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in cols])
        with open(paths[1], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["object_id", "sector", "threshold", "coverage", "success_rate"])
            for r in self.curves:
                w.writerow([_fmt(r[c]) for c in ("object_id", "sector", "threshold", "coverage", "success_rate")])
        with open(paths[2], "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"aggregate": self.aggregate, "skipped": self.skipped}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return paths


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _curve_rows(object_id, sector, curve: Curve):
    return [
        {"object_id": object_id, "sector": sector, "threshold": float(t), "coverage": float(c), "success_rate": float(s)}
        for t, c, s in zip(curve.thresholds, curve.coverage, curve.success_rate)
    ]


def _run_cell(sampler, discriminator, rec, obj_index, sector, grid, per_sector, refine_mode, cfg):
    rng = np.random.default_rng([cfg.seed, obj_index, sector])
    cone = sector_cone(sector, grid)
    pts = rec.cloud.points[:cfg.n_input_points]
    g = sample_constrained_grasps(sampler, pts, cone, per_sector, rng)
    if refine_mode != "none":
        g, _ = mh_refine(g, pts, discriminator, cone if refine_mode == "constrained" else None, cfg.proposal, rng)
    scores = discriminator.score(pts, g)
    success = evaluate_grasps(rec.shape_in_cloud_frame(), g, cfg.gripper)
    pos = rec.positives
    gt = pos[np.asarray(sector_of(approach_vector(pos), grid)) == sector] if len(pos) else pos
    cover = best_cover_scores(g, scores, gt, cfg.coverage) if len(gt) else np.empty(0)
    return {"scores": scores, "success": success, "cover": cover, "n_gt": len(gt), "kept": kept_ratio(g, cone)}


def sector_benchmark(sampler, discriminator, records, grid: SectorGrid = SectorGrid(), per_sector: int = 200,
                     refine_mode: str = "none", cfg: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkReport:
    """Sample ``per_sector`` grasps in every sector cone of every object and score the result.

    One scene per object is used (the first record seen). Every cell draws
    from its own seed, so results do not depend on ``cfg.threads``.
    """
    if refine_mode not in REFINE_MODES:
        raise ValueError(f"refine_mode must be one of {REFINE_MODES}, got {refine_mode!r}")
    if per_sector < 1:
        raise ValueError("per_sector must be >= 1")
    scenes = {}
    for rec in records:
        scenes.setdefault(rec.object_id, rec)
    if not scenes:
        raise ValueError("no objects to evaluate")
    cells = [(oi, oid, s) for oi, oid in enumerate(sorted(scenes)) for s in range(grid.count)]

    def work(cell):
        oi, oid, s = cell
        return _run_cell(sampler, discriminator, scenes[oid], oi, s, grid, per_sector, refine_mode, cfg)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]

    rows, curves, skipped = [], [], []
    pooled = {"scores": [], "success": [], "cover": [], "n_gt": 0}
    auc_weighted = 0.0
    for (oi, oid, s), res in zip(cells, results):
        row = {"object_id": oid, "sector": s, "kept_ratio": res["kept"], "n_gt": res["n_gt"],
               "n_generated": per_sector, "n_success": int(res["success"].sum())}
        if res["n_gt"] == 0:
            row.update(auc=None, n_covered=0)
            skipped.append({"object_id": oid, "sector": s})
        else:
            curve = curve_from_cover(res["scores"], res["success"], res["cover"], res["n_gt"])
            row.update(auc=curve.auc, n_covered=curve.n_covered)
            curves.extend(_curve_rows(oid, s, curve))
            auc_weighted += curve.auc * res["n_gt"]
            for k in ("scores", "success", "cover"):
                pooled[k].append(res[k])
            pooled["n_gt"] += res["n_gt"]
        rows.append(row)

    n_gen = per_sector * len(rows)
    aggregate = {
        "refine_mode": refine_mode,
        "n_objects": len(scenes),
        "n_sectors": grid.count,
        "per_sector": per_sector,
        "n_generated": n_gen,
        "n_gt": pooled["n_gt"],
        "n_success": sum(r["n_success"] for r in rows),
        "kept_ratio": sum(r["kept_ratio"] * r["n_generated"] for r in rows) / n_gen,
        "success_rate": sum(r["n_success"] for r in rows) / n_gen,
        "auc": auc_weighted / pooled["n_gt"] if pooled["n_gt"] else None,
        "anchor": "threshold above the max score: coverage 0, success rate of the first nonempty threshold",
        "coverage": asdict(cfg.coverage),
        "proposal": asdict(cfg.proposal),
        "seed": cfg.seed,
    }
    if pooled["n_gt"]:
        curve = curve_from_cover(np.concatenate(pooled["scores"]), np.concatenate(pooled["success"]),
                                 np.concatenate(pooled["cover"]), pooled["n_gt"])
        aggregate["pooled_auc"] = curve.auc
        aggregate["n_covered"] = curve.n_covered
        curves.extend(_curve_rows("ALL", "", curve))
    return BenchmarkReport(rows, curves, aggregate, skipped)
