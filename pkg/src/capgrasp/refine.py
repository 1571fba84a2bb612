"""Metropolis-Hastings grasp refinement, optionally confined to an approach cone."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import ConeConstraint, approach_vector, cone_contains, perturb_grasps

EPS_DIV = 1e-12


@dataclass(frozen=True)
class ProposalConfig:
    sigma_translation: float = 0.02
    sigma_rotation: float = 0.1
    iterations: int = 10

    def __post_init__(self):
        if self.sigma_translation < 0 or self.sigma_rotation < 0 or self.iterations < 1:
            raise ValueError("proposal widths must be >= 0 and iterations >= 1")


@dataclass
class RefinementTrace:
    """Per-iteration chain states, each array indexed ``[iteration, chain]``."""

    poses: np.ndarray
    scores: np.ndarray
    accepted: np.ndarray
    in_cone: np.ndarray

    def __len__(self) -> int:
        return self.scores.shape[0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "iteration", "score", "accepted", "in_cone"])
            iters, chains = self.scores.shape
            for c in range(chains):
                for i in range(iters):
                    w.writerow([c, i + 1, repr(float(self.scores[i, c])),
                                int(self.accepted[i, c]), int(self.in_cone[i, c])])


def propose_perturbation(grasps, cfg: ProposalConfig, rng: np.random.Generator) -> np.ndarray:
    """Symmetric random-walk proposal for a batch of grasps ``(M,7)``."""
    return perturb_grasps(np.atleast_2d(grasps), cfg.sigma_translation, cfg.sigma_rotation, rng)


def _scorer(discriminator, points):
    if hasattr(discriminator, "score"):
        return lambda g: discriminator.score(points, g)
    return lambda g: np.asarray(discriminator(points, g), dtype=float)


def _effective(scores, grasps, cone):
    if cone is None:
        return scores, np.ones(scores.shape, bool)
    inside = np.asarray(cone_contains(cone, approach_vector(grasps)), bool)
    return np.where(inside, scores, 0.0), inside


def mh_refine(g0, points, discriminator, cone: ConeConstraint | None, cfg: ProposalConfig,
              rng: np.random.Generator):
    """Refine grasps ``(M,7)`` by independent MH chains; returns ``(final, trace)``.

    With a cone, grasps approaching from outside it score zero, so such
    proposals are never accepted. The current state's score is floored at
    ``EPS_DIV``, which lets a chain that starts outside the cone move in.
    ``discriminator`` is a :class:`~capgrasp.model.DiscriminatorModel` or a
    callable ``f(points, grasps) -> scores``.
    """
    score = _scorer(discriminator, points)
    g = np.array(np.atleast_2d(g0), dtype=float)
    M = g.shape[0]
    raw = score(g)
    s, inside = _effective(raw, g, cone)
    poses = np.empty((cfg.iterations, M, 7))
    scores = np.empty((cfg.iterations, M))
    accepted = np.empty((cfg.iterations, M), bool)
    in_cone = np.empty((cfg.iterations, M), bool)
    for it in range(cfg.iterations):
        prop = propose_perturbation(g, cfg, rng)
        raw_p = score(prop)
        s_p, inside_p = _effective(raw_p, prop, cone)
        ratio = s_p / np.maximum(s, EPS_DIV)
        acc = rng.random(M) < np.minimum(1.0, ratio)
        g[acc] = prop[acc]
        raw = np.where(acc, raw_p, raw)
        s = np.where(acc, s_p, s)
        inside = np.where(acc, inside_p, inside)
        poses[it] = g
        scores[it] = raw
        accepted[it] = acc
        in_cone[it] = inside
    return g, RefinementTrace(poses, scores, accepted, in_cone)
