"""On-the-fly conditional labeling, sampler training and discriminator training."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .geometry import approach_space_rotation, approach_vector, rotate_grasps, sample_direction_in_cone
from .model import UNCONSTRAINED_ALPHA, DiscriminatorModel, NonFiniteError, SamplerModel
from .nn import Adam
from .oracle import GraspDataset


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    batches_per_epoch: int = 96
    alpha_max: float = np.pi / 2
    beta: float = 1e-2
    lr: float = 2e-3
    latent_dim: int = 4
    n_input_points: int = 64
    unconstrained: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs, batch_size and batches_per_epoch must be >= 1")
        if not 0.0 < self.alpha_max <= np.pi / 2:
            raise ValueError(f"alpha_max must lie in (0, pi/2], got {self.alpha_max}")


@dataclass
class DiscConfig:
    epochs: int = 60
    batch_size: int = 64
    batches_per_epoch: int = 32
    lr: float = 2e-3
    n_input_points: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.batches_per_epoch < 1:
            raise ValueError("epochs >= 1, batch_size >= 2 and batches_per_epoch >= 1 required")


@dataclass
class ConditionalPair:
    points: np.ndarray
    grasp: np.ndarray
    alpha: float
    R: np.ndarray


def make_conditional_batch(points, grasps, alpha_max: float, rng: np.random.Generator):
    """Relabel a batch: fresh half-angles and cone axes around each approach vector.

    ``points`` is ``(B,N,3)``, ``grasps`` ``(B,7)``, both in the centered
    camera frame. Returns rotated points, rotated grasps, alphas and the
    rotations used.
    """
    points = np.asarray(points, dtype=float)
    grasps = np.asarray(grasps, dtype=float)
    B = grasps.shape[0]
    alpha = alpha_max * (1.0 - rng.random(B))
    v_a = sample_direction_in_cone(approach_vector(grasps), alpha, rng)
    R = approach_space_rotation(v_a)
    return np.einsum("bij,bnj->bni", R, points), rotate_grasps(R, grasps), alpha, R


def make_conditional_pair(points, grasp, alpha_max: float, rng: np.random.Generator) -> ConditionalPair:
    pts, g, alpha, R = make_conditional_batch(np.asarray(points)[None], np.asarray(grasp)[None], alpha_max, rng)
    return ConditionalPair(pts[0], g[0], float(alpha[0]), R[0])


def _subsample(clouds, idx, n, rng):
    """Random ``n``-point subsets of ``clouds[idx]``."""
    total = clouds.shape[1]
    if n >= total:
        return clouds[idx]
    pick = rng.random((len(idx), total)).argsort(axis=1)[:, :n]
    return np.take_along_axis(clouds[idx], pick[:, :, None], axis=1)


def _lr_at(base: float, step: int, total: int) -> float:
    return base * (1.0 - step / total)


def train_sampler(dataset: GraspDataset, config: TrainConfig):
    """Train a CVAE sampler on the train split; returns ``(model, history)``.

    Each step draws ``batch_size`` object-grasp pairs from the positives and
    relabels them from scratch. ``history`` has one dict per epoch.
    """
    records = dataset.split("train")
    clouds = np.stack([r.cloud.points for r in records])
    pool_scene, pool_grasp = [], []
    for i, r in enumerate(records):
        pos = r.positives
        pool_scene.extend([i] * len(pos))
        pool_grasp.extend(pos)
    if len(pool_grasp) < config.batch_size:
        raise ValueError(f"need at least {config.batch_size} positive grasps, dataset has {len(pool_grasp)}")
    pool_scene = np.array(pool_scene)
    pool_grasp = np.array(pool_grasp)

    init_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = SamplerModel(config.latent_dim, np.random.default_rng(init_seq), unconstrained=config.unconstrained)
    rng = np.random.default_rng(data_seq)
    opt = Adam(model.parameters())
    total = config.epochs * config.batches_per_epoch
    history = []
    step = 0
    B = config.batch_size
    for epoch in range(1, config.epochs + 1):
        lr_epoch = _lr_at(config.lr, step, total)
        sums = np.zeros(3)
        for batch in range(1, config.batches_per_epoch + 1):
            pick = rng.integers(len(pool_grasp), size=B)
            pts = _subsample(clouds, pool_scene[pick], config.n_input_points, rng)
            g = pool_grasp[pick]
            if config.unconstrained:
                alpha = np.full(B, UNCONSTRAINED_ALPHA)
            else:
                pts, g, alpha, _ = make_conditional_batch(pts, g, config.alpha_max, rng)
            eps = rng.standard_normal((B, config.latent_dim))
            loss, rec, kl, grads = model.loss_and_grads(pts, g, alpha, eps, config.beta)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite sampler loss at epoch {epoch}, batch {batch}")
            opt.step(grads, _lr_at(config.lr, step, total))
            step += 1
            sums += (loss, rec, kl)
        mean = sums / config.batches_per_epoch
        history.append({"epoch": epoch, "mean_loss": mean[0], "mean_rec_loss": mean[1],
                        "mean_kl": mean[2], "lr": lr_epoch})
    return model, history


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_discriminator(model: DiscriminatorModel, records, n_input_points: int) -> dict:
    scores, labels = [], []
    for r in records:
        scores.append(model.score(r.cloud.points[:n_input_points], r.grasps))
        labels.append(r.labels)
    scores = np.concatenate(scores)
    labels = np.concatenate(labels).astype(bool)
    return {
        "accuracy": float(((scores >= 0.5) == labels).mean()),
        "roc_auc": roc_auc(scores, labels),
        "n": int(labels.size),
    }


def train_discriminator(dataset: GraspDataset, config: DiscConfig):
    """Train on balanced batches from the train split; metrics come from the test split."""
    records = dataset.split("train")
    clouds = np.stack([r.cloud.points for r in records])
    pools = {}
    for label in (True, False):
        scene, grasp = [], []
        for i, r in enumerate(records):
            sel = r.grasps[r.labels == label]
            scene.extend([i] * len(sel))
            grasp.extend(sel)
        if not grasp:
            raise ValueError("dataset needs both positive and negative grasps")
        pools[label] = (np.array(scene), np.array(grasp))

    init_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = DiscriminatorModel(np.random.default_rng(init_seq))
    rng = np.random.default_rng(data_seq)
    opt = Adam(model.parameters())
    total = config.epochs * config.batches_per_epoch
    half = config.batch_size // 2
    labels = np.concatenate([np.ones(half), np.zeros(half)])
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr_epoch = _lr_at(config.lr, step, total)
        acc = 0.0
        for batch in range(1, config.batches_per_epoch + 1):
            scenes, grasps = [], []
            for label in (True, False):
                sc, gr = pools[label]
                pick = rng.integers(len(gr), size=half)
                scenes.append(sc[pick])
                grasps.append(gr[pick])
            pts = _subsample(clouds, np.concatenate(scenes), config.n_input_points, rng)
            loss, grads = model.loss_and_grads(pts, np.concatenate(grasps), labels)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite discriminator loss at epoch {epoch}, batch {batch}")
            opt.step(grads, _lr_at(config.lr, step, total))
            step += 1
            acc += loss
        history.append({"epoch": epoch, "mean_loss": acc / config.batches_per_epoch, "lr": lr_epoch})

    held_out = dataset.split("test") or records
    metrics = evaluate_discriminator(model, held_out, config.n_input_points)
    metrics["history"] = history
    return model, metrics


def write_history_csv(history, path) -> None:
    if not history:
        raise ValueError("empty history")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]), lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})


def config_dict(config) -> dict:
    return asdict(config)
