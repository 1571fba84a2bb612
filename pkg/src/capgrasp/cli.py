"""Command-line entry point.

Every subcommand takes its options from three layers, later ones winning:
built-in defaults, a flat TOML file given with ``--config``, and explicit
flags. The effective configuration is written next to the primary output
as ``<output>.config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from threadpoolctl import threadpool_limits

log = logging.getLogger("capgrasp")


class ConfigError(ValueError):
    pass


def _floats3(text):
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",")]
    if len(vals) != 3:
        raise ValueError("expected three comma-separated numbers")
    return vals


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


COMMON = {
    "seed": (int, None, "random seed (falls back to $CAPGRASP_SEED, then 0)"),
    "threads": (int, 1, "worker cap; 1 is bit-reproducible"),
}

OPTIONS = {
    "dataset": {
        "output": (str, "dataset.jsonl", "output JSON-lines file"),
        "objects": (int, 20, "number of primitive objects"),
        "cams": (int, 8, "camera views per object"),
        "grasps": (int, 200, "positive grasps per object"),
        "neg": (int, 200, "negative grasps per object"),
        "points": (int, 512, "rendered points per view"),
        "test_fraction": (float, 0.25, "fraction of objects held out"),
        "max_width": (float, 0.08, "gripper opening (m)"),
        "finger_depth": (float, 0.046, "finger depth (m)"),
        "friction": (float, 0.5, "friction coefficient"),
    },
    "train-sampler": {
        "data": (str, "dataset.jsonl", "dataset file"),
        "output": (str, "sampler.ckpt", "checkpoint path; loss log goes to <output>.loss.csv"),
        "epochs": (int, 300, "epochs"),
        "batch_size": (int, 32, "grasps per batch"),
        "batches_per_epoch": (int, 96, "optimizer steps per epoch"),
        "alpha_max_deg": (float, 90.0, "largest conditional half-angle (degrees)"),
        "beta": (float, 1e-2, "KL weight"),
        "lr": (float, 2e-3, "initial learning rate, annealed linearly to 0"),
        "latent_dim": (int, 4, "latent size"),
        "n_input_points": (int, 64, "points fed to the network"),
        "unconstrained": (_bool, False, "train the unconstrained baseline"),
    },
    "train-disc": {
        "data": (str, "dataset.jsonl", "dataset file"),
        "output": (str, "disc.ckpt", "checkpoint path; loss log goes to <output>.loss.csv"),
        "epochs": (int, 60, "epochs"),
        "batch_size": (int, 64, "grasps per balanced batch"),
        "batches_per_epoch": (int, 32, "optimizer steps per epoch"),
        "lr": (float, 2e-3, "initial learning rate, annealed linearly to 0"),
        "n_input_points": (int, 64, "points fed to the network"),
    },
    "sample": {
        "sampler": (str, "sampler.ckpt", "sampler checkpoint"),
        "disc": (str, "", "discriminator checkpoint for scores (optional)"),
        "data": (str, "dataset.jsonl", "dataset file"),
        "scene": (str, "", "scene id (default: first test scene)"),
        "axis": (_floats3, [0.0, -1.0, 0.0], "cone axis x,y,z in the camera frame"),
        "alpha_deg": (float, 30.0, "cone half-angle (degrees)"),
        "count": (int, 100, "number of grasps"),
        "n_input_points": (int, 64, "points fed to the networks"),
        "output": (str, "grasps.jsonl", "output JSON-lines file"),
    },
    "refine": {
        "input": (str, "grasps.jsonl", "grasps to refine"),
        "disc": (str, "disc.ckpt", "discriminator checkpoint"),
        "data": (str, "dataset.jsonl", "dataset file"),
        "scene": (str, "", "scene id (default: first test scene)"),
        "axis": (_floats3, [0.0, -1.0, 0.0], "cone axis x,y,z in the camera frame"),
        "alpha_deg": (float, 30.0, "cone half-angle (degrees)"),
        "mode": (str, "constrained", "constrained or unconstrained"),
        "iterations": (int, 10, "MH iterations"),
        "sigma_t": (float, 0.02, "proposal position std (m)"),
        "sigma_r": (float, 0.1, "proposal rotation std (rad)"),
        "n_input_points": (int, 64, "points fed to the discriminator"),
        "output": (str, "refined.jsonl", "output JSON-lines file; trace goes to <output>.trace.csv"),
    },
    "eval": {
        "sampler": (str, "sampler.ckpt", "sampler checkpoint"),
        "disc": (str, "disc.ckpt", "discriminator checkpoint"),
        "data": (str, "dataset.jsonl", "dataset file"),
        "split": (str, "test", "dataset split to evaluate"),
        "objects": (int, 0, "limit on evaluated objects (0 = all)"),
        "sectors": (int, 32, "sector count (pitch bins fixed at 4)"),
        "per_sector": (int, 200, "grasps sampled per sector"),
        "refine_mode": (str, "none", "none, unconstrained or constrained"),
        "iterations": (int, 10, "MH iterations"),
        "sigma_t": (float, 0.02, "proposal position std (m)"),
        "sigma_r": (float, 0.1, "proposal rotation std (rad)"),
        "angle_deg": (float, 10.0, "coverage angle threshold (degrees)"),
        "distance": (float, 0.02, "coverage distance threshold (m)"),
        "n_input_points": (int, 64, "points fed to the networks"),
        "output": (str, "bench", "output prefix"),
    },
    "gradcheck": {
        "per_tensor": (int, 4, "entries probed per parameter tensor"),
        "points": (int, 16, "points per cloud"),
        "batch": (int, 4, "batch size"),
    },
    "selfcheck": {
        "trials": (int, 2000, "random trials per invariant"),
    },
}

SHORT = {"output": "-o"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capgrasp", description="Cone-constrained 6-DoF grasp sampling toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat TOML file of option values")
        for key, (typ, default, help_) in {**COMMON, **opts}.items():
            flags = [f"--{key.replace('_', '-')}"]
            if key in SHORT:
                flags.insert(0, SHORT[key])
            if typ is _bool:
                p.add_argument(*flags, dest=key, nargs="?", const=True, type=_bool,
                               default=argparse.SUPPRESS, help=help_)
            else:
                p.add_argument(*flags, dest=key, type=typ, default=argparse.SUPPRESS, help=help_)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    spec = {**COMMON, **OPTIONS[command]}
    cfg = {k: v[1] for k, v in spec.items()}
    if args.config:
        with open(args.config, "rb") as fh:
            try:
                file_cfg = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from exc
        for key, value in file_cfg.items():
            norm = key.replace("-", "_")
            if norm not in spec:
                raise ConfigError(f"unknown config key {key!r} for '{command}'")
            try:
                cfg[norm] = spec[norm][0](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for config key {key!r}: {exc}") from exc
    for key in spec:
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    if cfg["seed"] is None:
        env = os.environ.get("CAPGRASP_SEED")
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError as exc:
            raise ConfigError(f"CAPGRASP_SEED must be an integer, got {env!r}") from exc
    if cfg["threads"] < 1:
        raise ConfigError("key 'threads' must be >= 1")
    return cfg


def _record_config(command, cfg, path):
    with open(f"{path}.config.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _scene(dataset, scene_id):
    if scene_id:
        for r in dataset.records:
            if r.scene_id == scene_id:
                return r
        raise ConfigError(f"key 'scene': no scene {scene_id!r} in dataset")
    recs = dataset.split("test") or dataset.records
    return recs[0]


def _cone(cfg):
    from .geometry import ConeConstraint

    axis = np.asarray(cfg["axis"], dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ConfigError("key 'axis' must be a nonzero vector")
    return ConeConstraint(axis / n, math.radians(cfg["alpha_deg"]))


def _write_grasps(path, grasps, scores, in_cone):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g, s, c in zip(grasps, scores, in_cone):
            rec = {"q": [float(x) for x in g[:4]], "p": [float(x) for x in g[4:7]],
                   "score": None if s is None else float(s), "in_cone": bool(c)}
            fh.write(json.dumps(rec) + "\n")


def _read_grasps(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(list(d["q"]) + list(d["p"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad grasp record ({exc})") from exc
    if not out:
        raise ConfigError(f"{path}: no grasps")
    return np.array(out, dtype=float)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_dataset(cfg):
    from .oracle import GripperSpec, curate_dataset, random_shapes, write_dataset

    rng = np.random.default_rng(cfg["seed"])
    gripper = GripperSpec(cfg["max_width"], cfg["finger_depth"], cfg["friction"])
    shapes = random_shapes(cfg["objects"], rng)
    ds = curate_dataset(shapes, cfg["cams"], cfg["grasps"], cfg["neg"], gripper, rng,
                        n_points=cfg["points"], test_fraction=cfg["test_fraction"], threads=cfg["threads"])
    write_dataset(cfg["output"], ds)
    print(f"wrote {len(ds)} scene records to {cfg['output']}")
    return cfg["output"]


def cmd_train_sampler(cfg):
    from .model import save_checkpoint
    from .oracle import read_dataset
    from .training import TrainConfig, train_sampler, write_history_csv

    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], batches_per_epoch=cfg["batches_per_epoch"],
                     alpha_max=math.radians(cfg["alpha_max_deg"]), beta=cfg["beta"], lr=cfg["lr"],
                     latent_dim=cfg["latent_dim"], n_input_points=cfg["n_input_points"],
                     unconstrained=cfg["unconstrained"], seed=cfg["seed"])
    model, history = train_sampler(read_dataset(cfg["data"]), tc)
    save_checkpoint(model, cfg["output"])
    write_history_csv(history, f"{cfg['output']}.loss.csv")
    print(f"epoch 1 loss {history[0]['mean_loss']:.6f}, epoch {len(history)} loss {history[-1]['mean_loss']:.6f}")
    return cfg["output"]


def cmd_train_disc(cfg):
    from .model import save_checkpoint
    from .oracle import read_dataset
    from .training import DiscConfig, train_discriminator, write_history_csv

    dc = DiscConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], batches_per_epoch=cfg["batches_per_epoch"],
                    lr=cfg["lr"], n_input_points=cfg["n_input_points"], seed=cfg["seed"])
    model, metrics = train_discriminator(read_dataset(cfg["data"]), dc)
    save_checkpoint(model, cfg["output"])
    write_history_csv(metrics.pop("history"), f"{cfg['output']}.loss.csv")
    with open(f"{cfg['output']}.metrics.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"held-out accuracy {metrics['accuracy']:.4f}, ROC-AUC {metrics['roc_auc']:.4f}")
    return cfg["output"]


def cmd_sample(cfg):
    from .geometry import approach_vector, cone_contains
    from .model import load_checkpoint, sample_constrained_grasps
    from .oracle import read_dataset

    sampler = load_checkpoint(cfg["sampler"])
    rec = _scene(read_dataset(cfg["data"]), cfg["scene"])
    cone = _cone(cfg)
    pts = rec.cloud.points[:cfg["n_input_points"]]
    g = sample_constrained_grasps(sampler, pts, cone, cfg["count"], np.random.default_rng(cfg["seed"]))
    scores = load_checkpoint(cfg["disc"]).score(pts, g) if cfg["disc"] else [None] * len(g)
    inside = cone_contains(cone, approach_vector(g))
    _write_grasps(cfg["output"], g, scores, inside)
    print(f"wrote {len(g)} grasps for {rec.scene_id}, {np.mean(inside):.3f} inside the cone")
    return cfg["output"]


def cmd_refine(cfg):
    from .geometry import approach_vector, cone_contains
    from .model import load_checkpoint
    from .oracle import read_dataset
    from .refine import ProposalConfig, mh_refine

    if cfg["mode"] not in ("constrained", "unconstrained"):
        raise ConfigError("key 'mode' must be 'constrained' or 'unconstrained'")
    disc = load_checkpoint(cfg["disc"])
    rec = _scene(read_dataset(cfg["data"]), cfg["scene"])
    cone = _cone(cfg)
    pts = rec.cloud.points[:cfg["n_input_points"]]
    g0 = _read_grasps(cfg["input"])
    pc = ProposalConfig(cfg["sigma_t"], cfg["sigma_r"], cfg["iterations"])
    g, trace = mh_refine(g0, pts, disc, cone if cfg["mode"] == "constrained" else None, pc,
                         np.random.default_rng(cfg["seed"]))
    inside = cone_contains(cone, approach_vector(g))
    _write_grasps(cfg["output"], g, trace.scores[-1], inside)
    trace.write_csv(f"{cfg['output']}.trace.csv")
    print(f"refined {len(g)} grasps, {np.mean(inside):.3f} inside the cone")
    return cfg["output"]


def cmd_eval(cfg):
    from .evaluation import REFINE_MODES, BenchmarkConfig, CoverageParams, sector_benchmark
    from .geometry import SectorGrid
    from .model import load_checkpoint
    from .oracle import read_dataset
    from .refine import ProposalConfig

    if cfg["sectors"] < 4 or cfg["sectors"] % 4:
        raise ConfigError("key 'sectors' must be a positive multiple of 4")
    if cfg["refine_mode"] not in REFINE_MODES:
        raise ConfigError(f"key 'refine_mode' must be one of {REFINE_MODES}")
    ds = read_dataset(cfg["data"])
    records = ds.split(cfg["split"])
    if not records:
        raise ConfigError(f"key 'split': no records in split {cfg['split']!r}")
    if cfg["objects"] > 0:
        keep = sorted({r.object_id for r in records})[:cfg["objects"]]
        records = [r for r in records if r.object_id in keep]
    bc = BenchmarkConfig(proposal=ProposalConfig(cfg["sigma_t"], cfg["sigma_r"], cfg["iterations"]),
                         coverage=CoverageParams(math.radians(cfg["angle_deg"]), cfg["distance"]),
                         n_input_points=cfg["n_input_points"], seed=cfg["seed"], threads=cfg["threads"])
    report = sector_benchmark(load_checkpoint(cfg["sampler"]), load_checkpoint(cfg["disc"]), records,
                              SectorGrid(cfg["sectors"] // 4, 4), cfg["per_sector"], cfg["refine_mode"], bc)
    report.write(cfg["output"])
    agg = report.aggregate
    auc = "n/a" if agg["auc"] is None else f"{agg['auc']:.4f}"
    print(f"AUC {auc}, kept ratio {agg['kept_ratio']:.4f}, {len(report.skipped)} skipped sectors")
    return cfg["output"]


def cmd_gradcheck(cfg):
    from .geometry import random_quaternions
    from .model import DiscriminatorModel, SamplerModel, grad_check

    rng = np.random.default_rng(cfg["seed"])
    B, N = cfg["batch"], cfg["points"]
    pts = rng.normal(0.0, 0.03, (B, N, 3))
    g = np.concatenate([random_quaternions(rng, B), rng.normal(0.0, 0.05, (B, 3))], axis=1)
    alpha = rng.uniform(0.0, np.pi / 2, B)
    eps = rng.standard_normal((B, 4))
    sampler = SamplerModel(rng=rng)
    disc = DiscriminatorModel(rng=rng)
    labels = (rng.random(B) < 0.5).astype(float)

    def elbo():
        loss, _, _, grads = sampler.loss_and_grads(pts, g, alpha, eps, 1e-2)
        return loss, grads

    errors = {
        "sampler_elbo": grad_check(sampler.parameters(), elbo, cfg["per_tensor"], rng),
        "discriminator_bce": grad_check(disc.parameters(), lambda: disc.loss_and_grads(pts, g, labels),
                                        cfg["per_tensor"], rng),
    }
    for name, err in errors.items():
        print(f"{name}: max relative error {err:.3e}")
    if max(errors.values()) >= 1e-4:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


def cmd_selfcheck(cfg):
    from . import selfcheck

    failures = selfcheck.run(cfg["trials"], np.random.default_rng(cfg["seed"]))
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    if not failures:
        print("selfcheck clean")
    return 0 if not failures else 2


COMMANDS = {
    "dataset": cmd_dataset,
    "train-sampler": cmd_train_sampler,
    "train-disc": cmd_train_disc,
    "sample": cmd_sample,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "selfcheck": cmd_selfcheck,
}


def run(argv=None) -> int:
    from .model import NonFiniteError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        with threadpool_limits(limits=cfg["threads"]):
            result = COMMANDS[args.command](cfg)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if isinstance(result, int):
        return result
    _record_config(args.command, cfg, result)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
