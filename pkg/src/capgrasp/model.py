"""Conditional VAE grasp sampler and grasp discriminator.

Both networks are :class:`~capgrasp.nn.PointSetNet` instances running in
float64. Coordinates are fed in decimetres (``POINT_SCALE``) so desk-scale
inputs sit near unit range; decoded positions are scaled back to metres.
"""
from __future__ import annotations

import json

import numpy as np

from .geometry import (
    CANONICAL_CONTROL_POINTS,
    ConeConstraint,
    approach_space_rotation,
    grasp_control_points,
    quat_normalize,
    quat_to_matrix,
    rotate_grasps,
)
from .nn import PointSetNet

POINT_SCALE = 10.0
QUAT_FLOOR = 1e-8
CHECKPOINT_FORMAT = "capgrasp-checkpoint"
CHECKPOINT_VERSION = 1
UNCONSTRAINED_ALPHA = np.pi


class NonFiniteError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

class SamplerModel:
    """Encoder ``q(z | O, g, alpha)`` and decoder ``p(g | O, z, alpha)``.

    ``unconstrained`` marks the baseline variant trained without
    approach-space canonicalization and with alpha fixed to pi.
    """

    def __init__(self, latent_dim: int = 4, rng: np.random.Generator | None = None,
                 point_widths=(64, 128), head_widths=(128,), unconstrained: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = int(latent_dim)
        self.unconstrained = bool(unconstrained)
        self.encoder = PointSetNet(3 + 7 + 1, 2 * self.latent_dim, point_widths, head_widths, rng)
        self.decoder = PointSetNet(3 + self.latent_dim + 1, 7, point_widths, head_widths, rng)

    @property
    def nets(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder}

    def parameters(self) -> dict:
        return {f"{n}.{k}": v for n, net in self.nets.items() for k, v in net.params.items()}

    def encode(self, points, grasps, alpha):
        """``(mu, logvar, cache)`` for a batch: points ``(B,N,3)``, grasps ``(B,7)``, alpha ``(B,)``."""
        points = np.asarray(points, dtype=float)
        grasps = np.asarray(grasps, dtype=float)
        B, N, _ = points.shape
        X = np.empty((B, N, 11))
        X[..., :3] = points * POINT_SCALE
        X[..., 3:7] = grasps[:, None, :4]
        X[..., 7:10] = grasps[:, None, 4:7] * POINT_SCALE
        X[..., 10] = np.asarray(alpha, dtype=float).reshape(B, 1)
        out, cache = self.encoder.forward(X)
        L = self.latent_dim
        return out[:, :L], out[:, L:], cache

    def decode_raw(self, points, z, alpha):
        """Unnormalized decoder output ``(B,7)``: raw quaternion, position in metres."""
        points = np.asarray(points, dtype=float)
        z = np.asarray(z, dtype=float)
        B, N, _ = points.shape
        L = self.latent_dim
        X = np.empty((B, N, 4 + L))
        X[..., :3] = points * POINT_SCALE
        X[..., 3:3 + L] = z[:, None, :]
        X[..., 3 + L] = np.asarray(alpha, dtype=float).reshape(B, 1)
        out, cache = self.decoder.forward(X)
        raw = out.copy()
        raw[:, 4:] /= POINT_SCALE
        return raw, cache

    def decode(self, points, z, alpha) -> np.ndarray:
        """Grasps ``(B,7)`` with unit quaternions."""
        raw, _ = self.decode_raw(points, z, alpha)
        return raw_to_grasps(raw)

    def loss_and_grads(self, points, grasps, alpha, eps, beta: float):
        """ELBO on a batch with fixed reparameterization noise ``eps``.

        Returns ``(loss, rec, kl, grads)`` where ``grads`` is keyed like
        :meth:`parameters`.
        """
        L = self.latent_dim
        mu, logvar, enc_cache = self.encode(points, grasps, alpha)
        z = reparameterize(mu, logvar, eps)
        raw, dec_cache = self.decode_raw(points, z, alpha)
        loss, rec, kl, (d_raw, d_mu, d_logvar) = elbo_loss(grasps, raw, mu, logvar, beta)
        d_out = d_raw.copy()
        d_out[:, 4:] /= POINT_SCALE
        g_dec, dz = self.decoder.backward(dec_cache, d_out, input_cols=slice(3, 3 + L))
        d_mu = d_mu + dz
        d_logvar = d_logvar + dz * eps * 0.5 * np.exp(0.5 * logvar)
        g_enc, _ = self.encoder.backward(enc_cache, np.concatenate([d_mu, d_logvar], axis=1))
        grads = {f"encoder.{k}": v for k, v in g_enc.items()}
        grads.update({f"decoder.{k}": v for k, v in g_dec.items()})
        return loss, rec, kl, grads


def reparameterize(mu, logvar, eps) -> np.ndarray:
    return np.asarray(mu) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)


def raw_to_grasps(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    return np.concatenate([quat_normalize(raw[..., :4], QUAT_FLOOR), raw[..., 4:7]], axis=-1)


# dR/dq for R = quat_to_matrix(q), q = (w, x, y, z); entries are linear in q.
def _dR_dq(q):
    w, x, y, z = (q[:, i] for i in range(4))
    o = np.zeros_like(w)
    dw = np.stack([[o, -z, y], [z, o, -x], [-y, x, o]])
    dx = np.stack([[o, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = np.stack([[-2 * y, x, w], [x, o, z], [-w, z, -2 * y]])
    dz = np.stack([[-2 * z, -w, x], [w, -2 * z, y], [x, y, o]])
    # (4, 3, 3, B) -> (B, 4, 3, 3)
    return 2.0 * np.moveaxis(np.stack([dw, dx, dy, dz]), -1, 0)


def elbo_loss(g_true, g_hat, mu, logvar, beta: float):
    """Batch-mean ``|h(g*) - h(g_hat)|_1 + beta * KL``.

    ``g_hat`` may carry an unnormalized quaternion; it is normalized here.
    Returns ``(loss, rec, kl, (d_g_hat, d_mu, d_logvar))`` with means over
    the batch for ``rec`` and ``kl``.
    """
    g_true = np.atleast_2d(np.asarray(g_true, dtype=float))
    g_hat = np.atleast_2d(np.asarray(g_hat, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=float))
    B = g_true.shape[0]

    r = g_hat[:, :4]
    rn = np.linalg.norm(r, axis=1)
    floored = rn < QUAT_FLOOR
    q = quat_normalize(r, QUAT_FLOOR)
    h_true = grasp_control_points(g_true)
    R = quat_to_matrix(q)
    h_hat = CANONICAL_CONTROL_POINTS @ np.swapaxes(R, -1, -2) + g_hat[:, None, 4:7]
    diff = h_hat - h_true
    rec_b = np.abs(diff).sum(axis=(1, 2))
    ev = np.exp(logvar)
    kl_b = 0.5 * (mu * mu + ev - 1.0 - logvar).sum(axis=1)
    rec, kl = rec_b.mean(), kl_b.mean()
    loss = rec + beta * kl

    dh = np.sign(diff) / B
    d_g = np.zeros_like(g_hat)
    d_g[:, 4:] = dh.sum(axis=1)
    dR = np.einsum("bki,kj->bij", dh, CANONICAL_CONTROL_POINTS)
    dq = np.einsum("bij,bcij->bc", dR, _dR_dq(q))
    proj = dq - q * (q * dq).sum(axis=1, keepdims=True)
    d_g[:, :4] = np.where(floored[:, None], 0.0, proj / np.where(floored, 1.0, rn)[:, None])
    d_mu = beta * mu / B
    d_logvar = beta * 0.5 * (ev - 1.0) / B
    return loss, rec, kl, (d_g, d_mu, d_logvar)


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

def bce_loss(p, label):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(label, dtype=float)
    n = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean()
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / n
    return loss, grad


def bce_with_logits(logit, label):
    """Same value as ``bce_loss(sigmoid(logit), label)``, stable for large logits."""
    logit = np.asarray(logit, dtype=float)
    y = np.asarray(label, dtype=float)
    loss = (np.logaddexp(0.0, logit) - y * logit).mean()
    return loss, (_sigmoid(logit) - y) / logit.size


class DiscriminatorModel:
    """Success classifier over object points (b=0) plus gripper control points (b=1)."""

    def __init__(self, rng: np.random.Generator | None = None, point_widths=(64, 128), head_widths=(128,)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = PointSetNet(4, 1, point_widths, head_widths, rng)

    @property
    def nets(self) -> dict:
        return {"net": self.net}

    def parameters(self) -> dict:
        return {f"net.{k}": v for k, v in self.net.params.items()}

    @staticmethod
    def inputs(points, grasps) -> np.ndarray:
        """``(B, N+6, 4)`` tagged input for points ``(B,N,3)`` and grasps ``(B,7)``."""
        points = np.asarray(points, dtype=float)
        B, N, _ = points.shape
        X = np.zeros((B, N + 6, 4))
        X[:, :N, :3] = points * POINT_SCALE
        X[:, N:, :3] = grasp_control_points(grasps) * POINT_SCALE
        X[:, N:, 3] = 1.0
        return X

    def logits(self, points, grasps):
        out, cache = self.net.forward(self.inputs(points, grasps))
        return out[:, 0], cache

    def forward(self, points, grasps) -> np.ndarray:
        return _sigmoid(self.logits(points, grasps)[0])

    def loss_and_grads(self, points, grasps, labels):
        logit, cache = self.logits(points, grasps)
        loss, d_logit = bce_with_logits(logit, labels)
        grads, _ = self.net.backward(cache, d_logit[:, None])
        return loss, {f"net.{k}": v for k, v in grads.items()}

    def score(self, points, grasps, chunk: int = 1024) -> np.ndarray:
        """Success probabilities of many grasps ``(M,7)`` against one cloud ``(N,3)``.

        Object-point features are computed once; each grasp only adds six
        tagged points to the pooled max and sum.
        """
        points = np.asarray(points, dtype=float)
        grasps = np.atleast_2d(np.asarray(grasps, dtype=float))
        N = points.shape[0]
        X_obj = np.zeros((N, 4))
        X_obj[:, :3] = points * POINT_SCALE
        F_obj = self.net.point_features(X_obj)
        obj_max = F_obj.max(axis=0)
        obj_sum = F_obj.sum(axis=0)
        out = np.empty(grasps.shape[0])
        for s in range(0, grasps.shape[0], chunk):
            g = grasps[s:s + chunk]
            Xg = np.ones((g.shape[0], 6, 4))
            Xg[..., :3] = grasp_control_points(g) * POINT_SCALE
            Fg = self.net.point_features(Xg)
            mx = np.maximum(obj_max, Fg.max(axis=1))
            mean = (obj_sum + Fg.sum(axis=1)) / (N + 6)
            logit = self.net.head(np.concatenate([mx, mean], axis=1))[:, 0]
            out[s:s + chunk] = _sigmoid(logit)
        return out


def discriminator_score(model: DiscriminatorModel, points, grasp) -> float:
    """Success probability of one grasp against a centered cloud."""
    return float(model.score(points, np.asarray(grasp, dtype=float)[None])[0])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_constrained_grasps(sampler: SamplerModel, points, cone: ConeConstraint, M: int,
                              rng: np.random.Generator, chunk: int = 256) -> np.ndarray:
    """Decode ``M`` grasps for a centered camera-frame cloud ``(N,3)``.

    The cloud is rotated into the cone's approach space, decoded with
    independent latents and ``alpha = cone.half_angle``, and the grasps are
    rotated back. An unconstrained sampler ignores the cone: identity
    transform and ``alpha = pi``.
    """
    if M <= 0:
        raise ValueError("M must be positive")
    points = np.asarray(points, dtype=float)
    if sampler.unconstrained:
        R = np.eye(3)
        alpha = UNCONSTRAINED_ALPHA
    else:
        R = approach_space_rotation(cone.axis)
        alpha = cone.half_angle
    local = points @ R.T
    z = rng.standard_normal((M, sampler.latent_dim))
    out = np.empty((M, 7))
    for s in range(0, M, chunk):
        zc = z[s:s + chunk]
        b = zc.shape[0]
        pts = np.broadcast_to(local, (b,) + local.shape)
        out[s:s + b] = sampler.decode(pts, zc, np.full(b, alpha))
    return rotate_grasps(R.T, out)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def grad_check(params: dict, loss_and_grads, per_tensor: int = 4, rng: np.random.Generator | None = None,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads()`` evaluates the loss at the current contents of
    ``params`` and returns ``(loss, grads)``. ``per_tensor`` entries of
    every tensor are probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads = loss_and_grads()
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_and_grads()[0]
            flat[i] = orig - step
            lm = loss_and_grads()[0]
            flat[i] = orig
            gn = (lp - lm) / (2.0 * step)
            ga = grads[name].reshape(-1)[i]
            worst = max(worst, abs(ga - gn) / max(1e-8, abs(ga) + abs(gn)))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _net_header(net: PointSetNet) -> dict:
    return {
        "in_dim": net.in_dim,
        "out_dim": net.out_dim,
        "point_widths": list(net.point_widths),
        "head_widths": list(net.head_widths),
        "layers": [
            {"name": n, "shape": list(net.params[f"{n}.W"].shape), "activation": net.activation[n]}
            for n in net.point_layers + net.head_layers
        ],
    }


def save_checkpoint(model, path) -> None:
    """Write a JSON header line, then one line of ``%.16e`` values per tensor."""
    if isinstance(model, SamplerModel):
        meta = {"kind": "sampler", "latent_dim": model.latent_dim, "unconstrained": model.unconstrained}
    elif isinstance(model, DiscriminatorModel):
        meta = {"kind": "discriminator"}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    params = model.parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        **meta,
        "nets": {n: _net_header(net) for n, net in model.nets.items()},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for v in params.values():
            fh.write(" ".join("%.16e" % x for x in v.reshape(-1)) + "\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
        nets = header["nets"]
        if header["kind"] == "sampler":
            enc = nets["encoder"]
            model = SamplerModel(header["latent_dim"], point_widths=enc["point_widths"],
                                 head_widths=enc["head_widths"], unconstrained=header["unconstrained"])
        elif header["kind"] == "discriminator":
            net = nets["net"]
            model = DiscriminatorModel(point_widths=net["point_widths"], head_widths=net["head_widths"])
        else:
            raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
        params = model.parameters()
        for spec in header["tensors"]:
            name, shape = spec["name"], tuple(spec["shape"])
            if name not in params or params[name].shape != shape:
                raise ValueError(f"{path}: tensor {name} {shape} does not match the architecture")
            values = np.array(fh.readline().split(), dtype=float)
            if values.size != params[name].size:
                raise ValueError(f"{path}: tensor {name} has {values.size} values, expected {params[name].size}")
            params[name][...] = values.reshape(shape)
    return model
