"""Permutation-invariant point-set network with hand-written backprop, and Adam."""
from __future__ import annotations

import numpy as np

ACTIVATIONS = ("tanh", "linear")


class PointSetNet:
    """Shared per-point MLP, concatenated max+mean pooling, then an MLP head.

    Input is ``(B, N, in_dim)``, output ``(B, out_dim)``. Hidden layers use
    tanh, the final head layer is linear.
    """

    def __init__(self, in_dim: int, out_dim: int, point_widths=(64, 128), head_widths=(128,),
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.point_widths = tuple(int(w) for w in point_widths)
        self.head_widths = tuple(int(w) for w in head_widths)
        self.params: dict[str, np.ndarray] = {}
        self.activation: dict[str, str] = {}

        dims = [self.in_dim, *self.point_widths]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self._add(f"point{i}", a, b, "tanh", rng)
        dims = [2 * self.point_widths[-1], *self.head_widths, self.out_dim]
        last = len(dims) - 2
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self._add(f"head{i}", a, b, "linear" if i == last else "tanh", rng)

    def _add(self, name, a, b, act, rng):
        self.params[f"{name}.W"] = rng.normal(0.0, 1.0 / np.sqrt(a), (a, b))
        self.params[f"{name}.b"] = np.zeros(b)
        self.activation[name] = act

    @property
    def point_layers(self) -> list[str]:
        return [f"point{i}" for i in range(len(self.point_widths))]

    @property
    def head_layers(self) -> list[str]:
        return [f"head{i}" for i in range(len(self.head_widths) + 1)]

    def _dense(self, name, h):
        z = h @ self.params[f"{name}.W"] + self.params[f"{name}.b"]
        return np.tanh(z) if self.activation[name] == "tanh" else z

    def point_features(self, X) -> np.ndarray:
        """Per-point features ``(..., N, C)`` before pooling."""
        X = np.asarray(X, dtype=float)
        h = X.reshape(-1, X.shape[-1])
        for name in self.point_layers:
            h = self._dense(name, h)
        return h.reshape(X.shape[:-1] + (h.shape[-1],))

    def head(self, pooled) -> np.ndarray:
        f = pooled
        for name in self.head_layers:
            f = self._dense(name, f)
        return f

    def forward(self, X):
        """Returns ``(output, cache)``; ``cache`` feeds :meth:`backward`."""
        X = np.asarray(X, dtype=float)
        B, N, D = X.shape
        h = X.reshape(B * N, D)
        point_acts = [h]
        for name in self.point_layers:
            h = self._dense(name, h)
            point_acts.append(h)
        H = h.reshape(B, N, -1)
        arg = H.argmax(axis=1)
        mx = np.take_along_axis(H, arg[:, None, :], axis=1)[:, 0]
        f = np.concatenate([mx, H.mean(axis=1)], axis=1)
        head_acts = [f]
        for name in self.head_layers:
            f = self._dense(name, f)
            head_acts.append(f)
        return f, (X.shape, point_acts, arg, head_acts)

    def backward(self, cache, dout, input_cols=None):
        """Gradients of a scalar loss given ``dout = dL/doutput``.

        ``input_cols`` (a slice or index array) selects input columns that
        are broadcast over points; their gradient is returned summed over
        points with shape ``(B, k)``.
        """
        (B, N, D), point_acts, arg, head_acts = cache
        grads = {}
        d = np.asarray(dout, dtype=float)
        for i in reversed(range(len(self.head_layers))):
            name = self.head_layers[i]
            out = head_acts[i + 1]
            if self.activation[name] == "tanh":
                d = d * (1.0 - out * out)
            grads[f"{name}.W"] = head_acts[i].T @ d
            grads[f"{name}.b"] = d.sum(axis=0)
            d = d @ self.params[f"{name}.W"].T

        C = d.shape[1] // 2
        dH = np.repeat((d[:, C:] / N)[:, None, :], N, axis=1)
        np.add.at(dH, (np.arange(B)[:, None], arg, np.arange(C)[None, :]), d[:, :C])
        d = dH.reshape(B * N, C)
        for i in reversed(range(len(self.point_layers))):
            name = self.point_layers[i]
            out = point_acts[i + 1]
            d = d * (1.0 - out * out)
            grads[f"{name}.W"] = point_acts[i].T @ d
            grads[f"{name}.b"] = d.sum(axis=0)
            if i > 0 or input_cols is not None:
                d = d @ self.params[f"{name}.W"].T
        d_cols = None
        if input_cols is not None:
            d_cols = d.reshape(B, N, D)[:, :, input_cols].sum(axis=1)
        return grads, d_cols


class Adam:
    """Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        if lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
