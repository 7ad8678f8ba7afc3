"""Adam over GaussianSet attribute arrays, with row insertion/removal."""
from __future__ import annotations

import numpy as np

from .core import GaussianSet

ATTRS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


class Adam:
    def __init__(self, gs: GaussianSet, lrs: dict, b1=0.9, b2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {a: np.zeros_like(getattr(gs, a)) for a in ATTRS}
        self.v = {a: np.zeros_like(getattr(gs, a)) for a in ATTRS}
        self.steps = np.zeros(len(gs), dtype=np.int64)

    def step(self, gs: GaussianSet, grads, trainable: dict | None = None):
        """One update in place. trainable maps attr -> boolean row mask (default all).

        A learning rate may be an array broadcastable over the trailing
        dimensions of its attribute (e.g. per SH band).
        """
        self.steps += 1
        c1 = 1 - self.b1 ** self.steps
        c2 = 1 - self.b2 ** self.steps
        moved = None
        for a in ATTRS:
            lr = np.asarray(self.lrs.get(a, 0.0), dtype=np.float64)
            if not np.any(lr):
                continue
            g = getattr(grads, a)
            if trainable is not None:
                rows = trainable.get(a)
                if rows is None or not np.any(rows):
                    continue
                g = np.where(rows.reshape((-1,) + (1,) * (g.ndim - 1)), g, 0.0)
            m = self.m[a] = self.b1 * self.m[a] + (1 - self.b1) * g
            v = self.v[a] = self.b2 * self.v[a] + (1 - self.b2) * g * g
            shape = (-1,) + (1,) * (g.ndim - 1)
            upd = lr * (m / c1.reshape(shape)) / (np.sqrt(v / c2.reshape(shape)) + self.eps)
            if trainable is not None:
                upd = np.where(rows.reshape(shape), upd, 0.0)
            getattr(gs, a).__isub__(upd)
            if a == "rotations":
                moved = np.any(upd != 0, axis=1)
        # renormalizing an untouched unit quaternion can still flip low bits
        if moved is not None and moved.any():
            q = gs.rotations[moved]
            gs.rotations[moved] = q / np.linalg.norm(q, axis=1, keepdims=True)

    def keep(self, mask):
        for a in ATTRS:
            self.m[a] = self.m[a][mask]
            self.v[a] = self.v[a][mask]
        self.steps = self.steps[mask]

    def take(self, rows) -> "Adam":
        """Optimizer over a row subset, carrying its moments and step counts."""
        out = Adam.__new__(Adam)
        out.lrs, out.b1, out.b2, out.eps = dict(self.lrs), self.b1, self.b2, self.eps
        out.m = {a: self.m[a][rows].copy() for a in ATTRS}
        out.v = {a: self.v[a][rows].copy() for a in ATTRS}
        out.steps = self.steps[rows].copy()
        return out

    def put(self, rows, other: "Adam"):
        for a in ATTRS:
            self.m[a][rows] = other.m[a]
            self.v[a][rows] = other.v[a]
        self.steps[rows] = other.steps

    def append(self, n: int, like: GaussianSet):
        for a in ATTRS:
            z = np.zeros((n,) + getattr(like, a).shape[1:])
            self.m[a] = np.concatenate([self.m[a], z])
            self.v[a] = np.concatenate([self.v[a], z])
        self.steps = np.concatenate([self.steps, np.zeros(n, dtype=np.int64)])
