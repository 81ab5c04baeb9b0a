"""Neural building blocks: parameter store, encoders, tiny MLPs, Adam.

The residual field is a multiresolution hash encoder plus a parameter-free
one-blob positional encoder feeding two small decoders.  Parameters live in
a :class:`ParamStore` that also owns the Adam state and checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Large primes for spatial hashing (first axis indexes directly).
_HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


class ParamStore:
    """Named trainable arrays with Adam moments and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.lr: dict[str, float] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.skipped_nonfinite = 0

    def add(self, name: str, value: np.ndarray, lr: float = 1e-3) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.lr[name] = lr
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def adam_step(self, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15,
                  lr_scale: float = 1.0) -> None:
        """Bias-corrected Adam; zeroes gradients afterwards.

        Parameters with non-finite gradients are skipped (counted in
        ``skipped_nonfinite``); parameters that received no gradient at
        all are left untouched.
        """
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.skipped_nonfinite += 1
                p.zero_grad()
                continue
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + eps)
            p.data -= self.lr[name] * lr_scale * update
            p.zero_grad()

    def snapshot(self) -> dict:
        return {
            "params": {k: t.data.copy() for k, t in self.params.items()},
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
            "step": self.step_count,
        }

    def restore(self, snap: dict) -> None:
        for k, a in snap["params"].items():
            self.params[k].data[...] = a
        for k, a in snap["m"].items():
            self.m[k][...] = a
        for k, a in snap["v"].items():
            self.v[k][...] = a
        self.step_count = snap["step"]

    def save(self, path) -> None:
        """Checkpoint as a named-array container; exact round-trip."""
        arrays: dict[str, np.ndarray] = {}
        for k, t in self.params.items():
            arrays["p/" + k] = t.data
            arrays["m/" + k] = self.m[k]
            arrays["v/" + k] = self.v[k]
            arrays["lr/" + k] = np.array(self.lr[k])
        arrays["step"] = np.array(self.step_count)
        np.savez(path, **arrays)

    def load(self, path) -> None:
        with np.load(path) as data:
            self.step_count = int(data["step"])
            names = [k[2:] for k in data.files if k.startswith("p/")]
            for name in names:
                if name not in self.params:
                    self.params[name] = Tensor(data["p/" + name], requires_grad=True)
                else:
                    self.params[name].data = np.array(data["p/" + name])
                self.m[name] = np.array(data["m/" + name])
                self.v[name] = np.array(data["v/" + name])
                self.lr[name] = float(data["lr/" + name])


@dataclass(frozen=True)
class HashEncoderConfig:
    """Geometry of the multiresolution hash table stack."""

    levels: int = 16
    base_resolution: int = 16
    growth: float = 1.5
    log2_table_size: int = 15
    features_per_entry: int = 2
    max_resolution: int = 2048

    def resolutions(self) -> list[int]:
        """Per-level lattice resolutions, strictly increasing, capped."""
        out: list[int] = []
        for lvl in range(self.levels):
            r = int(round(self.base_resolution * self.growth**lvl))
            r = min(r, self.max_resolution)
            if out and r <= out[-1]:
                break
            out.append(r)
        return out

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size


class HashEncoder:
    """Multiresolution hash grid over the unit cube.

    Each level trilinearly blends 8 hashed corner features; levels are
    concatenated.  Differentiable w.r.t. the tables and, when the input
    tensor carries a gradient, w.r.t. the query points.
    """

    def __init__(self, cfg: HashEncoderConfig, store: ParamStore, rng: np.random.Generator,
                 lr: float = 1e-2, name: str = "hash"):
        self.cfg = cfg
        self.resolutions = cfg.resolutions()
        self.tables = [
            store.add(
                f"{name}/level{lvl}",
                rng.uniform(-1e-4, 1e-4, size=(cfg.table_size, cfg.features_per_entry)),
                lr=lr,
            )
            for lvl in range(len(self.resolutions))
        ]

    @property
    def output_dim(self) -> int:
        return len(self.resolutions) * self.cfg.features_per_entry

    def corner_indices(self, cell: np.ndarray, level: int) -> np.ndarray:
        """Hash the 8 corners of integer cells (N, 3) -> (N, 8) table rows."""
        res = self.resolutions[level]
        corners = cell[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (N, 8, 3)
        n_vert = res + 1
        if n_vert**3 <= self.cfg.table_size:
            idx = (
                corners[..., 0]
                + n_vert * (corners[..., 1] + n_vert * corners[..., 2])
            )
            return idx.astype(np.int64)
        h = corners.astype(np.uint64)
        mixed = (h[..., 0] * _HASH_PRIMES[0]) ^ (h[..., 1] * _HASH_PRIMES[1]) ^ (
            h[..., 2] * _HASH_PRIMES[2]
        )
        return (mixed % np.uint64(self.cfg.table_size)).astype(np.int64)

    def encode(self, points: Tensor) -> Tensor:
        """Points (N, 3) in [0, 1]^3 -> features (N, levels * F)."""
        pts = points.data
        n = pts.shape[0]
        outputs = []
        for lvl, res in enumerate(self.resolutions):
            g = np.clip(pts * res, 0.0, res - 1e-9)
            cell = np.minimum(g.astype(np.int64), res - 1)
            f = g - cell  # (N, 3)
            idx = self.corner_indices(cell, lvl)  # (N, 8)
            wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
            wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
            wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
            # corner order matches _CORNER_OFFSETS: x fastest
            w = (
                wx[:, _CORNER_OFFSETS[:, 0]]
                * wy[:, _CORNER_OFFSETS[:, 1]]
                * wz[:, _CORNER_OFFSETS[:, 2]]
            )  # (N, 8)
            table = self.tables[lvl]
            corner_feats = table.data[idx]  # (N, 8, F)
            out = np.einsum("nc,ncf->nf", w, corner_feats)

            def backward(grad, table=table, idx=idx, w=w, corner_feats=corner_feats,
                         f=f, res=res, n=n):
                if table.requires_grad:
                    gt = np.zeros_like(table.data)
                    np.add.at(gt, idx, w[:, :, None] * grad[:, None, :])
                    table.accumulate(gt)
                if points.requires_grad:
                    # d(out)/d(point): corner weights are products of the
                    # per-axis linear factors; differentiate each axis.
                    gp = np.zeros((n, 3))
                    per_corner = np.einsum("ncf,nf->nc", corner_feats, grad)
                    for axis in range(3):
                        offs = _CORNER_OFFSETS[:, axis]
                        others = [a for a in range(3) if a != axis]
                        w_other = np.ones((n, 8))
                        for a in others:
                            fa = f[:, a]
                            wa = np.stack([1.0 - fa, fa], axis=1)
                            w_other *= wa[:, _CORNER_OFFSETS[:, a]]
                        sign = np.where(offs == 1, 1.0, -1.0)
                        gp[:, axis] = res * np.sum(per_corner * w_other * sign, axis=1)
                    points.accumulate(gp)

            outputs.append(ad.custom((table, points), out, backward))
        return ad.concatenate(outputs, axis=1)


_CORNER_OFFSETS = np.array(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)]
)


def one_blob_encode(points: Tensor, bins: int = 16) -> Tensor:
    """Parameter-free per-axis Gaussian-bump encoding of [0, 1]^3 points.

    Output dimension is exactly ``3 * bins``.  Smooth, so a gradient
    w.r.t. the points flows through it (there are no trainable weights).
    """
    pts = points.data
    centers = (np.arange(bins) + 0.5) / bins
    sigma = 1.0 / bins
    diff = pts[:, :, None] - centers[None, None, :]  # (N, 3, B)
    enc = np.exp(-0.5 * (diff / sigma) ** 2)
    out = enc.reshape(pts.shape[0], 3 * bins)

    def backward(grad):
        g = grad.reshape(pts.shape[0], 3, bins)
        gp = np.sum(g * enc * (-diff) / sigma**2, axis=2)
        points.accumulate(gp)

    return ad.custom((points,), out, backward)


class Mlp:
    """Plain affine + ReLU stack with a configurable output head.

    Hidden layers get random init; the final layer is zero-initialized so
    a freshly built network outputs exactly zero (residual-friendly).
    ``head`` is ``"identity"`` or ``"sigmoid"`` (squashes into [0, 1]).
    """

    def __init__(self, store: ParamStore, name: str, sizes: list[int],
                 rng: np.random.Generator, head: str = "identity",
                 lr: float = 1e-3, output_gain: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if head not in ("identity", "sigmoid"):
            raise ValueError(f"unknown head {head!r}")
        self.head = head
        self.output_gain = output_gain
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for li, (nin, nout) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = li == len(sizes) - 2
            if last:
                w = np.zeros((nin, nout))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / nin), size=(nin, nout))
            self.weights.append(store.add(f"{name}/w{li}", w, lr=lr))
            self.biases.append(store.add(f"{name}/b{li}", np.zeros(nout), lr=lr))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        n_layers = len(self.weights)
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if li < n_layers - 1:
                h = ad.relu(h)
        if self.head == "sigmoid":
            h = ad.sigmoid(h)
        if self.output_gain != 1.0:
            h = ad.mul(h, self.output_gain)
        return h
