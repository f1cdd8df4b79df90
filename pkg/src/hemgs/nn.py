"""Minimal float64 neural runtime with hand-derived gradients.

Only the blocks the entropy model needs are here: dense layers, a
multi-resolution hash grid and a fixed point-set feature extractor. Every
forward pass that feeds training returns a cache consumed by the matching
``backward``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.spatial import cKDTree

ACTIVATIONS = ("relu", "none", "softplus", "exp-clamped")
STEP_EXP_LIMIT = 4.0
_LN2 = math.log(2.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def _activate(x, act):
    if act == "relu":
        return np.maximum(x, 0.0)
    if act == "none":
        return x
    if act == "softplus":
        return softplus(x)
    if act == "exp-clamped":
        return np.exp2(np.clip(x, -STEP_EXP_LIMIT, STEP_EXP_LIMIT))
    raise ValueError(f"unknown activation {act!r}")


def _activate_grad(x, y, act):
    if act == "relu":
        return (x > 0).astype(np.float64)
    if act == "none":
        return np.ones_like(x)
    if act == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * x))      # logistic(x), overflow free
    if act == "exp-clamped":
        live = (x > -STEP_EXP_LIMIT) & (x < STEP_EXP_LIMIT)
        return np.where(live, y * _LN2, 0.0)
    raise ValueError(f"unknown activation {act!r}")


@dataclass
class Dense:
    weight: np.ndarray      # (in, out)
    bias: np.ndarray        # (out,)
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("weight must be (in, out) and bias (out,)")


@dataclass
class Mlp:
    layers: list[Dense] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @classmethod
    def init(cls, widths, activations, rng, zero_last=False, scale=1.0):
        """He-initialized stack; ``widths`` has one more entry than ``activations``."""
        if len(widths) != len(activations) + 1:
            raise ValueError("need len(widths) == len(activations) + 1")
        layers = []
        for i, act in enumerate(activations):
            fan_in, fan_out = widths[i], widths[i + 1]
            if zero_last and i == len(activations) - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, scale * math.sqrt(2.0 / fan_in), (fan_in, fan_out))
            layers.append(Dense(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [l.weight.shape[1] for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def forward(self, x):
        return self.forward_cache(x)[0]

    def forward_cache(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} != {self.in_dim}")
        cache = []
        lead = x.shape[:-1]
        for l in self.layers:
            # one 2-D product; batched 3-D matmul is far slower in numpy
            pre = (x.reshape(-1, x.shape[-1]) @ l.weight + l.bias).reshape(lead + l.bias.shape)
            y = _activate(pre, l.activation)
            cache.append((x, pre, y))
            x = y
        return x, cache

    def backward(self, cache, grad_out):
        """Gradients ``[dW0, db0, dW1, db1, ...]`` and the input gradient."""
        grad_out = np.asarray(grad_out, dtype=np.float64)
        grads = []
        g = grad_out
        for l, (x, pre, y) in zip(reversed(self.layers), reversed(cache)):
            if g.shape != y.shape:
                raise ValueError(f"upstream gradient shape {g.shape} != {y.shape}")
            g = g * _activate_grad(pre, y, l.activation)
            x2 = x.reshape(-1, x.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads.append(g2.sum(axis=0))
            grads.append(x2.T @ g2)
            g = (g2 @ l.weight.T).reshape(x.shape)
        return grads[::-1], g


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_backward(net: Mlp, x, grad_out):
    _, cache = net.forward_cache(x)
    return net.backward(cache, grad_out)


# ---------------------------------------------------------------- hash grid

HASH_PRIMES = (1, 2654435761, 805459861)
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)],
                    dtype=np.int64)


@dataclass
class HashGridEncoder:
    """Multi-resolution spatially hashed feature grid over the unit cube."""

    tables: np.ndarray              # (levels, table_size, features)
    resolutions: np.ndarray         # (levels,) int

    @classmethod
    def init(cls, rng, levels=8, min_res=16, max_res=512, log2_table=15, features=2):
        if levels > 1:
            growth = math.exp((math.log(max_res) - math.log(min_res)) / (levels - 1))
        else:
            growth = 1.0
        res = np.array([math.floor(min_res * growth ** l + 1e-9) for l in range(levels)],
                       dtype=np.int64)
        tables = rng.uniform(-1e-4, 1e-4, (levels, 1 << log2_table, features))
        return cls(tables, res)

    @property
    def levels(self) -> int:
        return self.tables.shape[0]

    @property
    def table_size(self) -> int:
        return self.tables.shape[1]

    @property
    def features(self) -> int:
        return self.tables.shape[2]

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def slots(self, u):
        """Table slots and trilinear weights, shapes (N, levels, 8)."""
        u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
        if np.any(~((u >= 0.0) & (u <= 1.0))):
            raise ValueError("hash grid query outside [0, 1]^3")
        pos = u[:, None, :] * self.resolutions[None, :, None].astype(np.float64)
        base = np.floor(pos)
        frac = pos - base
        base = base.astype(np.int64)
        corner = base[:, :, None, :] + _CORNERS[None, None, :, :]           # (N, L, 8, 3)
        c = corner.astype(np.uint64)
        h = (c[..., 0] * np.uint64(HASH_PRIMES[0])) ^ (c[..., 1] * np.uint64(HASH_PRIMES[1])) \
            ^ (c[..., 2] * np.uint64(HASH_PRIMES[2]))
        idx = (h & np.uint64(self.table_size - 1)).astype(np.int64)
        w_hi = frac[:, :, None, :]
        sel = _CORNERS[None, None, :, :].astype(bool)
        weights = np.prod(np.where(sel, w_hi, 1.0 - w_hi), axis=-1)           # (N, L, 8)
        return idx, weights

    def query(self, u):
        return self.query_cache(u)[0]

    def query_cache(self, u):
        idx, weights = self.slots(u)
        lvl = np.arange(self.levels)[None, :, None]
        feats = self.tables[lvl, idx]                                        # (N, L, 8, F)
        out = np.einsum("nlc,nlcf->nlf", weights, feats)
        return out.reshape(out.shape[0], -1), (idx, weights)

    def backward(self, cache, grad_out):
        """Gradient w.r.t. the tables (same shape as ``tables``)."""
        idx, weights = cache
        n = idx.shape[0]
        g = np.asarray(grad_out, dtype=np.float64).reshape(n, self.levels, self.features)
        grad = np.zeros_like(self.tables)
        T = self.table_size
        flat = (idx + (np.arange(self.levels) * T)[None, :, None]).ravel()
        for f in range(self.features):
            contrib = (weights * g[:, :, None, f]).ravel()
            grad[:, :, f] = np.bincount(flat, contrib, minlength=self.levels * T).reshape(
                self.levels, T)
        return grad


def hashgrid_query(enc: HashGridEncoder, location):
    out = enc.query(np.asarray(location, dtype=np.float64).reshape(-1, 3))
    return out[0] if np.ndim(location) == 1 else out


# ---------------------------------------------------------------- agnostic extractor

AGNOSTIC_ASSET = "agnostic_extractor_v1.bin"
AGNOSTIC_SEED = 314159


@dataclass
class AgnosticExtractor:
    """Fixed two-stage k-NN set-abstraction network (shared by all scenes).

    Stage one embeds relative neighbour coordinates and max-pools them;
    stage two repeats the gather with the stage-one features attached. The
    weights ship with the package and are never trained or stored per scene.
    """

    stage1: Mlp
    stage2: Mlp
    k: int = 16
    coord_scale: float = 8.0        # relative offsets are divided by this many units

    @property
    def out_dim(self) -> int:
        return self.stage2.out_dim

    @classmethod
    def generate(cls, seed=AGNOSTIC_SEED, k=16, hidden=32, out=32):
        rng = np.random.default_rng(seed)
        s1 = Mlp.init([3, hidden, hidden], ["relu", "relu"], rng)
        s2 = Mlp.init([3 + hidden, 2 * hidden, out], ["relu", "relu"], rng)
        return cls(s1, s2, k)

    def named_params(self):
        out = []
        for name, net in (("stage1", self.stage1), ("stage2", self.stage2)):
            for i, l in enumerate(net.layers):
                out += [(f"{name}.{i}.weight", l.weight), (f"{name}.{i}.bias", l.bias)]
        return out

    def to_bytes(self) -> bytes:
        meta = {"kind": "agnostic-extractor", "k": self.k, "coord_scale": self.coord_scale,
                "stage1": [l.activation for l in self.stage1.layers],
                "stage2": [l.activation for l in self.stage2.layers]}
        return pack_tensors(self.named_params(), meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> AgnosticExtractor:
        meta, tensors = unpack_tensors(data)
        nets = []
        for name in ("stage1", "stage2"):
            acts = meta[name]
            nets.append(Mlp([Dense(tensors[f"{name}.{i}.weight"], tensors[f"{name}.{i}.bias"], a)
                             for i, a in enumerate(acts)]))
        return cls(nets[0], nets[1], int(meta["k"]), float(meta["coord_scale"]))

    def features(self, locations, unit=1.0):
        """Per-point feature (N, out_dim); relative offsets measured in ``unit``."""
        pts = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("agnostic features need at least one anchor")
        pts = pts / unit
        nbr = knn_indices(pts, self.k)
        rel = (pts[nbr] - pts[:, None, :]) / self.coord_scale               # (N, k, 3)
        h1 = self.stage1.forward(rel).max(axis=1)
        # the first stage-two layer is linear in [rel, h1[nbr]]: project the
        # per-point features once instead of once per neighbour slot
        first, rest = self.stage2.layers[0], Mlp(self.stage2.layers[1:])
        proj = h1 @ first.weight[3:]
        pre = (rel.reshape(-1, 3) @ first.weight[:3]).reshape(rel.shape[:2] + (-1,))
        h = _activate(pre + proj[nbr] + first.bias, first.activation)
        if rest.layers:
            h = rest.forward(h)
        return h.max(axis=1)


def knn_indices(points, k) -> np.ndarray:
    """k nearest points (self included), ties broken by the relative offset.

    The tie rule only looks at geometry, so the selected neighbourhood of a
    point does not depend on the input order.
    """
    n = points.shape[0]
    kk = min(k, n)
    m = min(n, kk + 8)
    tree = cKDTree(points)
    _, cand = tree.query(points, k=m)
    cand = np.asarray(cand).reshape(n, m)
    sel, d2_kth, d2_last = _rank(points, np.arange(n), cand, kk)
    # candidates beyond the fetched set could tie with the k-th one
    redo = np.nonzero((m < n) & ~(d2_kth * (1 + 1e-9) < d2_last))[0]
    for i in redo:
        r = math.sqrt(d2_kth[i]) * (1 + 1e-6) + 1e-12
        ball = np.array(sorted(tree.query_ball_point(points[i], r)), dtype=np.int64)
        sel[i] = _rank(points, np.array([i]), ball[None, :], kk)[0][0]
    return sel


def _rank(points, centers, cand, kk):
    rel = points[cand] - points[centers][:, None, :]
    d2 = np.einsum("nmi,nmi->nm", rel, rel)
    order = np.lexsort((rel[..., 2], rel[..., 1], rel[..., 0], d2), axis=-1)
    sel = np.take_along_axis(cand, order[:, :kk], axis=1)
    d2s = np.take_along_axis(d2, order, axis=1)
    return sel, d2s[:, kk - 1], d2s[:, -1]


def load_agnostic_extractor() -> AgnosticExtractor:
    data = (resources.files("hemgs") / "assets" / AGNOSTIC_ASSET).read_bytes()
    return AgnosticExtractor.from_bytes(data)


def agnostic_features(ext: AgnosticExtractor, locations, unit=1.0):
    return ext.features(locations, unit)


# ---------------------------------------------------------------- serialization

_TENSOR_MAGIC = b"HMPW"


def pack_tensors(named, meta=None) -> bytes:
    """Manifest (JSON) + flat little-endian float32 blob."""
    manifest = {"version": 1, "meta": meta or {},
                "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in named]}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for _, a in named)
    return _TENSOR_MAGIC + struct.pack("<I", len(head)) + head + blob


def unpack_tensors(data: bytes):
    if data[:4] != _TENSOR_MAGIC:
        raise ValueError("not a parameter blob")
    (n,) = struct.unpack_from("<I", data, 4)
    manifest = json.loads(data[8:8 + n].decode())
    pos = 8 + n
    tensors = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        tensors[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
        pos += 4 * count
    if pos != len(data):
        raise ValueError("parameter blob length does not match its manifest")
    return manifest["meta"], tensors
