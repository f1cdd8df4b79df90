"""The conditional entropy model: step predictor, dual-path hyperprior and
autoregressive context head.

Two code paths compute the same function. The batched numpy blocks (with
caches and hand-written backward passes) serve training and evaluation; the
numba kernel :func:`anchor_distribution` serves the sequential coder, where the
encoder and decoder must execute identical arithmetic.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .context import DEFAULT_N, DEFAULT_RF, QMAX, dequantize_locations, half_extent
from .entropy import SIGMA_FLOOR, GaussianParams
from .nn import (AGNOSTIC_ASSET, AgnosticExtractor, Dense, HashGridEncoder, Mlp,
                 load_agnostic_extractor, pack_tensors, softplus, unpack_tensors)

FEATURE = "feature"
SCOF = "scaling_offsets"
STAGES = (FEATURE, SCOF)
BASE_STEP = {FEATURE: 1.0, SCOF: 0.01}
LAMBDA_MIN, LAMBDA_MAX = 1e-4, 1e-2
SCALING_DIM = 6

PRIOR_WIDTH = 32
HIDDEN = 64
POINT_WIDTH = 32
CONTEXT_WIDTH = 32

_EXTRACTOR: AgnosticExtractor | None = None


def shared_extractor() -> AgnosticExtractor:
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = load_agnostic_extractor()
    return _EXTRACTOR


def normalized_lambda(lam) -> float:
    """log10(lambda) mapped linearly from [1e-4, 1e-2] onto [-1, 1]."""
    lam = float(lam)
    if not (LAMBDA_MIN <= lam <= LAMBDA_MAX) or not math.isfinite(lam):
        raise ValueError(f"lambda {lam} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")
    lo, hi = math.log10(LAMBDA_MIN), math.log10(LAMBDA_MAX)
    return 2.0 * (math.log10(lam) - lo) / (hi - lo) - 1.0


@dataclass
class LocationFeatures:
    """Per-anchor inputs derived from decoded locations only."""

    agnostic: np.ndarray        # (N, F_a)
    unit: np.ndarray            # (N, 3) hash-grid coordinates in [0, 1]


def location_features(q, aabb, voxel_size) -> LocationFeatures:
    q = np.asarray(q).reshape(-1, 3)
    if q.shape[0] == 0:
        ext = shared_extractor()
        return LocationFeatures(np.zeros((0, ext.out_dim)), np.zeros((0, 3)))
    xyz = dequantize_locations(q, aabb)
    agn = shared_extractor().features(xyz, unit=float(voxel_size))
    return LocationFeatures(agn, q.astype(np.float64) / QMAX)


@dataclass
class HemgsModel:
    feature_dim: int
    offsets_per_anchor: int
    hashgrid: HashGridEncoder
    nets: dict[str, Mlp]
    center: dict[str, np.ndarray]
    scale: dict[str, np.ndarray]
    use_agnostic: bool = True
    use_context: bool = True
    rf: int = DEFAULT_RF
    n: int = DEFAULT_N
    agnostic_dim: int = field(default=32)

    # ------------------------------------------------------------ construction

    @classmethod
    def init(cls, feature_dim: int, offsets_per_anchor: int, seed: int = 0,
             use_agnostic: bool = True, use_context: bool = True,
             rf: int = DEFAULT_RF, n: int = DEFAULT_N) -> HemgsModel:
        rng = np.random.default_rng(seed)
        hashgrid = HashGridEncoder.init(rng)
        agn = shared_extractor().out_dim
        dims = {FEATURE: feature_dim, SCOF: SCALING_DIM + 3 * offsets_per_anchor}
        nets = {}
        for stage in STAGES:
            d = dims[stage]
            extra = feature_dim if stage == SCOF else 0
            nets[f"hyper.{stage}"] = Mlp.init(
                [agn + hashgrid.out_dim + extra, HIDDEN, PRIOR_WIDTH], ["relu", "none"], rng)
            nets[f"step.{stage}"] = Mlp.init(
                [2 * PRIOR_WIDTH, HIDDEN, d], ["relu", "exp-clamped"], rng, zero_last=True)
            nets[f"point.{stage}"] = Mlp.init(
                [3 + d, POINT_WIDTH, POINT_WIDTH], ["relu", "relu"], rng)
            nets[f"pool.{stage}"] = Mlp.init(
                [2 * POINT_WIDTH, HIDDEN, CONTEXT_WIDTH], ["relu", "none"], rng)
            nets[f"dist.{stage}"] = Mlp.init(
                [PRIOR_WIDTH + CONTEXT_WIDTH + d, HIDDEN, 2 * d], ["relu", "none"], rng,
                zero_last=True)
        center = {s: np.zeros(dims[s]) for s in STAGES}
        scale = {s: np.ones(dims[s]) for s in STAGES}
        return cls(feature_dim, offsets_per_anchor, hashgrid, nets, center, scale,
                   use_agnostic, use_context, rf, n, agn)

    def dim(self, stage: str) -> int:
        _check_stage(stage)
        return self.feature_dim if stage == FEATURE else SCALING_DIM + 3 * self.offsets_per_anchor

    def calibrate(self, scene) -> None:
        """Set the per-channel value normalization from a scene's statistics."""
        for stage, vals in ((FEATURE, scene.features),
                            (SCOF, np.concatenate([scene.scaling, scene.offsets], axis=1))):
            if len(scene) == 0:
                continue
            self.center[stage] = vals.mean(axis=0)
            std = vals.std(axis=0)
            self.scale[stage] = np.maximum(std, BASE_STEP[stage])

    def copy(self) -> HemgsModel:
        return _deepcopy(self)

    # ------------------------------------------------------------ parameters

    def param_groups(self) -> dict[str, np.ndarray]:
        """Every learnable array by name (views into the live model)."""
        out = {"hash.tables": self.hashgrid.tables}
        for name, net in sorted(self.nets.items()):
            for i, layer in enumerate(net.layers):
                out[f"{name}.{i}.weight"] = layer.weight
                out[f"{name}.{i}.bias"] = layer.bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for s in STAGES:
            out[f"norm.{s}.center"] = self.center[s]
            out[f"norm.{s}.scale"] = self.scale[s]
        return out

    def meta(self) -> dict:
        return {"kind": "hemgs-model", "feature_dim": self.feature_dim,
                "offsets_per_anchor": self.offsets_per_anchor,
                "use_agnostic": self.use_agnostic, "use_context": self.use_context,
                "rf": self.rf, "n": self.n, "agnostic_asset": AGNOSTIC_ASSET,
                "hash_resolutions": [int(r) for r in self.hashgrid.resolutions],
                "activations": {k: [l.activation for l in v.layers] for k, v in self.nets.items()}}

    def to_bytes(self) -> bytes:
        named = list(self.param_groups().items()) + list(self.buffers().items())
        return pack_tensors(named, self.meta())

    @classmethod
    def from_bytes(cls, data: bytes) -> HemgsModel:
        meta, t = unpack_tensors(bytes(data))
        if meta.get("kind") != "hemgs-model":
            raise ValueError("parameter blob does not hold an entropy model")
        nets = {}
        for name, acts in sorted(meta["activations"].items()):
            nets[name] = Mlp([Dense(t[f"{name}.{i}.weight"], t[f"{name}.{i}.bias"], a)
                              for i, a in enumerate(acts)])
        hashgrid = HashGridEncoder(t["hash.tables"],
                                   np.asarray(meta["hash_resolutions"], dtype=np.int64))
        center = {s: t[f"norm.{s}.center"] for s in STAGES}
        scale = {s: t[f"norm.{s}.scale"] for s in STAGES}
        return cls(int(meta["feature_dim"]), int(meta["offsets_per_anchor"]), hashgrid, nets,
                   center, scale, bool(meta["use_agnostic"]), bool(meta["use_context"]),
                   int(meta["rf"]), int(meta["n"]), shared_extractor().out_dim)

    def rounded(self) -> HemgsModel:
        """The model exactly as a decoder sees it after serialization."""
        return HemgsModel.from_bytes(self.to_bytes())

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def side_bytes(self) -> int:
        return len(self.to_bytes())

    # ------------------------------------------------------------ hyperprior

    def prior_input(self, agnostic, hash_feature, decoded_feature=None, stage=FEATURE):
        _check_stage(stage)
        agnostic = np.asarray(agnostic, dtype=np.float64)
        if not self.use_agnostic:
            agnostic = np.zeros_like(agnostic)
        parts = [agnostic, np.asarray(hash_feature, dtype=np.float64)]
        if stage == SCOF:
            if decoded_feature is None:
                raise ValueError("the scaling/offsets prior needs the decoded local feature")
            parts.append(self.normalize(decoded_feature, FEATURE))
        elif decoded_feature is not None:
            raise ValueError("the feature prior cannot depend on the feature itself")
        return np.concatenate(parts, axis=-1)

    def hyperprior_feature(self, agnostic, hash_feature, decoded_feature=None, stage=FEATURE):
        x = self.prior_input(agnostic, hash_feature, decoded_feature, stage)
        return self.nets[f"hyper.{stage}"].forward(x)

    def normalize(self, values, stage):
        return (np.asarray(values, dtype=np.float64) - self.center[stage]) / self.scale[stage]

    # ------------------------------------------------------------ step predictor

    def step_input(self, prior, lam):
        prior = np.asarray(prior, dtype=np.float64)
        cond = np.full(prior.shape[:-1] + (PRIOR_WIDTH,), normalized_lambda(lam))
        return np.concatenate([prior, cond], axis=-1)

    def predict_step(self, prior, lam, stage=FEATURE):
        _check_stage(stage)
        return BASE_STEP[stage] * self.nets[f"step.{stage}"].forward(self.step_input(prior, lam))

    # ------------------------------------------------------------ context

    def offset_unit(self) -> float:
        return float(max(half_extent(self.rf), 1))

    def context_input(self, offsets, values, stage):
        """Per-neighbour point-MLP input: scaled voxel offset and normalized value."""
        offsets = np.asarray(offsets, dtype=np.float64) / self.offset_unit()
        return np.concatenate([offsets, self.normalize(values, stage)], axis=-1)

    def context_feature(self, offsets, values, mask=None, stage=FEATURE):
        """Context vector for a batch of neighbour sets.

        ``offsets`` is (..., k, 3) in voxels, ``values`` the neighbours' decoded
        attribute (..., k, dim) and ``mask`` marks real entries. Empty sets give
        the zero vector.
        """
        return self.context_cache(offsets, values, mask, stage)[0]

    def context_cache(self, offsets, values, mask=None, stage=FEATURE):
        _check_stage(stage)
        offsets = np.asarray(offsets, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.ones(offsets.shape[:-1], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        batch = offsets.shape[:-2]
        if not self.use_context or offsets.shape[-2] == 0:
            return np.zeros(batch + (CONTEXT_WIDTH,)), None
        x = self.context_input(offsets, values, stage)
        h, pcache = self.nets[f"point.{stage}"].forward_cache(x)
        m = mask[..., None].astype(np.float64)
        hm = h * m
        count = mask.sum(axis=-1)
        # summing in sorted order makes the mean exactly order-independent
        mean = np.sort(hm, axis=-2).sum(axis=-2) / np.maximum(count, 1)[..., None]
        arg = np.argmax(hm, axis=-2)
        mx = np.take_along_axis(hm, arg[..., None, :], axis=-2)[..., 0, :]
        pooled = np.concatenate([mean, mx], axis=-1)
        out, hcache = self.nets[f"pool.{stage}"].forward_cache(pooled)
        live = (count > 0)[..., None]
        out = np.where(live, out, 0.0)
        return out, (pcache, hcache, m, count, arg, live, h.shape)

    def context_backward(self, cache, grad_out, stage):
        """Parameter gradients ``{name: grad}`` of the point and pooling nets."""
        if cache is None:
            return {}
        pcache, hcache, m, count, arg, live, hshape = cache
        g = np.where(live, grad_out, 0.0)
        gp, gpooled = self.nets[f"pool.{stage}"].backward(hcache, g)
        w = POINT_WIDTH
        gmean, gmax = gpooled[..., :w], gpooled[..., w:]
        gh = np.broadcast_to((gmean / np.maximum(count, 1)[..., None])[..., None, :],
                             hshape).copy()
        onehot = np.zeros(hshape)
        np.put_along_axis(onehot, arg[..., None, :], 1.0, axis=-2)
        gh += onehot * gmax[..., None, :]
        gh *= m
        gpt, _ = self.nets[f"point.{stage}"].backward(pcache, gh)
        out = _named_grads(f"point.{stage}", gpt)
        out.update(_named_grads(f"pool.{stage}", gp))
        return out

    # ------------------------------------------------------------ distribution head

    def dist_input(self, prior, ctx, step, stage):
        rel = np.log2(np.asarray(step, dtype=np.float64) / BASE_STEP[stage])
        return np.concatenate([np.asarray(prior, dtype=np.float64),
                               np.asarray(ctx, dtype=np.float64), rel], axis=-1)

    def predict_distribution(self, prior, ctx, step, stage=FEATURE) -> GaussianParams:
        _check_stage(stage)
        raw = self.nets[f"dist.{stage}"].forward(self.dist_input(prior, ctx, step, stage))
        return self.params_from_raw(raw, stage)

    def params_from_raw(self, raw, stage) -> GaussianParams:
        d = self.dim(stage)
        mu = self.center[stage] + self.scale[stage] * raw[..., :d]
        sigma = self.scale[stage] * softplus(raw[..., d:]) + SIGMA_FLOOR
        return GaussianParams(mu, sigma)

    # ------------------------------------------------------------ numba kernel arguments

    def kernel_weights(self, stage):
        """Flat weight tuple consumed by :func:`anchor_distribution`."""
        arrays = []
        for part in ("point", "pool", "dist"):
            for layer in self.nets[f"{part}.{stage}"].layers:
                arrays += [np.ascontiguousarray(layer.weight), np.ascontiguousarray(layer.bias)]
        return tuple(arrays) + (np.ascontiguousarray(self.center[stage]),
                                np.ascontiguousarray(self.scale[stage]))


def _deepcopy(model: HemgsModel) -> HemgsModel:
    nets = {k: Mlp([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in v.layers])
            for k, v in model.nets.items()}
    return HemgsModel(model.feature_dim, model.offsets_per_anchor,
                      HashGridEncoder(model.hashgrid.tables.copy(),
                                      model.hashgrid.resolutions.copy()),
                      nets, {k: v.copy() for k, v in model.center.items()},
                      {k: v.copy() for k, v in model.scale.items()},
                      model.use_agnostic, model.use_context, model.rf, model.n,
                      model.agnostic_dim)


def _named_grads(name, grads):
    out = {}
    for i in range(len(grads) // 2):
        out[f"{name}.{i}.weight"] = grads[2 * i]
        out[f"{name}.{i}.bias"] = grads[2 * i + 1]
    return out


def _check_stage(stage):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------- sequential kernel

@njit(cache=True, inline="always")
def _dense(x, n_in, w, b, relu, out):
    n_out = w.shape[1]
    for j in range(n_out):
        out[j] = b[j]
    for i in range(n_in):
        xi = x[i]
        if xi != 0.0:
            for j in range(n_out):
                out[j] += xi * w[i, j]
    if relu:
        for j in range(n_out):
            if out[j] < 0.0:
                out[j] = 0.0


@njit(cache=True)
def record_decoded(t, decoded, value_proj, weights):
    """Cache the value half of the point net's first layer for anchor ``t``."""
    pw1, pb1 = weights[0], weights[1]
    center, scale = weights[12], weights[13]
    d = decoded.shape[1]
    for j in range(pw1.shape[1]):
        value_proj[t, j] = pb1[j]
    for a in range(d):
        x = (decoded[t, a] - center[a]) / scale[a]
        if x != 0.0:
            for j in range(pw1.shape[1]):
                value_proj[t, j] += x * pw1[3 + a, j]


@njit(cache=True)
def anchor_distribution(t, prior, step, nbr, offsets, counts, value_proj, use_ctx, off_unit,
                        s0, weights, work, mu, sigma):
    """Gaussian parameters of every element of anchor ``t``.

    ``value_proj`` holds :func:`record_decoded` output for every anchor coded
    so far; only rows listed in ``nbr[t]`` are read. ``work`` is scratch space.
    Returns False if a context neighbour does not precede ``t``.
    """
    (pw1, pb1, pw2, pb2, hw1, hb1, hw2, hb2, dw1, db1, dw2, db2, center, scale) = weights
    d = step.shape[1]
    pwidth = pw2.shape[1]
    cwidth = hw2.shape[1]
    h1 = work[1]
    h2 = work[2]
    pooled = work[3]
    sorted_buf = work[4]
    vals = work[5]
    dist_in = work[6]
    hid = work[7]
    raw = work[8]
    nprior = prior.shape[1]
    for j in range(nprior):
        dist_in[j] = prior[t, j]
    for j in range(cwidth):
        dist_in[nprior + j] = 0.0
    k = counts[t]
    if use_ctx and k > 0:
        for j in range(pwidth):
            pooled[j] = 0.0
            pooled[pwidth + j] = 0.0
        kk = 0
        for m in range(k):
            r = nbr[t, m]
            if r < 0 or r >= t:
                return False
            for j in range(pw1.shape[1]):
                h1[j] = value_proj[r, j]
            for a in range(3):
                x = offsets[t, m, a] / off_unit
                if x != 0.0:
                    for j in range(pw1.shape[1]):
                        h1[j] += x * pw1[a, j]
            for j in range(pw1.shape[1]):
                if h1[j] < 0.0:
                    h1[j] = 0.0
            _dense(h1, pw1.shape[1], pw2, pb2, True, h2)
            for j in range(pwidth):
                vals[kk * pwidth + j] = h2[j]
                if h2[j] > pooled[pwidth + j]:
                    pooled[pwidth + j] = h2[j]
            kk += 1
        # order-independent mean: sum each channel in ascending order
        for j in range(pwidth):
            for m in range(k):
                v = vals[m * pwidth + j]
                p = m
                while p > 0 and sorted_buf[p - 1] > v:
                    sorted_buf[p] = sorted_buf[p - 1]
                    p -= 1
                sorted_buf[p] = v
            acc = 0.0
            for m in range(k):
                acc += sorted_buf[m]
            pooled[j] = acc / k
        _dense(pooled, 2 * pwidth, hw1, hb1, True, h1)
        _dense(h1, hw1.shape[1], hw2, hb2, False, hid)
        for j in range(cwidth):
            dist_in[nprior + j] = hid[j]
    for a in range(d):
        dist_in[nprior + cwidth + a] = math.log2(step[t, a] / s0)
    _dense(dist_in, nprior + cwidth + d, dw1, db1, True, hid)
    _dense(hid, dw1.shape[1], dw2, db2, False, raw)
    for a in range(d):
        mu[a] = center[a] + scale[a] * raw[a]
        x = raw[d + a]
        sp = max(x, 0.0) + math.log1p(math.exp(-abs(x)))
        sigma[a] = scale[a] * sp + SIGMA_FLOOR
    return True


def kernel_workspace(model: HemgsModel, stage: str, n: int) -> np.ndarray:
    d = model.dim(stage)
    width = max(3 + d, 2 * POINT_WIDTH, HIDDEN, PRIOR_WIDTH + CONTEXT_WIDTH + d, 2 * d,
                max(n, 1) * POINT_WIDTH)
    return np.zeros((9, width))
