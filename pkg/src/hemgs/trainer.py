"""Scene-specific fitting of the entropy model under a multi-lambda
rate-distortion objective.

Loss per step: ``D + lambda * R`` where ``R`` is the noise-relaxed bit count per
anchor and ``D`` the weighted squared reconstruction error of the
dequantized attributes (summed over each attribute's elements, averaged over
anchors). Gradients are assembled by hand from the block backward passes in
:mod:`hemgs.model` and :mod:`hemgs.nn`.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import compress_with_trace
from .context import scene_coding_order, select_contexts
from .entropy import GaussianParams, element_bits_grad, quantize
from .errors import DivergenceError
from .model import (BASE_STEP, FEATURE, LAMBDA_MAX, LAMBDA_MIN, PRIOR_WIDTH, SCALING_DIM, SCOF,
                    HemgsModel, _named_grads, location_features, normalized_lambda)
from .nn import STEP_EXP_LIMIT

DEFAULT_LAMBDAS = (1e-3, 2e-3, 3e-3, 4e-3)
ATTRIBUTES = ("feature", "scaling", "offsets")
_LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    lambdas: tuple = DEFAULT_LAMBDAS
    iterations: int = 2000
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    lr_floor: float = 0.05          # cosine decay ends at this fraction of the base rate
    batch_size: int = 256
    seed: int = 0
    weights: tuple = (1.0, 10.0, 10.0)
    refresh_every: int = 50         # iterations between context-cache rebuilds
    average_lambdas: bool = False   # all lambdas every step instead of cycling
    use_agnostic: bool = True
    use_context: bool = True
    rf: int = 25
    n: int = 20
    log_every: int = 1

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if not self.lambdas:
            raise ValueError("lambda grid is empty")
        for lam in self.lambdas:
            if not (LAMBDA_MIN <= lam <= LAMBDA_MAX):
                raise ValueError(f"lambda {lam} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")
        if self.iterations < 0 or self.batch_size < 1 or self.refresh_every < 1:
            raise ValueError("iterations must be >= 0, batch_size and refresh_every >= 1")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError("need three non-negative distortion weights")
        self.weights = tuple(float(w) for w in self.weights)


@dataclass
class LossBreakdown:
    distortion: float
    rate: float                     # bits per anchor (noise relaxation)
    lam: float
    total: float
    parts: dict = field(default_factory=dict)


# ---------------------------------------------------------------- scene tensors

@dataclass
class SceneData:
    """Everything training needs from a scene, in coding order."""

    agnostic: np.ndarray
    unit: np.ndarray
    neighbors: np.ndarray
    offsets: np.ndarray
    features: np.ndarray
    scof: np.ndarray
    perm: np.ndarray

    def __len__(self):
        return self.features.shape[0]


def prepare(scene, rf: int = 25, n: int = 20) -> SceneData:
    q, order = scene_coding_order(scene)
    perm = order.perm
    feats = location_features(q[perm], scene.aabb, scene.voxel_size)
    ctx = select_contexts(order, rf, n)
    scof = np.concatenate([scene.scaling, scene.offsets], axis=1)[perm]
    return SceneData(feats.agnostic, feats.unit, ctx.neighbors, ctx.offsets.astype(np.float64),
                     scene.features[perm], scof, perm)


def decoded_values(model: HemgsModel, data: SceneData, lam: float, hash_feature=None,
                   with_steps=False):
    """Dequantized attributes of every anchor as the codec would produce them."""
    if hash_feature is None:
        hash_feature = model.hashgrid.query(data.unit)
    p1 = model.hyperprior_feature(data.agnostic, hash_feature, None, FEATURE)
    s1 = model.predict_step(p1, lam, FEATURE)
    f_hat = quantize(data.features, s1)[1]
    p2 = model.hyperprior_feature(data.agnostic, hash_feature, f_hat, SCOF)
    s2 = model.predict_step(p2, lam, SCOF)
    s_hat = quantize(data.scof, s2)[1]
    return (f_hat, s_hat, s1, s2) if with_steps else (f_hat, s_hat)


# ---------------------------------------------------------------- loss and gradient

def _rounding_slope(symbols, values, step, mode):
    """d(symbols * step)/d(step) with the rounding treated per ``mode``."""
    if mode == "exact":
        return symbols.astype(np.float64)
    if mode == "ste":
        return symbols - values / step
    raise ValueError(f"unknown gradient mode {mode!r}")


class _Signature:
    """Collects the discrete state of a forward pass (kinks of the loss)."""

    def __init__(self):
        self._h = hashlib.sha1()

    def add(self, arr):
        self._h.update(np.ascontiguousarray(arr).tobytes())

    def add_cache(self, cache):
        for x, pre, y in cache:
            self._h.update(np.packbits(pre > 0).tobytes())
            self._h.update(np.packbits(np.abs(pre) < STEP_EXP_LIMIT).tobytes())

    def digest(self):
        return self._h.digest()


def _stage_forward(model, stage, x_prior, lam, offsets, nvals, mask, values, noise, mode, sig):
    d = model.dim(stage)
    prior, c_h = model.nets[f"hyper.{stage}"].forward_cache(x_prior)
    unit_step, c_s = model.nets[f"step.{stage}"].forward_cache(model.step_input(prior, lam))
    step = BASE_STEP[stage] * unit_step
    ctx, c_c = model.context_cache(offsets, nvals, mask, stage)
    raw, c_d = model.nets[f"dist.{stage}"].forward_cache(model.dist_input(prior, ctx, step, stage))
    params = model.params_from_raw(raw, stage)
    bits, d_mu, d_sigma, d_step, d_y = element_bits_grad(params.mu, params.sigma, step,
                                                         values + step * noise)
    symbols, deq = quantize(values, step)
    for c in (c_h, c_s, c_d):
        sig.add_cache(c)
    if c_c is not None:
        sig.add_cache(c_c[0])
        sig.add_cache(c_c[1])
        sig.add(c_c[4])
    sig.add(symbols)
    sig.add(bits < 24.0 - 1e-9)
    return dict(prior=prior, c_h=c_h, step=step, unit_step=unit_step, c_s=c_s, c_c=c_c, raw=raw,
                c_d=c_d, bits=bits, d_mu=d_mu, d_sigma=d_sigma, d_step=d_step + d_y * noise,
                symbols=symbols, deq=deq, slope=_rounding_slope(symbols, values, step, mode), d=d)


def _stage_backward(model, stage, f, g_bits, g_step_extra):
    """Back-propagate one stage; returns (param grads, grad wrt hyperprior input)."""
    d = f["d"]
    scale = model.scale[stage]
    g_mu = g_bits * f["d_mu"]
    g_sigma = g_bits * f["d_sigma"]
    raw = f["raw"]
    g_raw = np.concatenate([scale * g_mu,
                            scale * g_sigma * 0.5 * (1.0 + np.tanh(0.5 * raw[:, d:]))], axis=1)
    grads = {}
    gd, g_in = model.nets[f"dist.{stage}"].backward(f["c_d"], g_raw)
    grads.update(_named_grads(f"dist.{stage}", gd))
    g_prior = g_in[:, :PRIOR_WIDTH].copy()
    g_ctx = g_in[:, PRIOR_WIDTH:PRIOR_WIDTH + g_in.shape[1] - PRIOR_WIDTH - d]
    g_logstep = g_in[:, -d:]
    grads.update(model.context_backward(f["c_c"], g_ctx, stage))
    g_step = g_bits * f["d_step"] + g_step_extra + g_logstep / (f["step"] * _LN2)
    gs, g_sin = model.nets[f"step.{stage}"].backward(f["c_s"], BASE_STEP[stage] * g_step)
    grads.update(_named_grads(f"step.{stage}", gs))
    g_prior += g_sin[:, :PRIOR_WIDTH]
    gh, g_x = model.nets[f"hyper.{stage}"].backward(f["c_h"], g_prior)
    grads.update(_named_grads(f"hyper.{stage}", gh))
    return grads, g_x


def loss_and_grad(model: HemgsModel, data: SceneData, idx, lam, noise_feat, noise_scof,
                  cache_feat, cache_scof, weights=(1.0, 10.0, 10.0), mode="ste",
                  need_grad=True):
    """Loss on anchors ``idx`` and its gradient for every learnable array.

    ``cache_feat``/``cache_scof`` hold the neighbours' dequantized attributes
    (treated as constants). Returns ``(LossBreakdown, grads, signature)`` where
    the signature changes whenever a rounding, ReLU, clamp or max-pool
    decision changes.
    """
    idx = np.asarray(idx, dtype=np.int64)
    b = idx.size
    normalized_lambda(lam)
    sig = _Signature()
    hq, hcache = model.hashgrid.query_cache(data.unit[idx])
    agn = data.agnostic[idx]
    nb = data.neighbors[idx]
    mask = nb >= 0
    safe = np.maximum(nb, 0)
    offs = data.offsets[idx]
    w_f, w_s, w_o = weights

    feats = data.features[idx]
    x1 = model.prior_input(agn, hq, None, FEATURE)
    f1 = _stage_forward(model, FEATURE, x1, lam, offs, cache_feat[safe], mask, feats,
                        noise_feat, mode, sig)
    f_hat = f1["deq"]
    scof = data.scof[idx]
    x2 = model.prior_input(agn, hq, f_hat, SCOF)
    f2 = _stage_forward(model, SCOF, x2, lam, offs, cache_scof[safe], mask, scof,
                        noise_scof, mode, sig)

    err1 = feats - f_hat
    err2 = scof - f2["deq"]
    d_feat = float((err1 ** 2).sum()) / b
    d_scal = float((err2[:, :SCALING_DIM] ** 2).sum()) / b
    d_offs = float((err2[:, SCALING_DIM:] ** 2).sum()) / b
    distortion = w_f * d_feat + w_s * d_scal + w_o * d_offs
    bits_f = float(f1["bits"].sum()) / b
    bits_s = float(f2["bits"].sum()) / b
    rate = bits_f + bits_s
    total = distortion + lam * rate
    loss = LossBreakdown(distortion, rate, lam, total,
                         {"distortion.feature": d_feat, "distortion.scaling": d_scal,
                          "distortion.offsets": d_offs, "bits.feature": bits_f,
                          "bits.scaling_offsets": bits_s})
    if not need_grad:
        return loss, None, sig.digest()

    g_bits = lam / b
    w2 = np.concatenate([np.full(SCALING_DIM, w_s), np.full(err2.shape[1] - SCALING_DIM, w_o)])
    g_deq2 = -2.0 * w2 * err2 / b
    grads2, g_x2 = _stage_backward(model, SCOF, f2, g_bits, g_deq2 * f2["slope"])
    # the stage-two prior sees the dequantized feature, itself a function of step one
    g_fhat = g_x2[:, -model.feature_dim:] / model.scale[FEATURE]
    g_deq1 = -2.0 * w_f * err1 / b + g_fhat
    grads1, g_x1 = _stage_backward(model, FEATURE, f1, g_bits, g_deq1 * f1["slope"])
    grads = {**grads1, **grads2}
    na = data.agnostic.shape[1]
    nh = hq.shape[1]
    g_hash = g_x1[:, na:na + nh] + g_x2[:, na:na + nh]
    grads["hash.tables"] = model.hashgrid.backward(hcache, g_hash)
    for name, arr in model.param_groups().items():
        grads.setdefault(name, np.zeros_like(arr))
    return loss, grads, sig.digest()


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: dict, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, factor: float = 1.0):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= factor * self.lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_factor(it: int, total: int, floor: float) -> float:
    if total <= 1:
        return 1.0
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * it / (total - 1)))


# ---------------------------------------------------------------- training loop

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)      # (iteration, lambda, D, R, total)
    seconds: float = 0.0

    def header(self) -> tuple:
        return ("iteration", "lambda", "distortion", "rate_bits", "total")

    def to_delimited(self, sep="\t") -> str:
        lines = [sep.join(self.header())]
        lines += [sep.join(repr(v) if isinstance(v, float) else str(v) for v in r)
                  for r in self.rows]
        return "\n".join(lines) + "\n"


class Trainer:
    """Deterministic training schedule over one scene."""

    def __init__(self, scene, cfg: TrainConfig, model: HemgsModel | None = None):
        self.cfg = cfg
        self.scene = scene
        if model is None:
            model = HemgsModel.init(scene.feature_dim, scene.offsets_per_anchor, seed=cfg.seed,
                                    use_agnostic=cfg.use_agnostic, use_context=cfg.use_context,
                                    rf=cfg.rf, n=cfg.n)
            model.calibrate(scene)
        self.model = model
        self.data = prepare(scene, model.rf, model.n)
        self.rng = np.random.default_rng(cfg.seed)
        params = model.param_groups()
        lrs = {k: (cfg.lr_hash if k.startswith("hash.") else cfg.lr_mlp) for k in params}
        self.opt = Adam(params, lrs)
        self.cache: dict = {}
        self.iteration = 0

    def refresh(self):
        hashf = self.model.hashgrid.query(self.data.unit) if len(self.data) else None
        for lam in self.cfg.lambdas:
            self.cache[lam] = decoded_values(self.model, self.data, lam, hashf)

    def lambdas_for(self, it: int) -> tuple:
        if self.cfg.average_lambdas:
            return self.cfg.lambdas
        return (self.cfg.lambdas[it % len(self.cfg.lambdas)],)

    def draw(self, it: int):
        """Batch indices and noise for iteration ``it`` (advances the generator)."""
        n = len(self.data)
        b = min(self.cfg.batch_size, n)
        idx = np.sort(self.rng.choice(n, size=b, replace=False))
        out = []
        for lam in self.lambdas_for(it):
            u1 = self.rng.uniform(-0.5, 0.5, (b, self.model.feature_dim))
            u2 = self.rng.uniform(-0.5, 0.5, (b, self.model.dim(SCOF)))
            out.append((lam, u1, u2))
        return idx, out

    def step(self):
        it = self.iteration
        if it % self.cfg.refresh_every == 0 or not self.cache:
            self.refresh()
        idx, draws = self.draw(it)
        grads = None
        parts = []
        for lam, u1, u2 in draws:
            cf, cs = self.cache[lam]
            loss, g, _ = loss_and_grad(self.model, self.data, idx, lam, u1, u2, cf, cs,
                                       self.cfg.weights, mode="ste")
            parts.append(loss)
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] = grads[k] + g[k]
        k = len(draws)
        if k > 1:
            grads = {name: v / k for name, v in grads.items()}
        if not all(math.isfinite(p.total) for p in parts) or not all(
                np.all(np.isfinite(v)) for v in grads.values()):
            raise DivergenceError("non-finite loss or gradient", iteration=it)
        self.opt.step(grads, cosine_factor(it, self.cfg.iterations, self.cfg.lr_floor))
        self.iteration += 1
        return parts

    def run(self, log: TrainLog | None = None, progress=None) -> TrainLog:
        log = log or TrainLog()
        start = time.perf_counter()
        good = self.model.to_bytes()
        while self.iteration < self.cfg.iterations:
            it = self.iteration
            try:
                parts = self.step()
            except DivergenceError as exc:
                exc.checkpoint = good
                raise
            if it % self.cfg.log_every == 0 or self.iteration == self.cfg.iterations:
                for p in parts:
                    log.rows.append((it, p.lam, p.distortion, p.rate, p.total))
            if self.iteration % self.cfg.refresh_every == 0:
                good = self.model.to_bytes()
            if progress is not None:
                progress(it, parts)
        log.seconds += time.perf_counter() - start
        return log


def train(scene, cfg: TrainConfig | None = None, model: HemgsModel | None = None):
    """Fit a model to ``scene``; returns ``(model, TrainLog)``."""
    cfg = cfg or TrainConfig()
    trainer = Trainer(scene, cfg, model)
    log = trainer.run()
    return trainer.model, log


# ---------------------------------------------------------------- evaluation

@dataclass
class RdRow:
    lam: float
    total_bytes: int
    feature_bytes: int
    scof_bytes: int
    estimate_bits: float            # per-element ideal code length recorded at encode
    distortion: dict                # mean squared error per attribute element
    mean_step: dict

    @property
    def coded_bits(self) -> int:
        return 8 * (self.feature_bytes + self.scof_bytes)

    @property
    def estimate_gap(self) -> float:
        return self.coded_bits - self.estimate_bits


def eval_rd(scene, model: HemgsModel, lambdas=DEFAULT_LAMBDAS) -> list[RdRow]:
    """One row per lambda from real :func:`compress` calls, sorted by lambda."""
    rows = []
    scof = np.concatenate([scene.scaling, scene.offsets], axis=1)
    for lam in sorted(float(x) for x in lambdas):
        data, tr = compress_with_trace(scene, model, lam)
        p = tr.order
        f_hat = tr.feature.symbols * tr.feature.steps
        s_hat = tr.scaling_offsets.symbols * tr.scaling_offsets.steps
        err_f = scene.features[p] - f_hat
        err_s = scof[p] - s_hat
        dist = {"feature": _mse(err_f), "scaling": _mse(err_s[:, :SCALING_DIM]),
                "offsets": _mse(err_s[:, SCALING_DIM:])}
        steps = {"feature": _mean(tr.feature.steps),
                 "scaling_offsets": _mean(tr.scaling_offsets.steps)}
        est = float(tr.feature.bits.sum() + tr.scaling_offsets.bits.sum())
        rows.append(RdRow(lam, len(data), tr.section_bytes["FEAT"], tr.section_bytes["SCOF"], est,
                          dist, steps))
    return rows


def _mse(a) -> float:
    return float(np.mean(a ** 2)) if a.size else 0.0


def _mean(a) -> float:
    return float(np.mean(a)) if a.size else 0.0


def rate_modes(model: HemgsModel, scene, lam: float, seed: int = 0) -> tuple[float, float]:
    """Whole-scene bit estimates ``(noise relaxed, rounded)``."""
    data = prepare(scene, model.rf, model.n)
    cf, cs, s1, s2 = decoded_values(model, data, lam, with_steps=True)
    rng = np.random.default_rng(seed)
    idx = np.arange(len(data))
    u1 = rng.uniform(-0.5, 0.5, data.features.shape)
    u2 = rng.uniform(-0.5, 0.5, data.scof.shape)
    noisy = loss_and_grad(model, data, idx, lam, u1, u2, cf, cs, need_grad=False)[0]
    # an offset of (dequantized - value) / step makes the "noisy" value the bin centre
    r1, r2 = (cf - data.features) / s1, (cs - data.scof) / s2
    rounded = loss_and_grad(model, data, idx, lam, r1, r2, cf, cs, need_grad=False)[0]
    return noisy.rate * len(data), rounded.rate * len(data)


# ---------------------------------------------------------------- factorized baseline

def factorized_bits(symbols, steps) -> tuple[float, np.ndarray]:
    """Coded bits of ``symbols`` under mu = 0 and one fitted sigma per channel.

    Returns the total actual range-coder length in bits and the fitted sigmas.
    """
    from scipy.optimize import minimize_scalar

    from .entropy import element_bits, encode_gaussian_symbols

    symbols = np.asarray(symbols)
    steps = np.asarray(steps, dtype=np.float64)
    values = symbols * steps
    sigmas = np.empty(symbols.shape[1])
    for c in range(symbols.shape[1]):
        v, s = values[:, c], steps[:, c]
        spread = max(float(np.sqrt(np.mean(v ** 2))), 1e-3)

        def cost(log_sigma):
            return float(element_bits(0.0, math.exp(log_sigma), s, v).sum())

        res = minimize_scalar(cost, bounds=(math.log(1e-4), math.log(spread * 100)),
                              method="bounded", options={"xatol": 1e-6})
        sigmas[c] = math.exp(res.x)
    sig = np.broadcast_to(sigmas, symbols.shape)
    data, _ = encode_gaussian_symbols(symbols.ravel(),
                                      GaussianParams(np.zeros(symbols.size), sig.ravel()),
                                      steps.ravel())
    return 8.0 * len(data), sigmas
