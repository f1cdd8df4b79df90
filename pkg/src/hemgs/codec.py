"""Progressive compression of anchor scenes and the bitstream container.

Layout::

    header | section table | LOC crc | FEAT crc | SCOF crc | SIDE crc

LOC holds the raw 16-bit quantized locations in coding order, FEAT and SCOF
the range-coded local features and scaling/offsets, SIDE the serialized model.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import rangecoder as rc
from .context import (ContextTable, dequantize_locations, quantize_locations,
                      select_contexts, coding_order, voxels_from_q)
from .entropy import decode_gaussian, encode_gaussian
from .errors import (BitstreamFormatError, CausalityError, ChecksumError, DigestMismatchError,
                     EscapeOverflowError, TruncatedStreamError)
from .model import (BASE_STEP, FEATURE, SCALING_DIM, SCOF, HemgsModel, anchor_distribution,
                    record_decoded,
                    kernel_workspace, location_features, normalized_lambda)
from .scene import AnchorScene

MAGIC = b"HMGS"
VERSION = 1
_HEADER = struct.Struct("<4sBIII6fff32s3d")
_ENTRY = struct.Struct("<4sII")
SECTIONS = (b"LOC ", b"FEAT", b"SCOF", b"SIDE")
_CRC = 4


def f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class StageTrace:
    steps: np.ndarray           # (N, dim) in coding order
    symbols: np.ndarray
    bits: np.ndarray            # per-element ideal cost under the coder tables
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class EncodeTrace:
    order: np.ndarray                   # input index of each coded anchor
    qlocations: np.ndarray              # (N, 3) uint16, input order
    feature: StageTrace
    scaling_offsets: StageTrace
    contexts: ContextTable
    section_bytes: dict = field(default_factory=dict)


# ---------------------------------------------------------------- stage kernels

_OK, _ESCAPE, _CAUSAL, _DECODE = 0, 1, 2, 3


@njit(cache=True)
def _quantize_one(v, s):
    k = np.rint(v / s)
    err = v - k * s
    if err > s / 2:
        k += 1.0
    elif err < -s / 2:
        k -= 1.0
    return np.int64(k)


@njit(cache=True)
def _encode_stage(values, steps, prior, nbr, offsets, counts, use_ctx, off_unit, s0, weights,
                  work, out, st, decoded, symbols, bits, mus, sigmas, status):
    n, d = values.shape
    mu = np.empty(d)
    sigma = np.empty(d)
    value_proj = np.zeros((n, weights[0].shape[1]))
    rc.enc_init(st)
    for t in range(n):
        if not anchor_distribution(t, prior, steps, nbr, offsets, counts, value_proj, use_ctx,
                                   off_unit, s0, weights, work, mu, sigma):
            status[0] = _CAUSAL
            status[1] = t
            return 0
        for a in range(d):
            s = steps[t, a]
            k = _quantize_one(values[t, a], s)
            b = encode_gaussian(st, out, k, mu[a], sigma[a], s)
            if b < 0:
                status[0] = _ESCAPE
                status[1] = t
                return 0
            symbols[t, a] = k
            decoded[t, a] = k * s
            bits[t, a] = b
            mus[t, a] = mu[a]
            sigmas[t, a] = sigma[a]
        if use_ctx:
            record_decoded(t, decoded, value_proj, weights)
    return rc.enc_finish(st, out)


@njit(cache=True)
def _decode_stage(data, steps, prior, nbr, offsets, counts, use_ctx, off_unit, s0, weights,
                  work, ds, decoded, status):
    n, d = decoded.shape
    mu = np.empty(d)
    sigma = np.empty(d)
    value_proj = np.zeros((n, weights[0].shape[1]))
    rc.dec_init(ds, data)
    for t in range(n):
        if not anchor_distribution(t, prior, steps, nbr, offsets, counts, value_proj, use_ctx,
                                   off_unit, s0, weights, work, mu, sigma):
            status[0] = _CAUSAL
            status[1] = t
            return
        for a in range(d):
            s = steps[t, a]
            k = decode_gaussian(ds, data, mu[a], sigma[a], s)
            if ds[3] != 0:
                status[0] = _DECODE
                return
            decoded[t, a] = k * s
        if use_ctx:
            record_decoded(t, decoded, value_proj, weights)
    rc.dec_check_end(ds, data)


# ---------------------------------------------------------------- shared model pass

@dataclass
class _Pass:
    """Everything both sides derive from the decoded locations."""

    model: HemgsModel
    lam: float
    agnostic: np.ndarray
    hash_feature: np.ndarray
    contexts: ContextTable

    def stage_inputs(self, stage, decoded_feature=None):
        m = self.model
        prior = m.hyperprior_feature(self.agnostic, self.hash_feature, decoded_feature, stage)
        steps = m.predict_step(prior, self.lam, stage)
        ctx = self.contexts
        return (np.ascontiguousarray(prior), np.ascontiguousarray(steps),
                np.ascontiguousarray(ctx.neighbors), np.ascontiguousarray(ctx.offsets),
                np.ascontiguousarray(ctx.counts), m.use_context, m.offset_unit(),
                BASE_STEP[stage], m.kernel_weights(stage),
                kernel_workspace(m, stage, ctx.n))


def _model_pass(model, q_ordered, order, aabb, voxel, lam) -> _Pass:
    feats = location_features(q_ordered, aabb, voxel)
    hashf = model.hashgrid.query(feats.unit) if len(order) else np.zeros((0, model.hashgrid.out_dim))
    return _Pass(model, lam, feats.agnostic, hashf, select_contexts(order, model.rf, model.n))


def _raise_status(status, stage):
    if status[0] == _ESCAPE:
        raise EscapeOverflowError(f"{stage} of anchor {status[1]} exceeds the raw escape range",
                                  anchor=int(status[1]))
    if status[0] == _CAUSAL:
        raise CausalityError(f"context of anchor {status[1]} references an undecoded anchor")


def _encode(values, inputs, stage):
    n, d = values.shape
    decoded = np.zeros((n, d))
    symbols = np.zeros((n, d), dtype=np.int64)
    bits = np.zeros((n, d))
    mus = np.zeros((n, d))
    sigmas = np.zeros((n, d))
    status = np.zeros(2, dtype=np.int64)
    if n * d == 0:
        return b"", decoded, StageTrace(inputs[1], symbols, bits, mus, sigmas)
    out = np.zeros(6 * n * d + 16, dtype=np.uint8)
    st = np.zeros(8, dtype=np.int64)
    end = _encode_stage(np.ascontiguousarray(values, dtype=np.float64), inputs[1], inputs[0],
                        *inputs[2:], out, st, decoded, symbols, bits, mus, sigmas, status)
    _raise_status(status, stage)
    return out[1:end].tobytes(), decoded, StageTrace(inputs[1], symbols, bits, mus, sigmas)


def _decode(data, n, d, inputs, stage):
    decoded = np.zeros((n, d))
    if n * d == 0:
        if data:
            raise BitstreamFormatError(f"{stage} section should be empty")
        return decoded
    ds = np.zeros(8, dtype=np.int64)
    status = np.zeros(2, dtype=np.int64)
    buf = np.frombuffer(data, dtype=np.uint8)
    _decode_stage(buf, inputs[1], inputs[0], *inputs[2:], ds, decoded, status)
    _raise_status(status, stage)
    rc.raise_decode_error(int(ds[3]))
    return decoded


# ---------------------------------------------------------------- public API

def _check_model(scene: AnchorScene, model: HemgsModel):
    if (model.feature_dim, model.offsets_per_anchor) != (scene.feature_dim,
                                                         scene.offsets_per_anchor):
        raise ValueError(
            f"model expects feature_dim={model.feature_dim} offsets={model.offsets_per_anchor}, "
            f"scene has {scene.feature_dim}/{scene.offsets_per_anchor}")


def compress(scene: AnchorScene, model: HemgsModel, lam: float) -> bytes:
    """Encode ``scene`` at rate parameter ``lam``."""
    return compress_with_trace(scene, model, lam)[0]


def compress_with_trace(scene: AnchorScene, model: HemgsModel, lam: float):
    """Like :func:`compress`, also returning the per-element coding record."""
    _check_model(scene, model)
    lam32 = float(f32(lam))
    normalized_lambda(lam32)
    side = model.to_bytes()
    model = HemgsModel.from_bytes(side)
    aabb = f32(scene.aabb)
    voxel = float(f32(scene.voxel_size))

    q = quantize_locations(scene.locations, aabb)
    order = coding_order(voxels_from_q(q, aabb, voxel))
    perm = order.perm
    q_ord = q[perm]
    mp = _model_pass(model, q_ord, order, aabb, voxel, lam32)

    feat_bytes, feat_dec, feat_trace = _encode(scene.features[perm], mp.stage_inputs(FEATURE),
                                               FEATURE)
    scof = np.concatenate([scene.scaling, scene.offsets], axis=1)[perm]
    scof_bytes, _, scof_trace = _encode(scof, mp.stage_inputs(SCOF, feat_dec), SCOF)

    rates = (float(feat_trace.bits.sum()), float(scof_trace.bits[:, :SCALING_DIM].sum()),
             float(scof_trace.bits[:, SCALING_DIM:].sum()))
    sections = [q_ord.astype("<u2").tobytes(), feat_bytes, scof_bytes, side]
    header = _HEADER.pack(MAGIC, VERSION, len(scene), scene.feature_dim,
                          scene.offsets_per_anchor, *aabb.ravel(), voxel, lam32,
                          hashlib.sha256(side).digest(), *rates)
    data = _assemble(header, sections)
    trace = EncodeTrace(perm, q, feat_trace, scof_trace, mp.contexts,
                        {name.decode().strip(): len(s) for name, s in zip(SECTIONS, sections)})
    return data, trace


def _assemble(header, sections) -> bytes:
    pos = len(header) + _ENTRY.size * len(sections)
    table = b""
    for name, body in zip(SECTIONS, sections):
        table += _ENTRY.pack(name, pos, len(body))
        pos += len(body) + _CRC
    out = [header, table]
    for body in sections:
        out += [body, struct.pack("<I", zlib.crc32(body))]
    return b"".join(out)


@dataclass(frozen=True)
class Header:
    version: int
    count: int
    feature_dim: int
    offsets_per_anchor: int
    aabb: np.ndarray
    voxel_size: float
    lam: float
    digest: bytes
    feature_bits: float
    scaling_bits: float
    offsets_bits: float


def read_header(data: bytes) -> Header:
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(bytes(data)):
            raise TruncatedStreamError("stream ends inside the header")
        raise BitstreamFormatError("not an HMGS bitstream")
    if len(data) < _HEADER.size:
        raise TruncatedStreamError("stream ends inside the header")
    f = _HEADER.unpack_from(data, 0)
    if f[1] != VERSION:
        raise BitstreamFormatError(f"unsupported version {f[1]}")
    aabb = np.array(f[5:11], dtype=np.float64).reshape(2, 3)
    return Header(f[1], f[2], f[3], f[4], aabb, f[11], f[12], f[13], f[14], f[15], f[16])


def read_sections(data: bytes, verify: bool = True) -> dict[str, bytes]:
    """Section bodies by name, with table and checksum validation."""
    data = bytes(data)
    read_header(data)
    base = _HEADER.size
    end_table = base + _ENTRY.size * len(SECTIONS)
    if len(data) < end_table:
        raise TruncatedStreamError("stream ends inside the section table")
    out = {}
    pos = end_table
    for i, expected in enumerate(SECTIONS):
        name, off, length = _ENTRY.unpack_from(data, base + i * _ENTRY.size)
        if name != expected or off != pos:
            raise BitstreamFormatError(f"section table entry {i} is malformed")
        stop = off + length + _CRC
        if stop > len(data):
            raise TruncatedStreamError(f"section {expected.decode().strip()} is truncated")
        body = data[off:off + length]
        (crc,) = struct.unpack_from("<I", data, off + length)
        if verify and crc != zlib.crc32(body):
            raise ChecksumError(f"checksum mismatch in section {expected.decode().strip()}")
        out[expected.decode().strip()] = body
        pos = stop
    if pos != len(data):
        raise BitstreamFormatError(f"{len(data) - pos} trailing bytes after the last section")
    return out


def decompress(data: bytes, model: HemgsModel | None = None) -> AnchorScene:
    """Rebuild the quantized scene, anchors in coding order."""
    data = bytes(data)
    hdr = read_header(data)
    sec = read_sections(data)
    if hashlib.sha256(sec["SIDE"]).digest() != hdr.digest:
        raise DigestMismatchError("side information does not match the header digest")
    if model is not None and model.rounded().digest() != hdr.digest:
        raise DigestMismatchError("supplied model differs from the one used to encode")
    model = HemgsModel.from_bytes(sec["SIDE"])
    n, dfeat, koff = hdr.count, hdr.feature_dim, hdr.offsets_per_anchor
    if (model.feature_dim, model.offsets_per_anchor) != (dfeat, koff):
        raise BitstreamFormatError("side model widths disagree with the header")
    if len(sec["LOC"]) != 6 * n:
        raise BitstreamFormatError("location section length does not match the anchor count")
    q = np.frombuffer(sec["LOC"], dtype="<u2").reshape(n, 3).astype(np.uint16)
    order = coding_order(voxels_from_q(q, hdr.aabb, hdr.voxel_size))
    if not np.array_equal(order.perm, np.arange(n)):
        raise BitstreamFormatError("locations are not stored in coding order")
    mp = _model_pass(model, q, order, hdr.aabb, hdr.voxel_size, hdr.lam)
    feat = _decode(sec["FEAT"], n, dfeat, mp.stage_inputs(FEATURE), FEATURE)
    scof = _decode(sec["SCOF"], n, SCALING_DIM + 3 * koff, mp.stage_inputs(SCOF, feat), SCOF)
    return AnchorScene(dequantize_locations(q, hdr.aabb), feat, scof[:, :SCALING_DIM],
                       scof[:, SCALING_DIM:], hdr.aabb, hdr.voxel_size, dfeat, koff)


# ---------------------------------------------------------------- storage report

REPORT_COLUMNS = ("Location", "Feature", "Scaling", "Offsets", "Others", "Total")


@dataclass(frozen=True)
class StorageReport:
    count: int
    lam: float
    feature_dim: int
    offsets_per_anchor: int
    file_bytes: int
    header_bytes: int
    section_bytes: dict
    feature_bits_estimate: float
    scaling_bits_estimate: float
    offsets_bits_estimate: float

    @property
    def scaling_bytes(self) -> float:
        total = self.scaling_bits_estimate + self.offsets_bits_estimate
        share = self.scaling_bits_estimate / total if total > 0 else 0.0
        return self.section_bytes["SCOF"] * share

    @property
    def offsets_bytes(self) -> float:
        return self.section_bytes["SCOF"] - self.scaling_bytes

    @property
    def others_bytes(self) -> int:
        """Side information plus container overhead (header, table, checksums)."""
        return self.section_bytes["SIDE"] + self.header_bytes

    def columns(self) -> dict[str, float]:
        return {"Location": self.section_bytes["LOC"], "Feature": self.section_bytes["FEAT"],
                "Scaling": self.scaling_bytes, "Offsets": self.offsets_bytes,
                "Others": self.others_bytes, "Total": self.file_bytes}

    @property
    def bits_per_anchor(self) -> float:
        return 8.0 * self.file_bytes / self.count if self.count else 0.0

    def rows(self) -> list[tuple[str, object]]:
        rows = [("anchors", self.count), ("lambda", self.lam),
                ("feature_dim", self.feature_dim),
                ("offsets_per_anchor", self.offsets_per_anchor)]
        rows += [(f"bytes.{k}", v) for k, v in self.section_bytes.items()]
        rows += [("bytes.header", self.header_bytes)]
        rows += [(f"storage.{k}", v) for k, v in self.columns().items()]
        rows += [("bits_per_anchor", self.bits_per_anchor),
                 ("estimate_bits.feature", self.feature_bits_estimate),
                 ("estimate_bits.scaling", self.scaling_bits_estimate),
                 ("estimate_bits.offsets", self.offsets_bits_estimate)]
        return rows

    def to_delimited(self, sep: str = "\t") -> str:
        return "\n".join(f"{k}{sep}{_fmt(v)}" for k, v in self.rows()) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def inspect(data: bytes) -> StorageReport:
    data = bytes(data)
    hdr = read_header(data)
    sec = read_sections(data, verify=False)
    sizes = {k: len(v) for k, v in sec.items()}
    header_bytes = len(data) - sum(sizes.values())
    return StorageReport(hdr.count, hdr.lam, hdr.feature_dim, hdr.offsets_per_anchor, len(data),
                         header_bytes, sizes, hdr.feature_bits, hdr.scaling_bits,
                         hdr.offsets_bits)
