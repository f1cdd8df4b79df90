"""Anchor scene data model, file formats and the synthetic scene generator."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DuplicateVoxelError,
    HeaderError,
    NonFiniteError,
    OutOfBoundsError,
    SceneFormatError,
)

log = logging.getLogger(__name__)

MAGIC = b"A3GS"
VERSION = 1
ASCII_TAG = "A3GS-ASCII"
SCALING_DIM = 6

NATIVE = "native-binary"
ASCII = "ascii-table"

# magic, version, count, aabb[6], voxel_size, feature_dim, offsets_per_anchor
_HEADER = struct.Struct("<4sBI6ffII")


@dataclass(frozen=True)
class Anchor:
    location: np.ndarray
    feature: np.ndarray
    scaling: np.ndarray
    offsets: np.ndarray


class AnchorScene:
    """Immutable set of anchors plus the scene metadata.

    Attributes are held as float64 column blocks (one row per anchor); the
    per-anchor :class:`Anchor` view is available through indexing.
    """

    def __init__(self, locations, features, scaling, offsets, aabb, voxel_size,
                 feature_dim=None, offsets_per_anchor=None):
        locations = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
        n = locations.shape[0]
        if feature_dim is None:
            feature_dim = np.asarray(features).shape[-1]
        if offsets_per_anchor is None:
            offsets_per_anchor = np.asarray(offsets).shape[-1] // 3
        feature_dim = int(feature_dim)
        offsets_per_anchor = int(offsets_per_anchor)
        if feature_dim <= 0 or offsets_per_anchor <= 0:
            raise ValueError("feature_dim and offsets_per_anchor must be positive")
        features = np.asarray(features, dtype=np.float64).reshape(n, feature_dim)
        scaling = np.asarray(scaling, dtype=np.float64).reshape(n, SCALING_DIM)
        offsets = np.asarray(offsets, dtype=np.float64).reshape(n, 3 * offsets_per_anchor)
        aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        voxel_size = float(voxel_size)

        if not np.all(np.isfinite(aabb)) or not np.all(aabb[0] < aabb[1]):
            raise ValueError(f"degenerate or non-finite aabb {aabb.tolist()}")
        if not (voxel_size > 0 and math.isfinite(voxel_size)):
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        for name, arr in (("location", locations), ("feature", features),
                          ("scaling", scaling), ("offsets", offsets)):
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                raise ValueError(f"non-finite {name} at anchor {int(np.argmax(bad))}")
        outside = np.any((locations < aabb[0]) | (locations > aabb[1]), axis=1)
        if outside.any():
            raise ValueError(f"anchor {int(np.argmax(outside))} lies outside the aabb")

        for arr in (locations, features, scaling, offsets, aabb):
            arr.setflags(write=False)
        self.locations = locations
        self.features = features
        self.scaling = scaling
        self.offsets = offsets
        self.aabb = aabb
        self.voxel_size = voxel_size
        self.feature_dim = feature_dim
        self.offsets_per_anchor = offsets_per_anchor

    def __len__(self):
        return self.locations.shape[0]

    def __getitem__(self, i) -> Anchor:
        return Anchor(self.locations[i], self.features[i], self.scaling[i], self.offsets[i])

    @property
    def anchors(self) -> list[Anchor]:
        return [self[i] for i in range(len(self))]

    @property
    def extent(self) -> np.ndarray:
        return self.aabb[1] - self.aabb[0]

    @property
    def record_width(self) -> int:
        return 3 + self.feature_dim + SCALING_DIM + 3 * self.offsets_per_anchor

    def table(self) -> np.ndarray:
        """All per-anchor values as one (N, record_width) array."""
        return np.hstack([self.locations, self.features, self.scaling, self.offsets])

    def take(self, index) -> AnchorScene:
        index = np.asarray(index, dtype=np.int64)
        return AnchorScene(self.locations[index], self.features[index], self.scaling[index],
                           self.offsets[index], self.aabb, self.voxel_size,
                           self.feature_dim, self.offsets_per_anchor)

    def same_metadata(self, other: AnchorScene) -> bool:
        return (np.array_equal(self.aabb, other.aabb)
                and self.voxel_size == other.voxel_size
                and self.feature_dim == other.feature_dim
                and self.offsets_per_anchor == other.offsets_per_anchor)

    def __eq__(self, other):
        if not isinstance(other, AnchorScene):
            return NotImplemented
        return (self.same_metadata(other)
                and np.array_equal(self.locations, other.locations)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.scaling, other.scaling)
                and np.array_equal(self.offsets, other.offsets))

    __hash__ = None

    def __repr__(self):
        return (f"AnchorScene(n={len(self)}, feature_dim={self.feature_dim}, "
                f"offsets_per_anchor={self.offsets_per_anchor}, voxel_size={self.voxel_size})")


def from_table(table, aabb, voxel_size, feature_dim, offsets_per_anchor) -> AnchorScene:
    table = np.asarray(table, dtype=np.float64)
    d, k3 = feature_dim, 3 * offsets_per_anchor
    table = table.reshape(-1, 3 + d + SCALING_DIM + k3)
    return AnchorScene(table[:, :3], table[:, 3:3 + d], table[:, 3 + d:9 + d], table[:, 9 + d:],
                       aabb, voxel_size, feature_dim, offsets_per_anchor)


def voxel_indices(locations, aabb_min, voxel_size) -> np.ndarray:
    """Integer voxel coordinates of locations on the grid anchored at aabb_min."""
    return np.floor((np.asarray(locations) - aabb_min) / voxel_size + 0.5).astype(np.int64)


def dedupe_voxels(scene: AnchorScene, strict=False) -> AnchorScene:
    """Keep the first anchor of every voxel; raise instead when strict."""
    if len(scene) == 0:
        return scene
    vox = voxel_indices(scene.locations, scene.aabb[0], scene.voxel_size)
    _, first = np.unique(vox, axis=0, return_index=True)
    if first.size == len(scene):
        return scene
    if strict:
        dup = np.setdiff1d(np.arange(len(scene)), first)[0]
        raise DuplicateVoxelError(f"anchor {dup} shares a voxel with an earlier anchor")
    log.warning("dropping %d anchors that share an occupied voxel", len(scene) - first.size)
    return scene.take(np.sort(first))


# ---------------------------------------------------------------- file formats

def _infer_format(path) -> str:
    return ASCII if Path(path).suffix.lower() in (".txt", ".tsv", ".asc") else NATIVE


def save_scene(scene: AnchorScene, path, format=None) -> None:
    fmt = format or _infer_format(path)
    if fmt == NATIVE:
        data = _native_bytes(scene)
        Path(path).write_bytes(data)
    elif fmt == ASCII:
        Path(path).write_text(_ascii_text(scene))
    else:
        raise ValueError(f"unknown scene format {fmt!r}")


def load_scene(path, format=None, strict=False) -> AnchorScene:
    fmt = format or _infer_format(path)
    if fmt == NATIVE:
        scene = _parse_native(Path(path).read_bytes())
    elif fmt == ASCII:
        scene = _parse_ascii(Path(path).read_text())
    else:
        raise ValueError(f"unknown scene format {fmt!r}")
    return dedupe_voxels(scene, strict=strict)


def _native_bytes(scene: AnchorScene) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, len(scene), *scene.aabb.ravel().tolist(),
                          scene.voxel_size, scene.feature_dim, scene.offsets_per_anchor)
    return header + scene.table().astype("<f4").tobytes()


def _parse_native(data: bytes) -> AnchorScene:
    if len(data) < _HEADER.size:
        raise HeaderError("file shorter than the scene header")
    magic, version, n, *rest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise HeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise HeaderError(f"unsupported version {version}")
    aabb = np.array(rest[:6], dtype=np.float64).reshape(2, 3)
    voxel_size, d, k = rest[6], rest[7], rest[8]
    _check_header(aabb, voxel_size, d, k)
    width = 3 + d + SCALING_DIM + 3 * k
    body = data[_HEADER.size:]
    expected = n * width * 4
    if len(body) != expected:
        short = len(body) // (width * 4)
        raise SceneFormatError(
            f"anchor section is {len(body)} bytes, header promises {expected}", record=short)
    table = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float64)
    return _validated(table, aabb, voxel_size, d, k)


def _check_header(aabb, voxel_size, d, k):
    if d <= 0 or k <= 0:
        raise HeaderError(f"feature_dim={d} offsets_per_anchor={k} must be positive")
    if not np.all(np.isfinite(aabb)) or not math.isfinite(voxel_size):
        raise HeaderError("non-finite aabb or voxel size")
    if not np.all(aabb[0] < aabb[1]):
        raise HeaderError(f"degenerate aabb {aabb.tolist()}")
    if voxel_size <= 0:
        raise HeaderError(f"voxel_size must be positive, got {voxel_size}")


def _validated(table, aabb, voxel_size, d, k) -> AnchorScene:
    bad = ~np.all(np.isfinite(table), axis=1)
    if bad.any():
        raise NonFiniteError("non-finite value", record=int(np.argmax(bad)))
    loc = table[:, :3]
    outside = np.any((loc < aabb[0]) | (loc > aabb[1]), axis=1)
    if outside.any():
        raise OutOfBoundsError("anchor outside aabb", record=int(np.argmax(outside)))
    return from_table(table, aabb, voxel_size, d, k)


def _ascii_text(scene: AnchorScene) -> str:
    aabb = ",".join(repr(float(v)) for v in scene.aabb.ravel())
    lines = [f"{ASCII_TAG} version={VERSION} count={len(scene)} feature_dim={scene.feature_dim} "
             f"offsets_per_anchor={scene.offsets_per_anchor} voxel_size={scene.voxel_size!r} "
             f"aabb={aabb}"]
    for row in scene.table():
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _parse_ascii(text: str) -> AnchorScene:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(ASCII_TAG):
        raise HeaderError(f"missing {ASCII_TAG} header line")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
        n = int(fields["count"])
        d = int(fields["feature_dim"])
        k = int(fields["offsets_per_anchor"])
        voxel_size = float(fields["voxel_size"])
        aabb = np.array([float(v) for v in fields["aabb"].split(",")], dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise HeaderError(f"malformed header: {exc}") from None
    if aabb.size != 6:
        raise HeaderError("aabb needs 6 values")
    aabb = aabb.reshape(2, 3)
    _check_header(aabb, voxel_size, d, k)
    width = 3 + d + SCALING_DIM + 3 * k
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise SceneFormatError(f"header promises {n} rows, found {len(rows)}", record=len(rows))
    table = np.empty((n, width), dtype=np.float64)
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != width:
            raise SceneFormatError(f"expected {width} columns, found {len(parts)}", record=i)
        try:
            table[i] = [float(p) for p in parts]
        except ValueError:
            raise SceneFormatError("unparseable number", record=i) from None
    return _validated(table, aabb, voxel_size, d, k)


# ---------------------------------------------------------------- synthetic scenes

PATTERNS = ("uniform", "clustered", "planar")
CORRELATIONS = ("iid-gaussian", "spatially-correlated")


@dataclass(frozen=True)
class SynthSpec:
    n: int
    seed: int = 0
    pattern: str = "uniform"
    correlation: str = "spatially-correlated"
    feature_dim: int = 32
    offsets_per_anchor: int = 10
    voxel_size: float = 0.05
    density: float = 0.01   # occupied fraction of the domain for the uniform pattern


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def synth_scene(spec: SynthSpec) -> AnchorScene:
    """Deterministic synthetic anchor scene.

    Anchors sit on the voxel lattice (one per voxel). In the
    ``spatially-correlated`` mode every attribute is a smooth function of the
    anchor location (a shared random Fourier basis plus the local anchor
    spacing) with small iid noise on top; ``iid-gaussian`` draws everything
    independently. All values are float32-representable so native-binary
    round trips are exact.
    """
    if spec.n < 0:
        raise ValueError("anchor count must be non-negative")
    if spec.feature_dim <= 0 or spec.offsets_per_anchor <= 0:
        raise ValueError("feature_dim and offsets_per_anchor must be positive")
    if spec.pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {spec.pattern!r}")
    if spec.correlation not in CORRELATIONS:
        raise ValueError(f"unknown correlation model {spec.correlation!r}")
    if not (0 < spec.density <= 1):
        raise ValueError("density must lie in (0, 1]")

    rng = np.random.default_rng(spec.seed)
    v = float(np.float32(spec.voxel_size))
    side = max(2, math.ceil((max(spec.n, 1) / spec.density) ** (1 / 3)))
    vox = _sample_voxels(rng, spec.n, side, spec.pattern)
    origin = float(np.float32(-0.5 * side * v))
    aabb = _f32([[origin] * 3, [origin + (side - 1) * v] * 3])
    locations = _f32(aabb[0] + vox * v)
    # a float32 rounding of origin + i*v may land a hair outside the box
    locations = np.clip(locations, aabb[0], aabb[1])

    n, d, k3 = spec.n, spec.feature_dim, 3 * spec.offsets_per_anchor
    if spec.correlation == "iid-gaussian":
        features = rng.normal(0.0, 2.0, (n, d))
        scaling = rng.normal(-3.0, 0.5, (n, SCALING_DIM))
        offsets = rng.normal(0.0, 0.05, (n, k3))
    else:
        features, scaling, offsets = _correlated_attributes(rng, vox / (side - 1), vox, v, d, k3)
    return AnchorScene(locations, _f32(features), _f32(scaling), _f32(offsets), aabb, v,
                       spec.feature_dim, spec.offsets_per_anchor)


def _sample_voxels(rng, n, side, pattern) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if pattern == "uniform":
        flat = rng.choice(side ** 3, size=n, replace=False)
        return np.stack(np.unravel_index(flat, (side,) * 3), axis=1).astype(np.int64)

    if pattern == "clustered":
        n_clusters = max(1, n // 400)
        centers = rng.uniform(0.15, 0.85, (n_clusters, 3)) * (side - 1)
        spread = max(1.5, side / 20)

        def draw(m):
            c = centers[rng.integers(0, n_clusters, m)]
            return c + rng.normal(0.0, spread, (m, 3))
    else:  # planar
        n_planes = 3
        normals = rng.normal(size=(n_planes, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        basis = []
        for nrm in normals:
            a = np.cross(nrm, [1.0, 0.0, 0.0] if abs(nrm[0]) < 0.9 else [0.0, 1.0, 0.0])
            a /= np.linalg.norm(a)
            basis.append((a, np.cross(nrm, a), nrm))
        mid = (side - 1) / 2

        def draw(m):
            which = rng.integers(0, n_planes, m)
            st = rng.uniform(-0.7, 0.7, (m, 2)) * (side - 1)
            out = np.empty((m, 3))
            for p, (a, b, nrm) in enumerate(basis):
                sel = which == p
                out[sel] = (mid + st[sel, :1] * a + st[sel, 1:] * b
                            + rng.normal(0.0, 0.6, (sel.sum(), 1)) * nrm)
            return out

    seen: dict[tuple, None] = {}
    while len(seen) < n:
        pts = np.rint(draw(2 * (n - len(seen)) + 16)).astype(np.int64)
        pts = pts[np.all((pts >= 0) & (pts < side), axis=1)]
        for p in map(tuple, pts):
            if p not in seen:
                seen[p] = None
                if len(seen) == n:
                    break
    return np.array(list(seen), dtype=np.int64).reshape(n, 3)


def _correlated_attributes(rng, unit, vox, v, d, k3):
    """Attributes driven by a shared smooth field plus local geometry."""
    n = unit.shape[0]
    n_basis = 12
    freqs = rng.normal(0.0, 2.0, (n_basis, 3))
    phases = rng.uniform(0, 2 * np.pi, n_basis)
    basis = np.sin(2 * np.pi * unit @ freqs.T + phases)            # (n, n_basis)

    if n > 1:
        kk = min(7, n)
        dist, _ = cKDTree(vox.astype(np.float64)).query(vox, k=kk)
        spacing = dist[:, 1:].mean(axis=1)
    else:
        spacing = np.ones(n)
    log_spacing = np.log(spacing)                                   # voxel units
    geo = (log_spacing - 0.8)[:, None]

    w_f = rng.normal(0.0, 1.0 / np.sqrt(n_basis), (n_basis, d))
    w_fg = rng.normal(0.0, 1.0, (1, d))
    features = 2.5 * basis @ w_f + 1.2 * geo @ w_fg + rng.normal(0.0, 0.35, (n, d))

    w_s = rng.normal(0.0, 1.0 / np.sqrt(n_basis), (n_basis, SCALING_DIM))
    scaling = (np.log(v) + log_spacing[:, None] + 0.25 * basis @ w_s
               + rng.normal(0.0, 0.02, (n, SCALING_DIM)))

    w_o = rng.normal(0.0, 1.0 / np.sqrt(n_basis), (n_basis, k3))
    offsets = (v * spacing[:, None] * (0.6 * basis @ w_o)
               + rng.normal(0.0, 0.01, (n, k3)))
    return features, scaling, offsets
