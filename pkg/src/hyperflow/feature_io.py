"""Portable multi-layer feature-map container and its binary file format.

HFM1 layout (all integers little-endian, floats IEEE-754):

    bytes 0-3   magic "HFM1"
    u32         format_version (= 1)
    u32         image_id_len, then that many UTF-8 bytes
    u32         image_height
    u32         image_width
    u32         layer_count
    per layer:
        u32 layer_id, u32 C, u32 H, u32 W
        f32 stride_y, f32 stride_x, f32 offset_y, f32 offset_x, f32 rf_size
        C*H*W f32 values, row-major (C outermost, then H, then W)

The synthetic generator is reproducible across languages and is defined
exactly as follows.  A SplitMix64 stream seeded with ``s`` produces the
i-th word (i >= 0) as

    mix64(s + (i + 1) * 0x9E3779B97F4A7C15)            (mod 2**64)

where ``mix64(z)`` is

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Standard normals come from Box-Muller over consecutive word pairs
(x0, x1), with u = ((x >> 11) + 1) * 2**-53 in (0, 1]:

    r = sqrt(-2 ln u0);  z0 = r cos(2 pi u1);  z1 = r sin(2 pi u1)

Layer ``l`` of ``synth_stack(seed, ...)`` draws its C*H*W values (stored
as f32, C-major order) from the stream seeded with

    mix64(mix64(seed) ^ ((l + 1) * 0x9E3779B97F4A7C15 mod 2**64))

``planted_pair`` fills shifted-out cells from a second stream per layer,
seeded with ``mix64(layer_seed ^ 0xD1B54A32D192ED03)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"HFM1"
FORMAT_VERSION = 1

_GOLDEN = 0x9E3779B97F4A7C15
_NOISE_SALT = 0xD1B54A32D192ED03
_U64 = 0xFFFFFFFFFFFFFFFF


class StackFormatError(ValueError):
    """File is not an HFM1 stream (bad magic or unsupported version)."""


class StackCorruptionError(ValueError):
    """File declares more payload than it contains."""


class StackValidationError(ValueError):
    """Decoded or constructed stack violates a container invariant."""


@dataclass(frozen=True)
class LayerGeometry:
    """Affine map from feature-grid indices to image pixels.

    Cell (i, j) sits at image coordinate
    ``(offset_y + i * stride_y, offset_x + j * stride_x)``; ``rf_size``
    is the side length of the square receptive field centered there.
    """

    stride_y: float
    stride_x: float
    offset_y: float
    offset_x: float
    rf_size: float

    def __post_init__(self):
        if not (self.stride_y > 0 and self.stride_x > 0):
            raise StackValidationError(
                f"strides must be positive, got ({self.stride_y}, {self.stride_x})"
            )
        if not self.rf_size > 0:
            raise StackValidationError(f"rf_size must be positive, got {self.rf_size}")
        for name in ("stride_y", "stride_x", "offset_y", "offset_x", "rf_size"):
            if not math.isfinite(getattr(self, name)):
                raise StackValidationError(f"{name} is not finite")

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.offset_y + i * self.stride_y, self.offset_x + j * self.stride_x)


@dataclass(frozen=True)
class FeatureMap:
    """One layer's activation grid plus its image-space geometry."""

    layer_id: int
    values: np.ndarray  # (C, H, W) float32
    geometry: LayerGeometry

    def __post_init__(self):
        if self.layer_id < 0:
            raise StackValidationError(f"layer_id must be >= 0, got {self.layer_id}")
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise StackValidationError(
                f"layer {self.layer_id}: values must be (C, H, W) with positive dims, "
                f"got shape {v.shape}"
            )
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise StackValidationError(
                f"layer {self.layer_id}: non-finite value at flat index {int(bad[0])}"
            )
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class FeatureStack:
    """All exported layers of one image, sorted by ascending layer_id."""

    image_id: str
    image_height: int
    image_width: int
    layers: tuple[FeatureMap, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.image_height < 1 or self.image_width < 1:
            raise StackValidationError(
                f"image dims must be positive, got "
                f"({self.image_height}, {self.image_width})"
            )
        layers = tuple(self.layers)
        if not layers:
            raise StackValidationError("stack must contain at least one layer")
        ids = [m.layer_id for m in layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise StackValidationError(f"layer_ids must be strictly increasing, got {ids}")
        for m in layers:
            self._check_overhang(m)
        object.__setattr__(self, "layers", layers)

    def _check_overhang(self, m: FeatureMap):
        # Cell centers may overhang the image border by at most one
        # receptive field on each side.
        g = m.geometry
        for axis, dim, off, stride, n in (
            ("y", self.image_height, g.offset_y, g.stride_y, m.height),
            ("x", self.image_width, g.offset_x, g.stride_x, m.width),
        ):
            lo = off
            hi = off + (n - 1) * stride
            if lo < -g.rf_size or hi > dim + g.rf_size:
                raise StackValidationError(
                    f"layer {m.layer_id}: {axis}-centers [{lo}, {hi}] exceed "
                    f"[-rf, dim+rf] = [{-g.rf_size}, {dim + g.rf_size}]"
                )

    def layer(self, layer_id: int) -> FeatureMap:
        for m in self.layers:
            if m.layer_id == layer_id:
                return m
        raise KeyError(f"stack {self.image_id!r} has no layer {layer_id}")

    def layer_ids(self) -> tuple[int, ...]:
        return tuple(m.layer_id for m in self.layers)


def save_stack(stack: FeatureStack, path) -> None:
    """Write ``stack`` to ``path`` in the HFM1 format."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    ident = stack.image_id.encode("utf-8")
    parts.append(struct.pack("<I", len(ident)))
    parts.append(ident)
    parts.append(
        struct.pack("<III", stack.image_height, stack.image_width, len(stack.layers))
    )
    for m in stack.layers:
        g = m.geometry
        parts.append(
            struct.pack(
                "<IIIIfffff",
                m.layer_id,
                m.channels,
                m.height,
                m.width,
                g.stride_y,
                g.stride_x,
                g.offset_y,
                g.offset_x,
                g.rf_size,
            )
        )
        parts.append(np.ascontiguousarray(m.values, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_stack(path) -> FeatureStack:
    """Read an HFM1 file back into a :class:`FeatureStack`.

    Raises :class:`StackFormatError` for bad magic or version,
    :class:`StackCorruptionError` for truncated payload, and
    :class:`StackValidationError` if the decoded stack breaks an
    invariant (non-finite values, bad geometry, unordered layer ids).
    """
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise StackFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise StackCorruptionError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise StackFormatError(f"{path}: unsupported format_version {version}")
    (id_len,) = take("<I")
    if pos + id_len > len(buf):
        raise StackCorruptionError(f"{path}: truncated image_id")
    image_id = buf[pos : pos + id_len].decode("utf-8")
    pos += id_len
    img_h, img_w, layer_count = take("<III")

    layers = []
    for _ in range(layer_count):
        layer_id, c, h, w = take("<IIII")
        sy, sx, oy, ox, rf = take("<fffff")
        count = c * h * w
        nbytes = count * 4
        if pos + nbytes > len(buf):
            raise StackCorruptionError(
                f"{path}: layer {layer_id} declares {count} values "
                f"({nbytes} bytes) but only {len(buf) - pos} remain"
            )
        values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
        pos += nbytes
        layers.append(
            FeatureMap(
                layer_id=layer_id,
                values=values.reshape(c, h, w),
                geometry=LayerGeometry(sy, sx, oy, ox, rf),
            )
        )
    if pos != len(buf):
        raise StackCorruptionError(
            f"{path}: {len(buf) - pos} unexpected trailing bytes"
        )
    return FeatureStack(
        image_id=image_id, image_height=img_h, image_width=img_w, layers=tuple(layers)
    )


# --- deterministic synthetic stacks ---------------------------------------


def _mix64(z: int) -> int:
    z &= _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


def _splitmix_words(seed: int, n: int) -> np.ndarray:
    idx = np.arange(1, n + 1, dtype=np.uint64)
    z = (np.uint64(seed & _U64) + idx * np.uint64(_GOLDEN)).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _normals(seed: int, n: int) -> np.ndarray:
    """Standard normals via Box-Muller on a SplitMix64 stream (f32)."""
    pairs = (n + 1) // 2
    words = _splitmix_words(seed, 2 * pairs)
    u = ((words >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u0, u1 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u0))
    theta = (2.0 * np.pi) * u1
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].astype(np.float32)


def _layer_seed(seed: int, layer_id: int) -> int:
    return _mix64(_mix64(seed) ^ (((layer_id + 1) * _GOLDEN) & _U64))


LayerSpec = tuple[int, int, int, int, LayerGeometry]  # (layer_id, C, H, W, geometry)


def synth_stack(
    seed: int,
    spec: list[LayerSpec],
    image_dims: tuple[int, int],
    image_id: str = "synth",
) -> FeatureStack:
    """Deterministic standard-normal stack; pure function of its arguments."""
    if not spec:
        raise StackValidationError("spec must name at least one layer")
    img_h, img_w = image_dims
    layers = []
    for layer_id, c, h, w, geom in spec:
        vals = _normals(_layer_seed(seed, layer_id), c * h * w).reshape(c, h, w)
        layers.append(FeatureMap(layer_id=layer_id, values=vals, geometry=geom))
    return FeatureStack(
        image_id=image_id, image_height=img_h, image_width=img_w, layers=tuple(layers)
    )


def planted_pair(
    seed: int,
    spec: list[LayerSpec],
    shift: tuple[int, int],
    image_dims: tuple[int, int],
) -> tuple[FeatureStack, FeatureStack]:
    """Source stack plus a copy translated by ``shift`` feature cells.

    Target cell (i, j) holds source cell (i - dy, j - dx); cells with no
    source counterpart are filled with fresh noise from an independent
    per-layer stream, so the pair has a known ground-truth flow.
    """
    dy, dx = shift
    src = synth_stack(seed, spec, image_dims, image_id="planted-src")
    tgt_layers = []
    for m in src.layers:
        c, h, w = m.values.shape
        if abs(dy) >= h or abs(dx) >= w:
            raise StackValidationError(
                f"shift {shift} out of range for layer {m.layer_id} grid {h}x{w}"
            )
        noise_seed = _mix64(_layer_seed(seed, m.layer_id) ^ _NOISE_SALT)
        out = _normals(noise_seed, c * h * w).reshape(c, h, w).copy()
        # Rows/cols of the target that have a source counterpart.
        ti = slice(max(dy, 0), h + min(dy, 0))
        tj = slice(max(dx, 0), w + min(dx, 0))
        si = slice(max(-dy, 0), h - max(dy, 0))
        sj = slice(max(-dx, 0), w - max(dx, 0))
        out[:, ti, tj] = m.values[:, si, sj]
        tgt_layers.append(FeatureMap(layer_id=m.layer_id, values=out, geometry=m.geometry))
    tgt = FeatureStack(
        image_id="planted-tgt",
        image_height=src.image_height,
        image_width=src.image_width,
        layers=tuple(tgt_layers),
    )
    return src, tgt
