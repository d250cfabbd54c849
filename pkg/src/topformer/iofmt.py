"""Weight files, seeded initialization and netpbm image I/O.

TPFW layout (all integers little-endian, no padding)::

    b"TPFW" | u32 version=1 | u32 count
    count x ( u16 name_len | name (UTF-8) | u8 dtype (0=f32) | u8 rank
              | rank x u32 dims | f32 payload, row-major )
"""
from __future__ import annotations

import re
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .tensor import Tensor

MAGIC = b"TPFW"
VERSION = 1
DTYPE_F32 = 0

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightStore(Mapping):
    """Ordered, immutable name -> float32 array container."""

    def __init__(self, items=()):
        if isinstance(items, Mapping):
            items = items.items()
        self._d = {}
        for name, arr in items:
            if name in self._d:
                raise ValueError(f"duplicate weight name {name!r}")
            a = np.array(arr, dtype=np.float32)
            a.flags.writeable = False
            self._d[name] = a
        self._order = tuple(self._d)

    def __getitem__(self, name):
        return self._d[name]

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._d)

    def renamed(self, old, new) -> "WeightStore":
        return WeightStore((new if n == old else n, a) for n, a in self.items())

    def __repr__(self):
        return f"WeightStore({len(self)} tensors)"


def dumps(store: Mapping) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"weight name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 255:
            raise ValueError(f"rank {a.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> WeightStore:
    def need(off, n, what):
        if off + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", off)

    need(0, 4, "magic")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    need(4, 8, "header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 12
    items = []
    for _ in range(count):
        need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen, "name")
        try:
            name = buf[off : off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid UTF-8", off) from None
        off += nlen
        need(off, 2, "dtype/rank")
        dtype, rank = buf[off], buf[off + 1]
        if dtype != DTYPE_F32:
            raise FormatError(f"unsupported dtype code {dtype} for {name!r}", off)
        off += 2
        need(off, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(off, nbytes, f"payload of {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
        off += nbytes
        items.append((name, arr))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    try:
        return WeightStore(items)
    except ValueError as e:
        raise FormatError(str(e)) from None


def save_weights(store: Mapping, path) -> None:
    Path(path).write_bytes(dumps(store))


def load_weights(path) -> WeightStore:
    return loads(Path(path).read_bytes())


def random_init(model, seed: int = 0, randomize_bn: bool = False) -> WeightStore:
    """Seeded weights for every slot of ``model`` (unfolded layout).

    Conv weights are Kaiming-uniform with bound sqrt(6 / fan_in); biases are
    zero; BN is identity (gamma=1, beta=0, mean=0, var=1). ``randomize_bn``
    draws non-trivial BN parameters instead, which is what fold tests need.
    """
    rng = np.random.default_rng(seed)
    items = []
    for layer in model.graph.conv_layers():
        spec = layer.spec
        fan_in = spec.weight_dims[1] * spec.kernel[0] * spec.kernel[1]
        bound = np.sqrt(6.0 / fan_in)
        items.append((f"{layer.name}.conv.weight",
                      rng.uniform(-bound, bound, spec.weight_dims).astype(np.float32)))
        if spec.has_bias:
            items.append((f"{layer.name}.conv.bias", np.zeros(spec.out_ch, np.float32)))
        if layer.bn:
            c = spec.out_ch
            if randomize_bn:
                bn = (rng.uniform(0.5, 1.5, c), rng.uniform(-0.2, 0.2, c),
                      rng.uniform(-0.2, 0.2, c), rng.uniform(0.5, 2.0, c))
            else:
                bn = (np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))
            items += [(f"{layer.name}.bn.{f}", a.astype(np.float32))
                      for f, a in zip(("gamma", "beta", "mean", "var"), bn)]
    return WeightStore(items)


# --------------------------------------------------------------------------
# netpbm


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(buf: bytes, magic: bytes, nfields: int):
    if buf[:2] != magic:
        raise FormatError(f"expected {magic.decode()} netpbm, got {buf[:2]!r}", 0)
    off = 2
    vals = []
    for _ in range(nfields):
        m = _TOKEN.match(buf, off)
        if not m:
            raise FormatError("malformed header", off)
        try:
            vals.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"non-integer header field {m.group(1)!r}", m.start(1)) from None
        off = m.end()
    if off >= len(buf) or buf[off : off + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("missing whitespace after header", off)
    return vals, off + 1


def read_ppm_u8(path) -> np.ndarray:
    """Binary P6 with maxval 255 -> (h, w, 3) uint8."""
    buf = Path(path).read_bytes()
    (w, h, maxval), off = _read_header(buf, b"P6", 3)
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"bad image size {w}x{h}")
    n = w * h * 3
    if len(buf) - off < n:
        raise FormatError(f"truncated pixel data: need {n} bytes", off)
    return np.frombuffer(buf, np.uint8, n, off).reshape(h, w, 3)


def read_ppm(path, mean=IMAGENET_MEAN, std=IMAGENET_STD, multiple: int = 1) -> Tensor:
    """Load a P6 image as a normalized 1x3xHxW float32 tensor."""
    px = read_ppm_u8(path)
    h, w = px.shape[:2]
    if h % multiple or w % multiple:
        raise InputError(f"image {h}x{w} not divisible by {multiple}")
    x = px.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    x = (x - np.asarray(mean, np.float32)[:, None, None]) / np.asarray(std, np.float32)[:, None, None]
    return Tensor.wrap(x[None])


def write_ppm(pixels: np.ndarray, path) -> None:
    px = np.asarray(pixels, np.uint8)
    h, w = px.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(px).tobytes())


def write_pgm(indices: np.ndarray, path) -> None:
    """Binary P5 of per-pixel class indices (each must fit in a byte)."""
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise InputError(f"write_pgm expects an (h, w) index map, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() > 255):
        raise InputError("class indices exceed 255; PGM output supports at most 256 classes")
    h, w = idx.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + idx.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (w, h, maxval), off = _read_header(buf, b"P5", 3)
    if maxval > 255:
        raise FormatError(f"only 8-bit PGM supported, maxval {maxval}")
    if len(buf) - off < w * h:
        raise FormatError("truncated pixel data", off)
    return np.frombuffer(buf, np.uint8, w * h, off).reshape(h, w).copy()


def argmax_map(logits) -> np.ndarray:
    """(1, K, h, w) logits -> (h, w) class indices; requires K <= 256."""
    a = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    if a.shape[1] > 256:
        raise InputError(f"{a.shape[1]} classes do not fit in an 8-bit PGM (max 256)")
    return a[0].argmax(axis=0).astype(np.uint8)


def read_palette(path) -> np.ndarray:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"palette line {ln}: expected 'R G B', got {line!r}")
        try:
            rgb = [int(p) for p in parts]
        except ValueError:
            raise FormatError(f"palette line {ln}: non-integer entry") from None
        if any(c < 0 or c > 255 for c in rgb):
            raise FormatError(f"palette line {ln}: component out of 0..255")
        rows.append(rgb)
    if not rows:
        raise FormatError("palette is empty")
    return np.asarray(rows, np.uint8)


def default_palette(n: int = 150, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pal = rng.integers(0, 256, size=(n, 3), dtype=np.uint8)
    pal[0] = 0
    return pal


def write_palette(palette: np.ndarray, path) -> None:
    Path(path).write_text("".join(f"{r} {g} {b}\n" for r, g, b in np.asarray(palette, int)))


def write_ppm_colorized(indices: np.ndarray, palette: np.ndarray, path) -> None:
    idx = np.asarray(indices, np.int64)
    if idx.size and idx.max() >= len(palette):
        raise InputError(f"class index {idx.max()} outside palette of {len(palette)} entries")
    write_ppm(np.asarray(palette, np.uint8)[idx], path)
