"""File formats: ``.vdmp`` dumps, ``.manifest`` files, mask and heatmap exports.

Dump layout (all little-endian)::

    magic    4 bytes  b"VDMP"
    version  uint32   1
    kind     uint8    0 = token matrix, 1 = attention tensor
    dims     3 x uint32  (heads or 1, rows, cols)
    payload  float32, row-major, head-major
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .attention import AttentionTensor, Modality, TokenSequence
from .errors import (
    BadMagicError,
    DumpFormatError,
    GridError,
    ManifestError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"VDMP"
VERSION = 1
KIND_TOKENS = 0
KIND_ATTENTION = 1
_HEADER = struct.Struct("<4sIB3I")


@dataclass(frozen=True, eq=False)
class Dump:
    kind: int
    data: np.ndarray  # (heads, rows, cols) float32


def write_dump(data, kind):
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DumpFormatError(f"dump payload must be 2-D or 3-D, got {arr.ndim}-D")
    if kind not in (KIND_TOKENS, KIND_ATTENTION):
        raise DumpFormatError(f"unknown dump kind {kind}")
    if not np.isfinite(arr).all():
        raise DumpFormatError("dump payload contains non-finite values")
    header = _HEADER.pack(MAGIC, VERSION, kind, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_dump(buf):
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise TruncatedPayloadError("dump ends inside the magic bytes")
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    _, version, kind, heads, rows, cols = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"dump version {version}, reader supports {VERSION}")
    if kind not in (KIND_TOKENS, KIND_ATTENTION):
        raise DumpFormatError(f"unknown dump kind {kind}")
    need = 4 * heads * rows * cols
    payload = buf[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header declares {need}")
    if len(payload) > need:
        raise DumpFormatError(f"{len(payload) - need} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(heads, rows, cols)
    return Dump(kind, data)


def save_dump(path, data, kind):
    Path(path).write_bytes(write_dump(data, kind))


def load_dump(path):
    return read_dump(Path(path).read_bytes())


def load_tokens(path):
    dump = load_dump(path)
    if dump.kind != KIND_TOKENS or dump.data.shape[0] != 1:
        raise DumpFormatError(f"{path} is not a token matrix dump")
    return dump.data[0]


def load_attention(path):
    dump = load_dump(path)
    if dump.kind != KIND_ATTENTION:
        raise DumpFormatError(f"{path} is not an attention tensor dump")
    return AttentionTensor(dump.data)


@dataclass
class Manifest:
    """Token layout plus run parameters for one dumped sequence."""

    visual_indices: list
    n_tokens: int
    cls_index: int | None = None
    instr_last_index: int | None = None
    grid_shape: tuple | None = None
    tokens: str | None = None
    initial: int | None = None
    final: int = 192
    stages: int = 5
    decay: str = "geometric"
    strategy: str = "mean-visual"
    dom_ratio: float = 0.875
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.visual_indices = [int(i) for i in self.visual_indices]
        if not self.visual_indices:
            raise ManifestError("visual_indices is empty")
        if self.grid_shape is not None:
            self.grid_shape = tuple(int(x) for x in self.grid_shape)
            if len(self.grid_shape) != 2:
                raise ManifestError("grid_shape must be [rows, cols]")
        if self.initial is None:
            self.initial = len(self.visual_indices)
        self.check_bounds(self.n_tokens, self.n_tokens)

    def check_bounds(self, n_queries, n_keys):
        """Every declared index must address the dumped tensor."""
        bad = [i for i in self.visual_indices if not 0 <= i < n_keys]
        if bad:
            raise ManifestError(f"visual_indices outside 0..{n_keys - 1}: {bad[:5]}")
        for name in ("cls_index", "instr_last_index"):
            value = getattr(self, name)
            if value is not None and not 0 <= value < n_queries:
                raise ManifestError(f"{name}={value} outside 0..{n_queries - 1}")

    def modality(self):
        """Decoder-layout modality tags implied by the visual index range."""
        vis = np.asarray(self.visual_indices)
        mod = np.full(self.n_tokens, Modality.TEXT_PRE, dtype=np.int8)
        mod[vis.max() + 1:] = Modality.TEXT_INSTR
        mod[vis] = Modality.VISUAL
        return mod

    def to_yaml(self):
        doc = asdict(self)
        if self.grid_shape is not None:
            doc["grid_shape"] = list(self.grid_shape)
        return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None, width=100)

    @classmethod
    def from_yaml(cls, text):
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ManifestError(f"manifest is not valid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ManifestError("manifest must be a mapping")
        missing = [k for k in ("visual_indices", "n_tokens") if k not in doc]
        if missing:
            raise ManifestError(f"manifest lacks required fields: {', '.join(missing)}")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ManifestError(f"unknown manifest fields: {', '.join(sorted(unknown))}")
        return cls(**doc)


def save_manifest(path, manifest):
    Path(path).write_text(manifest.to_yaml())


def load_manifest(path):
    return Manifest.from_yaml(Path(path).read_text())


def sequence_from_dump(tokens, manifest):
    mod = manifest.modality()
    if tokens.shape[0] != len(mod):
        raise ManifestError(f"token dump has {tokens.shape[0]} rows, manifest declares {len(mod)}")
    return TokenSequence(tokens, mod, np.arange(len(mod)), manifest.grid_shape)


def _grid_size(grid_shape):
    rows, cols = (int(x) for x in grid_shape)
    if rows <= 0 or cols <= 0:
        raise GridError(f"grid shape must be positive, got {grid_shape}")
    return rows, cols


def export_mask(retained, grid_shape):
    """1/0 retention grid as CSV text and the sorted retained index list."""
    rows, cols = _grid_size(grid_shape)
    idx = sorted({int(i) for i in retained})
    bad = [i for i in idx if not 0 <= i < rows * cols]
    if bad:
        raise GridError(f"positions outside a {rows}x{cols} grid: {bad[:5]}")
    grid = np.zeros(rows * cols, dtype=np.int64)
    grid[idx] = 1
    text = "\n".join(",".join(str(v) for v in row) for row in grid.reshape(rows, cols))
    return text, idx


def export_heatmap(scores, grid_shape):
    """Binary PGM (P5) of min-max normalised scores plus a CSV of raw floats.

    A constant score vector renders as mid-gray (128).
    """
    rows, cols = _grid_size(grid_shape)
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if s.size != rows * cols:
        raise GridError(f"{s.size} scores do not fill a {rows}x{cols} grid")
    if not np.isfinite(s).all():
        raise GridError("scores must be finite")
    lo, hi = s.min(), s.max()
    if hi == lo:
        pix = np.full(s.size, 128, dtype=np.uint8)
    else:
        pix = np.rint(255.0 * (s - lo) / (hi - lo)).astype(np.uint8)
    pgm = f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes()
    grid = s.reshape(rows, cols)
    csv = "\n".join(",".join(repr(float(v)) for v in row) for row in grid) + "\n"
    return pgm, csv


def read_heatmap_csv(text):
    return np.array(
        [[float(v) for v in line.split(",")] for line in text.splitlines() if line.strip()]
    )


def read_pgm(buf):
    """Parse a P5 graymap written by ``export_heatmap``; returns a uint8 grid."""
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise GridError("not a binary P5 graymap")
    cols, rows = (int(x) for x in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8)
    if pix.size != rows * cols:
        raise GridError("graymap pixel count does not match its header")
    return pix.reshape(rows, cols)
