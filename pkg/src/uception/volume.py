"""Volumes on disk: MetaImage (.mha/.mhd) subset and the internal UVOL raw
format.

A Volume is a 3-D scalar field ordered (depth, height, width) with
per-axis physical spacing in mm. MetaImage stores extents and spacing
x-fastest, so DimSize/ElementSpacing are reversed relative to Volume
axes; the binary payload is already C-order (z, y, x) and maps straight
through.

The parser never lets a malformed file escape as anything but a
MetaImageError: corrupt headers and short payloads are data, not bugs.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MetaImageError,
    MetaImageMissingKey,
    MetaImagePayloadMismatch,
    MetaImageUnsupportedType,
    ShapeError,
)

ELEMENT_DTYPES = {
    "MET_UCHAR": "u1",
    "MET_SHORT": "i2",
    "MET_USHORT": "u2",
    "MET_FLOAT": "f4",
}

UVOL_MAGIC = b"UVOL"


@dataclass
class Volume:
    """Scalar field (d, h, w) of float32 with spacing (sd, sh, sw) in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3-axis, got ndim={self.data.ndim}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ShapeError(f"voxel spacing must be 3 positive reals, got {self.spacing}")

    @property
    def extents(self):
        return self.data.shape


@dataclass
class MetaImageHeader:
    ObjectType: str = "Image"
    NDims: int = 3
    DimSize: tuple[int, int, int] = (0, 0, 0)  # x, y, z as written in the file
    ElementType: str = "MET_FLOAT"
    ElementSpacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # x, y, z
    ElementByteOrderMSB: bool = False
    ElementDataFile: str = "LOCAL"
    spacing_present: bool = False  # whether ElementSpacing was in the file
    extra: dict = field(default_factory=dict)


def _split_header(blob):
    """Return (key-value pairs in order, payload bytes after ElementDataFile)."""
    pairs = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise MetaImageMissingKey("ElementDataFile",
                                      "header ended before ElementDataFile")
        line = blob[pos:nl]
        pos = nl + 1
        try:
            text = line.decode("ascii").strip().rstrip("\r")
        except UnicodeDecodeError as exc:
            raise MetaImageError(f"non-ASCII bytes in header line: {line[:40]!r}") from exc
        if not text:
            continue
        if "=" not in text:
            raise MetaImageError(f"malformed header line (no '='): {text[:60]!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise MetaImageError(f"malformed header line (empty key): {text[:60]!r}")
        pairs.append((key, value))
        if key == "ElementDataFile":
            return pairs, blob[pos:]


def _parse_ints(value, key, count):
    parts = value.split()
    if len(parts) != count:
        raise MetaImageMissingKey(key, f"{key} needs {count} integers, got {value!r}")
    try:
        out = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise MetaImageMissingKey(key, f"{key} has non-integer entry in {value!r}") from exc
    if any(v < 1 for v in out):
        raise MetaImageMissingKey(key, f"{key} entries must be >= 1, got {out}")
    return out


def _parse_floats(value, key, count):
    parts = value.split()
    if len(parts) != count:
        raise MetaImageMissingKey(key, f"{key} needs {count} reals, got {value!r}")
    try:
        out = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise MetaImageMissingKey(key, f"{key} has non-numeric entry in {value!r}") from exc
    if any(not np.isfinite(v) or v <= 0 for v in out):
        raise MetaImageMissingKey(key, f"{key} entries must be finite positive, got {out}")
    return out


def _parse_bool(value, key):
    v = value.strip().lower()
    if v in ("true", "1"):
        return True
    if v in ("false", "0"):
        return False
    raise MetaImageMissingKey(key, f"{key} must be True or False, got {value!r}")


def read_metaimage(blob, raw_payload=None):
    """Parse MetaImage bytes into (Volume, MetaImageHeader).

    ``raw_payload`` supplies the pixel bytes when ElementDataFile names an
    external file (the .mhd + .raw layout); LOCAL payloads follow the
    header in ``blob``.
    """
    if not isinstance(blob, (bytes, bytearray, memoryview)):
        raise MetaImageError(f"expected bytes, got {type(blob).__name__}")
    pairs, local_payload = _split_header(bytes(blob))
    header = MetaImageHeader()
    seen = {}
    for key, value in pairs:
        seen[key] = value
    if "NDims" not in seen:
        raise MetaImageMissingKey("NDims")
    try:
        ndims = int(seen["NDims"])
    except ValueError as exc:
        raise MetaImageMissingKey("NDims", f"NDims is not an integer: {seen['NDims']!r}") from exc
    if ndims != 3:
        raise MetaImageMissingKey("NDims", f"only NDims = 3 is supported, got {ndims}")
    header.NDims = 3
    if "DimSize" not in seen:
        raise MetaImageMissingKey("DimSize")
    header.DimSize = _parse_ints(seen["DimSize"], "DimSize", 3)
    if "ElementType" not in seen:
        raise MetaImageMissingKey("ElementType")
    header.ElementType = seen["ElementType"]
    if header.ElementType not in ELEMENT_DTYPES:
        raise MetaImageUnsupportedType(header.ElementType)
    if "ElementSpacing" in seen:
        header.ElementSpacing = _parse_floats(seen["ElementSpacing"], "ElementSpacing", 3)
        header.spacing_present = True
    if "ElementByteOrderMSB" in seen:
        header.ElementByteOrderMSB = _parse_bool(seen["ElementByteOrderMSB"],
                                                 "ElementByteOrderMSB")
    if "ObjectType" in seen:
        header.ObjectType = seen["ObjectType"]
    header.ElementDataFile = seen["ElementDataFile"]
    header.extra = {k: v for k, v in seen.items()
                    if k not in ("ObjectType", "NDims", "DimSize", "ElementType",
                                 "ElementSpacing", "ElementByteOrderMSB",
                                 "ElementDataFile")}

    if header.ElementDataFile == "LOCAL":
        payload = local_payload
    else:
        if raw_payload is None:
            raise MetaImageError(
                f"ElementDataFile = {header.ElementDataFile!r} but no external payload given"
            )
        payload = raw_payload

    base = ELEMENT_DTYPES[header.ElementType]
    dtype = np.dtype((">" if header.ElementByteOrderMSB else "<") + base)
    nx, ny, nz = header.DimSize
    expected = nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise MetaImagePayloadMismatch(expected, len(payload))
    raw = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    sx, sy, sz = header.ElementSpacing
    volume = Volume(raw.astype(np.float32), (sz, sy, sx))
    return volume, header


def write_metaimage(volume, element_type="MET_FLOAT"):
    """Serialize a Volume as a single-file (LOCAL payload) MetaImage."""
    if element_type not in ELEMENT_DTYPES:
        raise MetaImageUnsupportedType(element_type)
    d, h, w = volume.extents
    sd, sh, sw = volume.spacing
    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        f"DimSize = {w} {h} {d}\n"
        f"ElementType = {element_type}\n"
        f"ElementSpacing = {sw!r} {sh!r} {sd!r}\n"
        "ElementByteOrderMSB = False\n"
        "ElementDataFile = LOCAL\n"
    )
    dtype = np.dtype("<" + ELEMENT_DTYPES[element_type])
    if element_type == "MET_FLOAT":
        payload = np.ascontiguousarray(volume.data, dtype=dtype).tobytes()
    else:
        info = np.iinfo(dtype)
        clipped = np.clip(np.rint(volume.data), info.min, info.max)
        payload = clipped.astype(dtype).tobytes()
    return header.encode("ascii") + payload


def save_metaimage(volume, path, element_type="MET_FLOAT"):
    """Write .mha (LOCAL) or .mhd plus a sibling .raw, chosen by extension."""
    path = os.fspath(path)
    if path.endswith(".mhd"):
        blob = write_metaimage(volume, element_type)
        pairs, payload = _split_header(blob)
        raw_name = os.path.basename(path)[:-4] + ".raw"
        lines = []
        for key, value in pairs:
            if key == "ElementDataFile":
                value = raw_name
            lines.append(f"{key} = {value}")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(os.path.join(os.path.dirname(path) or ".", raw_name), "wb") as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(write_metaimage(volume, element_type))
    return path


def load_metaimage(path):
    """Read .mha or .mhd (+ sibling raw named by ElementDataFile)."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    pairs, _ = _split_header(blob)
    data_file = dict(pairs).get("ElementDataFile", "LOCAL")
    if data_file == "LOCAL":
        return read_metaimage(blob)
    if os.path.isabs(data_file) or ".." in data_file.replace("\\", "/").split("/"):
        raise MetaImageError(f"refusing non-relative ElementDataFile {data_file!r}")
    sibling = os.path.join(os.path.dirname(path) or ".", data_file)
    if not os.path.exists(sibling):
        raise MetaImageError(f"external payload file not found: {sibling}")
    with open(sibling, "rb") as fh:
        payload = fh.read()
    return read_metaimage(blob, raw_payload=payload)


def volume_to_mask(volume):
    """Ground-truth convention: any value above 0.5 is foreground."""
    return volume.data > 0.5


# ---------------------------------------------------------------------------
# UVOL: trivial internal raw format
# magic "UVOL", u32 d h w, f64 spacing (sd sh sw), then d*h*w float32 LE.


def write_uvol(volume, path=None):
    blob = b"".join([
        UVOL_MAGIC,
        struct.pack("<3I", *volume.extents),
        struct.pack("<3d", *volume.spacing),
        np.ascontiguousarray(volume.data, dtype="<f4").tobytes(),
    ])
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    return blob


def read_uvol(source):
    if isinstance(source, bytes):
        blob = source
    else:
        with open(source, "rb") as fh:
            blob = fh.read()
    if len(blob) < 4 + 12 + 24 or blob[:4] != UVOL_MAGIC:
        raise MetaImageError("not a UVOL blob")
    d, h, w = struct.unpack("<3I", blob[4:16])
    spacing = struct.unpack("<3d", blob[16:40])
    expected = 40 + d * h * w * 4
    if len(blob) != expected:
        raise MetaImagePayloadMismatch(expected - 40, len(blob) - 40)
    data = np.frombuffer(blob[40:], dtype="<f4").reshape(d, h, w)
    return Volume(data, spacing)
