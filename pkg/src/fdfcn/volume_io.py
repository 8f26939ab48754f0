"""Volume and label-map I/O: an uncompressed NIfTI-1 subset and the RV3 raw format.

Internal volumes are numpy arrays indexed ``[i, j, k]`` with shape
``(dim1, dim2, dim3)``; NIfTI stores the first index fastest, so the
payload is read in Fortran order.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, HeaderMismatch, TruncatedFile, UnknownLabel, UnsupportedDatatype

NIFTI_DTYPES = {2: "uint8", 4: "int16", 16: "float32"}
NIFTI_CODES = {v: k for k, v in NIFTI_DTYPES.items()}
_BITPIX = {"uint8": 8, "int16": 16, "float32": 32}
HEADER_SIZE = 348
VOX_OFFSET = 352


@dataclass
class VolumeHeader:
    dims: tuple
    dtype: str = "float32"
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.dtype not in _BITPIX:
            raise UnsupportedDatatype(f"element type {self.dtype!r} not in {sorted(_BITPIX)}")


def header_for(volume: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> VolumeHeader:
    return VolumeHeader(volume.shape, np.dtype(volume.dtype).name, spacing)


def read_nifti1(path) -> tuple:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header")
    if raw[344:348] != b"n+1\x00":
        raise BadMagic(f"{path}: magic {raw[344:348]!r} is not single-file NIfTI-1")
    endian = "<" if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE else ">"
    if struct.unpack(endian + "i", raw[:4])[0] != HEADER_SIZE:
        raise BadMagic(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, = struct.unpack(endian + "h", raw[70:72])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", raw[108:120])
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: NIfTI datatype code {datatype}")
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:ndim + 1]):
        raise UnsupportedDatatype(f"{path}: only single 3D volumes are supported (dim={dim})")
    dims = tuple(int(d) for d in dim[1:4])
    dtype = np.dtype(NIFTI_DTYPES[datatype]).newbyteorder(endian)
    start = int(vox_offset)
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(raw) < start + nbytes:
        raise TruncatedFile(f"{path}: payload has {len(raw) - start} bytes, expected {nbytes}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=start)
    vol = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = (vol.astype(np.float32) * slope + scl_inter).astype(np.float32)
    header = VolumeHeader(dims, vol.dtype.name, tuple(abs(p) or 1.0 for p in pixdim[1:4]))
    return header, np.ascontiguousarray(vol)


def write_nifti1(path, header: VolumeHeader | None, volume: np.ndarray) -> None:
    volume = np.asarray(volume)
    if header is None:
        header = header_for(volume)
    if tuple(volume.shape) != header.dims:
        raise HeaderMismatch(f"volume shape {volume.shape} != header dims {header.dims}")
    dtype = header.dtype
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *header.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, NIFTI_CODES[dtype], _BITPIX[dtype])
    struct.pack_into("<8f", hdr, 76, 1.0, *header.spacing, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<h", hdr, 254, 0)  # sform_code
    hdr[344:348] = b"n+1\x00"
    payload = volume.astype(np.dtype(dtype).newbyteorder("<")).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def _raw_path(path):
    base, _ = os.path.splitext(str(path))
    return base + ".raw"


def write_rv3(path, header: VolumeHeader | None, volume: np.ndarray) -> None:
    """Text sidecar ``path`` plus little-endian C-order payload next to it (``.raw``)."""
    volume = np.asarray(volume)
    if header is None:
        header = header_for(volume)
    if tuple(volume.shape) != header.dims:
        raise HeaderMismatch(f"volume shape {volume.shape} != header dims {header.dims}")
    with open(path, "w") as fh:
        fh.write("format = rv3\n")
        fh.write("dims = " + " ".join(map(str, header.dims)) + "\n")
        fh.write(f"dtype = {header.dtype}\n")
        fh.write("spacing = " + " ".join(repr(s) for s in header.spacing) + "\n")
    with open(_raw_path(path), "wb") as fh:
        fh.write(volume.astype(np.dtype(header.dtype).newbyteorder("<")).tobytes(order="C"))


def read_rv3(path) -> tuple:
    fields = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                fields[key.strip()] = value.strip()
    try:
        header = VolumeHeader(tuple(int(v) for v in fields["dims"].split()), fields["dtype"],
                              tuple(float(v) for v in fields.get("spacing", "1 1 1").split()))
    except KeyError as exc:
        raise HeaderMismatch(f"{path}: missing header field {exc}") from None
    dtype = np.dtype(header.dtype).newbyteorder("<")
    with open(_raw_path(path), "rb") as fh:
        payload = fh.read()
    expected = int(np.prod(header.dims)) * dtype.itemsize
    if len(payload) != expected:
        raise HeaderMismatch(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    vol = np.frombuffer(payload, dtype=dtype).reshape(header.dims).astype(dtype.newbyteorder("="))
    return header, vol


def read_volume(path) -> tuple:
    if str(path).endswith(".rv3"):
        return read_rv3(path)
    return read_nifti1(path)


def write_volume(path, volume: np.ndarray, header: VolumeHeader | None = None) -> None:
    if header is None:
        header = header_for(volume)
    if str(path).endswith(".rv3"):
        write_rv3(path, header, volume)
    else:
        write_nifti1(path, header, volume)


# class order follows the structure list used in reports; 0 is background
CLASS_NAMES = ("BG", "BS", "WM", "CT", "LV", "HI", "CWM", "CCT", "TH", "CA", "PU", "VE")
STRUCTURES = CLASS_NAMES[1:]

# FreeSurfer/CMA-style source labels (left, right) for each structure
DEFAULT_SOURCE_LABELS = {
    "BS": (16,),
    "WM": (2, 41),
    "CT": (3, 42),
    "LV": (4, 43),
    "HI": (17, 53),
    "CWM": (7, 46),
    "CCT": (8, 47),
    "TH": (10, 49),
    "CA": (11, 50),
    "PU": (12, 51),
    "VE": (28, 60),
}


@dataclass
class LabelRemap:
    table: dict                     # source label -> class index
    names: tuple = CLASS_NAMES

    def __post_init__(self):
        self.table = {int(k): int(v) for k, v in self.table.items()}
        bad = [v for v in self.table.values() if not 0 <= v < len(self.names)]
        if bad:
            raise ValueError(f"class indices {bad} outside [0, {len(self.names)})")

    @classmethod
    def default(cls) -> "LabelRemap":
        table = {src: CLASS_NAMES.index(name)
                 for name, srcs in DEFAULT_SOURCE_LABELS.items() for src in srcs}
        table[0] = 0
        return cls(table)

    @classmethod
    def identity(cls, classes: int = len(CLASS_NAMES)) -> "LabelRemap":
        return cls({c: c for c in range(classes)})

    @classmethod
    def load(cls, path) -> "LabelRemap":
        """Tab/space separated lines ``source_label  class`` (class as index or acronym)."""
        table = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                src, dst = line.split()[:2]
                table[int(src)] = CLASS_NAMES.index(dst) if dst in CLASS_NAMES else int(dst)
        return cls(table)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for src, dst in sorted(self.table.items()):
                fh.write(f"{src}\t{self.names[dst]}\n")


def remap_labels(labels: np.ndarray, remap: LabelRemap, strict: bool = False) -> np.ndarray:
    """Map source labels to class indices; unmapped labels go to background."""
    labels = np.asarray(labels)
    present = np.unique(labels)
    if strict:
        missing = [int(v) for v in present if int(v) not in remap.table]
        if missing:
            raise UnknownLabel(f"source labels {missing} are not in the remap table")
    out = np.zeros(labels.shape, dtype=np.uint8)
    for v in present:
        cls = remap.table.get(int(v), 0)
        if cls:
            out[labels == v] = cls
    return out
