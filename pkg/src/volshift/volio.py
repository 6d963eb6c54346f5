"""Volume containers and byte-level I/O (a NIfTI-1 subset and the VVOL1 format).

Arrays are held channel-major as ``[C, D, H, W]`` where D, H, W follow the
NIfTI i, j, k axes, so ``vol.data[c, i, j, k]`` is the voxel at index (i, j, k)
of channel c.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from volshift.errors import ParseError, ShapeError

log = logging.getLogger(__name__)

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"
NIFTI_DTYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32), 64: np.dtype(np.float64)}

VVOL_MAGIC = b"VVOL1\x00"
VVOL_VERSION = 1
_VVOL_HEAD = struct.Struct("<6s5I3fBB")


@dataclass
class Volume:
    """Multi-channel voxel grid with spacing and optional head/label masks."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None
    labels: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError(f"volume data must be [C, D, H, W], got shape {data.shape}")
        if data.shape[0] not in (1, 2):
            raise ShapeError(f"volume must have 1 or 2 channels, got {data.shape[0]}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")
        if self.mask is not None:
            self.mask = self._check_grid(self.mask, bool, "mask")
        if self.labels is not None:
            self.labels = self._check_grid(self.labels, np.uint8, "labels")

    def _check_grid(self, arr, dtype, what: str) -> np.ndarray:
        arr = np.asarray(arr)
        if arr.shape != self.extent:
            raise ShapeError(f"{what} extent {arr.shape} != volume extent {self.extent}")
        return np.ascontiguousarray(arr, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def with_data(self, data: np.ndarray, provenance: str | None = None) -> "Volume":
        """Same geometry, masks and labels around new voxel values."""
        return replace(self, data=data, provenance=self.provenance if provenance is None else provenance)


@dataclass
class DomainSet:
    """Named, ordered collection of volumes from one acquisition domain."""

    name: str
    volumes: list[Volume] = field(default_factory=list)

    def __post_init__(self):
        chans = {v.channels for v in self.volumes}
        if len(chans) > 1:
            raise ShapeError(f"domain {self.name!r} mixes channel counts {sorted(chans)}")

    def __len__(self) -> int:
        return len(self.volumes)

    def __iter__(self) -> Iterator[Volume]:
        return iter(self.volumes)

    def __getitem__(self, i: int) -> Volume:
        return self.volumes[i]

    def subset(self, idx: Sequence[int]) -> "DomainSet":
        return DomainSet(self.name, [self.volumes[i] for i in idx])

    def unlabeled(self) -> list[int]:
        return [i for i, v in enumerate(self.volumes) if v.labels is None]


# ----------------------------------------------------------------------------
# NIfTI-1


def _nifti_byteorder(buf: bytes) -> str:
    for bo in ("<", ">"):
        (ndim,) = struct.unpack_from(bo + "h", buf, 40)
        if 1 <= ndim <= 7:
            return bo
    raise ParseError("implausible dim[0] under both byte orders", offset=40)


def read_nifti(buf: bytes) -> Volume:
    """Parse an uncompressed single-file NIfTI-1 image into a :class:`Volume`."""
    buf = bytes(buf)
    if len(buf) < NIFTI_HEADER_SIZE:
        raise ParseError(f"header needs {NIFTI_HEADER_SIZE} bytes, got {len(buf)}", offset=len(buf))
    if buf[344:348] != NIFTI_MAGIC:
        raise ParseError(f"bad magic {buf[344:348]!r}", offset=344)
    bo = _nifti_byteorder(buf)
    dim = struct.unpack_from(bo + "8h", buf, 40)
    if dim[0] not in (3, 4):
        raise ParseError(f"dim[0]={dim[0]} unsupported (need 3 or 4)", offset=40)
    (code,) = struct.unpack_from(bo + "h", buf, 70)
    if code not in NIFTI_DTYPES:
        raise ParseError(f"datatype code {code} unsupported", offset=70)
    pixdim = struct.unpack_from(bo + "8f", buf, 76)
    vox_offset, slope, inter = struct.unpack_from(bo + "3f", buf, 108)
    qcode, scode = struct.unpack_from(bo + "2h", buf, 252)
    if qcode or scode:
        log.warning("NIfTI orientation (qform_code=%d, sform_code=%d) ignored", qcode, scode)

    nx, ny, nz = dim[1:4]
    nc = dim[4] if dim[0] == 4 else 1
    if min(nx, ny, nz, nc) < 1:
        raise ParseError(f"non-positive extent in dim {dim[:5]}", offset=42)
    dt = NIFTI_DTYPES[code].newbyteorder(bo)
    start = int(vox_offset)
    need = start + nx * ny * nz * nc * dt.itemsize
    if start < NIFTI_HEADER_SIZE or len(buf) < need:
        raise ParseError(f"data truncated: need {need} bytes, got {len(buf)}", offset=len(buf))
    raw = np.frombuffer(buf, dtype=dt, count=nx * ny * nz * nc, offset=start)
    # file order is Fortran (i fastest, channel slowest)
    arr = raw.reshape(nc, nz, ny, nx).transpose(0, 3, 2, 1)
    if not np.isfinite(slope) or slope == 0:
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    if slope == 1.0 and inter == 0.0:
        data = arr.astype(np.float32)
    else:
        data = (arr.astype(np.float64) * slope + inter).astype(np.float32)
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return Volume(data, spacing=spacing, provenance="nifti")


def encode_nifti(array: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0), datatype: int = 16,
                 scl_slope: float = 1.0, scl_inter: float = 0.0, byteorder: str = "<") -> bytes:
    """Encode a ``[C, D, H, W]`` (or ``[D, H, W]``) array as NIfTI-1 bytes.

    Values are stored as given in the chosen ``datatype``; the scale fields are
    written verbatim, so readers see ``stored * scl_slope + scl_inter``.
    """
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[None]
    if datatype not in NIFTI_DTYPES:
        raise ValueError(f"datatype code {datatype} unsupported")
    dt = NIFTI_DTYPES[datatype].newbyteorder(byteorder)
    nc, nx, ny, nz = arr.shape
    hdr = bytearray(NIFTI_VOX_OFFSET)
    bo = byteorder
    struct.pack_into(bo + "i", hdr, 0, NIFTI_HEADER_SIZE)
    ndim = 4 if nc > 1 else 3
    struct.pack_into(bo + "8h", hdr, 40, ndim, nx, ny, nz, nc, 1, 1, 1)
    struct.pack_into(bo + "2h", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into(bo + "8f", hdr, 76, 1.0, *[float(s) for s in spacing], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(bo + "3f", hdr, 108, float(NIFTI_VOX_OFFSET), scl_slope, scl_inter)
    hdr[123] = 2  # xyzt_units: millimetres
    hdr[344:348] = NIFTI_MAGIC
    body = np.ascontiguousarray(arr.transpose(0, 3, 2, 1), dtype=dt).tobytes()
    return bytes(hdr) + body


def write_nifti(volume: Volume) -> bytes:
    """float32 NIfTI-1 with ``vox_offset`` 352; 4-D with ``dim[4] = C`` when C > 1."""
    return encode_nifti(volume.data, volume.spacing, datatype=16)


def write_label_nifti(labels: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> bytes:
    """Label or mask grid as a uint8 NIfTI with values {0, 1}."""
    return encode_nifti((np.asarray(labels) > 0).astype(np.uint8), spacing, datatype=2)


def stack_channels(t1: Volume, flair: Volume) -> Volume:
    """Combine paired single-channel T1 and FLAIR images into one 2-channel volume."""
    if t1.channels != 1 or flair.channels != 1:
        raise ShapeError("stack_channels expects two single-channel volumes")
    if t1.extent != flair.extent:
        raise ShapeError(f"paired images differ in extent: {t1.extent} vs {flair.extent}")
    return Volume(np.concatenate([t1.data, flair.data]), spacing=t1.spacing, mask=t1.mask,
                  labels=t1.labels, provenance="stacked")


# ----------------------------------------------------------------------------
# VVOL1


def write_vvol(volume: Volume) -> bytes:
    c, d, h, w = volume.data.shape
    has_mask = volume.mask is not None
    head = _VVOL_HEAD.pack(VVOL_MAGIC, VVOL_VERSION, c, d, h, w, *volume.spacing, 0, int(has_mask))
    parts = [head, volume.data.astype("<f4", copy=False).tobytes()]
    if has_mask:
        parts.append(np.packbits(volume.mask.reshape(-1)).tobytes())
    return b"".join(parts)


def read_vvol(buf: bytes) -> Volume:
    buf = bytes(buf)
    if len(buf) < _VVOL_HEAD.size:
        raise ParseError(f"header needs {_VVOL_HEAD.size} bytes, got {len(buf)}", offset=len(buf))
    magic, version, c, d, h, w, sx, sy, sz, dtype, has_mask = _VVOL_HEAD.unpack_from(buf, 0)
    if magic != VVOL_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != VVOL_VERSION:
        raise ParseError(f"unsupported version {version}", offset=6)
    if dtype != 0:
        raise ParseError(f"unsupported dtype code {dtype}", offset=_VVOL_HEAD.size - 2)
    n = c * d * h * w
    mask_bytes = (d * h * w + 7) // 8 if has_mask else 0
    expected = _VVOL_HEAD.size + 4 * n + mask_bytes
    if len(buf) != expected:
        raise ParseError(f"expected {expected} bytes, got {len(buf)}", offset=min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_VVOL_HEAD.size).reshape(c, d, h, w)
    mask = None
    if has_mask:
        bits = np.frombuffer(buf, dtype=np.uint8, count=mask_bytes, offset=_VVOL_HEAD.size + 4 * n)
        mask = np.unpackbits(bits, count=d * h * w).reshape(d, h, w).astype(bool)
    return Volume(data.astype(np.float32), spacing=(sx, sy, sz), mask=mask, provenance="vvol")


# ----------------------------------------------------------------------------
# files


def save_volume(path: str | Path, volume: Volume) -> None:
    path = Path(path)
    blob = write_nifti(volume) if path.suffix == ".nii" else write_vvol(volume)
    path.write_bytes(blob)


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    blob = path.read_bytes()
    if path.suffix == ".nii":
        return read_nifti(blob)
    if path.suffix == ".vvol":
        return read_vvol(blob)
    raise ParseError(f"unknown volume extension {path.suffix!r} for {path}")


def load_labels(path: str | Path) -> np.ndarray:
    """Read a label mask (.nii) as a uint8 ``[D, H, W]`` array."""
    vol = read_nifti(Path(path).read_bytes())
    return (vol.data[0] > 0.5).astype(np.uint8)
