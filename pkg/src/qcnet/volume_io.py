"""Reading, writing and preprocessing of diffusion MRI volumes.

Scans are stored as single-file little-endian NIfTI-1 (``.nii``). Only the
header fields we rely on are interpreted: dim, datatype, pixdim, vox_offset,
scl_slope/scl_inter and the magic. Dataset catalogs are JSON-lines manifests
with one volume record per line.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

ARTIFACT = "artifact"
NORMAL = "normal"

HEADER_SIZE = 348
DATA_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes we accept
_DTYPES = {4: "<i2", 16: "<f4", 64: "<f8"}


class NiftiError(Exception):
    """Base class for NIfTI parsing failures."""


class BadMagic(NiftiError):
    pass


class UnsupportedDtype(NiftiError):
    pass


class TruncatedFile(NiftiError):
    pass


class DegenerateVolume(ValueError):
    pass


class ManifestError(Exception):
    pass


class ParseError(ManifestError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateId(ManifestError):
    def __init__(self, line, record_id):
        super().__init__(f"line {line}: duplicate id {record_id!r}")
        self.line = line
        self.record_id = record_id


@dataclass
class Volume3D:
    """A single 3D voxel grid, indexed ``voxels[x, y, z]``."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.voxels.shape

    def copy(self):
        return Volume3D(self.voxels.copy(), self.spacing)


@dataclass
class Scan4D:
    """An ordered stack of 3D volumes from one acquisition."""

    volumes: list
    subject_id: str = ""
    b_values: list | None = None

    def __post_init__(self):
        if not self.volumes:
            raise ValueError("scan must contain at least one volume")
        d0 = self.volumes[0].dims
        for v in self.volumes[1:]:
            if v.dims != d0:
                raise ValueError("all volumes in a scan must share dims")
        if self.b_values is not None and len(self.b_values) != len(self.volumes):
            raise ValueError("b_values length must equal volume count")

    @property
    def dims(self):
        return self.volumes[0].dims

    @property
    def spacing(self):
        return self.volumes[0].spacing


def read_nifti(path) -> Scan4D:
    """Parse a little-endian single-file NIfTI-1 scan.

    3D files come back as a one-volume :class:`Scan4D`. int16/float32/float64
    payloads are accepted; everything is held as float32 internally. A
    ``<scan>.bval`` sidecar is picked up when present.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise BadMagic(f"{path}: sizeof_hdr={sizeof_hdr}, not a little-endian NIfTI-1 file")
    magic = raw[344:348]
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    datatype = struct.unpack_from("<h", raw, 70)[0]
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)

    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise NiftiError(f"{path}: unsupported dim[0]={ndim}")
    if ndim > 4 and any(d > 1 for d in dim[5 : ndim + 1]):
        raise NiftiError(f"{path}: more than 4 non-trivial dimensions")
    nx, ny, nz = dim[1], dim[2], dim[3]
    nt = dim[4] if ndim >= 4 else 1
    if min(nx, ny, nz, nt) < 1:
        raise NiftiError(f"{path}: non-positive dimension in {dim[1:5]}")

    if datatype not in _DTYPES:
        raise UnsupportedDtype(f"{path}: datatype code {datatype} not supported")
    np_dtype = np.dtype(_DTYPES[datatype])

    n_values = nx * ny * nz * nt
    n_bytes = n_values * np_dtype.itemsize
    offset = max(vox_offset, HEADER_SIZE)
    if len(raw) < offset + n_bytes:
        raise TruncatedFile(
            f"{path}: header promises {n_bytes} data bytes at offset {offset}, "
            f"file has {len(raw) - offset}"
        )

    flat = np.frombuffer(raw, dtype=np_dtype, count=n_values, offset=offset)
    data = flat.reshape(nt, nz, ny, nx).astype(np.float32)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    if not np.isfinite(data).all():
        raise NiftiError(f"{path}: non-finite voxel values after load")

    spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
    volumes = [Volume3D(data[t].transpose(2, 1, 0).copy(), spacing) for t in range(nt)]

    b_values = None
    bval_path = path.with_suffix(".bval")
    if bval_path.exists():
        b_values = [float(tok) for tok in bval_path.read_text().split()]
        if len(b_values) != nt:
            raise NiftiError(
                f"{bval_path}: {len(b_values)} b-values for {nt} volumes"
            )

    return Scan4D(volumes, subject_id="", b_values=b_values)


def write_nifti(scan: Scan4D, path) -> None:
    """Write a scan as float32 little-endian NIfTI-1 (scl_slope=1).

    ``read_nifti`` inverts this exactly, bit for bit, on float32 data. A
    ``.bval`` sidecar is written alongside when the scan carries b-values.
    """
    path = Path(path)
    nx, ny, nz = scan.dims
    nt = len(scan.volumes)
    sx, sy, sz = scan.spacing

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 4, nx, ny, nz, nt, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(DATA_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = MAGIC

    data = np.stack(
        [v.voxels.astype(np.float32).transpose(2, 1, 0) for v in scan.volumes]
    )
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(b"\x00" * (DATA_OFFSET - HEADER_SIZE))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        if scan.b_values is not None:
            bvals = " ".join(format(b, "g") for b in scan.b_values)
            path.with_suffix(".bval").write_text(bvals + "\n")
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def extract_volumes(scan: Scan4D) -> list:
    """Volumes in acquisition order (the scan's 4th axis)."""
    return list(scan.volumes)


def _resize_inplane(voxels: np.ndarray, tx: int, ty: int) -> np.ndarray:
    nx, ny, nz = voxels.shape
    if (nx, ny) == (tx, ty):
        return voxels
    # Linear interpolation on an align-corners grid; z stays on the identity.
    xs = np.linspace(0.0, nx - 1.0, tx)
    ys = np.linspace(0.0, ny - 1.0, ty)
    zs = np.arange(nz, dtype=np.float64)
    grid = np.meshgrid(xs, ys, zs, indexing="ij")
    out = map_coordinates(voxels.astype(np.float64), grid, order=1, mode="nearest")
    return out.astype(voxels.dtype)


def _fit_z(voxels: np.ndarray, tz: int) -> np.ndarray:
    nz = voxels.shape[2]
    if nz == tz:
        return voxels
    if nz > tz:
        start = (nz - tz) // 2
        return voxels[:, :, start : start + tz]
    total = tz - nz
    before = total // 2
    after = total - before
    return np.pad(voxels, ((0, 0), (0, 0), (before, after)))


def preprocess(volume: Volume3D, target) -> Volume3D:
    """Conform a volume to the network input size and intensity scale.

    In-plane dims are resampled to (tx, ty); the slice axis is center-cropped
    or symmetrically zero-padded to tz (odd remainder trails). Intensities are
    divided by the volume's 99th percentile and clamped to [0, 2].
    """
    tx, ty, tz = target
    if min(tx, ty, tz) < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    if min(volume.dims) < 1:
        raise DegenerateVolume(f"degenerate input dims {volume.dims}")

    voxels = np.asarray(volume.voxels, dtype=np.float32)
    voxels = _resize_inplane(voxels, tx, ty)
    voxels = _fit_z(voxels, tz)

    p99 = float(np.percentile(voxels, 99))
    if p99 > 0.0:
        voxels = voxels / np.float32(p99)
    voxels = np.clip(voxels, 0.0, 2.0).astype(np.float32)
    return Volume3D(voxels, volume.spacing)


@dataclass
class VolumeRecord:
    """One labeled or predicted volume inside a scan."""

    id: str
    subject_id: str
    scan_path: str
    volume_index: int
    label: str | None = None
    predicted_prob: float | None = None

    def __post_init__(self):
        if self.volume_index < 0:
            raise ValueError(f"{self.id}: volume_index must be >= 0")
        if self.label is not None and self.label not in (ARTIFACT, NORMAL):
            raise ValueError(f"{self.id}: label must be {ARTIFACT!r} or {NORMAL!r}")
        if self.predicted_prob is not None and not 0.0 <= self.predicted_prob <= 1.0:
            raise ValueError(f"{self.id}: predicted_prob outside [0, 1]")

    def with_prob(self, p: float) -> "VolumeRecord":
        return dataclasses.replace(self, predicted_prob=p)

    def with_label(self, label: str | None) -> "VolumeRecord":
        return dataclasses.replace(self, label=label)

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "subject_id": self.subject_id,
            "scan_path": self.scan_path,
            "volume_index": self.volume_index,
        }
        if self.label is not None:
            obj["label"] = self.label
        if self.predicted_prob is not None:
            obj["predicted_prob"] = self.predicted_prob
        return json.dumps(obj)


@dataclass
class Manifest:
    """Catalog of volume records, one dataset per file."""

    records: list
    source_description: str = ""
    # directory manifest paths are resolved against; not serialized
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValueError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if not rec.subject_id:
                raise ValueError(f"{rec.id}: empty subject_id")

    def __len__(self):
        return len(self.records)

    def resolve_scan_path(self, record: VolumeRecord) -> Path:
        p = Path(record.scan_path)
        if not p.is_absolute() and self.base_dir is not None:
            return self.base_dir / p
        return p

    def subjects(self):
        return sorted({r.subject_id for r in self.records})


def load_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    seen = {}
    source = ""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from exc
            if not isinstance(obj, dict):
                raise ParseError(lineno, "record is not a JSON object")
            if "source_description" in obj and "id" not in obj:
                source = obj["source_description"]
                continue
            try:
                rec = VolumeRecord(
                    id=obj["id"],
                    subject_id=obj["subject_id"],
                    scan_path=obj["scan_path"],
                    volume_index=int(obj["volume_index"]),
                    label=obj.get("label"),
                    predicted_prob=obj.get("predicted_prob"),
                )
            except KeyError as exc:
                raise ParseError(lineno, f"missing field {exc.args[0]}") from exc
            except (TypeError, ValueError) as exc:
                raise ParseError(lineno, str(exc)) from exc
            if rec.id in seen:
                raise DuplicateId(lineno, rec.id)
            seen[rec.id] = lineno
            records.append(rec)
    return Manifest(records, source_description=source, base_dir=path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    """Write JSONL; relative scan paths are rewritten against the new location."""
    path = Path(path)
    dest = path.parent.resolve()
    lines = []
    if manifest.source_description:
        lines.append(json.dumps({"source_description": manifest.source_description}))
    for rec in manifest.records:
        sp = Path(rec.scan_path)
        if not sp.is_absolute() and manifest.base_dir is not None:
            resolved = (Path(manifest.base_dir) / sp).resolve()
            rec = dataclasses.replace(rec, scan_path=os.path.relpath(resolved, dest))
        lines.append(rec.to_json())
    path.write_text("\n".join(lines) + "\n")
