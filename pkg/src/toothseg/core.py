"""Volumes, landmarks, masks, dataset manifests and their file formats.

Voxel coordinates follow the voxel-center convention: index ``i`` along an
axis is the center of voxel ``i``, so a volume of ``n`` voxels spans the
continuous range ``[-0.5, n - 0.5]``.
"""
from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_TEETH = 32
MISSING = (-1.0, -1.0, -1.0)


class ToothsegError(Exception):
    """Base class for package errors."""


class VolumeFormatError(ToothsegError, ValueError):
    pass


class LandmarkFormatError(ToothsegError, ValueError):
    pass


class ManifestSchemaError(ToothsegError, ValueError):
    pass


def _as_triple(values, name: str, dtype=float) -> tuple:
    t = tuple(dtype(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    return t


def _frozen_view(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class Volume3D:
    """3D float32 grid indexed ``data[x, y, z]`` with spacing in mm/voxel."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"volume shape components must be >= 1, got {arr.shape}")
        spacing = _as_triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", _frozen_view(arr))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


class SegMask(Volume3D):
    """Binary volume; every voxel is exactly 0 or 1."""

    def __post_init__(self):
        super().__post_init__()
        d = self.data
        if not np.all((d == 0) | (d == 1)):
            raise ValueError("SegMask values must be 0 or 1")

    @classmethod
    def from_bool(cls, mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "SegMask":
        return cls(np.asarray(mask, dtype=bool).astype(np.float32), spacing, origin)

    def as_bool(self) -> np.ndarray:
        return self.data > 0.5

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """32 tooth landmarks in voxel units of ``reference_shape``.

    Missing teeth hold the sentinel ``(-1, -1, -1)``. ``reference_shape`` may
    be ``None`` when the grid is unknown (e.g. a bare CSV); bounds are then
    not checked.
    """

    coords: np.ndarray
    reference_shape: tuple | None = None

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        if c.shape != (NUM_TEETH, 3):
            raise ValueError(f"landmark coords must have shape ({NUM_TEETH}, 3), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("landmark coords must be finite")
        ref = None if self.reference_shape is None else _as_triple(self.reference_shape, "reference_shape", int)
        if ref is not None and min(ref) < 1:
            raise ValueError(f"reference_shape must be positive, got {ref}")
        missing = np.all(c == -1.0, axis=1)
        if ref is not None:
            present = c[~missing]
            upper = np.asarray(ref, dtype=np.float64)
            if np.any(present < 0) or np.any(present >= upper):
                bad = np.flatnonzero(~missing)[np.any((present < 0) | (present >= upper), axis=1)]
                raise ValueError(f"landmarks {bad.tolist()} lie outside [0, {ref})")
        object.__setattr__(self, "coords", _frozen_view(c))
        object.__setattr__(self, "reference_shape", ref)

    @classmethod
    def empty(cls, reference_shape=None) -> "LandmarkSet":
        return cls(np.full((NUM_TEETH, 3), -1.0), reference_shape)

    @property
    def valid(self) -> np.ndarray:
        """Boolean mask of teeth that are present."""
        return ~np.all(self.coords == -1.0, axis=1)

    def is_missing(self, i: int) -> bool:
        return not bool(self.valid[i])

    def __len__(self):
        return NUM_TEETH

    def __getitem__(self, i):
        return self.coords[i]

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return self.reference_shape == other.reference_shape and bool(np.array_equal(self.coords, other.coords))

    __hash__ = None


JAWS = ("upper", "lower")


@dataclass(frozen=True)
class CaseRecord:
    image_path: str
    landmarks_path: str
    lesion_mask_path: str
    jaw_label: tuple
    has_lesion: tuple
    cuboids_path: str | None = None
    case_id: str | None = None

    def __post_init__(self):
        jaws = tuple(str(j) for j in self.jaw_label)
        lesions = tuple(bool(b) for b in self.has_lesion)
        if len(jaws) != NUM_TEETH or len(lesions) != NUM_TEETH:
            raise ManifestSchemaError(f"per-tooth arrays must have length {NUM_TEETH}")
        if any(j not in JAWS for j in jaws):
            raise ManifestSchemaError(f"jaw labels must be one of {JAWS}")
        object.__setattr__(self, "jaw_label", jaws)
        object.__setattr__(self, "has_lesion", lesions)
        if self.case_id is None:
            object.__setattr__(self, "case_id", Path(self.image_path).name.split(".")[0])

    def to_dict(self) -> dict:
        d = {
            "case_id": self.case_id,
            "image_path": self.image_path,
            "landmarks_path": self.landmarks_path,
            "lesion_mask_path": self.lesion_mask_path,
            "jaw_label": list(self.jaw_label),
            "has_lesion": list(self.has_lesion),
        }
        if self.cuboids_path is not None:
            d["cuboids_path"] = self.cuboids_path
        return d


_REQUIRED_KEYS = ("image_path", "landmarks_path", "lesion_mask_path", "jaw_label", "has_lesion")


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def resolve(self, path: str | None) -> Path | None:
        """Resolve a record path against the manifest directory."""
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def by_id(self) -> dict:
        return {r.case_id: r for r in self.records}


# ---------------------------------------------------------------- volume IO

_MET_TYPES = {
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
    "MET_UCHAR": np.uint8,
    "MET_CHAR": np.int8,
    "MET_USHORT": np.uint16,
    "MET_SHORT": np.int16,
    "MET_UINT": np.uint32,
    "MET_INT": np.int32,
}


def _check_spacing(spacing, path) -> tuple:
    try:
        sp = _as_triple(spacing, "spacing")
    except (TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: bad spacing {spacing!r}") from exc
    if min(sp) <= 0:
        raise VolumeFormatError(f"{path}: spacing must be positive, got {sp}")
    return sp


def _read_metaimage(path: Path) -> Volume3D:
    raw = path.read_bytes()
    header: dict[str, str] = {}
    offset = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise VolumeFormatError(f"{path}: truncated MetaImage header")
        line = raw[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            break
    try:
        if int(header.get("NDims", "3")) != 3:
            raise VolumeFormatError(f"{path}: only 3D volumes are supported")
        dims = _as_triple(header["DimSize"].split(), "DimSize", int)
        spacing = header.get("ElementSpacing") or header.get("ElementSize") or "1 1 1"
        origin = _as_triple((header.get("Offset") or header.get("Origin") or "0 0 0").split(), "Offset")
        dtype = np.dtype(_MET_TYPES[header["ElementType"]])
    except KeyError as exc:
        raise VolumeFormatError(f"{path}: missing or unsupported header field {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, VolumeFormatError):
            raise
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from exc
    sp = _check_spacing(spacing.split(), path)
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")
    data_file = header["ElementDataFile"]
    payload = raw[offset:] if data_file == "LOCAL" else (path.parent / data_file).read_bytes()
    if header.get("CompressedData", "False").lower() == "true":
        payload = zlib.decompress(payload)
    count = dims[0] * dims[1] * dims[2]
    if len(payload) < count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: expected {count} voxels, file holds fewer")
    flat = np.frombuffer(payload, dtype=dtype, count=count)
    data = flat.reshape(dims, order="F").astype(np.float32)
    return Volume3D(data, sp, origin)


def _write_metaimage(volume: Volume3D, path: Path) -> None:
    detached = path.suffix.lower() == ".mhd"
    raw_name = path.with_suffix(".raw").name
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "Offset = " + " ".join(repr(float(o)) for o in volume.origin),
        "ElementSpacing = " + " ".join(repr(float(s)) for s in volume.spacing),
        "DimSize = " + " ".join(str(n) for n in volume.shape),
        "ElementType = MET_FLOAT",
        f"ElementDataFile = {raw_name if detached else 'LOCAL'}",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = np.asarray(volume.data, dtype="<f4").ravel(order="F").tobytes()
    if detached:
        (path.parent / raw_name).write_bytes(payload)
        path.write_bytes(header)
    else:
        path.write_bytes(header + payload)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _read_f32raw(path: Path) -> Volume3D:
    side = _sidecar(path)
    if not side.exists():
        raise VolumeFormatError(f"{path}: missing JSON sidecar {side.name}")
    try:
        meta = json.loads(side.read_text())
        shape = _as_triple(meta["shape"], "shape", int)
        origin = _as_triple(meta.get("origin", (0, 0, 0)), "origin")
    except (KeyError, ValueError, TypeError) as exc:
        raise VolumeFormatError(f"{side}: malformed sidecar ({exc})") from exc
    sp = _check_spacing(meta.get("spacing", (1, 1, 1)), side)
    flat = np.fromfile(path, dtype="<f4")
    if flat.size != shape[0] * shape[1] * shape[2]:
        raise VolumeFormatError(f"{path}: holds {flat.size} voxels, sidecar says {shape}")
    return Volume3D(flat.reshape(shape, order="F"), sp, origin)


def _write_f32raw(volume: Volume3D, path: Path) -> None:
    np.asarray(volume.data, dtype="<f4").ravel(order="F").tofile(path)
    meta = {"shape": list(volume.shape), "spacing": list(volume.spacing), "origin": list(volume.origin)}
    _sidecar(path).write_text(json.dumps(meta))


def load_volume(path) -> Volume3D:
    """Read a ``.mha``/``.mhd`` MetaImage or ``.f32raw`` + JSON sidecar volume."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    ext = path.suffix.lower()
    if ext in (".mha", ".mhd"):
        return _read_metaimage(path)
    if ext == ".f32raw":
        return _read_f32raw(path)
    raise VolumeFormatError(f"{path}: unsupported volume extension {ext!r}")


def save_volume(volume: Volume3D, path) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".mha", ".mhd"):
        _write_metaimage(volume, path)
    elif ext == ".f32raw":
        _write_f32raw(volume, path)
    else:
        raise VolumeFormatError(f"{path}: unsupported volume extension {ext!r}")


def load_mask(path) -> SegMask:
    v = load_volume(path)
    return SegMask(v.data, v.spacing, v.origin)


# -------------------------------------------------------------- landmark IO


def load_landmarks(path, reference_shape=None) -> LandmarkSet:
    """Read the 32-row ``tooth_index,x,y,z`` CSV.

    A leading ``# shape=nx,ny,nz`` comment (written by :func:`save_landmarks`)
    supplies the reference shape unless one is passed explicitly.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such landmark file: {path}")
    rows = []
    header_shape = None
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if row[0].lstrip().startswith("#"):
                text = ",".join(row).lstrip("# ").strip()
                if text.startswith("shape="):
                    header_shape = tuple(int(v) for v in text[len("shape="):].split(","))
                continue
            if len(row) != 4:
                raise LandmarkFormatError(f"{path}:{line_no}: expected 4 fields, got {len(row)}")
            try:
                idx = int(row[0])
                xyz = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise LandmarkFormatError(f"{path}:{line_no}: non-numeric field ({exc})") from exc
            rows.append((idx, xyz))
    if len(rows) != NUM_TEETH:
        raise LandmarkFormatError(f"{path}: expected {NUM_TEETH} rows, got {len(rows)}")
    if [r[0] for r in rows] != list(range(NUM_TEETH)):
        raise LandmarkFormatError(f"{path}: tooth indices must be 0..{NUM_TEETH - 1} ascending")
    coords = np.array([r[1] for r in rows], dtype=np.float64)
    shape = reference_shape if reference_shape is not None else header_shape
    try:
        return LandmarkSet(coords, shape)
    except ValueError as exc:
        raise LandmarkFormatError(f"{path}: {exc}") from exc


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    with open(path, "w", newline="") as fh:
        if landmarks.reference_shape is not None:
            fh.write("# shape=" + ",".join(str(s) for s in landmarks.reference_shape) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for i, (x, y, z) in enumerate(landmarks.coords):
            writer.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])


# -------------------------------------------------------------- manifest IO


def _record_from_dict(d: dict, where: str) -> CaseRecord:
    if not isinstance(d, dict):
        raise ManifestSchemaError(f"{where}: record must be a JSON object")
    missing = [k for k in _REQUIRED_KEYS if k not in d]
    if missing:
        raise ManifestSchemaError(f"{where}: missing keys {missing}")
    unknown = set(d) - set(_REQUIRED_KEYS) - {"cuboids_path", "case_id"}
    if unknown:
        raise ManifestSchemaError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return CaseRecord(
            image_path=str(d["image_path"]),
            landmarks_path=str(d["landmarks_path"]),
            lesion_mask_path=str(d["lesion_mask_path"]),
            jaw_label=tuple(d["jaw_label"]),
            has_lesion=tuple(d["has_lesion"]),
            cuboids_path=d.get("cuboids_path"),
            case_id=d.get("case_id"),
        )
    except ManifestSchemaError as exc:
        raise ManifestSchemaError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ManifestSchemaError(f"{where}: {exc}") from exc


def load_manifest(path, check_paths: bool = False) -> DatasetManifest:
    """Read a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestSchemaError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            records.append(_record_from_dict(d, f"{path}:{line_no}"))
    manifest = DatasetManifest(records, root=path.parent.resolve())
    if check_paths:
        for rec in manifest:
            for p in (rec.image_path, rec.landmarks_path, rec.lesion_mask_path, rec.cuboids_path):
                if p is not None and not manifest.resolve(p).exists():
                    raise FileNotFoundError(f"{path}: case {rec.case_id} references missing {p}")
    return manifest


def save_manifest(manifest: DatasetManifest | Iterable[CaseRecord], path) -> None:
    records = manifest.records if isinstance(manifest, DatasetManifest) else list(manifest)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def load_cuboids(path) -> dict[int, np.ndarray]:
    """Per-tooth point clouds ``{tooth_index: (k, 3) array}`` from cuboid JSON."""
    with open(path) as fh:
        raw = json.load(fh)
    out = {}
    for key, pts in raw.items():
        arr = np.asarray(pts, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"{path}: tooth {key} points must be a list of [x, y, z]")
        out[int(key)] = arr
    return out


def save_cuboids(cuboids: dict, path) -> None:
    payload = {str(int(k)): np.asarray(v, dtype=float).tolist() for k, v in sorted(cuboids.items())}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def voxel_to_mm(coords: Sequence[float], spacing: Sequence[float]) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)


__all__ = [
    "NUM_TEETH",
    "MISSING",
    "JAWS",
    "Volume3D",
    "SegMask",
    "LandmarkSet",
    "CaseRecord",
    "DatasetManifest",
    "ToothsegError",
    "VolumeFormatError",
    "LandmarkFormatError",
    "ManifestSchemaError",
    "load_volume",
    "save_volume",
    "load_mask",
    "load_landmarks",
    "save_landmarks",
    "load_manifest",
    "save_manifest",
    "load_cuboids",
    "save_cuboids",
    "voxel_to_mm",
]
