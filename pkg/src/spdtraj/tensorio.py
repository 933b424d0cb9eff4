"""Feature-tensor I/O: the SPDT binary format, region masks, dataset
manifests and a synthetic dataset generator.

SPDT layout (little-endian throughout):

    bytes 0-3   magic "SPDT"
    byte  4     version (1)
    byte  5     dtype code: 1 = float32, 2 = float64
    bytes 6-7   reserved, zero
    bytes 8-11  m, number of maps (uint32)
    bytes 12-13 w, map width in cells (uint16)
    bytes 14-15 h, map height in cells (uint16)
    bytes 16-   m * w * h values, map-major, row-major within a map

float32 payloads are accepted on ingest and round-trip bit-exactly, but
all downstream arithmetic runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import spdcore
from .errors import FormatError, ValidationError

MAGIC = b"SPDT"
VERSION = 1
_HEADER = struct.Struct("<4sBBHIHH")
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """A stack of m feature maps of size w x h.

    ``values`` has shape (m, h, w); cell (x, y) of map i is
    ``values[i, y, x]``.
    """

    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise ValidationError("tensor values must be a 3-D array (m, h, w)")
        if v.dtype not in (np.float32, np.float64):
            raise ValidationError(f"tensor dtype must be float32 or float64, got {v.dtype}")
        if min(v.shape) < 1:
            raise ValidationError(f"tensor dimensions must all be >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("tensor contains non-finite values")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> int:
        return self.values.shape[1]

    @property
    def w(self) -> int:
        return self.values.shape[2]


def write_tensor(tensor: FeatureTensor, path) -> None:
    """Serialize a FeatureTensor to an SPDT file."""
    code = _CODES_BY_DTYPE.get(np.dtype(tensor.values.dtype))
    if code is None:
        raise ValidationError(f"unsupported dtype {tensor.values.dtype}")
    if tensor.m > 0xFFFFFFFF or tensor.w > 0xFFFF or tensor.h > 0xFFFF:
        raise ValidationError(f"tensor dimensions {tensor.values.shape} exceed format limits")
    header = _HEADER.pack(MAGIC, VERSION, code, 0, tensor.m, tensor.w, tensor.h)
    payload = np.ascontiguousarray(tensor.values, dtype=_DTYPE_CODES[code])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_tensor(path) -> FeatureTensor:
    """Parse an SPDT file, reporting the byte offset of any defect."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", offset=len(raw))
    magic, version, code, reserved, m, w, h = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=5)
    if reserved != 0:
        raise FormatError("reserved bytes must be zero", offset=6)
    if m < 1:
        raise FormatError("map count must be >= 1", offset=8)
    if w < 1:
        raise FormatError("map width must be >= 1", offset=12)
    if h < 1:
        raise FormatError("map height must be >= 1", offset=14)
    dtype = _DTYPE_CODES[code]
    expected = m * w * h * dtype.itemsize
    got = len(raw) - _HEADER.size
    if got < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, found {got}",
            offset=len(raw),
        )
    if got > expected:
        raise FormatError("trailing bytes after payload", offset=_HEADER.size + expected)
    values = np.frombuffer(raw, dtype=dtype, count=m * w * h, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError(
            "non-finite value in payload",
            offset=_HEADER.size + int(bad[0]) * dtype.itemsize,
        )
    values = values.reshape(m, h, w).copy()
    return FeatureTensor(values=values, source_id=str(path))


@dataclass(frozen=True, eq=False)
class RegionMask:
    """A named set of pixel coordinates in the source image frame."""

    region_id: str
    pixels: np.ndarray  # (r, 2) int array of (x, y)
    image_w: int
    image_h: int

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.ndim != 2 or p.shape[1] != 2 or p.shape[0] == 0:
            raise ValidationError(f"mask {self.region_id!r}: pixels must be a non-empty (r, 2) array")
        if self.image_w < 1 or self.image_h < 1:
            raise ValidationError(f"mask {self.region_id!r}: image dimensions must be >= 1")
        if p.min() < 0 or p[:, 0].max() >= self.image_w or p[:, 1].max() >= self.image_h:
            raise ValidationError(f"mask {self.region_id!r}: pixel out of image bounds")
        if np.unique(p, axis=0).shape[0] != p.shape[0]:
            raise ValidationError(f"mask {self.region_id!r}: duplicate pixels")


def read_mask(path) -> RegionMask:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"mask file {path} is not valid JSON: {exc.msg}",
                              offset=exc.pos) from exc
    try:
        region_id = str(obj["region_id"])
        image_w = int(obj["image_w"])
        image_h = int(obj["image_h"])
        pixels = np.asarray(obj["pixels"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed mask file {path}: {exc}") from exc
    if pixels.size and pixels.ndim == 1:
        pixels = pixels.reshape(-1, 2)
    return RegionMask(region_id=region_id, pixels=pixels, image_w=image_w, image_h=image_h)


def write_mask(mask: RegionMask, path) -> None:
    obj = {
        "region_id": mask.region_id,
        "image_w": mask.image_w,
        "image_h": mask.image_h,
        "pixels": [[int(x), int(y)] for x, y in mask.pixels],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    subject_id: str
    label: str
    tensor_paths: tuple
    mask_paths: tuple = ()


@dataclass(frozen=True)
class DatasetManifest:
    """The index of a dataset: ordered label set plus one entry per sample."""

    label_set: tuple
    entries: tuple

    def labels(self) -> list:
        return [e.label for e in self.entries]

    def subjects(self) -> list:
        return [e.subject_id for e in self.entries]


def read_manifest(path) -> DatasetManifest:
    """Load and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc.msg}",
                              offset=exc.pos) from exc
    if not isinstance(obj, dict) or "label_set" not in obj or "entries" not in obj:
        raise ValidationError(f"manifest {path}: expected label_set and entries keys")
    label_set = tuple(str(x) for x in obj["label_set"])
    if len(label_set) == 0:
        raise ValidationError(f"manifest {path}: label_set is empty")
    if len(set(label_set)) != len(label_set):
        raise ValidationError(f"manifest {path}: duplicate labels in label_set")
    base = path.parent
    entries = []
    seen_ids = set()
    for k, raw in enumerate(obj["entries"]):
        where = f"manifest {path}, entry {k}"
        try:
            sample_id = str(raw["sample_id"])
            subject_id = str(raw["subject_id"])
            label = str(raw["label"])
            tensors = [str(p) for p in raw["tensors"]]
            masks = [str(p) for p in raw.get("masks", [])]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{where}: missing or malformed field ({exc})") from exc
        if not sample_id:
            raise ValidationError(f"{where}: empty sample_id")
        if not subject_id:
            raise ValidationError(f"{where}: empty subject_id")
        if sample_id in seen_ids:
            raise ValidationError(f"{where}: duplicate sample_id {sample_id!r}")
        seen_ids.add(sample_id)
        if label not in label_set:
            raise ValidationError(f"{where}: label {label!r} not in label_set")
        if len(tensors) == 0:
            raise ValidationError(f"{where}: no tensor files listed")
        resolved_t = tuple((base / p).resolve() if not Path(p).is_absolute() else Path(p)
                           for p in tensors)
        resolved_m = tuple((base / p).resolve() if not Path(p).is_absolute() else Path(p)
                           for p in masks)
        all_paths = list(resolved_t) + list(resolved_m)
        if len(set(all_paths)) != len(all_paths):
            raise ValidationError(f"{where}: duplicate file paths")
        for p in all_paths:
            if not p.is_file():
                raise ValidationError(f"{where}: missing file {p}")
        entries.append(ManifestEntry(sample_id=sample_id, subject_id=subject_id,
                                     label=label, tensor_paths=resolved_t,
                                     mask_paths=resolved_m))
    return DatasetManifest(label_set=label_set, entries=tuple(entries))


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest; paths under the manifest directory become relative."""
    path = Path(path)
    base = path.parent.resolve()

    def _rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    obj = {
        "label_set": list(manifest.label_set),
        "entries": [
            {
                "sample_id": e.sample_id,
                "subject_id": e.subject_id,
                "label": e.label,
                "tensors": [_rel(p) for p in e.tensor_paths],
                **({"masks": [_rel(p) for p in e.mask_paths]} if e.mask_paths else {}),
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def class_log_paths(classes: int, m: int, frames: int, separation: float,
                    seed: int) -> np.ndarray:
    """Per-class smooth paths of log-covariance matrices.

    Returns an array of shape (classes, frames, m, m). The whole path is
    scaled by ``separation``, so separation 0 collapses every class onto
    the identity covariance: the generating distributions coincide.
    """
    if classes < 1 or m < 1 or frames < 1:
        raise ValidationError("classes, m and frames must all be >= 1")
    if separation < 0:
        raise ValidationError("separation must be >= 0")
    rng = np.random.default_rng([seed, 0])
    paths = np.empty((classes, frames, m, m))
    ts = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    for c in range(classes):
        base = _unit_symmetric(rng, m)
        drift = _unit_symmetric(rng, m)
        for k, t in enumerate(ts):
            paths[c, k] = separation * (base + 0.5 * t * drift)
    return paths


def _unit_symmetric(rng: np.random.Generator, m: int) -> np.ndarray:
    A = rng.standard_normal((m, m))
    S = (A + A.T) / 2.0
    norm = np.linalg.norm(S, "fro")
    return S / norm if norm > 0 else S


def synth_generate(classes: int, samples_per_class: int, m: int, w: int, h: int,
                   frames: int, separation: float, seed: int, out_dir,
                   subjects: int = 10) -> DatasetManifest:
    """Generate a labelled synthetic dataset of feature-tensor sequences.

    The class signal lives purely in second-order statistics: frame k of a
    class-c sample holds w*h observations drawn from N(0, exp(S_c(k)))
    where S_c is that class's smooth log-covariance path. Subject ids are
    assigned round-robin, so subject-independent folds stay balanced.
    Fixed seed and arguments give byte-identical output files.
    """
    if samples_per_class < 1 or w < 1 or h < 1 or subjects < 1:
        raise ValidationError("samples_per_class, w, h and subjects must all be >= 1")
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)

    paths = class_log_paths(classes, m, frames, separation, seed)
    chol = np.empty_like(paths)
    for c in range(classes):
        for k in range(frames):
            chol[c, k] = np.linalg.cholesky(spdcore.matrix_exp(paths[c, k]))

    rng = np.random.default_rng([seed, 1])
    n_obs = w * h
    entries = []
    label_set = tuple(f"class{c}" for c in range(classes))
    for c in range(classes):
        for s in range(samples_per_class):
            sample_id = f"class{c}_s{s:03d}"
            subject_id = f"subj{s % subjects:02d}"
            tensor_paths = []
            for k in range(frames):
                X = rng.standard_normal((m, n_obs))
                obs = chol[c, k] @ X
                values = obs.reshape(m, h, w).astype(np.float32)
                p = tensor_dir / f"{sample_id}_f{k:03d}.spdt"
                write_tensor(FeatureTensor(values=values, source_id=sample_id), p)
                tensor_paths.append(p)
            entries.append(ManifestEntry(sample_id=sample_id, subject_id=subject_id,
                                         label=label_set[c],
                                         tensor_paths=tuple(tensor_paths)))
    manifest = DatasetManifest(label_set=label_set, entries=tuple(entries))
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
