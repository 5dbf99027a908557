"""In-memory volume data model and the RFNV1 on-disk container.

All volumes are indexed (bscan, depth, width) with width varying fastest
on disk. Intensities are float32 in [0, 1]; label codes are uint8.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"RFNV1\n"

BACKGROUND = 0
TISSUE = 1
FLUID = 2
UNRESOLVED = 255

VALID_LABEL_CODES = frozenset({BACKGROUND, TISSUE, FLUID, UNRESOLVED})
RESOLVED_LABEL_CODES = frozenset({BACKGROUND, TISSUE, FLUID})

SCAN_MODALITIES = ("oct", "octa", "fused")
LABEL_PROVENANCES = ("grader", "merged", "predicted", "phantom-truth")
CLASS_ORDER = ("background", "tissue", "fluid")

# Clinical raster geometry: 3x3-mm field, 304 A-lines per B-scan.
DEFAULT_AXIAL_UM = 3.0
DEFAULT_LATERAL_UM = 3000.0 / 304.0


class VolumeFormatError(ValueError):
    """A file does not conform to the RFNV1 container format."""


def _check_spacing(spacing_um) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing_um)
    if len(spacing) != 3:
        raise ValueError("spacing_um must have three entries (between-B-scan, axial, lateral)")
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacings must be strictly positive, got {spacing}")
    return spacing


def _check_shape(shape: tuple[int, ...], ndim: int) -> None:
    if len(shape) != ndim:
        raise ValueError(f"expected a {ndim}D grid, got shape {shape}")
    if any(n < 1 for n in shape):
        raise ValueError(f"all dimensions must be >= 1, got shape {shape}")


@dataclass
class ScanVolume:
    """A reflectance or flow intensity volume with physical spacing metadata."""

    voxels: np.ndarray  # (bscan, depth, width), float32 in [0, 1]
    spacing_um: tuple[float, float, float]  # (between-B-scan, axial, lateral)
    modality: str  # oct | octa | fused
    volume_id: str
    eye_id: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        self.spacing_um = _check_spacing(self.spacing_um)
        self.validate()

    def validate(self):
        _check_shape(self.voxels.shape, 3)
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("intensities must be finite")
        lo, hi = float(self.voxels.min()), float(self.voxels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities must lie in [0, 1], got range [{lo}, {hi}]")
        if self.modality not in SCAN_MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray, *, modality: str | None = None,
                    extras: dict | None = None) -> "ScanVolume":
        return ScanVolume(
            voxels=voxels,
            spacing_um=self.spacing_um,
            modality=self.modality if modality is None else modality,
            volume_id=self.volume_id,
            eye_id=self.eye_id,
            extras=dict(self.extras) if extras is None else extras,
        )


@dataclass
class LabelVolume:
    """Per-voxel category codes: 0=background, 1=tissue, 2=fluid, 255=unresolved."""

    codes: np.ndarray  # (bscan, depth, width), uint8
    spacing_um: tuple[float, float, float]
    provenance: str  # grader | merged | predicted | phantom-truth
    volume_id: str
    grader_id: str | None = None

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        self.spacing_um = _check_spacing(self.spacing_um)
        self.validate()

    def validate(self):
        _check_shape(self.codes.shape, 3)
        present = set(np.unique(self.codes).tolist())
        bad = present - VALID_LABEL_CODES
        if bad:
            raise ValueError(f"invalid label code(s) {sorted(bad)}")
        if self.provenance not in LABEL_PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if UNRESOLVED in present and self.provenance != "merged":
            raise ValueError("code 255 (unresolved) is only valid with provenance 'merged'")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.codes.shape

    def voxel_volume_mm3(self) -> float:
        b, a, l = self.spacing_um
        return (b * a * l) / 1e9

    def with_codes(self, codes: np.ndarray, *, provenance: str | None = None,
                   grader_id: str | None = None) -> "LabelVolume":
        return LabelVolume(
            codes=codes,
            spacing_um=self.spacing_um,
            provenance=self.provenance if provenance is None else provenance,
            volume_id=self.volume_id,
            grader_id=grader_id,
        )


@dataclass
class ProbabilityVolume:
    """Per-voxel class probabilities in class order (background, tissue, fluid)."""

    probs: np.ndarray  # (bscan, depth, width, class), float32
    spacing_um: tuple[float, float, float]
    volume_id: str
    eye_id: str = ""

    def __post_init__(self):
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        self.spacing_um = _check_spacing(self.spacing_um)
        self.validate()

    def validate(self):
        _check_shape(self.probs.shape, 4)
        if self.probs.shape[-1] != len(CLASS_ORDER):
            raise ValueError(f"expected {len(CLASS_ORDER)} classes, got {self.probs.shape[-1]}")
        if not np.all(np.isfinite(self.probs)):
            raise ValueError("probabilities must be finite")
        if self.probs.min() < 0.0 or self.probs.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = self.probs.sum(axis=-1, dtype=np.float64)
        err = float(np.abs(sums - 1.0).max())
        if err > 1e-5:
            raise ValueError(f"per-voxel class probabilities must sum to 1 (max error {err:.2e})")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.probs.shape

    def fluid_probs(self) -> np.ndarray:
        return self.probs[..., CLASS_ORDER.index("fluid")]

    def argmax_labels(self) -> LabelVolume:
        return LabelVolume(
            codes=self.probs.argmax(axis=-1).astype(np.uint8),
            spacing_um=self.spacing_um,
            provenance="predicted",
            volume_id=self.volume_id,
        )


Volume = Union[ScanVolume, LabelVolume, ProbabilityVolume]


def _header_for(volume: Volume) -> dict:
    if isinstance(volume, ScanVolume):
        header = {
            "dtype": "f32",
            "shape": list(volume.shape),
            "order": "bdw",
            "spacing_um": list(volume.spacing_um),
            "modality": volume.modality,
            "volume_id": volume.volume_id,
        }
        if volume.eye_id:
            header["eye_id"] = volume.eye_id
        if volume.extras:
            header["extras"] = volume.extras
        return header
    if isinstance(volume, LabelVolume):
        header = {
            "dtype": "u8",
            "shape": list(volume.shape),
            "order": "bdw",
            "spacing_um": list(volume.spacing_um),
            "modality": "labels",
            "volume_id": volume.volume_id,
            "provenance": volume.provenance,
        }
        if volume.grader_id is not None:
            header["grader_id"] = volume.grader_id
        return header
    if isinstance(volume, ProbabilityVolume):
        header = {
            "dtype": "f32",
            "shape": list(volume.shape),
            "order": "bdw",
            "spacing_um": list(volume.spacing_um),
            "modality": "probability",
            "volume_id": volume.volume_id,
            "class_order": ",".join(CLASS_ORDER),
        }
        if volume.eye_id:
            header["eye_id"] = volume.eye_id
        return header
    raise TypeError(f"not a volume: {type(volume).__name__}")


def _payload_for(volume: Volume) -> bytes:
    if isinstance(volume, LabelVolume):
        return volume.codes.astype("u1").tobytes(order="C")
    arr = volume.voxels if isinstance(volume, ScanVolume) else volume.probs
    return arr.astype("<f4").tobytes(order="C")


def save_volume(volume: Volume, destination: str | Path) -> None:
    """Write a volume to `destination` in the RFNV1 container format.

    The volume is validated before any bytes are written; an
    invariant-violating volume is rejected rather than clamped.
    """
    header = _header_for(volume)  # re-raises on non-volume input
    # invariants were checked at construction; re-validate in case the
    # caller mutated arrays in place since then
    volume.validate()
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = _payload_for(volume)
    destination = Path(destination)
    with open(destination, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


_REQUIRED_KEYS = ("dtype", "shape", "order", "spacing_um", "modality", "volume_id")


def load_volume(source: str | Path) -> Volume:
    """Read an RFNV1 file back into its typed volume, validating invariants."""
    raw = Path(source).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError("bad magic: not an RFNV1 container")
    (header_len,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    if len(raw) < header_start + header_len:
        raise VolumeFormatError("truncated header")
    try:
        header = json.loads(raw[header_start: header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError("malformed header: not a JSON object")
    missing = [k for k in _REQUIRED_KEYS if k not in header]
    if missing:
        raise VolumeFormatError(f"malformed header: missing keys {missing}")
    if header["order"] != "bdw":
        raise VolumeFormatError(f"unsupported order {header['order']!r}")
    dtype = header["dtype"]
    if dtype not in ("f32", "u8"):
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    shape = tuple(header["shape"])
    if not shape or not all(isinstance(n, int) and n >= 1 for n in shape):
        raise VolumeFormatError(f"malformed header: bad shape {header['shape']}")

    itemsize = 4 if dtype == "f32" else 1
    expected = int(np.prod(shape)) * itemsize
    payload = raw[header_start + header_len:]
    if len(payload) < expected:
        raise VolumeFormatError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise VolumeFormatError(
            f"trailing bytes: expected {expected} payload bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4" if dtype == "f32" else "u1").reshape(shape)

    modality = header["modality"]
    try:
        if dtype == "u8":
            if modality != "labels":
                raise VolumeFormatError(f"u8 payload with modality {modality!r}")
            if "provenance" not in header:
                raise VolumeFormatError("malformed header: label volume missing provenance")
            return LabelVolume(
                codes=arr.copy(),
                spacing_um=header["spacing_um"],
                provenance=header["provenance"],
                volume_id=header["volume_id"],
                grader_id=header.get("grader_id"),
            )
        if len(shape) == 4 or modality == "probability":
            declared = header.get("class_order", ",".join(CLASS_ORDER))
            if declared != ",".join(CLASS_ORDER):
                raise VolumeFormatError(f"unsupported class_order {declared!r}")
            return ProbabilityVolume(
                probs=arr.copy(),
                spacing_um=header["spacing_um"],
                volume_id=header["volume_id"],
                eye_id=header.get("eye_id", ""),
            )
        return ScanVolume(
            voxels=arr.copy(),
            spacing_um=header["spacing_um"],
            modality=modality,
            volume_id=header["volume_id"],
            eye_id=header.get("eye_id", ""),
            extras=header.get("extras", {}),
        )
    except VolumeFormatError:
        raise
    except ValueError as exc:
        raise VolumeFormatError(f"invalid volume content: {exc}") from exc
