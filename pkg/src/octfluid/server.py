"""Annotation service: serves B-scan images and versioned per-grader label
masks over HTTP, and runs the pixel-wise voting merge.

Label wire format is run-length encoding in row-major order. Every write
is persisted atomically before the response is sent, and writes to one
(volume, grader) resource are serialized behind a per-resource lock with
optimistic version checks per B-scan.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import grading
from .preprocess import FusionConfig
from .volumes import (
    RESOLVED_LABEL_CODES,
    VALID_LABEL_CODES,
    LabelVolume,
    ProbabilityVolume,
    ScanVolume,
    load_volume,
    save_volume,
)

GRADERS_REQUIRED = 3


@dataclass
class LabelResourceVersion:
    """Optimistic-concurrency token for one (volume, grader, B-scan) row;
    the version strictly increases on every accepted write."""

    volume_id: str
    grader_id: str
    bscan_index: int
    version: int


@dataclass
class RleMask:
    """Row-major run-length encoded label plane."""

    shape: tuple[int, int]
    runs: list[tuple[int, int]]  # (code, length)

    def __post_init__(self):
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        self.runs = [(int(code), int(length)) for code, length in self.runs]
        h, w = self.shape
        if h < 1 or w < 1:
            raise ValueError(f"mask shape must be positive, got {self.shape}")
        total = 0
        prev_code = None
        for code, length in self.runs:
            if code not in VALID_LABEL_CODES:
                raise ValueError(f"invalid label code {code} in runs")
            if length < 1:
                raise ValueError("run lengths must be >= 1")
            if code == prev_code:
                raise ValueError("consecutive runs must have distinct codes")
            prev_code = code
            total += length
        if total != h * w:
            raise ValueError(f"runs sum to {total}, expected {h * w}")

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "runs": [list(r) for r in self.runs]}


def encode_rle(plane: np.ndarray) -> RleMask:
    flat = np.asarray(plane, dtype=np.int64).ravel()
    if flat.size == 0:
        raise ValueError("cannot encode an empty plane")
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [flat.size]])
    runs = [(int(flat[s]), int(e - s)) for s, e in zip(starts, ends)]
    return RleMask(shape=plane.shape, runs=runs)


def decode_rle(mask: RleMask) -> np.ndarray:
    codes = np.repeat(
        np.array([c for c, _ in mask.runs], dtype=np.uint8),
        np.array([n for _, n in mask.runs], dtype=np.int64),
    )
    return codes.reshape(mask.shape)


def _atomic_write(path: Path, write_fn) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        write_fn(Path(tmp))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class ApiError(Exception):
    def __init__(self, status: int, error: str, detail: str = ""):
        super().__init__(detail or error)
        self.status = status
        self.error = error
        self.detail = detail


class LabelStore:
    """Disk-backed store for volumes, grader labels, merges, and predictions.

    Layout under the data directory:
        {vid}_oct.rfnv / {vid}_octa.rfnv / {vid}_labels.rfnv
        labels/{vid}/{grader}.rfnv + labels/{vid}/{grader}.versions.json
        labels/{vid}/merged.rfnv + labels/{vid}/merged.unresolved.json
        predictions/{vid}.rfnv
    """

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.labels_dir = self.data_dir / "labels"
        self.predictions_dir = self.data_dir / "predictions"
        self._locks: dict[tuple[str, str], threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _lock(self, volume_id: str, grader_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[(volume_id, grader_id)]

    def volume_ids(self) -> list[str]:
        return sorted(p.name[: -len("_oct.rfnv")] for p in self.data_dir.glob("*_oct.rfnv"))

    def scan(self, volume_id: str, modality: str) -> ScanVolume:
        path = self.data_dir / f"{volume_id}_{modality}.rfnv"
        if not path.exists():
            raise ApiError(404, "unknown volume", f"no {modality} scan for {volume_id!r}")
        return load_volume(path)

    def grader_dir(self, volume_id: str) -> Path:
        return self.labels_dir / volume_id

    def grader_ids(self, volume_id: str) -> list[str]:
        d = self.grader_dir(volume_id)
        if not d.exists():
            return []
        return sorted(p.stem for p in d.glob("*.rfnv") if p.stem != "merged")

    def _versions_path(self, volume_id: str, grader_id: str) -> Path:
        return self.grader_dir(volume_id) / f"{grader_id}.versions.json"

    def versions(self, volume_id: str, grader_id: str) -> dict[str, int]:
        path = self._versions_path(volume_id, grader_id)
        if not path.exists():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def version_of(self, volume_id: str, grader_id: str, index: int) -> LabelResourceVersion:
        return LabelResourceVersion(
            volume_id=volume_id, grader_id=grader_id, bscan_index=index,
            version=int(self.versions(volume_id, grader_id).get(str(index), 0)),
        )

    def grader_labels(self, volume_id: str, grader_id: str) -> LabelVolume | None:
        path = self.grader_dir(volume_id) / f"{grader_id}.rfnv"
        if not path.exists():
            return None
        return load_volume(path)

    def put_labels(
        self, volume_id: str, grader_id: str, index: int, mask: RleMask, expected_version: int
    ) -> int:
        scan = self.scan(volume_id, "oct")
        nb, depth, width = scan.shape
        if not 0 <= index < nb:
            raise ApiError(404, "index out of range", f"volume has {nb} B-scans")
        if mask.shape != (depth, width):
            raise ApiError(
                422, "invalid mask", f"mask shape {mask.shape} != B-scan shape {(depth, width)}"
            )
        plane = decode_rle(mask)
        if not set(np.unique(plane).tolist()) <= RESOLVED_LABEL_CODES:
            raise ApiError(422, "invalid mask", "grader masks may only contain codes 0, 1, 2")
        with self._lock(volume_id, grader_id):
            versions = self.versions(volume_id, grader_id)
            current = int(versions.get(str(index), 0))
            if expected_version != current:
                raise ApiError(
                    409, "version conflict",
                    f"expected version {expected_version}, current is {current}",
                )
            labels = self.grader_labels(volume_id, grader_id)
            if labels is None:
                labels = LabelVolume(
                    codes=np.zeros(scan.shape, dtype=np.uint8),
                    spacing_um=scan.spacing_um,
                    provenance="grader",
                    volume_id=volume_id,
                    grader_id=grader_id,
                )
            codes = labels.codes.copy()
            codes[index] = plane
            updated = labels.with_codes(codes, provenance="grader", grader_id=grader_id)
            self.grader_dir(volume_id).mkdir(parents=True, exist_ok=True)
            _atomic_write(
                self.grader_dir(volume_id) / f"{grader_id}.rfnv",
                lambda p: save_volume(updated, p),
            )
            versions[str(index)] = current + 1
            _atomic_write(
                self._versions_path(volume_id, grader_id),
                lambda p: p.write_text(json.dumps(versions, sort_keys=True), encoding="utf-8"),
            )
            return current + 1

    def get_labels(self, volume_id: str, grader_id: str, index: int) -> tuple[RleMask, int]:
        scan = self.scan(volume_id, "oct")
        if not 0 <= index < scan.shape[0]:
            raise ApiError(404, "index out of range", f"volume has {scan.shape[0]} B-scans")
        labels = self.grader_labels(volume_id, grader_id)
        if labels is None:
            raise ApiError(404, "no labels", f"grader {grader_id!r} has no labels for {volume_id!r}")
        version = int(self.versions(volume_id, grader_id).get(str(index), 0))
        return encode_rle(labels.codes[index]), version

    def _is_complete(self, volume_id: str, grader_id: str, n_bscans: int) -> bool:
        versions = self.versions(volume_id, grader_id)
        return all(int(versions.get(str(i), 0)) >= 1 for i in range(n_bscans))

    def merge(self, volume_id: str) -> tuple[list[tuple[int, int, int]], int]:
        scan = self.scan(volume_id, "oct")
        graders = self.grader_ids(volume_id)
        complete = [g for g in graders if self._is_complete(volume_id, g, scan.shape[0])]
        if len(complete) < GRADERS_REQUIRED:
            raise ApiError(
                409, "incomplete grading",
                f"need {GRADERS_REQUIRED} complete gradings, have {len(complete)}",
            )
        grades = tuple(self.grader_labels(volume_id, g) for g in complete[:GRADERS_REQUIRED])
        merged, count = grading.vote_merge(grading.GraderSet(grades=grades))
        pixels = grading.unresolved_pixels(merged)
        _atomic_write(self.grader_dir(volume_id) / "merged.rfnv", lambda p: save_volume(merged, p))
        _atomic_write(
            self.grader_dir(volume_id) / "merged.unresolved.json",
            lambda p: p.write_text(json.dumps([list(px) for px in pixels]), encoding="utf-8"),
        )
        return pixels, count

    def merged_labels(self, volume_id: str) -> LabelVolume:
        path = self.grader_dir(volume_id) / "merged.rfnv"
        if not path.exists():
            raise ApiError(409, "merge not run", f"no merged labels for {volume_id!r}")
        return load_volume(path)

    def apply_resolutions(self, volume_id: str, resolutions) -> int:
        merged = self.merged_labels(volume_id)
        try:
            resolved = grading.resolve(merged, resolutions)
        except ValueError as exc:
            raise ApiError(422, "invalid resolution", str(exc)) from exc
        pixels = grading.unresolved_pixels(resolved)
        _atomic_write(self.grader_dir(volume_id) / "merged.rfnv", lambda p: save_volume(resolved, p))
        _atomic_write(
            self.grader_dir(volume_id) / "merged.unresolved.json",
            lambda p: p.write_text(json.dumps([list(px) for px in pixels]), encoding="utf-8"),
        )
        return len(pixels)

    def prediction_plane(self, volume_id: str, index: int) -> RleMask:
        path = self.predictions_dir / f"{volume_id}.rfnv"
        if not path.exists():
            raise ApiError(404, "no predictions", f"no predictions stored for {volume_id!r}")
        volume = load_volume(path)
        if isinstance(volume, ProbabilityVolume):
            volume = volume.argmax_labels()
        if not 0 <= index < volume.shape[0]:
            raise ApiError(404, "index out of range", f"volume has {volume.shape[0]} B-scans")
        return encode_rle(volume.codes[index])


def _bscan_png(store: LabelStore, volume_id: str, index: int, modality: str,
               beta: float | None) -> bytes:
    if modality not in ("oct", "octa", "fused"):
        raise ApiError(400, "bad modality", f"modality must be oct|octa|fused, got {modality!r}")
    if modality == "fused":
        if beta is None:
            raise ApiError(400, "bad beta", "fused B-scans need a beta query parameter")
        try:
            FusionConfig(beta)
        except ValueError as exc:
            raise ApiError(400, "bad beta", str(exc)) from exc
        oct_scan = store.scan(volume_id, "oct")
        octa_scan = store.scan(volume_id, "octa")
        if not 0 <= index < oct_scan.shape[0]:
            raise ApiError(404, "index out of range", f"volume has {oct_scan.shape[0]} B-scans")
        plane = (1.0 - beta) * oct_scan.voxels[index] + beta * octa_scan.voxels[index]
    else:
        scan = store.scan(volume_id, modality)
        if not 0 <= index < scan.shape[0]:
            raise ApiError(404, "index out of range", f"volume has {scan.shape[0]} B-scans")
        plane = scan.voxels[index]
    img = Image.fromarray((np.clip(plane, 0.0, 1.0) * 255.0).round().astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(data_dir: str | Path, static_dir: str | Path | None = None) -> FastAPI:
    """Build the annotation service over a dataset directory."""
    store = LabelStore(data_dir)
    app = FastAPI(title="octfluid annotation service")
    app.state.store = store

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status, content={"error": exc.error, "detail": exc.detail}
        )

    @app.get("/api/volumes")
    def list_volumes():
        return {"volumes": store.volume_ids()}

    @app.get("/api/volumes/{volume_id}/meta")
    def volume_meta(volume_id: str):
        scan = store.scan(volume_id, "oct")
        modalities = ["oct"]
        if (store.data_dir / f"{volume_id}_octa.rfnv").exists():
            modalities.append("octa")
            modalities.append("fused")
        return {
            "volume_id": volume_id,
            "eye_id": scan.eye_id,
            "shape": list(scan.shape),
            "spacing_um": list(scan.spacing_um),
            "modalities": modalities,
            "graders": store.grader_ids(volume_id),
        }

    @app.get("/api/volumes/{volume_id}/bscans/{index}")
    def get_bscan(volume_id: str, index: int, modality: str = Query("oct"),
                  beta: float | None = Query(None)):
        png = _bscan_png(store, volume_id, index, modality, beta)
        return Response(content=png, media_type="image/png")

    @app.get("/api/volumes/{volume_id}/labels/{grader_id}/{index}")
    def get_labels(volume_id: str, grader_id: str, index: int):
        mask, version = store.get_labels(volume_id, grader_id, index)
        return {**mask.to_dict(), "version": version}

    @app.put("/api/volumes/{volume_id}/labels/{grader_id}/{index}")
    async def put_labels(volume_id: str, grader_id: str, index: int, request: Request):
        body = await request.json()
        try:
            mask = RleMask(shape=body["shape"], runs=body["runs"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ApiError(422, "invalid mask", str(exc)) from exc
        expected = int(body.get("expected_version", 0))
        version = store.put_labels(volume_id, grader_id, index, mask, expected)
        return {"version": version}

    @app.post("/api/volumes/{volume_id}/merge")
    def merge(volume_id: str):
        pixels, count = store.merge(volume_id)
        return {"unresolved": [list(px) for px in pixels], "count": count}

    @app.get("/api/volumes/{volume_id}/unresolved")
    def unresolved(volume_id: str):
        merged = store.merged_labels(volume_id)
        pixels = grading.unresolved_pixels(merged)
        return {"unresolved": [list(px) for px in pixels], "count": len(pixels)}

    @app.post("/api/volumes/{volume_id}/resolutions")
    async def resolutions(volume_id: str, request: Request):
        body = await request.json()
        try:
            items = [((int(b), int(r), int(c)), int(code)) for b, r, c, code in body]
        except (TypeError, ValueError) as exc:
            raise ApiError(422, "invalid resolution", "expected a list of [b, r, c, code]") from exc
        remaining = store.apply_resolutions(volume_id, items)
        return {"remaining": remaining}

    @app.get("/api/volumes/{volume_id}/predictions/{index}")
    def predictions(volume_id: str, index: int):
        mask = store.prediction_plane(volume_id, index)
        return mask.to_dict()

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app
