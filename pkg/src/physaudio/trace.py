"""File-based data model for video analysis traces.

A trace bundles everything the physics pipeline needs from one video:
per-object binary masks (run-length encoded), per-frame metric point maps,
and object metadata (name, action, mass). Traces are produced upstream by
perception tooling; here they are parsed, validated and held immutable.

File formats
------------
``trace.json`` (UTF-8 JSON), top level::

    {"video_id": str, "fps": float, "frames": int, "width": int,
     "height": int, "objects": [...], "point_map_files": [str, ...],
     "extrinsics": [{"R": 3x3, "T": [3]}, ...]?}   # optional, pass-through

Each object carries ``id, name, action, mass_kg, masks[]`` where every mask
is an RLE counts array (runs alternate absent/present, starting with absent,
row-major). ``mass_kg`` may be ``null`` for unknown mass, which is distinct
from 0.

Point map binary: little-endian, magic ``PMAP``, u32 height, u32 width, then
H*W records of 3 x f32 world coordinates (meters) followed by u8 validity.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError

PMAP_MAGIC = b"PMAP"
_PMAP_RECORD = np.dtype([("xyz", "<f4", (3,)), ("valid", "u1")])


@dataclass(frozen=True)
class RleMask:
    """Run-length encoded binary mask, runs alternate 0-run then 1-run."""

    counts: tuple[int, ...]
    total: int

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise ValidationError("masks: RLE counts must be non-negative")
        if sum(self.counts) != self.total:
            raise ValidationError(
                f"masks: RLE counts sum to {sum(self.counts)}, expected {self.total}"
            )


@dataclass(frozen=True)
class PointMap:
    """Per-pixel grid of metric 3D world coordinates with a validity grid.

    ``points`` is (H, W, 3) float64, ``validity`` is (H, W) bool. Points at
    invalid pixels carry no meaning and must never be read downstream.
    """

    points: np.ndarray
    validity: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[0], self.points.shape[1]


@dataclass(frozen=True)
class ObjectTrack:
    object_id: str
    name: str
    action: str
    mass_kg: Optional[float]
    masks: tuple[RleMask, ...]


@dataclass(frozen=True)
class VideoTrace:
    video_id: str
    fps: float
    frame_count: int
    width: int
    height: int
    objects: tuple[ObjectTrack, ...]
    point_maps: tuple[PointMap, ...]
    # Camera extrinsics are pass-through metadata; nothing here consumes them.
    extrinsics: Optional[tuple[dict, ...]] = field(default=None)


def rle_decode(mask: RleMask, height: int, width: int) -> np.ndarray:
    """Expand an RLE mask into a (height, width) uint8 grid, row-major."""
    if sum(mask.counts) != height * width:
        raise ValidationError(
            f"masks: RLE counts sum to {sum(mask.counts)}, expected {height * width}"
        )
    values = np.arange(len(mask.counts), dtype=np.uint8) % 2
    flat = np.repeat(values, np.asarray(mask.counts, dtype=np.int64))
    return flat.reshape(height, width)


def rle_encode(grid: np.ndarray) -> RleMask:
    """Encode a binary grid row-major; canonical (no interior zero runs)."""
    flat = np.asarray(grid).ravel().astype(bool)
    if flat.size == 0:
        raise ValidationError("masks: cannot encode an empty grid")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(counts=tuple(int(r) for r in runs), total=int(flat.size))


def save_point_map(path: str | Path, points: np.ndarray, validity: np.ndarray) -> None:
    """Write a point map in the PMAP binary layout (f32 coordinates)."""
    points = np.asarray(points, dtype=np.float64)
    validity = np.asarray(validity)
    if points.ndim != 3 or points.shape[2] != 3 or validity.shape != points.shape[:2]:
        raise ValidationError("point map: points must be (H, W, 3) with matching validity")
    h, w = points.shape[:2]
    records = np.empty(h * w, dtype=_PMAP_RECORD)
    records["xyz"] = points.reshape(-1, 3).astype("<f4")
    records["valid"] = validity.reshape(-1).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(PMAP_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(records.tobytes())


def load_point_map(path: str | Path) -> PointMap:
    """Read a PMAP binary file into a float64 PointMap."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != PMAP_MAGIC:
        raise ParseError(f"point map {path}: missing PMAP header")
    h, w = struct.unpack("<II", raw[4:12])
    expected = 12 + h * w * _PMAP_RECORD.itemsize
    if len(raw) != expected:
        raise ValidationError(
            f"point map {path}: file holds {len(raw)} bytes, expected {expected}"
        )
    records = np.frombuffer(raw, dtype=_PMAP_RECORD, count=h * w, offset=12)
    points = records["xyz"].astype(np.float64).reshape(h, w, 3)
    validity = records["valid"].astype(bool).reshape(h, w)
    if not np.isfinite(points[validity]).all():
        raise ValidationError(f"point map {path}: non-finite coordinates at valid pixels")
    return PointMap(points=points, validity=validity)


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ValidationError(f"{context}: missing field '{key}'")
    return mapping[key]


def _parse_object(obj: dict, index: int, frames: int, height: int, width: int) -> ObjectTrack:
    ctx = f"objects[{index}]"
    if not isinstance(obj, dict):
        raise ValidationError(f"{ctx}: must be an object")
    object_id = _require(obj, "id", ctx)
    name = _require(obj, "name", ctx)
    action = _require(obj, "action", ctx)
    mass = _require(obj, "mass_kg", ctx)
    if not isinstance(object_id, str) or not isinstance(name, str) or not isinstance(action, str):
        raise ValidationError(f"{ctx}: id, name and action must be strings")
    if mass is not None:
        if not isinstance(mass, (int, float)) or isinstance(mass, bool):
            raise ValidationError(f"{ctx}.mass_kg: must be a number or null")
        mass = float(mass)
        if not np.isfinite(mass) or mass < 0:
            raise ValidationError(f"{ctx}.mass_kg: must be finite and non-negative")
    masks_json = _require(obj, "masks", ctx)
    if not isinstance(masks_json, list) or len(masks_json) != frames:
        raise ValidationError(f"{ctx}.masks: expected {frames} mask entries")
    masks = []
    for li, counts in enumerate(masks_json):
        if not isinstance(counts, list) or not all(
            isinstance(c, int) and not isinstance(c, bool) for c in counts
        ):
            raise ValidationError(f"{ctx}.masks[{li}]: counts must be a list of integers")
        try:
            masks.append(RleMask(counts=tuple(counts), total=height * width))
        except ValidationError as exc:
            raise ValidationError(f"{ctx}.masks[{li}]: {exc}") from exc
    return ObjectTrack(
        object_id=object_id, name=name, action=action, mass_kg=mass, masks=tuple(masks)
    )


def _parse_extrinsics(ext, frames: int):
    if ext is None:
        return None
    if not isinstance(ext, list) or len(ext) != frames:
        raise ValidationError(f"extrinsics: expected {frames} entries")
    parsed = []
    for li, entry in enumerate(ext):
        if not isinstance(entry, dict) or "R" not in entry or "T" not in entry:
            raise ValidationError(f"extrinsics[{li}]: must carry 'R' and 'T'")
        r = np.asarray(entry["R"], dtype=np.float64)
        t = np.asarray(entry["T"], dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValidationError(f"extrinsics[{li}]: R must be 3x3 and T length 3")
        parsed.append({"R": r, "T": t})
    return tuple(parsed)


def parse_trace(path: str | Path) -> VideoTrace:
    """Parse and validate a trace.json, loading its point map binaries.

    Raises ParseError with line context on malformed JSON and
    ValidationError naming the offending field on any invariant violation.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise ValidationError("trace: top level must be a JSON object")

    video_id = _require(data, "video_id", "trace")
    fps = _require(data, "fps", "trace")
    frames = _require(data, "frames", "trace")
    width = _require(data, "width", "trace")
    height = _require(data, "height", "trace")
    objects_json = _require(data, "objects", "trace")
    pmap_files = _require(data, "point_map_files", "trace")

    if not isinstance(video_id, str):
        raise ValidationError("video_id: must be a string")
    if not isinstance(fps, (int, float)) or isinstance(fps, bool) or not fps > 0:
        raise ValidationError("fps: must be a positive number")
    if not isinstance(frames, int) or isinstance(frames, bool) or frames < 2:
        raise ValidationError("frames: must be an integer >= 2")
    for key, value in (("width", width), ("height", height)):
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            raise ValidationError(f"{key}: must be a positive integer")
    if not isinstance(objects_json, list):
        raise ValidationError("objects: must be a list")
    if not isinstance(pmap_files, list) or len(pmap_files) != frames:
        raise ValidationError(f"point_map_files: expected {frames} entries")

    objects = tuple(
        _parse_object(obj, i, frames, height, width) for i, obj in enumerate(objects_json)
    )

    point_maps = []
    for li, rel in enumerate(pmap_files):
        if not isinstance(rel, str):
            raise ValidationError(f"point_map_files[{li}]: must be a path string")
        pmap = load_point_map(path.parent / rel)
        if pmap.shape != (height, width):
            raise ValidationError(
                f"point_map_files[{li}]: dimensions {pmap.shape} do not match "
                f"trace ({height}, {width})"
            )
        point_maps.append(pmap)

    extrinsics = _parse_extrinsics(data.get("extrinsics"), frames)

    return VideoTrace(
        video_id=video_id,
        fps=float(fps),
        frame_count=frames,
        width=width,
        height=height,
        objects=objects,
        point_maps=tuple(point_maps),
        extrinsics=extrinsics,
    )


def write_trace(
    path: str | Path,
    video_id: str,
    fps: float,
    width: int,
    height: int,
    object_masks: Sequence[tuple[str, str, str, Optional[float], Sequence[np.ndarray]]],
    point_maps: Sequence[tuple[np.ndarray, np.ndarray]],
    extrinsics=None,
) -> Path:
    """Write a trace.json plus PMAP binaries next to it. Test/fixture helper.

    ``object_masks`` holds (id, name, action, mass_kg, [mask grid per frame]);
    ``point_maps`` holds (points, validity) per frame.
    """
    path = Path(path)
    frames = len(point_maps)
    pmap_files = []
    for li, (points, validity) in enumerate(point_maps):
        rel = f"{path.stem}_pmap_{li:04d}.bin"
        save_point_map(path.parent / rel, points, validity)
        pmap_files.append(rel)
    objects = [
        {
            "id": oid,
            "name": name,
            "action": action,
            "mass_kg": mass,
            "masks": [list(rle_encode(g).counts) for g in grids],
        }
        for oid, name, action, mass, grids in object_masks
    ]
    payload = {
        "video_id": video_id,
        "fps": fps,
        "frames": frames,
        "width": width,
        "height": height,
        "objects": objects,
        "point_map_files": pmap_files,
    }
    if extrinsics is not None:
        payload["extrinsics"] = extrinsics
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path
