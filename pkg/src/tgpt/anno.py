"""Clip annotation schema: point types, status vocabularies, `.vlspt.json` I/O.

A clip document is UTF-8 JSON with canonical formatting: fixed key order,
floats at three decimals, one observation per line.  ``serialize_clip`` is
the only writer; ``parse_clip`` accepts any well-formed document and
quantizes coordinates so that parse -> serialize -> parse is stable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum


class PointType(Enum):
    TISSUE = "Tissue"
    INSTRUMENT = "Instrument"


class PointStatus(Enum):
    CLEAR_VIEW = "Clear View"
    PULLED = "Pulled"
    REFLECTION = "Reflection"
    SMOKE_OBSCURATION = "Smoke Obscuration"
    INSTRUMENT_OBSCURATION = "Instrument Obscuration"
    TISSUE_OBSCURATION = "Tissue Obscuration"
    OUT_OF_VIEW = "Out of View"
    EXTERNAL_OCCLUSION = "External Occlusion"
    SELF_OCCLUSION = "Self-occlusion"


# head order: the index of a status in its type's tuple is its class id
TISSUE_STATUSES = (
    PointStatus.CLEAR_VIEW,
    PointStatus.PULLED,
    PointStatus.REFLECTION,
    PointStatus.SMOKE_OBSCURATION,
    PointStatus.INSTRUMENT_OBSCURATION,
    PointStatus.TISSUE_OBSCURATION,
    PointStatus.OUT_OF_VIEW,
)
INSTRUMENT_STATUSES = (
    PointStatus.CLEAR_VIEW,
    PointStatus.EXTERNAL_OCCLUSION,
    PointStatus.SELF_OCCLUSION,
    PointStatus.OUT_OF_VIEW,
)
STATUSES_FOR = {PointType.TISSUE: TISSUE_STATUSES, PointType.INSTRUMENT: INSTRUMENT_STATUSES}

INSTRUMENT_TYPES = (
    "Harmonic Ace Curved Shears",
    "Cadiere Forceps",
    "Fenestrated Bipolar Forceps",
    "Clip Applier",
    "Clip",
    "Tip-Up Fenestrated Grasper",
    "Needle Driver",
)


class Scenario(Enum):
    TISSUE_DEFORMATION = "Tissue Deformation"
    INSTRUMENT_OCCLUSION = "Instrument Occlusion"
    CAMERA_JITTER = "Camera Jitter"
    SURFACE_REFLECTION = "Surface Reflection"
    CAUTERIZATION_SMOKE = "Cauterization Smoke"
    CLEAN = "Clean"


CHALLENGE_SCENARIOS = tuple(s for s in Scenario if s is not Scenario.CLEAN)

# statuses under which a point without a known coordinate is predicted hidden
_HIDDEN = frozenset({
    PointStatus.OUT_OF_VIEW,
    PointStatus.INSTRUMENT_OBSCURATION,
    PointStatus.TISSUE_OBSCURATION,
    PointStatus.EXTERNAL_OCCLUSION,
    PointStatus.SELF_OCCLUSION,
})


def visibility_of(status: PointStatus, coord=None) -> bool:
    """Ground truth: visible iff a coordinate exists.  Prediction side
    (no coord): visible unless the status is an obscuration/out-of-view."""
    if coord is not None:
        return True
    return status not in _HIDDEN


def status_index(point_type: PointType, status: PointStatus) -> int:
    try:
        return STATUSES_FOR[point_type].index(status)
    except ValueError:
        raise VocabularyMismatch(f"{status.value!r} is not a {point_type.value} status") from None


class AnnotationError(ValueError):
    """Base for categorized document errors."""

    category = "AnnotationError"

    def __init__(self, message, clip_id=None, track=None, frame=None):
        where = ", ".join(
            f"{k}={v!r}" for k, v in (("clip_id", clip_id), ("track", track), ("frame", frame))
            if v is not None
        )
        super().__init__(f"{message} ({where})" if where else message)
        self.clip_id, self.track, self.frame = clip_id, track, frame


class MalformedDocument(AnnotationError):
    category = "MalformedDocument"


class SchemaViolation(AnnotationError):
    category = "SchemaViolation"


class VocabularyMismatch(ValueError):
    pass


@dataclass(frozen=True)
class InstrumentMeta:
    instrument_type: str
    instance_id: int


@dataclass(frozen=True)
class PointObservation:
    coord: tuple[float, float] | None
    status: PointStatus


@dataclass(frozen=True)
class Track:
    point_type: PointType
    observations: tuple[PointObservation, ...]
    instrument: InstrumentMeta | None = None


@dataclass(frozen=True)
class ClipAnnotation:
    clip_id: str
    width: int
    height: int
    annotation_fps: float
    scenario: Scenario
    frame_indices: tuple[int, ...]
    tracks: tuple[Track, ...]

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)

    def queries(self) -> list[tuple[float, float]]:
        return [t.observations[0].coord for t in self.tracks]


@dataclass(frozen=True)
class Violation:
    code: str
    track: int | None = None
    frame: int | None = None
    detail: str = ""


def validate_clip(clip: ClipAnnotation) -> list[Violation]:
    out: list[Violation] = []
    fi = list(clip.frame_indices)
    if not fi or any(b <= a for a, b in zip(fi, fi[1:])) or fi[0] < 0:
        out.append(Violation("FrameIndicesNotAscending", detail=str(fi)))
    if clip.width <= 0 or clip.height <= 0:
        out.append(Violation("BadExtent", detail=f"{clip.width}x{clip.height}"))
    seen: dict[tuple[int, str, int], int] = {}
    for ti, tr in enumerate(clip.tracks):
        if len(tr.observations) != len(fi):
            out.append(Violation("ObservationCountMismatch", ti,
                                 detail=f"{len(tr.observations)} vs {len(fi)} frames"))
        if tr.point_type is PointType.INSTRUMENT and tr.instrument is None:
            out.append(Violation("MissingInstrumentMeta", ti))
        if tr.point_type is PointType.TISSUE and tr.instrument is not None:
            out.append(Violation("UnexpectedInstrumentMeta", ti))
        if tr.instrument is not None:
            if tr.instrument.instrument_type not in INSTRUMENT_TYPES:
                out.append(Violation("UnknownInstrumentType", ti, detail=tr.instrument.instrument_type))
            if tr.instrument.instance_id < 0:
                out.append(Violation("NegativeInstanceId", ti))
        allowed = STATUSES_FOR[tr.point_type]
        for k, (frame, ob) in enumerate(zip(fi, tr.observations)):
            if ob.status not in allowed:
                out.append(Violation("VocabularyMismatch", ti, frame, ob.status.value))
            if ob.coord is None:
                if k == 0:
                    out.append(Violation("QueryPointInvisible", ti, frame))
            else:
                x, y = ob.coord
                if not (0 <= x < clip.width and 0 <= y < clip.height):
                    out.append(Violation("CoordOutOfBounds", ti, frame, f"({x}, {y})"))
    # keypoints of one instance share its id, so a clash is two tracks of the
    # same (type, id) claiming the same location in the same frame
    for ti, tr in enumerate(clip.tracks):
        if tr.instrument is None:
            continue
        for frame, ob in zip(fi, tr.observations):
            key = (frame, tr.instrument.instrument_type, tr.instrument.instance_id, ob.coord)
            if ob.coord is not None and key in seen:
                out.append(Violation("DuplicateInstanceId", ti, frame,
                                     f"same instance as track {seen[key]}"))
            else:
                seen.setdefault(key, ti)
    return out


# ---------------------------------------------------------------- parsing

_STATUS_BY_TEXT = {s.value: s for s in PointStatus}
_TYPE_BY_TEXT = {t.value: t for t in PointType}
_SCENARIO_BY_TEXT = {s.value: s for s in Scenario}
_TOP_KEYS = ("clip_id", "width", "height", "annotation_fps", "scenario", "frame_indices", "tracks")


def _q(v: float) -> float:
    return round(float(v), 3) + 0.0


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def parse_clip(blob: bytes | str) -> ClipAnnotation:
    try:
        text = blob.decode("utf-8") if isinstance(blob, (bytes, bytearray)) else blob
        doc = json.loads(text, parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError, _NonFinite, RecursionError) as e:
        raise MalformedDocument(f"not a JSON document: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaViolation("top level must be an object")
    cid = doc.get("clip_id")
    if not isinstance(cid, str):
        raise SchemaViolation("clip_id must be a string")

    def fail(msg, track=None, frame=None):
        raise SchemaViolation(msg, cid, track, frame)

    for k in _TOP_KEYS:
        if k not in doc:
            fail(f"missing field {k!r}")
    unknown = set(doc) - set(_TOP_KEYS)
    if unknown:
        fail(f"unknown fields {sorted(unknown)}")
    w, h = doc["width"], doc["height"]
    if not (_is_int(w) and _is_int(h) and w > 0 and h > 0):
        fail("width/height must be positive integers")
    fps = doc["annotation_fps"]
    if not (_is_num(fps) and fps > 0):
        fail("annotation_fps must be a positive number")
    scen = _SCENARIO_BY_TEXT.get(doc["scenario"]) if isinstance(doc["scenario"], str) else None
    if scen is None:
        fail(f"unknown scenario {doc['scenario']!r}")
    fi = doc["frame_indices"]
    if not (isinstance(fi, list) and fi and all(_is_int(f) and f >= 0 for f in fi)):
        fail("frame_indices must be a non-empty list of non-negative integers")
    if any(b <= a for a, b in zip(fi, fi[1:])):
        fail("frame_indices must be strictly ascending")
    if not isinstance(doc["tracks"], list):
        fail("tracks must be a list")

    tracks = []
    for ti, tr in enumerate(doc["tracks"]):
        tracks.append(_parse_track(tr, ti, fi, w, h, fail))
    clip = ClipAnnotation(cid, w, h, _q(fps), scen, tuple(fi), tuple(tracks))
    for v in validate_clip(clip):
        fail(f"{v.code}: {v.detail}".rstrip(": "), v.track, v.frame)
    return clip


def _parse_track(tr, ti, fi, w, h, fail) -> Track:
    if not isinstance(tr, dict):
        fail("track must be an object", ti)
    extra = set(tr) - {"point_type", "instrument_type", "instance_id", "observations"}
    if extra:
        fail(f"unknown track fields {sorted(extra)}", ti)
    pt = _TYPE_BY_TEXT.get(tr.get("point_type")) if isinstance(tr.get("point_type"), str) else None
    if pt is None:
        fail(f"unknown point_type {tr.get('point_type')!r}", ti)
    meta = None
    has_it, has_id = "instrument_type" in tr, "instance_id" in tr
    if pt is PointType.INSTRUMENT:
        if not (has_it and has_id):
            fail("instrument track needs instrument_type and instance_id", ti)
        it, iid = tr["instrument_type"], tr["instance_id"]
        if it not in INSTRUMENT_TYPES:
            fail(f"unknown instrument_type {it!r}", ti)
        if not (_is_int(iid) and iid >= 0):
            fail("instance_id must be a non-negative integer", ti)
        meta = InstrumentMeta(it, iid)
    elif has_it or has_id:
        fail("tissue track cannot carry instrument metadata", ti)
    obs = tr.get("observations")
    if not isinstance(obs, list):
        fail("observations must be a list", ti)
    if len(obs) != len(fi):
        fail(f"{len(obs)} observations for {len(fi)} frames", ti)
    parsed = []
    for frame, ob in zip(fi, obs):
        if not isinstance(ob, dict) or set(ob) != {"frame", "coord", "status"}:
            fail("observation must have exactly frame, coord, status", ti, frame)
        if ob["frame"] != frame or not _is_int(ob["frame"]):
            fail(f"observation frame {ob['frame']!r} does not match frame_indices", ti, frame)
        st = _STATUS_BY_TEXT.get(ob["status"]) if isinstance(ob["status"], str) else None
        if st is None:
            fail(f"unknown status {ob['status']!r}", ti, frame)
        if st not in STATUSES_FOR[pt]:
            fail(f"status {st.value!r} not allowed for {pt.value} points", ti, frame)
        c = ob["coord"]
        if c is None:
            coord = None
        else:
            if not (isinstance(c, list) and len(c) == 2 and all(_is_num(v) for v in c)):
                fail("coord must be [x, y] or null", ti, frame)
            coord = (_q(c[0]), _q(c[1]))
            if not (0 <= coord[0] < w and 0 <= coord[1] < h):
                fail(f"coord {coord} outside {w}x{h}", ti, frame)
        parsed.append(PointObservation(coord, st))
    return Track(pt, tuple(parsed), meta)


class _NonFinite(ValueError):
    pass


def _reject_constant(name):
    raise _NonFinite(f"non-finite number {name}")


# ---------------------------------------------------------------- writing

def _f3(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def serialize_clip(clip: ClipAnnotation) -> bytes:
    dump = json.dumps
    lines = [
        "{",
        f'  "clip_id": {dump(clip.clip_id)},',
        f'  "width": {clip.width},',
        f'  "height": {clip.height},',
        f'  "annotation_fps": {_f3(clip.annotation_fps)},',
        f'  "scenario": {dump(clip.scenario.value)},',
        f'  "frame_indices": [{", ".join(str(f) for f in clip.frame_indices)}],',
    ]
    if not clip.tracks:
        lines.append('  "tracks": []')
    else:
        lines.append('  "tracks": [')
        for ti, tr in enumerate(clip.tracks):
            head = f'    {{"point_type": {dump(tr.point_type.value)}, '
            if tr.instrument is not None:
                head += (f'"instrument_type": {dump(tr.instrument.instrument_type)}, '
                         f'"instance_id": {tr.instrument.instance_id}, ')
            lines.append(head + '"observations": [')
            for k, (frame, ob) in enumerate(zip(clip.frame_indices, tr.observations)):
                coord = "null" if ob.coord is None else f"[{_f3(ob.coord[0])}, {_f3(ob.coord[1])}]"
                sep = "," if k < len(tr.observations) - 1 else ""
                lines.append(f'      {{"frame": {frame}, "coord": {coord}, '
                             f'"status": {dump(ob.status.value)}}}{sep}')
            lines.append("    ]}" + ("," if ti < len(clip.tracks) - 1 else ""))
        lines.append("  ]")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_clip(path) -> ClipAnnotation:
    with open(path, "rb") as fh:
        return parse_clip(fh.read())


def write_clip(path, clip: ClipAnnotation) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_clip(clip))
