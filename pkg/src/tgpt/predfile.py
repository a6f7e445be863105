"""`.pred.json` prediction files: what `track` writes and `eval` reads.

A :class:`PredictedClip` is the array form of one file.  It can come from a
model run (:func:`from_tracking`), from disk (:func:`read_pred`) or from a
ground-truth annotation (:func:`from_annotation`, used by the identity checks).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .anno import ClipAnnotation, PointStatus, visibility_of


class BadPrediction(ValueError):
    pass


@dataclass
class PredictedClip:
    clip_id: str
    frames: list              # frame numbers, one per row
    queries: np.ndarray       # [N, 2]
    coords: np.ndarray        # [T, N, 2]
    visible: np.ndarray       # [T, N] bool
    status: list              # [T][N] PointStatus
    coarse: np.ndarray        # [T, N, 2]
    offsets: np.ndarray       # [T, N, 2]

    @property
    def n_tracks(self) -> int:
        return self.coords.shape[1]

    def row(self, frame: int) -> int:
        try:
            return self.frames.index(frame)
        except ValueError:
            raise BadPrediction(f"{self.clip_id}: no prediction for frame {frame}") from None


def from_tracking(pred, clip_id: str) -> PredictedClip:
    """Snapshot a model TrackPrediction (status = predicted argmax)."""
    status = pred.predicted_status()
    return PredictedClip(
        clip_id=clip_id,
        frames=list(pred.frames),
        queries=np.array(pred.queries, dtype=np.float64),
        coords=pred.coords.data.copy(),
        visible=np.array([[visibility_of(s) for s in row] for row in pred.text_status], dtype=bool),
        status=status,
        coarse=pred.coarse.data.copy(),
        offsets=pred.offsets.data.copy(),
    )


def from_annotation(gt: ClipAnnotation) -> PredictedClip:
    """A prediction that reproduces ``gt`` exactly on its annotated frames.

    Hidden points keep their last visible coordinate (or the query) so every
    row has a finite position.
    """
    T, N = len(gt.frame_indices), len(gt.tracks)
    coords = np.zeros((T, N, 2))
    vis = np.zeros((T, N), dtype=bool)
    status = [[None] * N for _ in range(T)]
    for n, tr in enumerate(gt.tracks):
        last = tr.observations[0].coord
        for t, ob in enumerate(tr.observations):
            if ob.coord is not None:
                last = ob.coord
            coords[t, n] = last
            vis[t, n] = ob.coord is not None
            status[t][n] = ob.status
    return PredictedClip(gt.clip_id, list(gt.frame_indices), np.array(gt.queries(), dtype=np.float64),
                         coords, vis, status, coords.copy(), np.zeros_like(coords))


def _r(v: float) -> float:
    # fixed precision keeps files byte-stable across platforms
    return float(f"{v:.6f}")


def dumps(p: PredictedClip) -> bytes:
    tracks = []
    for n in range(p.n_tracks):
        frames = []
        for t, f in enumerate(p.frames):
            frames.append({
                "frame": int(f),
                "coord": [_r(p.coords[t, n, 0]), _r(p.coords[t, n, 1])],
                "status": p.status[t][n].value,
                "visible": bool(p.visible[t, n]),
                "coarse": [_r(p.coarse[t, n, 0]), _r(p.coarse[t, n, 1])],
                "offset": [_r(p.offsets[t, n, 0]), _r(p.offsets[t, n, 1])],
            })
        tracks.append({"queries": [_r(p.queries[n, 0]), _r(p.queries[n, 1])], "frames": frames})
    doc = {"clip_id": p.clip_id, "tracks": tracks}
    return (json.dumps(doc, indent=1, sort_keys=False) + "\n").encode("utf-8")


def loads(blob) -> PredictedClip:
    try:
        doc = json.loads(blob)
        tracks = doc["tracks"]
        clip_id = str(doc["clip_id"])
        if not tracks:
            raise BadPrediction("prediction has no tracks")
        frames = [int(fr["frame"]) for fr in tracks[0]["frames"]]
        T, N = len(frames), len(tracks)
        coords = np.zeros((T, N, 2))
        coarse = np.zeros((T, N, 2))
        offsets = np.zeros((T, N, 2))
        vis = np.zeros((T, N), dtype=bool)
        status = [[None] * N for _ in range(T)]
        queries = np.zeros((N, 2))
        for n, tr in enumerate(tracks):
            queries[n] = tr["queries"]
            if [int(fr["frame"]) for fr in tr["frames"]] != frames:
                raise BadPrediction(f"track {n} frame list differs from track 0")
            for t, fr in enumerate(tr["frames"]):
                coords[t, n] = fr["coord"]
                coarse[t, n] = fr["coarse"]
                offsets[t, n] = fr["offset"]
                vis[t, n] = bool(fr["visible"])
                status[t][n] = PointStatus(fr["status"])
    except BadPrediction:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise BadPrediction(f"malformed prediction file: {e}") from None
    return PredictedClip(clip_id, frames, queries, coords, vis, status, coarse, offsets)


def write_pred(path, p: PredictedClip) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(p))


def read_pred(path) -> PredictedClip:
    with open(path, "rb") as fh:
        return loads(fh.read())
