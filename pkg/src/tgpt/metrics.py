"""Point-tracking evaluation: delta accuracy, Average Jaccard, occlusion
accuracy, end-point error and status accuracy, plus per-group tables.

Every metric is computed on the annotated frames of the ground truth, after
rescaling both sides to the evaluation frame (256x256 by default).
Ground-truth visibility is "coordinate present"; predicted visibility is the
flag stored with the prediction.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .anno import ClipAnnotation, PointType
from .predfile import PredictedClip

THRESHOLDS = (2, 4, 8, 16, 32)
EVAL_SIZE = (256, 256)
MEAN_ROW = "Mean Results"


class ZeroExtent(ValueError):
    pass


class NoVisiblePoints(ValueError):
    pass


class EmptyEval(ValueError):
    pass


class NoEndpointGT(ValueError):
    pass


class MismatchedPair(ValueError):
    pass


def rescale(coord, from_wh, to_wh=EVAL_SIZE):
    fw, fh = from_wh
    if fw <= 0 or fh <= 0:
        raise ZeroExtent(f"source extent must be positive, got {from_wh}")
    c = np.asarray(coord, dtype=np.float64)
    return c * np.array([to_wh[0] / fw, to_wh[1] / fh])


@dataclass
class EvalPair:
    gt: ClipAnnotation
    pred: PredictedClip
    eval_w: int = EVAL_SIZE[0]
    eval_h: int = EVAL_SIZE[1]
    track_ids: tuple | None = None     # restrict to a subset of tracks

    def arrays(self) -> "_Arrays":
        return _arrays(self)


@dataclass
class _Arrays:
    gt_xy: np.ndarray      # [T, N, 2] eval frame (zeros where hidden)
    gt_vis: np.ndarray     # [T, N] bool
    pr_xy: np.ndarray      # [T, N, 2] eval frame
    pr_vis: np.ndarray     # [T, N] bool
    gt_status: list        # [T][N]
    pr_status: list        # [T][N]


def _arrays(pair: EvalPair) -> _Arrays:
    gt, pr = pair.gt, pair.pred
    if len(gt.tracks) != pr.n_tracks:
        raise MismatchedPair(f"{gt.clip_id}: {len(gt.tracks)} GT tracks vs {pr.n_tracks} predicted")
    ids = list(range(len(gt.tracks))) if pair.track_ids is None else list(pair.track_ids)
    rows = [pr.row(f) for f in gt.frame_indices]
    to = (pair.eval_w, pair.eval_h)
    T, N = len(rows), len(ids)
    gt_xy = np.zeros((T, N, 2))
    gt_vis = np.zeros((T, N), dtype=bool)
    gt_status = [[None] * N for _ in range(T)]
    for j, n in enumerate(ids):
        for t, ob in enumerate(gt.tracks[n].observations):
            gt_status[t][j] = ob.status
            if ob.coord is not None:
                gt_xy[t, j] = rescale(ob.coord, (gt.width, gt.height), to)
                gt_vis[t, j] = True
    pr_xy = rescale(pr.coords[rows][:, ids], (gt.width, gt.height), to)
    pr_vis = pr.visible[rows][:, ids].astype(bool)
    pr_status = [[pr.status[r][n] for n in ids] for r in rows]
    return _Arrays(gt_xy, gt_vis, pr_xy, pr_vis, gt_status, pr_status)


def _dist(a: _Arrays) -> np.ndarray:
    return np.linalg.norm(a.pr_xy - a.gt_xy, axis=-1)


def delta_accuracy(pair: EvalPair, k: float) -> float:
    if not k > 0:
        raise ValueError(f"threshold must be positive, got {k}")
    a = pair.arrays()
    if not a.gt_vis.any():
        raise NoVisiblePoints(f"{pair.gt.clip_id}: no GT-visible points")
    return float(np.mean(_dist(a)[a.gt_vis] <= k))


def delta_avg(pair: EvalPair) -> float:
    return float(np.mean([delta_accuracy(pair, k) for k in THRESHOLDS]))


def jaccard_at(pair: EvalPair, k: float) -> float:
    a = pair.arrays()
    if a.gt_vis.size == 0:
        raise EmptyEval(f"{pair.gt.clip_id}: nothing to evaluate")
    close = _dist(a) <= k
    tp = np.sum(a.gt_vis & a.pr_vis & close)
    fn = np.sum(a.gt_vis & (~a.pr_vis | ~close))
    fp = np.sum(~a.gt_vis & a.pr_vis)
    denom = tp + fp + fn
    # nothing visible and nothing claimed visible: vacuously perfect
    return 1.0 if denom == 0 else float(tp / denom)


def average_jaccard(pair: EvalPair) -> float:
    return float(np.mean([jaccard_at(pair, k) for k in THRESHOLDS]))


def occlusion_accuracy(pair: EvalPair) -> float:
    a = pair.arrays()
    if a.gt_vis.size == 0:
        raise EmptyEval(f"{pair.gt.clip_id}: nothing to evaluate")
    return float(np.mean(a.gt_vis == a.pr_vis))


def endpoint_error(pair: EvalPair) -> float:
    a = pair.arrays()
    if a.gt_vis.size == 0 or not a.gt_vis[-1].any():
        raise NoEndpointGT(f"{pair.gt.clip_id}: no visible point at the final annotated frame")
    return float(np.mean(_dist(a)[-1][a.gt_vis[-1]]))


def text_accuracy(pair: EvalPair, per_status: bool = False):
    """Micro status accuracy, or per-class recall when ``per_status``."""
    a = pair.arrays()
    g = [s for row in a.gt_status for s in row]
    p = [s for row in a.pr_status for s in row]
    if not g:
        raise EmptyEval(f"{pair.gt.clip_id}: no annotated statuses")
    if not per_status:
        return sum(x == y for x, y in zip(g, p)) / len(g)
    hit, tot = defaultdict(int), defaultdict(int)
    for x, y in zip(g, p):
        tot[x] += 1
        hit[x] += x == y
    return {s: hit[s] / tot[s] for s in tot}


def status_counts(pair: EvalPair) -> dict:
    """{gt status: (correct, total)}, the raw material for pooled recall."""
    a = pair.arrays()
    out = {}
    for grow, prow in zip(a.gt_status, a.pr_status):
        for x, y in zip(grow, prow):
            c, n = out.get(x, (0, 0))
            out[x] = (c + (x == y), n + 1)
    return out


@dataclass
class MetricReport:
    clip_id: str
    scenario: str
    instrument_type: str | None
    delta_at: dict            # k -> fraction (nan when skipped)
    delta_avg: float
    aj: float
    oa: float
    epe: float
    text_acc: float
    n_points: int
    skipped: bool             # no GT-visible point: excluded from delta/AJ/EPE
    status_counts: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"clip_id": self.clip_id, "scenario": self.scenario,
               "instrument_type": self.instrument_type or "",
               "n_points": self.n_points, "skipped": int(self.skipped)}
        for k in THRESHOLDS:
            out[f"delta_{k}"] = self.delta_at[k]
        out.update(delta_avg=self.delta_avg, aj=self.aj, oa=self.oa, epe=self.epe,
                   text_acc=self.text_acc)
        return out


def evaluate(pair: EvalPair, instrument_type: str | None = None) -> MetricReport:
    a = pair.arrays()
    n_points = a.gt_vis.shape[1]
    skipped = not a.gt_vis.any()
    nan = float("nan")
    if skipped:
        dk = {k: nan for k in THRESHOLDS}
        davg = aj = epe = nan
    else:
        dk = {k: delta_accuracy(pair, k) for k in THRESHOLDS}
        davg = float(np.mean(list(dk.values())))
        aj = average_jaccard(pair)
        try:
            epe = endpoint_error(pair)
        except NoEndpointGT:
            epe = nan
    return MetricReport(
        clip_id=pair.gt.clip_id,
        scenario=pair.gt.scenario.value,
        instrument_type=instrument_type,
        delta_at=dk, delta_avg=davg, aj=aj,
        oa=occlusion_accuracy(pair), epe=epe,
        text_acc=text_accuracy(pair),
        n_points=n_points, skipped=skipped,
        status_counts=status_counts(pair),
    )


def evaluate_by_instrument(gt: ClipAnnotation, pred: PredictedClip, **kw) -> list[MetricReport]:
    """One report per instrument type present (tissue tracks pooled as "Tissue")."""
    groups = defaultdict(list)
    for n, tr in enumerate(gt.tracks):
        key = tr.instrument.instrument_type if tr.point_type is PointType.INSTRUMENT else PointType.TISSUE.value
        groups[key].append(n)
    return [evaluate(EvalPair(gt, pred, track_ids=tuple(ix), **kw), instrument_type=key)
            for key, ix in sorted(groups.items())]


AGG_COLUMNS = ("aj", "delta_avg", "oa", "epe", "text_acc")


def _nanmean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def aggregate(reports, grouping: str = "scenario") -> list[dict]:
    """Per-group unweighted means over clips plus a final mean row.

    Skipped clips (nan delta/AJ/EPE) drop out of those columns and are
    counted in ``skipped``.
    """
    if grouping not in ("scenario", "instrument_type"):
        raise ValueError(f"unknown grouping {grouping!r}")
    reports = [r for r in reports if getattr(r, grouping) is not None]
    by = defaultdict(list)
    for r in reports:
        by[getattr(r, grouping)].append(r)

    def row(name, rs):
        out = {"group": name, "clips": len(rs), "skipped": sum(r.skipped for r in rs)}
        for c in AGG_COLUMNS:
            out[c] = _nanmean([getattr(r, c) for r in rs])
        return out

    rows = [row(g, by[g]) for g in sorted(by)]
    if reports:
        rows.append(row(MEAN_ROW, reports))
    return rows


def pooled_status_recall(reports) -> dict:
    """Per-status recall pooled over every (point, frame) in ``reports``."""
    hit, tot = defaultdict(int), defaultdict(int)
    for r in reports:
        for s, (c, n) in r.status_counts.items():
            hit[s] += c
            tot[s] += n
    return {s: hit[s] / tot[s] for s in tot}
