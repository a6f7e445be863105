import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_metrics, random_instance
from tgpt import metrics as M
from tgpt.anno import ClipAnnotation, PointObservation, PointStatus, PointType, Scenario, Track
from tgpt.predfile import PredictedClip, from_annotation

CV = PointStatus.CLEAR_VIEW


def clip(obs_per_track, w=256, h=256, frames=None, scenario=Scenario.CLEAN, cid="c"):
    T = len(obs_per_track[0])
    tracks = tuple(Track(PointType.TISSUE, tuple(PointObservation(c, s) for c, s in obs)) for obs in obs_per_track)
    return ClipAnnotation(cid, w, h, 1.0, scenario, tuple(frames or range(T)), tracks)


def pred_for(gt, coords, visible=None, status=None):
    coords = np.asarray(coords, dtype=np.float64)
    T, N = coords.shape[:2]
    vis = np.ones((T, N), bool) if visible is None else np.asarray(visible, bool)
    status = status or [[CV] * N for _ in range(T)]
    return PredictedClip(gt.clip_id, list(gt.frame_indices), coords[0].copy(), coords, vis, status,
                         coords.copy(), np.zeros_like(coords))


def single(dist_xy, w=256, h=256):
    gt = clip([[((10.0, 10.0), CV)]], w, h)
    p = pred_for(gt, [[[10.0 + dist_xy[0], 10.0 + dist_xy[1]]]])
    return M.EvalPair(gt, p)


def test_rescale():
    assert np.allclose(M.rescale((128, 128), (256, 256)), (128, 128))
    assert np.allclose(M.rescale((256, 192), (512, 384)), (128, 128))
    assert np.allclose(M.rescale((0, 0), (300, 17)), (0, 0))
    with pytest.raises(M.ZeroExtent):
        M.rescale((1, 1), (0, 10))


def test_delta_boundary_inclusive():
    assert M.delta_accuracy(single((4.0, 0.0)), 4) == 1.0
    assert M.delta_accuracy(single((4.0 + 1e-9, 0.0)), 4) == 0.0


def test_distance_three_gives_point_eight():
    p = single((3.0, 0.0))
    assert M.delta_accuracy(p, 2) == 0.0
    assert all(M.delta_accuracy(p, k) == 1.0 for k in (4, 8, 16, 32))
    assert M.delta_avg(p) == 0.8


def test_far_and_perfect():
    assert M.delta_avg(single((100.0, 0.0))) == 0.0
    assert M.delta_avg(single((0.0, 0.0))) == 1.0
    assert M.average_jaccard(single((0.0, 0.0))) == 1.0


def test_no_visible_points():
    gt = clip([[(None, PointStatus.OUT_OF_VIEW)]])
    pair = M.EvalPair(gt, pred_for(gt, [[[1.0, 1.0]]]))
    with pytest.raises(M.NoVisiblePoints):
        M.delta_accuracy(pair, 4)
    r = M.evaluate(pair)
    assert r.skipped and math.isnan(r.delta_avg) and math.isnan(r.epe)


def test_mixed_visibility_aj_half():
    gt = clip([[((50.0, 50.0), CV)], [(None, PointStatus.OUT_OF_VIEW)]])
    p = pred_for(gt, [[[50.0, 50.0], [10.0, 10.0]]], visible=[[True, True]])
    pair = M.EvalPair(gt, p)
    for k in M.THRESHOLDS:
        assert M.jaccard_at(pair, k) == 0.5
    assert M.average_jaccard(pair) == 0.5


def test_occlusion_accuracy_counts():
    gt = clip([[((1.0, 1.0), CV), (None, PointStatus.OUT_OF_VIEW)],
               [((2.0, 2.0), CV), ((3.0, 3.0), CV)]])
    coords = [[[1, 1], [2, 2]], [[0, 0], [3, 3]]]
    assert M.occlusion_accuracy(M.EvalPair(gt, pred_for(gt, coords, [[True, True], [False, True]]))) == 1.0
    assert M.occlusion_accuracy(M.EvalPair(gt, pred_for(gt, coords, [[False, False], [True, False]]))) == 0.0
    assert M.occlusion_accuracy(M.EvalPair(gt, pred_for(gt, coords, [[True, True], [True, True]]))) == 0.75


def test_endpoint_error():
    assert M.endpoint_error(single((3.0, 4.0))) == 5.0
    gt = clip([[((10.0, 10.0), CV)], [((20.0, 20.0), CV)]])
    p = pred_for(gt, [[[13.0, 10.0], [20.0, 24.0]]])
    assert M.endpoint_error(M.EvalPair(gt, p)) == 3.5
    gt = clip([[((10.0, 10.0), CV), (None, PointStatus.OUT_OF_VIEW)]])
    with pytest.raises(M.NoEndpointGT):
        M.endpoint_error(M.EvalPair(gt, pred_for(gt, [[[10, 10]], [[0, 0]]])))


def test_endpoint_uses_eval_frame():
    # x is halved going 512 -> 256, y is unchanged
    gt = clip([[((100.0, 100.0), CV)]], w=512, h=256)
    p = pred_for(gt, [[[106.0, 104.0]]])
    assert M.endpoint_error(M.EvalPair(gt, p)) == 5.0


def test_text_accuracy():
    R = PointStatus.REFLECTION
    gt = clip([[((1.0, 1.0), CV), ((1.0, 1.0), CV), ((1.0, 1.0), R), ((1.0, 1.0), R)]])
    ok = pred_for(gt, np.ones((4, 1, 2)), status=[[CV], [CV], [R], [R]])
    assert M.text_accuracy(M.EvalPair(gt, ok)) == 1.0
    conf = pred_for(gt, np.ones((4, 1, 2)), status=[[CV], [CV], [CV], [CV]])
    rec = M.text_accuracy(M.EvalPair(gt, conf), per_status=True)
    assert rec == {CV: 1.0, R: 0.0}
    two = pred_for(gt, np.ones((4, 1, 2)), status=[[CV], [R], [R], [R]])
    gt4 = clip([[((1.0, 1.0), CV), ((1.0, 1.0), CV), ((1.0, 1.0), R), ((1.0, 1.0), R)]])
    assert M.text_accuracy(M.EvalPair(gt4, two)) == 0.75


def test_identity_prediction_scores_perfect():
    rng = np.random.default_rng(3)
    for _ in range(20):
        gt, _ = random_instance(rng)
        r = M.evaluate(M.EvalPair(gt, from_annotation(gt)))
        assert r.oa == 1.0 and r.text_acc == 1.0
        if not r.skipped:
            assert r.aj == 1.0 and r.delta_avg == 1.0
            assert math.isnan(r.epe) or r.epe == 0.0


def test_brute_force_equivalence():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gt, p = random_instance(rng)
        ref = brute_metrics(gt, p)
        r = M.evaluate(M.EvalPair(gt, p))
        for key in ("delta_avg", "aj", "oa", "epe", "text_acc"):
            a, b = getattr(r, key), ref[key]
            assert (math.isnan(a) and math.isnan(b)) or abs(a - b) <= 1e-12, (key, a, b)


def test_aj_equals_delta_avg_when_all_visible():
    rng = np.random.default_rng(1)
    for _ in range(50):
        gt, p = random_instance(rng, all_visible=True)
        pair = M.EvalPair(gt, p)
        assert abs(M.average_jaccard(pair) - M.delta_avg(pair)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_properties(seed):
    rng = np.random.default_rng(seed)
    gt, p = random_instance(rng)
    pair = M.EvalPair(gt, p)
    js = [M.jaccard_at(pair, k) for k in M.THRESHOLDS]
    aj = M.average_jaccard(pair)
    assert min(js) - 1e-12 <= aj <= max(js) + 1e-12
    if any(o.coord is not None for tr in gt.tracks for o in tr.observations):
        ds = [M.delta_accuracy(pair, k) for k in M.THRESHOLDS]
        assert all(a <= b for a, b in zip(ds, ds[1:]))
        assert all(0.0 <= d <= 1.0 for d in ds)
    # reordering tracks leaves every metric unchanged
    perm = rng.permutation(len(gt.tracks))
    gt2 = ClipAnnotation(gt.clip_id, gt.width, gt.height, gt.annotation_fps, gt.scenario, gt.frame_indices,
                         tuple(gt.tracks[i] for i in perm))
    p2 = PredictedClip(p.clip_id, p.frames, p.queries[perm], p.coords[:, perm], p.visible[:, perm],
                       [[row[i] for i in perm] for row in p.status], p.coarse[:, perm], p.offsets[:, perm])
    a, b = M.evaluate(M.EvalPair(gt, p)), M.evaluate(M.EvalPair(gt2, p2))
    for key in ("delta_avg", "aj", "oa", "epe", "text_acc"):
        x, y = getattr(a, key), getattr(b, key)
        assert (math.isnan(x) and math.isnan(y)) or abs(x - y) <= 1e-12


def _report(cid, scenario, davg, skipped=False):
    nan = float("nan")
    return M.MetricReport(cid, scenario, None, {}, nan if skipped else davg, nan if skipped else davg,
                          1.0, nan if skipped else 1.0, 1.0, 3, skipped)


def test_aggregate():
    rows = M.aggregate([_report("a", "Clean", 0.6)])
    assert rows[0]["delta_avg"] == 0.6 and rows[-1]["group"] == M.MEAN_ROW
    rows = M.aggregate([_report("a", "Clean", 0.6), _report("b", "Clean", 0.8)])
    assert abs(rows[0]["delta_avg"] - 0.7) < 1e-15
    names = ["Tissue Deformation", "Instrument Occlusion", "Camera Jitter", "Surface Reflection", "Cauterization Smoke"]
    reps = [_report(f"{s}{i}", s, v) for s in names for i, v in enumerate((0.1 * names.index(s), 0.5))]
    rows = M.aggregate(reps)
    mean = rows[-1]["delta_avg"]
    assert abs(mean - np.mean([r["delta_avg"] for r in rows[:-1]])) < 1e-12
    assert abs(mean - np.mean([r.delta_avg for r in reps])) < 1e-12


def test_aggregate_skipped_column():
    rows = M.aggregate([_report("a", "Clean", 0.6), _report("b", "Clean", 0.0, skipped=True)])
    assert rows[0]["skipped"] == 1 and rows[0]["delta_avg"] == 0.6 and rows[0]["oa"] == 1.0


def test_mismatched_pair():
    gt = clip([[((1.0, 1.0), CV)], [((2.0, 2.0), CV)]])
    p = pred_for(gt, [[[1, 1]]])
    with pytest.raises(M.MismatchedPair):
        M.evaluate(M.EvalPair(gt, p))
