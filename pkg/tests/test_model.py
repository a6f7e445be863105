from dataclasses import replace

import numpy as np
import pytest

from tgpt import numerics as nx, vision
from tgpt.anno import (ClipAnnotation, InstrumentMeta, PointObservation, PointStatus as S, PointType as PT,
                       Scenario, Track, VocabularyMismatch)
from tgpt.model import (LossWeights, ModelConfig, TextMode, Tracker, TrackPrediction, deformable_attention,
                        encode_text, fuse_multiscale, predict_attributes, text_guided_refine, total_loss,
                        track_clip)
from tgpt.synth import ValueNoise


def frames_fixture(T=2, size=64, seed=0, shift=(3.0, 2.0)):
    tex = ValueNoise(np.random.default_rng(seed), size, size)
    gx, gy = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    return np.stack([np.clip(tex(gx - t * shift[0], gy - t * shift[1]), 0, 1) for t in range(T)])


def annotation(coords, statuses, size=64, types=None):
    """coords [T, N, 2] (nan = hidden); every frame annotated."""
    T, N, _ = coords.shape
    types = types or [PT.TISSUE] * N
    tracks = []
    for n in range(N):
        obs = tuple(PointObservation(None if np.isnan(coords[t, n, 0]) else tuple(coords[t, n]),
                                     statuses[t][n]) for t in range(T))
        meta = InstrumentMeta("Clip", n) if types[n] is PT.INSTRUMENT else None
        tracks.append(Track(types[n], obs, meta))
    return ClipAnnotation("fx", size, size, 1.0, Scenario.CLEAN, tuple(range(T)), tuple(tracks))


def test_encode_text():
    p = Tracker().params
    a = encode_text(p, PT.TISSUE, S.CLEAR_VIEW)
    assert a.shape == (2, 64)
    assert np.array_equal(a.data, encode_text(p, PT.TISSUE, S.CLEAR_VIEW).data)
    assert np.allclose(np.linalg.norm(a.data, axis=1), 1.0, atol=1e-9, rtol=0)
    with pytest.raises(VocabularyMismatch):
        encode_text(p, PT.TISSUE, S.SELF_OCCLUSION)


def _parts(model, frames, q, multiscale=False):
    pyr = vision.extract_pyramid(frames, model.params)
    F_q = vision.query_features(pyr.frame(0), q)
    ctx = vision.query_context(pyr.frame(0), q) if multiscale else None
    match = vision.coarse_match(F_q, pyr, context=ctx)
    return pyr, F_q, match, fuse_multiscale(model.params, F_q, match, pyr)


def test_fusion_corr_at_matched_cell_is_score():
    model = Tracker(replace(ModelConfig(), multiscale_match=False))
    frames = frames_fixture()
    _, _, match, fused = _parts(model, frames, [[20.0, 28.0], [44.0, 12.0]])
    assert fused.n_levels == 3
    corr0 = fused.corr[0].data.reshape(2, 2, -1)
    got = np.take_along_axis(corr0, match.cell[..., None], axis=-1)[..., 0]
    assert np.allclose(got, match.score, rtol=0, atol=1e-12)


def test_fusion_gradcheck():
    model = Tracker()
    frames = frames_fixture()
    q = [[20.0, 28.0], [44.0, 12.0]]
    pyr = vision.extract_pyramid(frames, model.params)
    F_q = vision.query_features(pyr.frame(0), q)
    match = vision.coarse_match(F_q, pyr)
    rng = np.random.default_rng(0)
    r = [rng.normal(size=fused_shape) for fused_shape in [(2, 2, 8, 8, 32), (2, 2, 4, 4, 32), (2, 2, 2, 2, 32)]]
    W = model.params["fuse.l1.W"]

    def f(_):
        fu = fuse_multiscale(model.params, F_q, match, pyr)
        tot = None
        for lv in range(3):
            t = nx.sum_(nx.mul(fu.dense(lv), r[lv]))
            tot = t if tot is None else nx.add(tot, t)
        return tot

    assert nx.grad_check(f, W, indices=rng.choice(W.size, 20, replace=False)) <= 1e-4


def _bilinear(grid, x, y):
    h, w = grid.shape[:2]
    x, y = min(max(x, 0), w - 1), min(max(y, 0), h - 1)
    x0, y0 = min(int(np.floor(x)), w - 2) if w > 1 else 0, min(int(np.floor(y)), h - 2) if h > 1 else 0
    u, v = x - x0, y - y0
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    return ((1 - u) * (1 - v) * grid[y0, x0] + u * (1 - v) * grid[y0, x1]
            + (1 - u) * v * grid[y1, x0] + u * v * grid[y1, x1])


def test_deformable_zero_offsets_uniform_weights():
    model = Tracker()
    p = model.params
    for k in ("offset", "weight"):
        p[f"attr.deform.{k}.W"].data[:] = 0.0
        p[f"attr.deform.{k}.b"].data[:] = 0.0
    frames = frames_fixture()
    q = np.array([[20.0, 28.0], [44.0, 12.0]])
    _, F_q, match, fused = _parts(model, frames, q)
    ref = np.array([[[20.0, 28.0], [44.0, 12.0]], [[16.0, 16.0], [37.0, 50.0]]])
    qq = nx.add(F_q, np.zeros((2, 1, 1)))
    out = deformable_attention(p, "attr.deform", qq, fused, ref, model.cfg)
    assert np.allclose(out.weights.data.sum(-1), 1.0, rtol=0, atol=1e-12)

    dense = [fused.dense(lv).data for lv in range(3)]
    want = np.zeros((2, 2, 32))
    for t in range(2):
        for n in range(2):
            acc = np.zeros(32)
            for lv, s in enumerate((8, 16, 32)):
                x, y = ref[t, n] / s - 0.5
                acc += _bilinear(dense[lv][t, n], x, y)
            mean = acc / 3                      # K samples at the same spot, 3 levels
            want[t, n] = mean @ p["attr.deform.out.W"].data + p["attr.deform.out.b"].data
    assert np.allclose(out.value.data, want, rtol=0, atol=1e-10)


def test_deformable_offset_gradcheck():
    model = Tracker()
    frames = frames_fixture()
    q = np.array([[21.0, 27.0], [43.0, 13.0]])
    _, F_q, _, fused = _parts(model, frames, q)
    ref = np.array([[[21.0, 27.0], [43.0, 13.0]], [[18.3, 15.1], [37.7, 49.2]]])
    W = model.params["attr.deform.offset.W"]
    rng = np.random.default_rng(1)
    W.data[:] = rng.uniform(-0.05, 0.05, W.shape)
    r = rng.normal(size=(2, 2, 32))
    qq = nx.add(F_q, np.zeros((2, 1, 1)))

    def f(_):
        return nx.sum_(nx.mul(deformable_attention(model.params, "attr.deform", qq, fused, ref,
                                                   model.cfg).value, r))

    assert nx.grad_check(f, W, indices=rng.choice(W.size, 30, replace=False)) <= 1e-4


def test_head_shapes():
    model = Tracker()
    frames = frames_fixture()
    rng = np.random.default_rng(2)
    for n in (1, 3, 5):
        q = rng.uniform(4, 60, size=(n, 2))
        _, F_q, match, fused = _parts(model, frames, q)
        for pt, rows in ((PT.TISSUE, 7), (PT.INSTRUMENT, 4)):
            a = predict_attributes(model.params, F_q, fused, match.xy, pt, model.cfg)
            assert a.type_logits.shape == (2, 2, n)
            assert a.status_logits.shape == (2, rows, n)


def test_refined_is_coarse_plus_offset_and_zero_init():
    model = Tracker()
    frames = frames_fixture(T=3)
    q = np.array([[20.0, 28.0], [44.0, 12.0]])
    pred = track_clip(model, frames, q, [PT.TISSUE, PT.INSTRUMENT], TextMode.PREDICTED)
    assert np.all(pred.offsets.data == 0.0)                  # zero-initialised offset layer
    assert np.array_equal(pred.coords.data, pred.coarse.data)
    assert np.array_equal(pred.coords.data[0], q)
    rng = np.random.default_rng(3)
    model.params["refine.offset.W"].data[:] = rng.normal(size=(32, 2))
    pred = track_clip(model, frames, q, [PT.TISSUE, PT.INSTRUMENT], TextMode.PREDICTED)
    assert np.any(pred.offsets.data != 0.0)
    assert np.array_equal(pred.coords.data, pred.coarse.data + pred.offsets.data)


def test_refined_arithmetic():
    model = Tracker()
    frames = frames_fixture(T=1)
    _, F_q, match, fused = _parts(model, frames, [[10.0, 20.0]])
    model.params["refine.offset.b"].data[:] = np.array([2.0, -3.0]) / model.cfg.offset_scale
    out = text_guided_refine(model.params, F_q, None, fused, np.array([[[10.0, 20.0]]]), model.cfg)
    assert np.array_equal(out.refined.data, [[[12.0, 17.0]]])


def _saturated_pred(coords, statuses, types):
    T, N, _ = coords.shape
    groups, logits = {}, {}
    for pt in dict.fromkeys(types):
        ix = np.array([i for i, t in enumerate(types) if t is pt])
        voc = (7 if pt is PT.TISSUE else 4)
        from tgpt.anno import STATUSES_FOR
        L = np.zeros((T, voc, len(ix)))
        for t in range(T):
            for j, n in enumerate(ix):
                L[t, STATUSES_FOR[pt].index(statuses[t][n]), j] = 60.0
        groups[pt], logits[pt] = ix, nx.Tensor(L)
    c = nx.Tensor(np.nan_to_num(coords, nan=0.0))
    return TrackPrediction(list(range(T)), types, coords[0], c, c, nx.Tensor(np.zeros_like(c.data)),
                           logits, groups, statuses, TextMode.GROUND_TRUTH)


def test_perfect_prediction_loss():
    T = 5
    t = np.arange(T)[:, None]
    coords = np.stack([np.hstack([10 + 2 * t, 20 - t]), np.hstack([40 + 0 * t, 5 + 3 * t])], axis=1).astype(float)
    st = [[S.CLEAR_VIEW, S.EXTERNAL_OCCLUSION if k == 2 else S.CLEAR_VIEW] for k in range(T)]
    types = [PT.TISSUE, PT.INSTRUMENT]
    gt = annotation(coords, st, types=types)
    loss, parts = total_loss(_saturated_pred(coords, st, types), gt)
    assert loss.item() < 1e-6
    assert loss.item() == parts["points"] + parts["smooth"] + parts["text"]


def test_huber_and_ce_closed_forms():
    coords = np.array([[[10.0, 10.0]], [[11.0, 12.0]], [[12.0, 14.0]]])
    st = [[S.CLEAR_VIEW]] * 3
    pred = _saturated_pred(coords, st, [PT.TISSUE])
    off = coords.copy()
    off[1, 0, 0] += 0.5
    pred.coords = nx.Tensor(off)
    gt = annotation(coords, st)
    _, parts = total_loss(pred, gt, LossWeights(smooth=0.0))
    assert parts["points"] == pytest.approx(0.125, abs=1e-12)

    one = annotation(coords[:1], st[:1])
    p1 = _saturated_pred(coords[:1], st[:1], [PT.TISSUE])
    p1.status_logits[PT.TISSUE] = nx.Tensor(np.zeros((1, 7, 1)))
    _, parts = total_loss(p1, one)
    assert parts["text"] == pytest.approx(np.log(7), abs=1e-12)


def test_loss_breakdown_sums_exactly():
    model = Tracker()
    frames = frames_fixture(T=4)
    rng = np.random.default_rng(4)
    for _ in range(5):
        q = rng.uniform(6, 58, size=(3, 2))
        coords = q[None] + rng.normal(scale=2.0, size=(4, 3, 2))
        coords = np.clip(coords, 0, 63)
        st = [[S.CLEAR_VIEW, S.PULLED, S.REFLECTION] for _ in range(4)]
        coords[0] = q
        gt = annotation(coords, st)
        pred = track_clip(model, frames, q, [PT.TISSUE] * 3, TextMode.GROUND_TRUTH,
                          gt_status=st, coarse="soft")
        loss, parts = total_loss(pred, gt)
        assert loss.item() == parts["points"] + parts["smooth"] + parts["text"]


def test_zero_text_equivalence():
    model = Tracker()
    for k in ("text.table", "text.proj.W", "text.proj.b"):
        model.params[k].data[:] = 0.0
    frames = frames_fixture(T=3)
    q = np.array([[20.0, 28.0], [44.0, 12.0]])
    model.params["refine.offset.W"].data[:] = np.random.default_rng(5).normal(size=(32, 2))
    st = [[S.PULLED, S.CLEAR_VIEW]] * 3
    a = track_clip(model, frames, q, [PT.TISSUE] * 2, TextMode.GROUND_TRUTH, gt_status=st)
    b = track_clip(model, frames, q, [PT.TISSUE] * 2, TextMode.NONE)
    assert np.array_equal(a.coords.data, b.coords.data)
    assert np.array_equal(a.offsets.data, b.offsets.data)


def test_gt_and_pred_agree_when_head_is_right():
    model = Tracker()
    p = model.params
    p["attr.tissue.W"].data[:] = 0.0
    p["attr.tissue.b"].data[:] = [0, 0, 50.0, 0, 0, 0, 0]           # always Reflection
    p["refine.offset.W"].data[:] = np.random.default_rng(6).normal(size=(32, 2))
    frames = frames_fixture(T=3)
    q = np.array([[20.0, 28.0], [44.0, 12.0]])
    st = [[S.REFLECTION] * 2] * 3
    a = track_clip(model, frames, q, [PT.TISSUE] * 2, TextMode.GROUND_TRUTH, gt_status=st)
    b = track_clip(model, frames, q, [PT.TISSUE] * 2, TextMode.PREDICTED)
    assert np.array_equal(a.coords.data, b.coords.data)
    c = track_clip(model, frames, q, [PT.TISSUE] * 2, TextMode.GROUND_TRUTH,
                   gt_status=[[S.CLEAR_VIEW] * 2] * 3)
    assert not np.array_equal(a.coords.data, c.coords.data)


def test_gt_mode_needs_statuses():
    with pytest.raises(ValueError):
        track_clip(Tracker(), frames_fixture(), [[20.0, 20.0]], [PT.TISSUE], TextMode.GROUND_TRUTH)


def e2e_fixture():
    """2 frames, one tissue and one instrument point.

    Every parameter group gets a gradient except attr.type, which the loss
    never reads (its tape gradient and finite difference are both zero).
    """
    model = Tracker(seed=3)
    rng = np.random.default_rng(7)
    model.params["refine.offset.W"].data[:] = rng.normal(scale=0.1, size=(32, 2))
    frames = frames_fixture(T=2, size=64, seed=3)
    q = np.array([[21.3, 27.6], [42.7, 13.4]])
    coords = np.stack([q, q + [3.1, 1.7]])
    st = [[S.CLEAR_VIEW, S.CLEAR_VIEW], [S.REFLECTION, S.SELF_OCCLUSION]]
    types = [PT.TISSUE, PT.INSTRUMENT]
    gt = annotation(coords, st, types=types)

    def loss():
        pred = track_clip(model, frames, q, types, TextMode.GROUND_TRUTH,
                          gt_status=st, coarse="soft")
        return total_loss(pred, gt)[0]

    return model, loss


def e2e_worst(samples=6, seed=0):
    """Per parameter group, the better of two finite-difference step sizes.

    The loss is ~1e2 while some cross-attention gradients are ~1e-4, so at
    eps=1e-5 cancellation alone costs ~1e-3 relative; at 1e-4 the large
    embedding-bias gradients cross relu kinks.  A wrong tape gradient
    disagrees at both steps.
    """
    model, loss = e2e_fixture()
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in model.params.items():
        idx = rng.choice(p.size, min(samples, p.size), replace=False)
        worst[name] = min(nx.grad_check(lambda _: loss(), p, eps=e, indices=idx) for e in (1e-5, 1e-4))
    return worst


def test_end_to_end_gradcheck():
    worst = e2e_worst()
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    assert not bad, bad
