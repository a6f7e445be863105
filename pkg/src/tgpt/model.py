"""Text-guided point tracker.

Pipeline per frame batch: pyramid -> coarse match -> multi-scale fusion ->
attribute heads (point type, point status) -> text-guided refinement, where
the refinement adds predicted offsets to the coarse position.  All tensors
carry a leading frame axis T and a query axis N.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import numerics as nx
from . import vision
from .anno import (
    INSTRUMENT_STATUSES,
    STATUSES_FOR,
    TISSUE_STATUSES,
    ClipAnnotation,
    PointStatus,
    PointType,
    VocabularyMismatch,
    status_index,
    visibility_of,
)
from .numerics import Tensor

N_TYPES = len(PointType)
VOCAB = list(PointType) + list(PointStatus)   # 2 + 9 text symbols


class TextMode(str, Enum):
    GROUND_TRUTH = "gt"
    PREDICTED = "pred"
    NONE = "none"


class EmptyClip(ValueError):
    pass


class FrameCoverageGap(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: int = 32
    text_dim: int = 64
    heads: int = 2
    points: int = 4
    levels: int = 3
    tau: float = 0.05
    offset_scale: float = 8.0     # refinement offsets are predicted in patch units
    multiscale_match: bool = True  # coarse match also compares levels 1-2

    def check(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.levels != 3:
            raise ValueError("the visual branch provides exactly three levels")


@dataclass
class LossWeights:
    huber_delta: float = 6.0
    smooth: float = 1.0
    text: float = 1.0


# ---------------------------------------------------------------- parameters

def _linear(p, rng, prefix, fan_in, fan_out, bias=True, zero=False):
    bound = 1.0 / np.sqrt(fan_in)
    W = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-bound, bound, (fan_in, fan_out))
    p[f"{prefix}.W"] = nx.parameter(W, f"{prefix}.W")
    if bias:
        p[f"{prefix}.b"] = nx.parameter(np.zeros(fan_out), f"{prefix}.b")


def _deform_params(p, rng, prefix, cfg):
    C, H, L, K = cfg.channels, cfg.heads, cfg.levels, cfg.points
    _linear(p, rng, f"{prefix}.offset", C, H * L * K * 2)
    _linear(p, rng, f"{prefix}.weight", C, H * L * K)
    _linear(p, rng, f"{prefix}.out", C, C)


def init_params(seed: int, cfg: ModelConfig) -> dict:
    cfg.check()
    rng = np.random.default_rng(seed)
    C, D = cfg.channels, cfg.text_dim
    p = vision.init_params(rng, C)
    p["text.table"] = nx.parameter(rng.uniform(-1.0, 1.0, (len(VOCAB), D)), "text.table")
    _linear(p, rng, "text.proj", D, C)
    for lv in range(cfg.levels):
        _linear(p, rng, f"fuse.l{lv}", C + 1, C)
    _deform_params(p, rng, "attr.deform", cfg)
    _linear(p, rng, "attr.type", C, N_TYPES)
    _linear(p, rng, "attr.tissue", C, len(TISSUE_STATUSES))
    _linear(p, rng, "attr.instrument", C, len(INSTRUMENT_STATUSES))
    for name in ("q", "k", "v", "o"):
        _linear(p, rng, f"refine.xattn.{name}", C, C, bias=False)
    _deform_params(p, rng, "refine.deform", cfg)
    _linear(p, rng, "refine.offset", C, 2, zero=True)
    return p


class Tracker:
    """Parameters plus configuration; the math lives in module functions."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.params = init_params(seed, self.cfg)

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        unknown = set(state) - set(self.params)
        if missing or unknown:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise nx.ShapeMismatch(f"{k}: checkpoint {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def group(self, prefix: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- text branch

def vocab_rows(point_types, statuses) -> tuple[np.ndarray, np.ndarray]:
    """Table rows for (type, status) pairs; raises on cross-vocabulary pairs."""
    t_rows, s_rows = [], []
    for pt, st in zip(point_types, statuses):
        if st not in STATUSES_FOR[pt]:
            raise VocabularyMismatch(f"{st.value!r} is not a {pt.value} status")
        t_rows.append(VOCAB.index(pt))
        s_rows.append(VOCAB.index(st))
    return np.array(t_rows, dtype=np.intp), np.array(s_rows, dtype=np.intp)


def encode_text(params, point_type: PointType, status: PointStatus) -> Tensor:
    """[2 x D_t]: one L2-normalised row for the type, one for the status."""
    t, s = vocab_rows([point_type], [status])
    return nx.l2_normalize(nx.index(params["text.table"], np.array([t[0], s[0]])))


def encode_text_batch(params, type_rows: np.ndarray, status_rows: np.ndarray) -> Tensor:
    """Rows [..., 2, D_t] for integer table indices of matching shape."""
    idx = np.stack([type_rows, status_rows], axis=-1)
    return nx.l2_normalize(nx.index(params["text.table"], idx))


# ---------------------------------------------------------------- fusion

@dataclass
class FusedFeatures:
    """Lazy per-query fused grids.

    The fused map at level l is ``linear(concat(cell, corr))``; because the
    bilinear weights sum to one it is sampled as
    ``sample(cell @ W_cell + b) + sample(corr) * w_corr``, so the
    [T, N, h, w, C] tensor is never materialised.
    """

    cells: list     # Tensor [T, h, w, C] per level: projected cell features + bias
    corr: list      # Tensor [T, N, h, w] per level: cosine vs the query feature
    w_corr: list    # Tensor [C] per level
    strides: tuple

    @property
    def n_levels(self) -> int:
        return len(self.cells)

    def sample(self, level: int, loc, channels: slice) -> Tensor:
        """Fused features at ``loc`` [T, N, S, 2] (level cell units) -> [T, N, S, c]."""
        cells, corr = self.cells[level], self.corr[level]
        T, N, h, w = corr.shape
        S = loc.shape[2]
        grid = nx.index(cells, (Ellipsis, channels))
        c = grid.shape[-1]
        part = nx.bilinear_sample(grid, nx.reshape(loc, (T, N * S, 2)))
        part = nx.reshape(part, (T, N, S, c))
        cg = nx.reshape(corr, (T * N, h, w, 1))
        cs = nx.bilinear_sample(cg, nx.reshape(loc, (T * N, S, 2)))
        cs = nx.reshape(cs, (T, N, S, 1))
        return nx.add(part, nx.mul(cs, nx.index(self.w_corr[level], channels)))

    def dense(self, level: int) -> Tensor:
        """Materialised fused grid [T, N, h, w, C] (tests and inspection only)."""
        cells, corr = self.cells[level], self.corr[level]
        T, N, h, w = corr.shape
        c5 = nx.reshape(cells, (T, 1, h, w, cells.shape[-1]))
        k5 = nx.reshape(corr, (T, N, h, w, 1))
        return nx.add(c5, nx.mul(k5, self.w_corr[level]))


def fuse_multiscale(params, F_q: Tensor, match: vision.CoarseMatch, pyr: vision.FeaturePyramid) -> FusedFeatures:
    C = F_q.shape[-1]
    qn = nx.l2_normalize(F_q)
    cells, corr, wc = [], [], []
    for lv, grid in enumerate(pyr.levels):
        T, h, w, Cg = grid.shape
        if Cg != C:
            raise nx.ShapeMismatch(f"level {lv} has {Cg} channels, queries have {C}")
        W = params[f"fuse.l{lv}.W"]
        gn = nx.l2_normalize(nx.reshape(grid, (T, h * w, C)))
        k = nx.matmul(qn, nx.transpose(gn, (0, 2, 1)))                # [T, N, hw]
        corr.append(nx.reshape(k, (T, k.shape[1], h, w)))
        cells.append(nx.linear(grid, nx.index(W, slice(0, C)), params[f"fuse.l{lv}.b"]))
        wc.append(nx.index(W, C))
    return FusedFeatures(cells, corr, wc, tuple(pyr.strides))


# ---------------------------------------------------------------- attention

@dataclass
class DeformOutput:
    value: Tensor         # [T, N, C]
    weights: Tensor       # [T, N, heads, levels * points], rows sum to 1
    offsets: Tensor       # [T, N, heads, levels, points, 2] in level cells


def deformable_attention(params, prefix, query, fused: FusedFeatures, ref_xy, cfg: ModelConfig) -> DeformOutput:
    T, N, C = query.shape
    H, L, K = cfg.heads, fused.n_levels, cfg.points
    if L != cfg.levels:
        raise nx.ShapeMismatch(f"fused features have {L} levels, config expects {cfg.levels}")
    ref = nx.as_tensor(ref_xy)
    if ref.shape != (T, N, 2):
        raise nx.ShapeMismatch(f"reference points {ref.shape} vs queries {query.shape}")
    off = nx.reshape(nx.linear(query, params[f"{prefix}.offset.W"], params[f"{prefix}.offset.b"]),
                     (T, N, H, L, K, 2))
    logits = nx.reshape(nx.linear(query, params[f"{prefix}.weight.W"], params[f"{prefix}.weight.b"]),
                        (T, N, H, L * K))
    attn = nx.softmax(logits, axis=-1)
    ch = C // H
    heads = []
    for h in range(H):
        sl = slice(h * ch, (h + 1) * ch)
        samples = []
        for lv, stride in enumerate(fused.strides):
            base = nx.add(nx.scalar_mul(ref, 1.0 / stride), -0.5)
            loc = nx.add(nx.reshape(base, (T, N, 1, 2)), nx.index(off, (slice(None), slice(None), h, lv)))
            samples.append(fused.sample(lv, loc, sl))
        stack = nx.concat(samples, axis=2)                                   # [T, N, L*K, ch]
        w = nx.reshape(nx.index(attn, (slice(None), slice(None), h)), (T, N, L * K, 1))
        heads.append(nx.sum_(nx.mul(stack, w), axis=2))
    out = nx.linear(nx.concat(heads, axis=-1), params[f"{prefix}.out.W"], params[f"{prefix}.out.b"])
    return DeformOutput(out, attn, off)


# ---------------------------------------------------------------- heads

@dataclass
class AttributePrediction:
    type_logits: Tensor       # [T, 2, N]
    status_logits: Tensor     # [T, 7, N] tissue or [T, 4, N] instrument
    point_type: PointType


def _attribute_features(params, F_q, fused, ref_xy, cfg) -> Tensor:
    return deformable_attention(params, "attr.deform", F_q, fused, ref_xy, cfg).value


def _heads(params, hfeat, point_type: PointType) -> AttributePrediction:
    if not isinstance(point_type, PointType):
        raise VocabularyMismatch(f"unknown point type {point_type!r}")
    name = "attr.tissue" if point_type is PointType.TISSUE else "attr.instrument"
    tl = nx.linear(hfeat, params["attr.type.W"], params["attr.type.b"])
    sl = nx.linear(hfeat, params[f"{name}.W"], params[f"{name}.b"])
    return AttributePrediction(nx.transpose(tl, (0, 2, 1)), nx.transpose(sl, (0, 2, 1)), point_type)


def predict_attributes(params, F_q, fused, ref_xy, point_type: PointType, cfg: ModelConfig) -> AttributePrediction:
    F_q = _per_frame(F_q, fused)
    return _heads(params, _attribute_features(params, F_q, fused, ref_xy, cfg), point_type)


def _per_frame(F_q, fused: FusedFeatures) -> Tensor:
    T = fused.cells[0].shape[0]
    F_q = nx.as_tensor(F_q)
    if F_q.data.ndim == 2:
        F_q = nx.add(F_q, np.zeros((T, 1, 1)))
    return F_q


# ---------------------------------------------------------------- refinement

@dataclass
class RefineOutput:
    refined: Tensor       # [T, N, 2]
    offsets: Tensor       # [T, N, 2] in px
    F_tq: Tensor          # [T, N, C]
    text_attn: Tensor     # [T, N, 2]


def text_cross_attention(params, F_q, projected) -> tuple[Tensor, Tensor]:
    """One-head cross-attention, query from vision, keys/values from text.

    No biases anywhere, so all-zero text yields exactly ``F_q``.
    """
    T, N, C = F_q.shape
    Q = nx.linear(F_q, params["refine.xattn.q.W"])
    Kt = nx.linear(projected, params["refine.xattn.k.W"])
    V = nx.linear(projected, params["refine.xattn.v.W"])
    s = nx.scalar_mul(nx.sum_(nx.mul(nx.reshape(Q, (T, N, 1, C)), Kt), axis=-1), 1.0 / np.sqrt(C))
    a = nx.softmax(s, axis=-1)
    att = nx.sum_(nx.mul(nx.reshape(a, (T, N, 2, 1)), V), axis=2)
    return nx.add(F_q, nx.linear(att, params["refine.xattn.o.W"])), a


def project_text(params, F_t) -> Tensor:
    return nx.linear(F_t, params["text.proj.W"], params["text.proj.b"])


def text_guided_refine(params, F_q, F_t, fused: FusedFeatures, coarse_xy, cfg: ModelConfig) -> RefineOutput:
    """``F_t`` is [T, N, 2, D_t] text rows, or None for the no-text ablation."""
    F_q = _per_frame(F_q, fused)
    T, N, C = F_q.shape
    if F_t is None:
        projected = nx.Tensor(np.zeros((T, N, 2, C)))
    else:
        projected = project_text(params, F_t)
        if projected.shape != (T, N, 2, C):
            raise nx.ShapeMismatch(f"text features {F_t.shape} do not match queries {F_q.shape}")
    F_tq, a = text_cross_attention(params, F_q, projected)
    h = deformable_attention(params, "refine.deform", F_tq, fused, coarse_xy, cfg).value
    raw = nx.linear(h, params["refine.offset.W"], params["refine.offset.b"])
    offsets = nx.scalar_mul(raw, cfg.offset_scale)
    return RefineOutput(nx.add(coarse_xy, offsets), offsets, F_tq, a)


# ---------------------------------------------------------------- clip tracking

@dataclass
class TrackPrediction:
    frames: list                  # frame numbers, one per row
    point_types: list             # PointType per query
    queries: np.ndarray           # [N, 2]
    coords: Tensor                # [T, N, 2] refined positions
    coarse: Tensor                # [T, N, 2] positions the offsets were added to
    offsets: Tensor               # [T, N, 2]
    status_logits: dict           # PointType -> Tensor [T, C_type, n_type]
    groups: dict                  # PointType -> query indices into N
    text_status: list             # [T][N] status fed to the text branch
    text_mode: TextMode
    extras: dict = field(default_factory=dict)

    def predicted_status(self) -> list:
        T, N = len(self.frames), len(self.point_types)
        out = [[None] * N for _ in range(T)]
        for pt, logits in self.status_logits.items():
            arg = np.argmax(logits.data, axis=1)               # [T, n_type]
            for j, n in enumerate(self.groups[pt]):
                for t in range(T):
                    out[t][n] = STATUSES_FOR[pt][arg[t, j]]
        return out

    def status_probs(self) -> list:
        T, N = len(self.frames), len(self.point_types)
        out = [[None] * N for _ in range(T)]
        for pt, logits in self.status_logits.items():
            z = logits.data - logits.data.max(axis=1, keepdims=True)
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            for j, n in enumerate(self.groups[pt]):
                for t in range(T):
                    out[t][n] = p[t, :, j]
        return out

    def visible(self) -> np.ndarray:
        return np.array([[visibility_of(s) for s in row] for row in self.text_status], dtype=bool)


def _group(point_types) -> dict:
    groups = {}
    for i, pt in enumerate(point_types):
        groups.setdefault(pt, []).append(i)
    return {pt: np.array(ix, dtype=np.intp) for pt, ix in groups.items()}


def track_clip(model: Tracker, frames, queries, point_types, text_mode=TextMode.PREDICTED,
               gt_status=None, coarse="hard", frame_numbers=None) -> TrackPrediction:
    """Track ``queries`` (frame-0 pixels) through ``frames`` [T, H, W].

    ``gt_status`` is only read in GROUND_TRUTH mode: a [T][N] nested list of
    PointStatus or None (unannotated frames fall back to the model's own
    prediction).  ``coarse`` picks the position the offsets refine:
    "hard" (argmax cell centre), "soft" (soft-argmax) or "ste" (hard value,
    soft-argmax gradient).  The query frame always uses the query itself.
    """
    text_mode = TextMode(text_mode)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise EmptyClip("need at least one frame")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    point_types = list(point_types)
    if len(point_types) != len(queries) or len(queries) == 0:
        raise nx.ShapeMismatch(f"{len(queries)} queries vs {len(point_types)} point types")
    if text_mode is TextMode.GROUND_TRUTH and gt_status is None:
        raise ValueError("ground-truth text mode needs gt_status")
    if text_mode is not TextMode.GROUND_TRUTH:
        gt_status = None

    cfg, params = model.cfg, model.params
    T, N = frames.shape[0], len(queries)
    pyr = vision.extract_pyramid(frames, params)
    F_q = vision.query_features(pyr.frame(0), queries)                        # [N, C]
    ctx = vision.query_context(pyr.frame(0), queries) if cfg.multiscale_match else None
    match = vision.coarse_match(F_q, pyr, cfg.tau, context=ctx)
    ref = _coarse_positions(match, queries, coarse)
    fused = fuse_multiscale(params, F_q, match, pyr)
    Fq_t = _per_frame(F_q, fused)

    hfeat = _attribute_features(params, Fq_t, fused, ref, cfg)
    groups = _group(point_types)
    status_logits = {}
    pred_idx = np.zeros((T, N), dtype=np.intp)
    for pt, ix in groups.items():
        heads = _heads(params, nx.index(hfeat, (slice(None), ix)), pt)
        status_logits[pt] = heads.status_logits
        pred_idx[:, ix] = np.argmax(heads.status_logits.data, axis=1)

    text_status = [[STATUSES_FOR[point_types[n]][pred_idx[t, n]] for n in range(N)] for t in range(T)]
    if gt_status is not None:
        for t in range(T):
            for n in range(N):
                s = gt_status[t][n]
                if s is not None:
                    status_index(point_types[n], s)
                    text_status[t][n] = s

    if text_mode is TextMode.NONE:
        F_t = None
    else:
        type_rows = np.array([VOCAB.index(pt) for pt in point_types], dtype=np.intp)
        s_rows = np.array([[VOCAB.index(s) for s in row] for row in text_status], dtype=np.intp)
        F_t = encode_text_batch(params, np.broadcast_to(type_rows, (T, N)), s_rows)

    out = text_guided_refine(params, Fq_t, F_t, fused, ref, cfg)
    return TrackPrediction(
        frames=list(range(T)) if frame_numbers is None else list(frame_numbers),
        point_types=point_types,
        queries=queries,
        coords=out.refined,
        coarse=nx.as_tensor(ref),
        offsets=out.offsets,
        status_logits=status_logits,
        groups=groups,
        text_status=text_status,
        text_mode=text_mode,
        extras={"match": match, "text_attn": out.text_attn},
    )


def _coarse_positions(match: vision.CoarseMatch, queries, mode):
    hard = match.xy.copy()
    hard[0] = queries
    if mode == "hard":
        return hard
    soft = nx.concat([nx.Tensor(queries[None]), nx.index(match.soft_xy, slice(1, None))], axis=0)
    if mode == "soft":
        return soft
    if mode == "ste":
        return nx.straight_through(hard, soft)
    raise ValueError(f"unknown coarse mode {mode!r}")


# ---------------------------------------------------------------- loss

def gt_status_grid(gt: ClipAnnotation, frames) -> list:
    """[T][N] ground-truth statuses on the predicted frame axis (None if unannotated)."""
    pos = {f: k for k, f in enumerate(gt.frame_indices)}
    return [[tr.observations[pos[f]].status if f in pos else None for tr in gt.tracks] for f in frames]


def total_loss(pred: TrackPrediction, gt: ClipAnnotation, weights: LossWeights | None = None,
               scale=(1.0, 1.0)):
    """Composite objective summed over annotated frames.

    Returns ``(loss, breakdown)`` with breakdown terms ``points``, ``smooth``
    and ``text`` whose float sum equals ``loss`` exactly.  ``scale`` maps
    annotation pixels into the model frame.
    """
    w = weights or LossWeights()
    pos = {f: k for k, f in enumerate(pred.frames)}
    missing = [f for f in gt.frame_indices if f not in pos]
    if missing:
        raise FrameCoverageGap(f"prediction lacks annotated frames {missing}")
    if len(gt.tracks) != len(pred.point_types):
        raise nx.ShapeMismatch(f"{len(gt.tracks)} GT tracks vs {len(pred.point_types)} predicted")
    rows = np.array([pos[f] for f in gt.frame_indices], dtype=np.intp)
    Ta, N = len(rows), len(gt.tracks)

    target = np.zeros((Ta, N, 2))
    mask = np.zeros((Ta, N, 1))
    for n, tr in enumerate(gt.tracks):
        for k, ob in enumerate(tr.observations):
            if ob.coord is not None:
                target[k, n] = (ob.coord[0] * scale[0], ob.coord[1] * scale[1])
                mask[k, n] = 1.0
    resid = nx.mul(nx.sub(nx.index(pred.coords, rows), target), mask)
    l_points = nx.huber(resid, w.huber_delta)

    if len(pred.frames) >= 3:
        l_smooth = nx.scalar_mul(nx.second_diff_l1(pred.coords), w.smooth)
    else:
        l_smooth = nx.Tensor(0.0)

    terms = []
    for pt, ix in pred.groups.items():
        logits = nx.index(pred.status_logits[pt], rows)                       # [Ta, C, n]
        Cg, n_g = logits.shape[1], logits.shape[2]
        flat = nx.reshape(nx.transpose(logits, (1, 0, 2)), (Cg, Ta * n_g))
        tgt = [status_index(pt, gt.tracks[n].observations[k].status) for k in range(Ta) for n in ix]
        terms.append(nx.scalar_mul(nx.cross_entropy(flat, tgt), Ta * n_g / N))
    l_text = terms[0]
    for t in terms[1:]:
        l_text = nx.add(l_text, t)
    l_text = nx.scalar_mul(l_text, w.text)

    loss = nx.add(nx.add(l_points, l_smooth), l_text)
    breakdown = {"points": l_points.item(), "smooth": l_smooth.item(), "text": l_text.item()}
    return loss, breakdown


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
