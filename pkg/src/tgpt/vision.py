"""Trainable stand-in for the frozen visual tracker.

It only has to deliver what the text-guided head consumes: query features,
a three-level feature pyramid per frame, and a coarse patch-level match
(position plus feature) for every query.  All functions take a leading
frame axis; a single frame is simply T=1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PATCH = 8
CHANNELS = 32
TAU = 0.05
STRIDES = (8, 16, 32)


class BadFrameShape(ValueError):
    pass


class OutOfBounds(ValueError):
    pass


@dataclass
class FeaturePyramid:
    levels: list          # Tensor [T, H/s, W/s, C] for s in STRIDES
    width: int
    height: int

    @property
    def strides(self):
        return STRIDES[: len(self.levels)]

    def frame(self, t: int) -> "FeaturePyramid":
        return FeaturePyramid([nx.index(lv, slice(t, t + 1)) for lv in self.levels],
                              self.width, self.height)


@dataclass
class CoarseMatch:
    xy: np.ndarray        # [T, N, 2] hard-argmax cell centres, model-frame px
    soft_xy: Tensor       # [T, N, 2] soft-argmax positions (differentiable)
    feat: Tensor          # [T, N, C] level-0 feature at the argmax cell
    score: np.ndarray     # [T, N] max cosine correlation
    cell: np.ndarray      # [T, N] flat row-major argmax index


def init_params(rng, channels=CHANNELS, patch=PATCH) -> dict:
    def lin(prefix, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return {
            f"{prefix}.W": nx.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), f"{prefix}.W"),
            f"{prefix}.b": nx.parameter(np.zeros(fan_out), f"{prefix}.b"),
        }

    p = {}
    p.update(lin("vision.embed", patch * patch, channels))
    p.update(lin("vision.mix", channels, channels))
    p.update(lin("vision.level1", channels, channels))
    p.update(lin("vision.level2", channels, channels))
    return p


def patchify(frames: np.ndarray, patch=PATCH) -> np.ndarray:
    """[T, H, W] -> [T, H/p, W/p, p*p] with each patch's mean removed.

    Without centring, the shared DC direction dominates the embedding and
    every cell correlates at ~1 with every other.
    """
    T, H, W = frames.shape
    x = frames.reshape(T, H // patch, patch, W // patch, patch)
    x = x.transpose(0, 1, 3, 2, 4).reshape(T, H // patch, W // patch, patch * patch)
    return x - x.mean(axis=-1, keepdims=True)


def extract_pyramid(frames, params, patch=PATCH) -> FeaturePyramid:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise BadFrameShape(f"expected [H, W] or [T, H, W], got {frames.shape}")
    T, H, W = frames.shape
    if H % (patch * 4) or W % (patch * 4) or H == 0 or W == 0:
        raise BadFrameShape(f"frame {H}x{W} is not divisible by {patch * 4}")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise BadFrameShape("frame values must lie in [0, 1]")
    emb = nx.linear(patchify(frames, patch), params["vision.embed.W"], params["vision.embed.b"])
    lv0 = nx.relu(nx.linear(nx.layer_norm(emb), params["vision.mix.W"], params["vision.mix.b"]))
    lv1 = nx.linear(nx.avg_pool2x2(lv0), params["vision.level1.W"], params["vision.level1.b"])
    lv2 = nx.linear(nx.avg_pool2x2(lv1), params["vision.level2.W"], params["vision.level2.b"])
    return FeaturePyramid([lv0, lv1, lv2], W, H)


def to_level(xy, stride):
    """Model-frame pixels -> cell-index coordinates (cell centres on integers)."""
    return np.asarray(xy, dtype=np.float64) / stride - 0.5


def cell_centres(h: int, w: int, stride: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(jj.ravel() + 0.5) * stride, (ii.ravel() + 0.5) * stride], axis=-1)


def query_features(pyr0: FeaturePyramid, queries) -> Tensor:
    """Bilinear level-0 features at query pixels of the first pyramid frame."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    bad = ~((q[:, 0] >= 0) & (q[:, 0] < pyr0.width) & (q[:, 1] >= 0) & (q[:, 1] < pyr0.height))
    if bad.any():
        raise OutOfBounds(f"queries outside the {pyr0.width}x{pyr0.height} frame: {q[bad].tolist()}")
    lv0 = pyr0.levels[0]
    first = nx.index(lv0, 0)
    return nx.bilinear_sample(first, to_level(q, STRIDES[0]))


def _centred(lv):
    # remove each frame's spatial mean so the shared relu offset does not
    # dominate every cosine
    return nx.sub(lv, nx.mean(lv, axis=(1, 2), keepdims=True))


def query_context(pyr0: FeaturePyramid, queries) -> list:
    """Per-level query descriptors for the multi-scale match route.

    Level l gives the bilinear feature of the spatially centred level-l grid
    of the query frame at the query pixels.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    return [nx.bilinear_sample(nx.index(_centred(nx.index(lv, slice(0, 1))), 0), to_level(q, s))
            for lv, s in zip(pyr0.levels, pyr0.strides)]


def coarse_match(F_q, pyr: FeaturePyramid, tau=TAU, context=None) -> CoarseMatch:
    """Cosine correlation of each query with every level-0 cell.

    With ``context`` (per-level query descriptors from :func:`query_context`)
    each level-0 cell is also compared on levels 1 and 2, sampled at the
    cell centre, using spatially centred grids; the score is the mean of the
    per-level cosines.  Ties in the hard argmax
    resolve to the smallest row-major cell index.
    """
    lv0 = pyr.levels[0]
    T, h, w, C = lv0.shape
    if F_q.shape[-1] != C:
        raise nx.ShapeMismatch(f"query features {F_q.shape} vs pyramid channels {C}")
    centres = cell_centres(h, w, STRIDES[0])
    flat = nx.reshape(lv0, (T, h * w, C))
    if context is None:
        cells = nx.l2_normalize(flat)
        qn = nx.l2_normalize(F_q)
        scores = nx.matmul(qn, nx.transpose(cells, (0, 2, 1)))          # [T, N, hw]
    else:
        scores = None
        for level, (lv, s) in enumerate(zip(pyr.levels, pyr.strides)):
            g = _centred(lv)
            if level == 0:
                cells = nx.reshape(g, (T, h * w, C))
            else:
                loc = np.broadcast_to(to_level(centres, s), (T,) + centres.shape)
                cells = nx.bilinear_sample(g, loc)
            sc = nx.matmul(nx.l2_normalize(context[level]), nx.transpose(nx.l2_normalize(cells), (0, 2, 1)))
            scores = sc if scores is None else nx.add(scores, sc)
        scores = nx.scalar_mul(scores, 1.0 / len(pyr.levels))
    idx = np.argmax(scores.data, axis=-1)
    xy = centres[idx]
    score = np.take_along_axis(scores.data, idx[..., None], axis=-1)[..., 0]
    feat = nx.index(flat, (np.arange(T)[:, None], idx))
    soft = nx.matmul(nx.softmax(nx.scalar_mul(scores, 1.0 / tau), axis=-1), centres)
    return CoarseMatch(xy, soft, feat, score, idx)
