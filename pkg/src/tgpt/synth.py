"""Seeded toy surgical clips with exact ground truth.

Every clip is a static value-noise texture pushed through one scenario's
dynamics.  Challenge scenarios share a slow "breathing" drift so that no
scenario is solvable by predicting zero motion; Clean has no dynamics.
Point status is a pure function of the dense trajectory and the scenario
geometry, which :func:`derive_status` recomputes for independent checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .anno import (
    ClipAnnotation,
    PointObservation,
    PointStatus,
    PointType,
    Scenario,
    Track,
)

FRAMES_MAGIC = b"TGFR1"

PULL_SPEED = 1.5          # px/frame above which a deforming point is "Pulled"
SMOKE_STATUS = 0.6        # density above which smoke is annotated
SMOKE_HIDDEN = 0.9        # density above which the coordinate is null
SMOKE_COLOR = 0.85
INSTRUMENT_VALUE = 0.08
POINT_MARGIN = 24.0


class InvalidConfig(ValueError):
    pass


class TooFewClips(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario
    seed: int
    n_frames: int = 24
    n_points: int = 8
    width: int = 256
    height: int = 256
    intensity: float = 0.6
    annotate_every: int = 3

    def check(self) -> None:
        if self.n_frames < 3:
            raise InvalidConfig(f"n_frames must be >= 3, got {self.n_frames}")
        if self.n_points < 1:
            raise InvalidConfig(f"n_points must be >= 1, got {self.n_points}")
        if self.width % 32 or self.height % 32 or self.width <= 0 or self.height <= 0:
            raise InvalidConfig(f"frame extents must be positive multiples of 32, got "
                                f"{self.width}x{self.height}")
        if not 0.0 <= self.intensity <= 1.0:
            raise InvalidConfig(f"intensity must lie in [0, 1], got {self.intensity}")
        if self.annotate_every < 1:
            raise InvalidConfig("annotate_every must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")

    @property
    def clip_id(self) -> str:
        slug = self.scenario.name.lower().replace("_", "-")
        return f"{slug}-{self.seed:016x}"

    @property
    def annotated_frames(self) -> tuple[int, ...]:
        return tuple(range(0, self.n_frames, self.annotate_every))


@dataclass
class Geometry:
    """Per-frame scenario state that decides occlusion and status."""

    rects: np.ndarray | None = None        # [T, 4] x0, y0, x1, y1
    ellipses: np.ndarray | None = None     # [T, 2, 4] cx, cy, a, b
    smoke: np.ndarray | None = None        # [T, 4] cx, cy, sigma, peak
    kernels: dict = field(default_factory=dict)


@dataclass
class SynthClip:
    frames: np.ndarray            # [T, H, W] in [0, 1]
    annotation: ClipAnnotation
    dense_truth: np.ndarray       # [T, N, 2] exact positions, also when hidden
    dense_status: list            # [T][N] PointStatus
    geometry: Geometry
    config: ScenarioConfig


# ---------------------------------------------------------------- texture

class ValueNoise:
    """Periodic multi-octave value noise on the frame domain."""

    def __init__(self, rng, width, height, cells=(64, 32, 16, 8), gains=(1.0, 0.7, 0.5, 0.3)):
        self.width, self.height = width, height
        self.octaves = []
        for c, g in zip(cells, gains):
            lat = rng.random((height // c, width // c))
            self.octaves.append((c, g, lat))
        gx, gy = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
        raw = self._raw(gx, gy)
        self._mu, self._sd = raw.mean(), raw.std()

    def _raw(self, x, y):
        total = np.zeros(np.broadcast(x, y).shape)
        for c, g, lat in self.octaves:
            h, w = lat.shape
            u, v = x / c, y / c
            i0, j0 = np.floor(v).astype(int), np.floor(u).astype(int)
            fu, fv = u - j0, v - i0
            su, sv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
            i0m, j0m = i0 % h, j0 % w
            i1m, j1m = (i0 + 1) % h, (j0 + 1) % w
            top = lat[i0m, j0m] * (1 - su) + lat[i0m, j1m] * su
            bot = lat[i1m, j0m] * (1 - su) + lat[i1m, j1m] * su
            total += g * (top * (1 - sv) + bot * sv)
        return total

    def __call__(self, x, y):
        return np.clip(0.5 + 0.18 * (self._raw(x, y) - self._mu) / self._sd, 0.0, 1.0)


# ---------------------------------------------------------------- dynamics

def _breathing(rng, T, intensity):
    amp = 4.0 * intensity
    period = rng.uniform(0.8, 1.6) * T
    phase_y = rng.uniform(0.5, 1.5)
    t = np.arange(T)
    w = 2 * np.pi * t / period
    return np.stack([amp * np.sin(w), 0.5 * amp * np.sin(phase_y * w)], axis=-1)


def _deformation_kernels(rng, cfg):
    W, H, T = cfg.width, cfg.height, cfg.n_frames
    k = {
        "center0": rng.uniform([0.2 * W, 0.2 * H], [0.8 * W, 0.8 * H], size=(3, 2)),
        "drift": rng.uniform(-0.8, 0.8, size=(3, 2)),
        "sigma": rng.uniform(32.0, 48.0, size=3),
        "dir": rng.normal(size=(3, 2)),
        "amp": 20.0 * cfg.intensity * rng.uniform(0.6, 1.0, size=3),
        "omega": 2 * np.pi / T * rng.uniform(0.8, 1.6, size=3),
    }
    k["dir"] /= np.linalg.norm(k["dir"], axis=1, keepdims=True)
    return k


def _displacement(k, t, x, y):
    """Sum of three Gaussian kernels with drifting centres, zero at t=0."""
    dx = np.zeros_like(x)
    dy = np.zeros_like(y)
    for j in range(3):
        cx, cy = k["center0"][j] + k["drift"][j] * t
        s = k["sigma"][j]
        a = k["amp"][j] * np.sin(k["omega"][j] * t)
        g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        dx = dx + a * k["dir"][j, 0] * g
        dy = dy + a * k["dir"][j, 1] * g
    return dx, dy


def _advect(k, t, X, Y, iters=80):
    """Solve x = X + D_t(x) by fixed-point iteration (|grad D| < 1)."""
    x, y = X.copy(), Y.copy()
    for _ in range(iters):
        dx, dy = _displacement(k, t, x, y)
        x, y = X + dx, Y + dy
    return x, y


def _rect_path(rng, cfg):
    W, H, T = cfg.width, cfg.height, cfg.n_frames
    rw = 24.0 + 32.0 * cfg.intensity
    rh = rng.uniform(0.55, 0.8) * H
    y0 = rng.uniform(0, H - rh)
    start, stop = -rw - 8.0, W + 8.0
    xs = np.linspace(start, stop, T)
    if rng.random() < 0.5:
        xs = (W - rw) - xs
    return np.stack([xs, np.full(T, y0), xs + rw, np.full(T, y0 + rh)], axis=-1)


def _ellipse_paths(rng, cfg):
    W, H, T = cfg.width, cfg.height, cfg.n_frames
    scale = 0.5 + cfg.intensity
    t = np.linspace(0.0, 1.0, T)
    a = rng.uniform(18, 30, size=2) * scale
    b = rng.uniform(10, 18, size=2) * scale
    row = rng.uniform(0.25 * H, 0.75 * H)
    col = rng.uniform(0.25 * W, 0.75 * W)
    e1 = np.stack([-1.5 * a[0] + t * (W + 3 * a[0]), np.full(T, row),
                   np.full(T, a[0]), np.full(T, b[0])], axis=-1)
    e2 = np.stack([np.full(T, col), -1.5 * a[1] + t * (H + 3 * a[1]),
                   np.full(T, b[1]), np.full(T, a[1])], axis=-1)
    return np.stack([e1, e2], axis=1)


def _smoke_path(rng, cfg):
    W, H, T = cfg.width, cfg.height, cfg.n_frames
    c0 = rng.uniform([0.3 * W, 0.3 * H], [0.7 * W, 0.7 * H])
    vel = rng.uniform(-1.0, 1.0, size=2)
    sigma = 30.0 + 30.0 * cfg.intensity
    t = np.arange(T)
    ramp = np.minimum(1.0, t / max(1.0, 0.4 * (T - 1)))
    return np.stack([c0[0] + vel[0] * t, c0[1] + vel[1] * t,
                     np.full(T, sigma), ramp], axis=-1)


def smoke_density(s, x, y):
    cx, cy, sigma, peak = s
    return peak * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma * sigma))


def ellipse_level(e, x, y):
    cx, cy, a, b = e
    return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2


def in_rect(r, x, y):
    return (r[0] <= x) & (x <= r[2]) & (r[1] <= y) & (y <= r[3])


# ---------------------------------------------------------------- status

def derive_status(cfg: ScenarioConfig, geom: Geometry, truth: np.ndarray):
    """Per (frame, point) status and visibility from positions and geometry."""
    T, N, _ = truth.shape
    W, H = cfg.width, cfg.height
    status = [[PointStatus.CLEAR_VIEW] * N for _ in range(T)]
    visible = np.ones((T, N), dtype=bool)
    for t in range(T):
        x, y = truth[t, :, 0], truth[t, :, 1]
        qx, qy = np.round(x, 3), np.round(y, 3)
        outside = ~((0 <= qx) & (qx < W) & (0 <= qy) & (qy < H))
        for i in range(N):
            st, vis = PointStatus.CLEAR_VIEW, True
            sc = cfg.scenario
            if sc is Scenario.TISSUE_DEFORMATION and t > 0:
                if np.hypot(*(truth[t, i] - truth[t - 1, i])) > PULL_SPEED:
                    st = PointStatus.PULLED
            elif sc is Scenario.INSTRUMENT_OCCLUSION:
                if in_rect(geom.rects[t], x[i], y[i]):
                    st, vis = PointStatus.INSTRUMENT_OBSCURATION, False
            elif sc is Scenario.SURFACE_REFLECTION:
                if any(ellipse_level(e, x[i], y[i]) <= 1.0 for e in geom.ellipses[t]):
                    st = PointStatus.REFLECTION
            elif sc is Scenario.CAUTERIZATION_SMOKE:
                d = smoke_density(geom.smoke[t], x[i], y[i])
                if d > SMOKE_HIDDEN:
                    st, vis = PointStatus.SMOKE_OBSCURATION, False
                elif d > SMOKE_STATUS:
                    st = PointStatus.SMOKE_OBSCURATION
            if outside[i]:
                st, vis = PointStatus.OUT_OF_VIEW, False
            status[t][i] = st
            visible[t, i] = vis
    return status, visible


# ---------------------------------------------------------------- generator

def _rng(cfg: ScenarioConfig):
    order = list(Scenario).index(cfg.scenario)
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, order]))


def gen_clip(cfg: ScenarioConfig) -> SynthClip:
    cfg.check()
    rng = _rng(cfg)
    W, H, T, N = cfg.width, cfg.height, cfg.n_frames, cfg.n_points
    tex = ValueNoise(rng, W, H)
    gx, gy = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    sc = cfg.scenario
    geom = Geometry()

    if sc is Scenario.CLEAN:
        drift = np.zeros((T, 2))
    else:
        drift = _breathing(rng, T, cfg.intensity)
    jitter = np.zeros((T, 2))
    if sc is Scenario.CAMERA_JITTER:
        jitter[1:] = cfg.intensity * 8.0 * rng.uniform(-1.0, 1.0, size=(T - 1, 2))
    if sc is Scenario.TISSUE_DEFORMATION:
        geom.kernels = _deformation_kernels(rng, cfg)
    elif sc is Scenario.INSTRUMENT_OCCLUSION:
        geom.rects = _rect_path(rng, cfg)
    elif sc is Scenario.SURFACE_REFLECTION:
        geom.ellipses = _ellipse_paths(rng, cfg)
    elif sc is Scenario.CAUTERIZATION_SMOKE:
        geom.smoke = _smoke_path(rng, cfg)

    p0 = rng.uniform([POINT_MARGIN, POINT_MARGIN], [W - POINT_MARGIN, H - POINT_MARGIN], size=(N, 2))
    shift = drift + jitter

    truth = np.empty((T, N, 2))
    frames = np.empty((T, H, W))
    for t in range(T):
        sx, sy = shift[t]
        if sc is Scenario.TISSUE_DEFORMATION:
            px, py = _advect(geom.kernels, t, p0[:, 0], p0[:, 1])
            dx, dy = _displacement(geom.kernels, t, gx - sx, gy - sy)
            img = tex(gx - sx - dx, gy - sy - dy)
        else:
            px, py = p0[:, 0].copy(), p0[:, 1].copy()
            img = tex(gx - sx, gy - sy)
        truth[t, :, 0] = px + sx
        truth[t, :, 1] = py + sy
        if sc is Scenario.INSTRUMENT_OCCLUSION:
            img = np.where(in_rect(geom.rects[t], gx, gy), INSTRUMENT_VALUE, img)
        elif sc is Scenario.SURFACE_REFLECTION:
            for e in geom.ellipses[t]:
                glow = np.clip((1.3 - ellipse_level(e, gx, gy)) / 0.3, 0.0, 1.0)
                img = np.maximum(img, glow)
        elif sc is Scenario.CAUTERIZATION_SMOKE:
            k = cfg.intensity * smoke_density(geom.smoke[t], gx, gy)
            img = SMOKE_COLOR + (img - SMOKE_COLOR) * (1.0 - k)
        frames[t] = np.clip(img, 0.0, 1.0)

    status, visible = derive_status(cfg, geom, truth)
    annotated = cfg.annotated_frames
    tracks = []
    for i in range(N):
        obs = []
        for t in annotated:
            coord = None
            if visible[t, i]:
                coord = (round(float(truth[t, i, 0]), 3) + 0.0, round(float(truth[t, i, 1]), 3) + 0.0)
            obs.append(PointObservation(coord, status[t][i]))
        tracks.append(Track(PointType.TISSUE, tuple(obs)))
    ann = ClipAnnotation(cfg.clip_id, W, H, 1.0, sc, annotated, tuple(tracks))
    return SynthClip(frames, ann, truth, status, geom, cfg)


def split_suite(seed: int, counts: dict, **cfg_kwargs):
    """Stratified 4:1 train/test split of per-scenario clip configs.

    Membership depends only on ``seed`` and the per-scenario counts, never on
    the iteration order of ``counts``.
    """
    train, test = [], []
    for order, scen in enumerate(Scenario):
        if scen not in counts:
            continue
        n = counts[scen]
        if n < 5:
            raise TooFewClips(f"{scen.value}: need at least 5 clips, got {n}")
        seeds = [int(np.random.SeedSequence(seed, spawn_key=(order, i)).generate_state(1, np.uint64)[0])
                 for i in range(n)]
        n_test = max(1, round(n / 5))
        perm = np.random.default_rng(np.random.SeedSequence([seed, order, 0x5E])).permutation(n)
        held = set(perm[:n_test].tolist())
        for i, s in enumerate(seeds):
            c = ScenarioConfig(scen, s, **cfg_kwargs)
            (test if i in held else train).append(c)
    return train, test


def with_length(cfg: ScenarioConfig, n_frames: int) -> ScenarioConfig:
    return replace(cfg, n_frames=n_frames)


# ---------------------------------------------------------------- frame files

def dump_frames(frames: np.ndarray) -> bytes:
    T, H, W = frames.shape
    return FRAMES_MAGIC + struct.pack("<3I", T, H, W) + np.ascontiguousarray(frames, dtype="<f8").tobytes()


def load_frames(blob: bytes) -> np.ndarray:
    if not blob.startswith(FRAMES_MAGIC):
        raise ValueError("unknown frames header")
    T, H, W = struct.unpack_from("<3I", blob, len(FRAMES_MAGIC))
    off = len(FRAMES_MAGIC) + 12
    return np.frombuffer(blob, dtype="<f8", count=T * H * W, offset=off).reshape(T, H, W).astype(np.float64)
