"""Run orchestration: suite generation, training, tracking, evaluation.

Everything here is deterministic for a fixed :class:`RunConfig`; the CLI is
a thin layer over these functions.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import metrics, numerics as nx, predfile, synth
from .numerics import checkpoint as ckpt
from .anno import CHALLENGE_SCENARIOS, Scenario, read_clip, write_clip
from .model import LossWeights, ModelConfig, TextMode, Tracker, gt_status_grid, total_loss, track_clip

log = logging.getLogger(__name__)

CLIP_LENGTHS = {"short": 8, "long": 24}
LOSS_COLUMNS = ("step", "clip_id", "total", "points", "smooth", "text")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    clips_per_scenario: int = 10          # 4:1 split -> 8 train, 2 test
    scenarios: list = field(default_factory=lambda: [s.value for s in CHALLENGE_SCENARIOS])
    clip_size: str = "long"               # short | long | custom
    n_frames: int = 24                    # only read when clip_size == "custom"
    n_points: int = 8
    intensity: float = 0.6
    annotate_every: int = 3
    channels: int = 32
    text_dim: int = 64
    heads: int = 2
    points: int = 4
    huber_delta: float = 6.0
    lambda_smooth: float = 1.0
    lambda_text: float = 1.0
    lr: float = 3e-4
    steps: int = 300
    batch: int = 2                        # clips per Adam step, gradients averaged
    text_mode: str = "gt"                 # text fed during training
    infer_text_mode: str = ""             # empty: "pred" after gt training, else the training mode
    train_coarse: str = "soft"            # coarse position the offsets refine while training
    workers: int = 1
    name: str = "run"

    def check(self) -> None:
        if self.clip_size not in ("short", "long", "custom"):
            raise ConfigError(f"clip_size must be short, long or custom, got {self.clip_size!r}")
        try:
            TextMode(self.text_mode)
            if self.infer_text_mode:
                TextMode(self.infer_text_mode)
            [Scenario(s) for s in self.scenarios]
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.train_coarse not in ("hard", "soft", "ste"):
            raise ConfigError(f"train_coarse must be hard, soft or ste, got {self.train_coarse!r}")
        if self.steps < 0 or self.workers < 1 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("steps must be >= 0, workers and batch >= 1, lr > 0")

    @property
    def frames(self) -> int:
        return self.n_frames if self.clip_size == "custom" else CLIP_LENGTHS[self.clip_size]

    @property
    def inference_mode(self) -> TextMode:
        if self.infer_text_mode:
            return TextMode(self.infer_text_mode)
        if TextMode(self.text_mode) is TextMode.GROUND_TRUTH:
            return TextMode.PREDICTED
        return TextMode(self.text_mode)

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=self.channels, text_dim=self.text_dim, heads=self.heads, points=self.points)

    def loss_weights(self) -> LossWeights:
        return LossWeights(huber_delta=self.huber_delta, smooth=self.lambda_smooth, text=self.lambda_text)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def load_config(path=None, **overrides) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    raw = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
    cfg = replace(RunConfig(), **raw)
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.check()
    return cfg


# ---------------------------------------------------------------- data

def suite(cfg: RunConfig):
    """(train, test) ScenarioConfig lists for this run."""
    counts = {Scenario(s): cfg.clips_per_scenario for s in cfg.scenarios}
    return synth.split_suite(cfg.seed, counts, n_frames=cfg.frames, n_points=cfg.n_points,
                             intensity=cfg.intensity, annotate_every=cfg.annotate_every)


def _pmap(fn, items, workers):
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def generate(cfg: RunConfig, split: str = "both"):
    train, test = suite(cfg)
    todo = {"train": train, "test": test, "both": train + test}[split]
    return _pmap(synth.gen_clip, todo, cfg.workers)


def write_clips(clips, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for c in clips:
        base = os.path.join(out_dir, c.annotation.clip_id)
        write_clip(base + ".vlspt.json", c.annotation)
        with open(base + ".frames.bin", "wb") as fh:
            fh.write(synth.dump_frames(c.frames))
        paths.append(base + ".vlspt.json")
    return paths


@dataclass
class ClipData:
    """What training and tracking need from a clip, however it was obtained."""
    annotation: object
    frames: np.ndarray

    @property
    def clip_id(self) -> str:
        return self.annotation.clip_id


def as_clipdata(c) -> ClipData:
    return ClipData(c.annotation, c.frames)


def load_clip_dir(path) -> list[ClipData]:
    out = []
    for name in sorted(os.listdir(path)):
        if not name.endswith(".vlspt.json"):
            continue
        ann = read_clip(os.path.join(path, name))
        fpath = os.path.join(path, name[: -len(".vlspt.json")] + ".frames.bin")
        if not os.path.exists(fpath):
            raise FileNotFoundError(f"missing frames for {name}: {fpath}")
        with open(fpath, "rb") as fh:
            out.append(ClipData(ann, synth.load_frames(fh.read())))
    return out


# ---------------------------------------------------------------- training

def _scale(ann, frames):
    H, W = frames.shape[1:]
    return (W / ann.width, H / ann.height)


def _point_types(ann):
    return [tr.point_type for tr in ann.tracks]


def clip_loss(model: Tracker, clip: ClipData, text_mode, weights: LossWeights, coarse="hard"):
    ann = clip.annotation
    sx, sy = _scale(ann, clip.frames)
    q = np.array(ann.queries(), dtype=np.float64) * (sx, sy)
    gts = gt_status_grid(ann, range(len(clip.frames)))
    pred = track_clip(model, clip.frames, q, _point_types(ann), text_mode, gt_status=gts, coarse=coarse)
    return total_loss(pred, ann, weights, scale=(sx, sy))


def train(cfg: RunConfig, clips, on_step=None) -> tuple[Tracker, list[dict]]:
    """``cfg.steps`` Adam steps over ``cfg.batch`` clips each.

    Clips are visited in a fresh seeded permutation each epoch, so the order
    depends only on the seed and the clip ids. Gradients are averaged over
    the batch; the logged losses are batch means.
    """
    clips = sorted(clips, key=lambda c: c.clip_id)
    if not clips:
        raise ConfigError("no training clips")
    model = Tracker(cfg.model_config(), seed=cfg.seed)
    state = nx.AdamState(lr=cfg.lr)
    weights = cfg.loss_weights()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A11]))
    order = []
    rows = []
    for step in range(cfg.steps):
        acc = [np.zeros_like(p.data) for p in model.params.values()]
        total, parts_sum, ids = 0.0, {}, []
        for _ in range(cfg.batch):
            if not order:
                order = rng.permutation(len(clips)).tolist()
            clip = clips[order.pop(0)]
            with nx.Graph() as g:
                loss, parts = clip_loss(model, clip, cfg.text_mode, weights, cfg.train_coarse)
            nx.zero_grad(model.params)
            g.backward(loss)
            for a, p in zip(acc, model.params.values()):
                a += p.grad
            total += loss.item()
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
            ids.append(clip.clip_id)
        for a, p in zip(acc, model.params.values()):
            p.grad = a / cfg.batch
        nx.adam_step(model.params, state)
        row = {"step": step, "clip_id": "+".join(ids), "total": total / cfg.batch,
               **{k: v / cfg.batch for k, v in parts_sum.items()}}
        rows.append(row)
        if on_step:
            on_step(row)
    return model, rows


def mean_loss(model: Tracker, clips, cfg: RunConfig, text_mode=None) -> float:
    """Mean total loss over ``clips`` with the training text mode (no update)."""
    mode = cfg.text_mode if text_mode is None else text_mode
    w = cfg.loss_weights()
    return float(np.mean([clip_loss(model, c, mode, w, cfg.train_coarse)[0].item() for c in clips]))


def loss_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=LOSS_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (repr(float(r[k])) if k in ("total", "points", "smooth", "text") else r[k])
                     for k in LOSS_COLUMNS})
    return buf.getvalue()


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "clip_id" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def save_model(model: Tracker, path) -> None:
    ckpt.save(path, model.state_dict())


def load_model(path, cfg: RunConfig | None = None) -> Tracker:
    m = Tracker((cfg or RunConfig()).model_config())
    m.load_state_dict(ckpt.load(path))
    return m


# ---------------------------------------------------------------- tracking / eval

def track(model: Tracker, clip: ClipData, text_mode) -> predfile.PredictedClip:
    """Track every frame of ``clip``; coordinates are reported in annotation pixels."""
    ann = clip.annotation
    sx, sy = _scale(ann, clip.frames)
    q = np.array(ann.queries(), dtype=np.float64) * (sx, sy)
    mode = TextMode(text_mode)
    gts = gt_status_grid(ann, range(len(clip.frames))) if mode is TextMode.GROUND_TRUTH else None
    pred = track_clip(model, clip.frames, q, _point_types(ann), mode, gt_status=gts)
    p = predfile.from_tracking(pred, ann.clip_id)
    back = np.array([1.0 / sx, 1.0 / sy])
    p.coords, p.coarse, p.offsets = p.coords * back, p.coarse * back, p.offsets * back
    p.queries = np.array(ann.queries(), dtype=np.float64)
    return p


def _track_job(args):
    state, mcfg, clip, mode = args
    m = Tracker(mcfg)
    m.load_state_dict(state)
    return track(m, clip, mode)


def track_all(model: Tracker, clips, text_mode, workers=1) -> list[predfile.PredictedClip]:
    if workers <= 1:
        return [track(model, c, text_mode) for c in clips]
    state = model.state_dict()
    return _pmap(_track_job, [(state, model.cfg, c, text_mode) for c in clips], workers)


def evaluate_all(annotations, preds) -> list[metrics.MetricReport]:
    by_id = {p.clip_id: p for p in preds}
    out = []
    for ann in annotations:
        if ann.clip_id not in by_id:
            raise metrics.MismatchedPair(f"no prediction for clip {ann.clip_id}")
        out.append(metrics.evaluate(metrics.EvalPair(ann, by_id[ann.clip_id])))
    return out


# ---------------------------------------------------------------- full run

@dataclass
class RunResult:
    cfg: RunConfig
    model: Tracker
    loss_rows: list
    preds: list
    reports: list


def run(cfg: RunConfig, out_dir=None, figures=True) -> RunResult:
    """gen -> train -> track (test split) -> eval, optionally writing a run dir."""
    train_cfgs, test_cfgs = suite(cfg)
    train_clips = [as_clipdata(c) for c in _pmap(synth.gen_clip, train_cfgs, cfg.workers)]
    test_clips = [as_clipdata(c) for c in _pmap(synth.gen_clip, test_cfgs, cfg.workers)]
    log.info("training %d steps on %d clips", cfg.steps, len(train_clips))
    model, rows = train(cfg, train_clips)
    preds = track_all(model, test_clips, cfg.inference_mode, cfg.workers)
    reports = evaluate_all([c.annotation for c in test_clips], preds)
    if out_dir is not None:
        write_run(out_dir, cfg, model, rows, preds, reports, figures=figures)
    return RunResult(cfg, model, rows, preds, reports)


def write_run(out_dir, cfg, model, rows, preds, reports, figures=True) -> None:
    from . import report

    os.makedirs(os.path.join(out_dir, "preds"), exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    save_model(model, os.path.join(out_dir, "checkpoint.tgpt"))
    with open(os.path.join(out_dir, "loss.csv"), "w") as fh:
        fh.write(loss_csv(rows))
    for p in preds:
        predfile.write_pred(os.path.join(out_dir, "preds", p.clip_id + ".pred.json"), p)
    report.write_reports(out_dir, reports, loss_rows=rows, figures=figures,
                         title=f"{cfg.name} (train text={cfg.text_mode}, inference text={cfg.inference_mode.value})")
