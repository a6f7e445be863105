"""Command line entry point: ``tgpt {gen,validate,train,track,eval,run,ablate}``.

Failures exit nonzero with one line on stderr, ``error: <Category>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace

from . import anno, metrics, pipeline, predfile, report
from .numerics.checkpoint import BadCheckpoint

log = logging.getLogger("tgpt")

SPLIT_FILE = "split.json"


class UsageError(ValueError):
    pass


def _common(p, out_default=None):
    p.add_argument("--seed", type=int, default=None, help="overridden by $TGPT_SEED when set")
    p.add_argument("--config", default=None, help="JSON file with RunConfig fields")
    p.add_argument("--clip-size", choices=("short", "long"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--text-mode", choices=("gt", "pred", "none"), default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=out_default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tgpt", description="text-guided point tracking on synthetic clips")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="write a seeded clip suite (.vlspt.json + .frames.bin)")
    _common(p, "clips")
    p.add_argument("--no-clean", action="store_true", help="skip the unperturbed Clean clips")

    p = sub.add_parser("validate", help="check clip annotation files")
    p.add_argument("paths", nargs="+")

    p = sub.add_parser("train", help="train on the train split, write checkpoint and loss.csv")
    _common(p)
    p.add_argument("--clips", default=None, help="clip dir from `gen` (default: generate in memory)")

    p = sub.add_parser("track", help="write .pred.json files for the test split")
    _common(p, "preds")
    p.add_argument("checkpoint")
    p.add_argument("--clips", required=True)
    p.add_argument("--all", action="store_true", help="track every clip, not just the test split")

    p = sub.add_parser("eval", help="score predictions, write report.csv / report.md / figures")
    p.add_argument("--clips", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out", default="report")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("run", help="gen + train + track + eval into runs/<name>")
    _common(p)
    p.add_argument("--name", default=None)

    p = sub.add_parser("ablate", help="text on/off x short/long clips")
    _common(p, "runs/ablation")
    return ap


def resolve_config(args) -> pipeline.RunConfig:
    seed = args.seed
    env = os.environ.get("TGPT_SEED")
    if env not in (None, ""):
        try:
            seed = int(env)
        except ValueError:
            raise pipeline.ConfigError(f"TGPT_SEED must be an integer, got {env!r}") from None
    return pipeline.load_config(
        getattr(args, "config", None),
        seed=seed,
        clip_size=getattr(args, "clip_size", None),
        steps=getattr(args, "steps", None),
        text_mode=getattr(args, "text_mode", None),
        workers=getattr(args, "workers", None),
        name=getattr(args, "name", None),
    )


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    train, test = pipeline.suite(cfg)
    if not args.no_clean and anno.Scenario.CLEAN.value not in cfg.scenarios:
        tr2, te2 = pipeline.suite(replace(cfg, scenarios=[anno.Scenario.CLEAN.value]))
        train, test = train + tr2, test + te2
    clips = pipeline._pmap(pipeline.synth.gen_clip, train + test, cfg.workers)
    pipeline.write_clips(clips, args.out)
    split = {"train": sorted(c.clip_id for c in train), "test": sorted(c.clip_id for c in test)}
    with open(os.path.join(args.out, SPLIT_FILE), "w") as fh:
        json.dump(split, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_validate(args) -> int:
    bad = 0
    for path in args.paths:
        try:
            clip = anno.read_clip(path)
        except anno.AnnotationError as e:
            print(f"{path}: {e.category}: {e}")
            bad += 1
            continue
        issues = anno.validate_clip(clip)
        if not issues:
            print(f"{path}: ok")
        for v in issues:
            where = "".join(f" {k}={getattr(v, k)}" for k in ("track", "frame") if getattr(v, k) is not None)
            print(f"{path}: {v.code}{where} {v.detail}".rstrip())
        bad += bool(issues)
    return 1 if bad else 0


def _split_clips(clip_dir, which):
    clips = pipeline.load_clip_dir(clip_dir)
    if which == "all":
        return clips
    path = os.path.join(clip_dir, SPLIT_FILE)
    if not os.path.exists(path):
        raise UsageError(f"{clip_dir} has no {SPLIT_FILE}; pass --all or regenerate with `tgpt gen`")
    with open(path) as fh:
        keep = set(json.load(fh)[which])
    return [c for c in clips if c.clip_id in keep]


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = args.out or os.path.join("runs", cfg.name)
    if args.clips:
        clips = _split_clips(args.clips, "train")
    else:
        clips = [pipeline.as_clipdata(c) for c in pipeline.generate(cfg, "train")]

    def progress(row):
        if row["step"] % 25 == 0:
            log.info("step %d  loss %.2f", row["step"], row["total"])

    model, rows = pipeline.train(cfg, clips, on_step=progress)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    pipeline.save_model(model, os.path.join(out, "checkpoint.tgpt"))
    with open(os.path.join(out, "loss.csv"), "w") as fh:
        fh.write(pipeline.loss_csv(rows))
    report.plot_loss(rows, os.path.join(out, "loss_curve.png"))
    if rows:
        print(f"trained {len(rows)} steps; loss {rows[0]['total']:.2f} -> {rows[-1]['total']:.2f}; wrote {out}")
    return 0


def cmd_track(args) -> int:
    cfg = resolve_config(args)
    model = pipeline.load_model(args.checkpoint, cfg)
    clips = _split_clips(args.clips, "all" if args.all else "test")
    mode = args.text_mode or cfg.inference_mode.value
    preds = pipeline.track_all(model, clips, mode, cfg.workers)
    os.makedirs(args.out, exist_ok=True)
    for p in preds:
        predfile.write_pred(os.path.join(args.out, p.clip_id + ".pred.json"), p)
    print(f"tracked {len(preds)} clips (text={mode}) into {args.out}")
    return 0


def cmd_eval(args) -> int:
    anns = {}
    for name in sorted(os.listdir(args.clips)):
        if name.endswith(".vlspt.json"):
            a = anno.read_clip(os.path.join(args.clips, name))
            anns[a.clip_id] = a
    preds = [predfile.read_pred(os.path.join(args.preds, n))
             for n in sorted(os.listdir(args.preds)) if n.endswith(".pred.json")]
    if not preds:
        raise UsageError(f"no .pred.json files in {args.preds}")
    missing = [p.clip_id for p in preds if p.clip_id not in anns]
    if missing:
        raise metrics.MismatchedPair(f"predictions without annotations: {missing}")
    reports = pipeline.evaluate_all([anns[p.clip_id] for p in preds], preds)
    report.write_reports(args.out, reports, figures=not args.no_figures)
    mean = metrics.aggregate(reports)[-1]
    print(f"{len(reports)} clips  AJ {mean['aj']:.4f}  delta_avg {mean['delta_avg']:.4f}  "
          f"OA {mean['oa']:.4f}  EPE {mean['epe']:.3f}  -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = args.out or os.path.join("runs", cfg.name)
    res = pipeline.run(cfg, out)
    mean = metrics.aggregate(res.reports)[-1]
    print(f"{cfg.name}: AJ {mean['aj']:.4f}  delta_avg {mean['delta_avg']:.4f}  OA {mean['oa']:.4f}  -> {out}")
    return 0


ABLATION = [(True, "short"), (False, "short"), (True, "long"), (False, "long")]


def ablation_rows(cfg: pipeline.RunConfig, out_dir=None) -> list[dict]:
    rows = []
    for text, size in ABLATION:
        c = replace(cfg, clip_size=size, text_mode="gt" if text else "none", infer_text_mode="",
                    name=f"{'text' if text else 'notext'}-{size}")
        res = pipeline.run(c, None if out_dir is None else os.path.join(out_dir, c.name))
        mean = metrics.aggregate(res.reports)[-1]
        rows.append({"text": text, "clip_size": size, **{k: mean[k] for k in ("aj", "delta_avg", "oa", "epe")}})
    return rows


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    rows = ablation_rows(cfg, args.out)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.md"), "w") as fh:
        fh.write(report.ablation_md(rows))
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write("text,clip_size,aj,delta_avg,oa,epe\n")
        for r in rows:
            fh.write(f"{int(r['text'])},{r['clip_size']},"
                     + ",".join("nan" if math.isnan(r[k]) else f"{r[k]:.6f}" for k in ("aj", "delta_avg", "oa", "epe"))
                     + "\n")
    report.plot_ablation(rows, os.path.join(args.out, "ablation.png"))
    print(report.ablation_md(rows), end="")
    return 0


COMMANDS = {"gen": cmd_gen, "validate": cmd_validate, "train": cmd_train, "track": cmd_track,
            "eval": cmd_eval, "run": cmd_run, "ablate": cmd_ablate}


def _category(e: BaseException) -> str:
    cat = getattr(e, "category", None)
    if cat:
        return cat
    if isinstance(e, FileNotFoundError):
        return "FileNotFound"
    if isinstance(e, (json.JSONDecodeError,)):
        return "MalformedDocument"
    return type(e).__name__


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (pipeline.ConfigError, UsageError, anno.AnnotationError, BadCheckpoint, predfile.BadPrediction,
            metrics.MismatchedPair, OSError, ValueError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else ""
        print(f"error: {_category(e)}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
