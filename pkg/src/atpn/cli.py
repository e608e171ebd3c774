"""Command-line entry point: synth, train, eval, track, budget, gradcheck."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atpn", description="Multitask face alignment, head pose and tracking network.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--kind", choices=["positives", "negatives", "video"], default="positives")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", default=None, help="config file or preset name (default atpn-desk)")
    t.add_argument("--data", action="append", required=True, help="manifest; repeat to combine")
    t.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    t.add_argument("--checkpoint", help="previous-stage checkpoint (required for stages 2 and 3)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-augment", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    e.add_argument("--task", choices=["align", "pose", "track"], required=True)
    e.add_argument("--data", action="append", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="manifest-format file of predictions (label column = confidence)")
    e.add_argument("--norm", choices=["ion", "ipn"], default="ion")
    e.add_argument("--tag", help="restrict to records carrying this tag")
    e.add_argument("--out")

    k = sub.add_parser("track", help="run the detect/track state machine over a frame sequence")
    k.add_argument("--checkpoint")
    k.add_argument("--frames", help="directory of .ppm frames (default: the frames listed in --data)")
    k.add_argument("--data", help="sequence manifest: detector ROIs and ground truth")
    k.add_argument("--oracle", action="store_true", help="use ground truth instead of a network (harness)")
    k.add_argument("--out")

    b = sub.add_parser("budget", help="parameter and multiply-accumulate counts")
    b.add_argument("--config", default="atpn-small")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=20)
    return p


def _records(paths):
    from .data import records_from_manifest

    out = []
    for p in paths:
        out += records_from_manifest(p)
    return out


def cmd_synth(args) -> int:
    from .data import generate

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    path = generate(args.out, args.kind, args.count, args.seed)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import resolve_config
    from .io import load_checkpoint, save_checkpoint
    from .model import AtpnNet
    from .training import AugmentationConfig, StagingError, background_crops, stage_plan, train_stage

    cfg = resolve_config(args.config)
    if args.stage > 1:
        if not args.checkpoint or not Path(args.checkpoint).exists():
            raise StagingError(f"stage {args.stage} needs a stage-{args.stage - 1} checkpoint (--checkpoint)")
        model, _, _ = load_checkpoint(args.checkpoint, AtpnNet(cfg))
    else:
        model = AtpnNet(cfg, seed=args.seed)
    records = _records(args.data)
    aug = None if args.no_augment else AugmentationConfig.default()
    overrides = {}
    if args.max_steps:
        overrides["max_steps"] = args.max_steps
    if args.batch_size:
        overrides["batch_size"] = args.batch_size
    plan = stage_plan(cfg, args.stage, aug, **overrides)
    if args.epochs:
        from dataclasses import replace

        plan = replace(plan, schedule=replace(plan.schedule, epochs=args.epochs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "a") as log:
        res = train_stage(model, plan, records, seed=args.seed, log=lambda line: log.write(line + "\n"),
                          backgrounds=background_crops(records, 64, args.seed, cfg.input_size))
    path = out / f"stage{args.stage}.ckpt"
    save_checkpoint(path, model, args.stage, res.optimizer.state())
    for i, loss in enumerate(res.epoch_losses):
        print(f"epoch {i} loss {loss:.6f}")
    print(path)
    return EXIT_OK


def _prediction_arrays(args, records, keep):
    from .evaluate import Predictions, predict_records
    from .io import load_checkpoint, load_manifest

    if args.predictions:
        m = load_manifest(args.predictions)
        if len(m) != len(records):
            raise ValueError(f"{len(m)} predictions for {len(records)} records")
        rows = [m.records[i] for i in keep]
        lm = np.stack([r.landmarks if r.landmarks is not None else np.zeros((m.landmarks, 2)) for r in rows])
        pose = np.stack([r.pose if r.pose is not None else np.zeros(3) for r in rows])
        conf = np.array([float(r.label) for r in rows])
        return Predictions(lm, pose, conf)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --predictions")
    model, _, _ = load_checkpoint(args.checkpoint)
    return predict_records(model, [records[i] for i in keep])


def cmd_eval(args) -> int:
    from .evaluate import evaluate_alignment, evaluate_pose, evaluate_tracking, write_curve
    from .metrics import ced_curve, normalization

    every = _records(args.data)
    keep = [i for i, r in enumerate(every) if args.tag is None or args.tag in r.tags]
    records = [every[i] for i in keep]
    if args.task in ("align", "pose"):
        want = [i for i, r in enumerate(records) if r.label == 1]
    else:
        want = list(range(len(records)))
    if not want:
        raise ValueError("no records to evaluate")
    pred = _prediction_arrays(args, every, keep)
    sel = [records[i] for i in want]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.task == "align":
        norm = normalization(args.norm, sel[0].landmarks.shape[0])
        rep = evaluate_alignment(pred.landmarks[want], sel, norm)
        text = rep.summary()
        if out:
            write_curve(out / "ced.csv", *ced_curve(rep.errors, 0.1))
    elif args.task == "pose":
        rep = evaluate_pose(pred.pose[want], sel)
        text = rep.summary() + "yaw pitch roll\n" + " ".join(f"{v:.6f}" for v in rep.per_angle_deg) + "\n"
        if out:
            write_curve(out / "ced.csv", *ced_curve(rep.errors_deg, 10.0))
    else:
        rep = evaluate_tracking(pred.confidence, sel)
        text = rep.summary()
        if out:
            write_curve(out / "pr.csv", rep.recall, rep.precision)
    sys.stdout.write(text)
    if out:
        (out / "summary.txt").write_text(text)
    return EXIT_OK


def cmd_track(args) -> int:
    from .data import VideoSequence, video_from_directory, video_from_manifest
    from .io import load_checkpoint, load_manifest
    from .tracking import Box, ScriptedModel, run_sequence

    if not args.frames and not args.data:
        raise UsageError("track needs --frames or --data")
    video = video_from_manifest(load_manifest(args.data)) if args.data else None
    frames = video_from_directory(args.frames) if args.frames else video.frames
    if not frames:
        raise ValueError(f"no frames in {args.frames}")
    if video is not None:
        if len(video.frames) != len(frames):
            raise ValueError(f"{len(frames)} frames but {len(video.frames)} manifest rows")
        detector, gt = video.detector, video.landmarks
    else:
        h, w = frames[0].shape[:2]
        video = VideoSequence(frames, [None] * len(frames), [np.zeros(3)] * len(frames), None)
        detector, gt = (lambda i, f: Box(0.0, 0.0, float(w), float(h))), None
    if args.oracle:
        if not args.data:
            raise UsageError("--oracle needs --data for ground truth")
        present = [p for p in video.landmarks if p is not None]
        if not present:
            raise ValueError("manifest has no face in any frame")
        conf = [0.99 if p is not None else 0.01 for p in video.landmarks]
        model = ScriptedModel(video.landmarks, conf, len(present[0]))
    else:
        if not args.checkpoint:
            raise UsageError("track needs --checkpoint (or --oracle)")
        model, _, _ = load_checkpoint(args.checkpoint)
    stats, records = run_sequence(frames, model, detector, gt)
    lines = "".join(r.line() + "\n" for r in records)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "frames.txt").write_text(lines)
        (out / "stats.txt").write_text(stats.summary())
    sys.stdout.write(stats.summary())
    return EXIT_OK


def cmd_budget(args) -> int:
    from .config import resolve_config
    from .model import report_budget

    sys.stdout.write(report_budget(resolve_config(args.config)).summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results, seconds = run_suite(args.seed, args.trials)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {seconds:.1f}s")
    return EXIT_OK if not failed else EXIT_CHECK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "track": cmd_track,
    "budget": cmd_budget,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    from .config import ConfigError
    from .io import IncompatibleCheckpointError, ParseError
    from .training import StagingError

    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"atpn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StagingError, ParseError, IncompatibleCheckpointError, ConfigError, FileNotFoundError,
            ValueError, RuntimeError) as exc:
        print(f"atpn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
