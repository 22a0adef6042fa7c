"""Command-line entry point: ``kptrack {synth,train,track,eval,attn-export}``.

Every option can also come from a JSON ``--config`` file of option names;
command-line flags win over the file, which wins over built-in defaults.
The effective settings are written to ``config.json`` in the output
directory. Failures print one ``kptrack: error: ...`` line to stderr.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# option name -> default; flags use None as "not given" so the file can fill in
DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {
        "out": None, "videos": 4, "persons": 4, "frames": 60, "width": 960, "height": 540,
        "uniform_motion": False, "speed_min": 3.0, "speed_max": 12.0, "jitter": 4.0,
        "keypoint_dropout": 0.05, "missed_pose": 0.05, "duplicate_pose": 0.0,
        "occlusions": 0.0, "occlusion_frames": 2, "label_detections": False, "seed": 0,
    },
    "train": {
        "data": None, "out": None, "eval_data": None, "epochs": 25, "batch_size": 32, "lr": 1e-4,
        "warmup_fraction": 0.01, "samples_per_epoch": None, "delta": 4,
        "embeddings": "position,type,segment", "relative": False, "grad_clip": None, "seed": 0,
    },
    "track": {
        "detections": None, "checkpoint": None, "out": None, "delta": 4, "n_nearest": 6,
        "assignment": "greedy", "min_match_score": 0.5, "toks": False, "toks_oracle": None,
        "toks_sigma": 0.0, "toks_dropout": 0.0, "alpha": 1.25, "oks_threshold": 0.35, "seed": 0,
    },
    "eval": {
        "pred": None, "gt": None, "out": None, "pckh": 0.5,
        "thresholds": "0.0,0.1,0.2,0.3,0.4,0.5,0.57,0.6,0.7,0.8",
    },
    "attn-export": {
        "checkpoint": None, "sequence": None, "out": None, "frame": None, "gap": 1,
        "current": 0, "past": 0, "scale": 8,
    },
}
REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "track": ("detections", "checkpoint", "out"),
    "eval": ("pred", "gt", "out"),
    "attn-export": ("checkpoint", "sequence", "out", "frame"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(parser_: argparse.ArgumentParser, name: str, default: Any, help: str = ""):
    opt = "--" + name.replace("_", "-")
    if isinstance(default, bool):
        parser_.add_argument(opt, dest=name, action="store_const", const=True, default=None, help=help)
    else:
        kind = type(default) if default is not None else str
        if name in ("samples_per_epoch", "frame"):
            kind = int
        if name in ("grad_clip",):
            kind = float
        parser_.add_argument(opt, dest=name, type=kind, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kptrack", description="Keypoint-only multi-person pose tracking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "synth": "generate synthetic ground-truth and detection sequences",
        "train": "train a pair matcher on sequences with track ids",
        "track": "assign track ids to detected sequences",
        "eval": "MOTA / AP report and confidence-threshold sweep",
        "attn-export": "export attention maps for one pose pair",
    }
    for cmd, defaults in DEFAULTS.items():
        cmd_parser = sub.add_parser(cmd, help=helps[cmd])
        cmd_parser.add_argument("--config", type=str, default=None, help="JSON file of option values")
        for name, default in defaults.items():
            _flag(cmd_parser, name, default)
    return parser


def effective_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(from_file, dict):
            raise DataError(f"{path}: expected a JSON object")
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise UsageError(f"{path}: unknown option '{unknown[0]}' for {command}")
        cfg.update(from_file)
    for name in cfg:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    for name in REQUIRED[command]:
        if cfg[name] is None:
            raise UsageError(f"{command}: --{name.replace('_', '-')} is required")
    return cfg


def _write_config(out: Path, command: str, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "options": cfg}
    (out / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _existing(path: Optional[str], what: str) -> Path:
    target = Path(path)
    if not target.exists():
        raise DataError(f"{what} not found: {target}")
    return target


# -- subcommands ---------------------------------------------------------------

def cmd_synth(cfg: dict) -> None:
    from .dataio import NoiseModel, SynthConfig, generate_synthetic, save_sequence

    try:
        sc = SynthConfig(
            num_persons=cfg["persons"], num_frames=cfg["frames"], width=cfg["width"], height=cfg["height"],
            speed=(cfg["speed_min"], cfg["speed_max"]), uniform_motion=cfg["uniform_motion"],
            occlusions_per_person=cfg["occlusions"], occlusion_frames=cfg["occlusion_frames"],
            noise=NoiseModel(cfg["jitter"], cfg["keypoint_dropout"], cfg["missed_pose"], cfg["duplicate_pose"]),
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg["videos"] < 1:
        raise UsageError("--videos must be >= 1")
    out = Path(cfg["out"])
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "det").mkdir(parents=True, exist_ok=True)
    for i in range(cfg["videos"]):
        gt, det = generate_synthetic(sc, i, keep_ids=cfg["label_detections"])
        save_sequence(gt, out / "gt" / f"{gt.video_id}.json")
        save_sequence(det, out / "det" / f"{det.video_id}.json")
    _write_config(out, "synth", cfg)


def cmd_train(cfg: dict) -> None:
    from .dataio import load_sequences
    from .matcher import MatcherConfig, init_params, save_checkpoint
    from .training import TrainConfig, mine_pairs, train, write_metrics_csv

    seqs = load_sequences(_existing(cfg["data"], "training data"))
    eval_seqs = load_sequences(_existing(cfg["eval_data"], "evaluation data")) if cfg["eval_data"] else None
    try:
        mc = MatcherConfig(max_segment=cfg["delta"], embeddings=tuple(cfg["embeddings"].split(",")))
        tc = TrainConfig(
            batch_size=cfg["batch_size"], peak_lr=cfg["lr"], warmup_fraction=cfg["warmup_fraction"],
            epochs=cfg["epochs"], seed=cfg["seed"], samples_per_epoch=cfg["samples_per_epoch"],
            grad_clip=cfg["grad_clip"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = mine_pairs(seqs, cfg["delta"], seed=cfg["seed"], relative=cfg["relative"])
    if dataset.num_positive == 0 or dataset.num_negative == 0:
        raise DataError("training data must yield both matching and non-matching pairs (are track ids present?)")
    eval_set = None
    if eval_seqs is not None:
        eval_set = mine_pairs(eval_seqs, cfg["delta"], negatives_per_positive=1, seed=cfg["seed"] + 1,
                              relative=cfg["relative"]).balanced_subset(cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = train(init_params(mc, cfg["seed"]), mc, dataset, tc, eval_set=eval_set)
    extra = {"relative": cfg["relative"], "grid": [24, 18], "pairs": dataset.counts()}
    save_checkpoint(result.params, mc, out / "model.ckpt", extra=extra)
    write_metrics_csv(result.log, out / "metrics.csv")
    _write_config(out, "train", cfg)


def _load_matcher(path: str):
    from .matcher import PoseMatcher, load_checkpoint

    params, mc, extra = load_checkpoint(_existing(path, "checkpoint"))
    grid = extra.get("grid", [24, 18])
    return PoseMatcher(params, mc, grid[0], grid[1], bool(extra.get("relative", False)))


def cmd_track(cfg: dict) -> None:
    from .dataio import load_sequences, save_sequence
    from .toks import OracleJitterEstimator, ToksConfig
    from .tracker import TrackerConfig, track_video, write_assignment_log

    try:
        tc = TrackerConfig(cfg["delta"], cfg["n_nearest"], cfg["assignment"], cfg["min_match_score"])
        toks = ToksConfig(alpha=cfg["alpha"], oks_threshold=cfg["oks_threshold"]) if cfg["toks"] else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    matcher = _load_matcher(cfg["checkpoint"])
    if tc.delta > matcher.config.max_segment:
        raise UsageError(f"--delta {tc.delta} exceeds the checkpoint's segment range {matcher.config.max_segment}")
    videos = load_sequences(_existing(cfg["detections"], "detections"))
    oracle = {}
    if cfg["toks_oracle"]:
        oracle = {s.video_id: s for s in load_sequences(_existing(cfg["toks_oracle"], "oracle ground truth"))}
        missing = [v.video_id for v in videos if v.video_id not in oracle]
        if missing:
            raise DataError(f"oracle ground truth lacks video {missing[0]}")
    out = Path(cfg["out"])
    (out / "tracked").mkdir(parents=True, exist_ok=True)
    (out / "assignments").mkdir(parents=True, exist_ok=True)
    for seq in videos:
        est = None
        if toks is not None and seq.video_id in oracle:
            gt = oracle[seq.video_id]
            est = OracleJitterEstimator({f.index: f for f in gt.frames}, cfg["toks_sigma"], cfg["toks_dropout"], cfg["seed"])
        result = track_video(seq, matcher, tc, toks, est)
        save_sequence(result.sequence, out / "tracked" / f"{seq.video_id}.json")
        write_assignment_log(result.log, out / "assignments" / f"{seq.video_id}.csv")
    _write_config(out, "track", cfg)


def _parse_thresholds(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"--thresholds: not a comma-separated list of numbers: {text}") from None
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise UsageError("--thresholds must be values in [0, 1]")
    return values


def cmd_eval(cfg: dict) -> None:
    from .dataio import load_sequences
    from .metrics import (
        EvaluationError,
        MatchConfig,
        evaluate_ap,
        evaluate_mota,
        format_summary,
        sweep_confidence_threshold,
        write_joint_counts_csv,
        write_report_csv,
        write_sweep_csv,
    )

    thresholds = _parse_thresholds(cfg["thresholds"])
    if cfg["pckh"] <= 0:
        raise UsageError("--pckh must be positive")
    mc = MatchConfig(cfg["pckh"])
    pred = load_sequences(_existing(cfg["pred"], "predictions"))
    gt = load_sequences(_existing(cfg["gt"], "ground truth"))
    try:
        mota = evaluate_mota(pred, gt, mc)
        ap = evaluate_ap(pred, gt, mc)
        sweep = sweep_confidence_threshold(pred, gt, thresholds, mc)
    except EvaluationError as exc:
        raise DataError(str(exc)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(mota, ap, out / "report.csv")
    write_joint_counts_csv(mota, ap, out / "joints.csv")
    write_sweep_csv(sweep, out / "sweep.csv")
    (out / "summary.txt").write_text(format_summary(mota, ap))
    _write_config(out, "eval", cfg)


def write_pgm(matrix: np.ndarray, path, scale: int = 8) -> None:
    """Binary graymap, ``scale`` pixels per cell, white = largest value."""
    m = np.asarray(matrix, dtype=float)
    top = m.max() if m.size and m.max() > 0 else 1.0
    img = np.round(255.0 * m / top).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def cmd_attn_export(cfg: dict) -> None:
    import csv

    from .dataio import load_sequence
    from .matcher import extract_attention

    matcher = _load_matcher(cfg["checkpoint"])
    seq = load_sequence(_existing(cfg["sequence"], "sequence"))
    frame_no, gap = cfg["frame"], cfg["gap"]
    if not 1 <= gap <= matcher.config.max_segment:
        raise UsageError(f"--gap must lie in [1, {matcher.config.max_segment}]")
    indices = {f.index for f in seq.frames}
    if frame_no not in indices or frame_no - gap not in indices:
        raise DataError(f"{cfg['sequence']}: frames {frame_no} and {frame_no - gap} are not both present")
    cur_frame, past_frame = seq.frame(frame_no), seq.frame(frame_no - gap)
    if not 0 <= cfg["current"] < len(cur_frame.poses):
        raise DataError(f"frame {frame_no} has no pose {cfg['current']}")
    if not 0 <= cfg["past"] < len(past_frame.poses):
        raise DataError(f"frame {frame_no - gap} has no pose {cfg['past']}")
    pair = matcher.tokenize(cur_frame.poses[cfg["current"]], past_frame.poses[cfg["past"]], gap, seq.width, seq.height)
    maps = extract_attention(matcher.params, matcher.config, pair)
    labels = maps.token_labels()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for layer in range(maps.num_layers):
        for head in range(maps.num_heads):
            a = maps.head(layer, head)
            stem = out / f"layer{layer}_head{head}"
            with open(stem.with_suffix(".csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["query"] + labels)
                for q, row in zip(labels, a):
                    w.writerow([q] + [f"{v:.8f}" for v in row])
            write_pgm(a, stem.with_suffix(".pgm"), cfg["scale"])
    with open(out / "keypoint_mass.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head"] + labels)
        for layer in range(maps.num_layers):
            for head in range(maps.num_heads):
                w.writerow([layer, head] + [f"{v:.8f}" for v in maps.keypoint_mass(layer, head)])
    _write_config(out, "attn-export", cfg)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "attn-export": cmd_attn_export,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .dataio import SequenceFormatError
    from .matcher import CheckpointError

    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (synth, train, track, eval, attn-export)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = effective_config(args.command, args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (DataError, SequenceFormatError, CheckpointError, OSError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (FloatingPointError, OverflowError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    return EXIT_OK


def _fail(kind: str, exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"kptrack: error: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
