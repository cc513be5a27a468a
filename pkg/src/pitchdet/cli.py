"""Command-line entry points: train, detect, eval, bench, synth.

Configuration is resolved in three layers: built-in defaults, then an
optional JSON config file (``--config``), then explicit flags. Every run
writes the fully-resolved configuration as JSON next to its outputs, so a
run is reproducible from the snapshot plus its inputs.

Exit codes: 0 success, 2 configuration errors, 3 input/output errors,
4 numerical failures. The ``PITCHDET_THREADS`` environment variable caps
BLAS thread counts; it is applied before numpy is first imported, which is
why this module and the package root import the heavy modules lazily.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

_THREAD_ENV_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class ConfigError(ValueError):
    """Bad flag/config-file values; maps to exit code 2."""


def configure_threads(environ=os.environ) -> None:
    """Propagate PITCHDET_THREADS to the BLAS thread-count variables.

    Must run before numpy is imported — BLAS libraries read these once at
    load time. Explicitly-set BLAS variables win over the umbrella one.
    """
    value = environ.get("PITCHDET_THREADS")
    if value is None:
        return
    if not value.isdigit() or int(value) < 1:
        raise ConfigError(f"PITCHDET_THREADS must be a positive integer, got {value!r}")
    for name in _THREAD_ENV_VARS:
        environ.setdefault(name, value)


# ---------------------------------------------------------------------------
# config merging
# ---------------------------------------------------------------------------


def _load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def merge_config(defaults: dict, file_config: dict, flag_overrides: dict) -> dict:
    """defaults <- config file <- flags, rejecting unknown file keys."""
    resolved = {k: (dict(v) if isinstance(v, dict) else v) for k, v in defaults.items()}
    for key, value in file_config.items():
        if key not in resolved:
            raise ConfigError(f"unknown config field: {key}")
        if isinstance(resolved[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {key!r} must be an object")
            resolved[key].update(value)
        else:
            resolved[key] = value
    for key, value in flag_overrides.items():
        section, _, field = key.partition(".")
        if field:
            resolved.setdefault(section, {})[field] = value
        else:
            resolved[key] = value
    return resolved


def _write_snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, **resolved}
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)
        f.write("\n")


def _flag_overrides(args: argparse.Namespace, mapping: dict) -> dict:
    out = {}
    for attr, key in mapping.items():
        if hasattr(args, attr):
            out[key] = getattr(args, attr)
    return out


def _build_dataclass(cls, data: dict, section: str):
    """Instantiate a config dataclass, naming bad fields after the section."""
    import dataclasses

    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {section} config field(s): {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    from .data import load_dataset, split_dataset
    from .figures import save_loss_figure
    from .model import ModelConfig
    from .training import TrainConfig, train

    defaults = {
        "data": None,
        "out": None,
        "resume": None,
        "split": "none",
        "train_fraction": 0.8,
        "split_seed": 0,
        "model": json.loads(ModelConfig().canonical_json()),
        "train": TrainConfig().to_dict(),
    }
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = _flag_overrides(
        args,
        {
            "data": "data",
            "out": "out",
            "resume": "resume",
            "split": "split",
            "train_fraction": "train_fraction",
            "split_seed": "split_seed",
            "epochs": "train.epochs",
            "batch_size": "train.batch_size",
            "lr0": "train.lr0",
            "lr_drop_epoch": "train.lr_drop_epoch",
            "lr_drop_factor": "train.lr_drop_factor",
            "seed": "train.seed",
            "checkpoint_every": "train.checkpoint_every",
        },
    )
    resolved = merge_config(defaults, file_cfg, flags)
    if getattr(args, "no_augment", False):
        resolved["train"]["augmentation"] = None
    if not resolved["data"] or not resolved["out"]:
        raise ConfigError("train requires --data and --out")

    try:
        model_cfg = ModelConfig.from_dict(resolved["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
    try:
        train_cfg = TrainConfig.from_dict(resolved["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc
    if resolved["split"] not in ("none", "random", "by-sequence"):
        raise ConfigError(f"unknown split mode: {resolved['split']!r}")

    dataset = load_dataset(resolved["data"])
    out_dir = Path(resolved["out"])
    _write_snapshot(out_dir, "train", resolved)

    if resolved["split"] != "none":
        train_part, eval_part = split_dataset(
            dataset, resolved["train_fraction"], resolved["split"], resolved["split_seed"]
        )
        for name, part in (("train", train_part), ("eval", eval_part)):
            manifest = out_dir / f"{name}_split.txt"
            manifest.write_text("".join(rec.frame + "\n" for rec in part.records))
        dataset = train_part

    result = train(
        dataset,
        model_cfg,
        train_cfg,
        out_dir,
        resume_from=resolved["resume"],
    )
    save_loss_figure(out_dir / "loss_curve.png", result.log_rows)
    print(f"trained {train_cfg.epochs} epochs; final weights: {result.final_weights_path}")
    return EXIT_OK


_FRAME_SUFFIXES = (".ppm", ".png")


def _find_frames(input_path: Path) -> list[Path]:
    if input_path.is_file():
        return [input_path]
    if input_path.is_dir():
        frames = sorted(
            p for p in input_path.rglob("*") if p.suffix.lower() in _FRAME_SUFFIXES
        )
        if frames:
            return frames
    raise FileNotFoundError(f"no frames found under {input_path}")


def cmd_detect(args: argparse.Namespace) -> int:
    from .decode import DecoderConfig
    from .model import load_weights
    from .pipeline import FrameDetections, detect_image, dump_confidence_maps, write_detections
    from .training import NumericalError

    defaults = {
        "weights": None,
        "input": None,
        "out": None,
        "dump_maps": False,
        "decoder": {
            "theta_ball": 0.5,
            "theta_player": 0.5,
            "nms_window": 3,
            "ball_mode": "single-best",
        },
    }
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = _flag_overrides(
        args,
        {
            "weights": "weights",
            "input": "input",
            "out": "out",
            "dump_maps": "dump_maps",
            "theta_ball": "decoder.theta_ball",
            "theta_player": "decoder.theta_player",
            "ball_mode": "decoder.ball_mode",
        },
    )
    resolved = merge_config(defaults, file_cfg, flags)
    if not resolved["weights"] or not resolved["input"] or not resolved["out"]:
        raise ConfigError("detect requires --weights, --input and --out")
    decoder_cfg = _build_dataclass(DecoderConfig, resolved["decoder"], "decoder")

    out_path = Path(resolved["out"])
    out_dir = out_path.parent
    _write_snapshot(out_dir, "detect", resolved)

    weights = load_weights(resolved["weights"])
    frames = _find_frames(Path(resolved["input"]))

    results: list[FrameDetections] = []
    failures: list[tuple[str, str, bool]] = []
    for frame_path in frames:
        try:
            fd, outputs = detect_image(weights, frame_path, decoder_cfg)
        except NumericalError as exc:
            failures.append((frame_path.name, str(exc), True))
            continue
        except Exception as exc:  # recorded per frame; the run continues
            failures.append((frame_path.name, str(exc), False))
            continue
        results.append(fd)
        if resolved["dump_maps"]:
            dump_confidence_maps(out_dir / (frame_path.stem + "_maps.npz"), outputs)

    write_detections(out_path, results)
    if failures:
        error_log = out_dir / "detect_errors.txt"
        error_log.write_text("".join(f"{name}\t{msg}\n" for name, msg, _ in failures))
        for name, msg, _ in failures:
            print(f"frame {name}: {msg}", file=sys.stderr)
        print(
            f"detected {len(results)}/{len(frames)} frames; "
            f"{len(failures)} failed (see {error_log})",
            file=sys.stderr,
        )
        return EXIT_NUMERICAL if any(num for _, _, num in failures) else EXIT_IO
    print(f"detected {len(results)} frames -> {out_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .evaluation import MatchConfig, evaluate, write_eval_report, write_pr_points
    from .figures import save_pr_figure
    from .data import load_dataset
    from .model import load_weights

    defaults = {
        "data": None,
        "weights": None,
        "out": None,
        "model": None,  # optional expectation, checked against the weight file
        "match": {"player_iou_threshold": 0.5, "ball_distance_tolerance": 5.0},
    }
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = _flag_overrides(
        args,
        {
            "data": "data",
            "weights": "weights",
            "out": "out",
            "iou_threshold": "match.player_iou_threshold",
            "ball_tolerance": "match.ball_distance_tolerance",
        },
    )
    resolved = merge_config(defaults, file_cfg, flags)
    if getattr(args, "dtype", None):
        resolved["model"] = dict(resolved["model"] or {}, dtype=args.dtype)
    if not resolved["data"] or not resolved["weights"] or not resolved["out"]:
        raise ConfigError("eval requires --data, --weights and --out")
    match_cfg = _build_dataclass(MatchConfig, resolved["match"], "match")

    weights = load_weights(resolved["weights"])
    if resolved["model"]:
        actual = json.loads(weights.config.canonical_json())
        for key, value in resolved["model"].items():
            if key not in actual:
                raise ConfigError(f"unknown model config field: {key}")
            if actual[key] != value:
                raise ConfigError(
                    f"weight file has model {key}={actual[key]!r}, requested {value!r}"
                )

    dataset = load_dataset(resolved["data"])
    out_dir = Path(resolved["out"])
    _write_snapshot(out_dir, "eval", resolved)

    report = evaluate(dataset, weights, match_cfg=match_cfg)
    write_eval_report(report, out_dir / "report.txt")
    write_pr_points(report, out_dir / "pr_points.tsv")
    save_pr_figure(out_dir / "pr_curves.png", report)
    print((out_dir / "report.txt").read_text(), end="")
    return EXIT_OK


def _parse_sizes(raw: str) -> list[tuple[int, int]]:
    sizes = []
    for part in raw.split(","):
        try:
            w, h = part.strip().lower().split("x")
            sizes.append((int(w), int(h)))
        except ValueError as exc:
            raise ConfigError(f"sizes must look like '1920x1088,960x544', got {raw!r}") from exc
    if not sizes:
        raise ConfigError("at least one size is required")
    return sizes


def cmd_bench(args: argparse.Namespace) -> int:
    from .figures import save_latency_figure
    from .model import ModelConfig, build_network, load_weights
    from .pipeline import run_benchmark

    defaults = {
        "weights": None,
        "out": None,
        "sizes": "1920x1088,960x544",
        "iterations": 10,
        "warmup": 3,
        "seed": 0,
        "model": json.loads(ModelConfig().canonical_json()),
    }
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = _flag_overrides(
        args,
        {
            "weights": "weights",
            "out": "out",
            "sizes": "sizes",
            "iterations": "iterations",
            "warmup": "warmup",
            "seed": "seed",
        },
    )
    resolved = merge_config(defaults, file_cfg, flags)
    if not resolved["out"]:
        raise ConfigError("bench requires --out")
    sizes = _parse_sizes(resolved["sizes"])

    if resolved["weights"]:
        weights = load_weights(resolved["weights"])
    else:
        try:
            model_cfg = ModelConfig.from_dict(resolved["model"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc
        weights = build_network(model_cfg, seed=resolved["seed"])

    out_dir = Path(resolved["out"])
    _write_snapshot(out_dir, "bench", resolved)

    reports = []
    for width, height in sizes:
        report = run_benchmark(
            weights,
            width,
            height,
            iterations=resolved["iterations"],
            warmup=resolved["warmup"],
            seed=resolved["seed"],
        )
        reports.append(report)
    text = "\n".join(r.format() for r in reports)
    (out_dir / "bench_report.txt").write_text(text)
    save_latency_figure(out_dir / "latency.png", reports)
    print(text, end="")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    from .data import SyntheticSceneSpec, generate_synthetic_dataset

    defaults = {
        "out": None,
        "frames": 8,
        "seed": 0,
        "scene": {},
    }
    file_cfg = _load_config_file(args.config) if args.config else {}
    flags = _flag_overrides(
        args,
        {
            "out": "out",
            "frames": "frames",
            "seed": "seed",
            "width": "scene.width",
            "height": "scene.height",
        },
    )
    resolved = merge_config(defaults, file_cfg, flags)
    if not resolved["out"]:
        raise ConfigError("synth requires --out")
    spec = _build_dataclass(SyntheticSceneSpec, resolved["scene"], "scene")

    out_dir = Path(resolved["out"])
    _write_snapshot(out_dir, "synth", resolved)
    dataset = generate_synthetic_dataset(spec, resolved["frames"], resolved["seed"], out_dir)
    print(f"wrote {len(dataset)} frames under {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pitchdet",
        description="Fully-convolutional ball and player detection for long-shot soccer video.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("train", help="train a detector and write checkpoints + logs")
    p.add_argument("--data", default=S, help="annotations file (JSON lines)")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--resume", default=S, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr0", type=float, default=S)
    p.add_argument("--lr-drop-epoch", type=int, default=S)
    p.add_argument("--lr-drop-factor", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--checkpoint-every", type=int, default=S)
    p.add_argument("--no-augment", action="store_true", help="disable data augmentation")
    p.add_argument("--split", choices=("none", "random", "by-sequence"), default=S)
    p.add_argument("--train-fraction", type=float, default=S)
    p.add_argument("--split-seed", type=int, default=S)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over frames, write JSON lines")
    p.add_argument("--weights", default=S)
    p.add_argument("--input", default=S, help="frame file or directory")
    p.add_argument("--out", default=S, help="output detections file")
    p.add_argument("--config", default=None)
    p.add_argument("--theta-ball", type=float, default=S)
    p.add_argument("--theta-player", type=float, default=S)
    p.add_argument("--ball-mode", choices=("single-best", "all-candidates"), default=S)
    p.add_argument("--dump-maps", action="store_true", default=S,
                   help="save raw confidence maps next to the detections")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="compute average precision against annotations")
    p.add_argument("--data", default=S, help="annotations file (JSON lines)")
    p.add_argument("--weights", default=S)
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--iou-threshold", type=float, default=S)
    p.add_argument("--ball-tolerance", type=float, default=S)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None,
                   help="expected weight dtype; mismatch fails before inference")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure forward+decode throughput")
    p.add_argument("--weights", default=S, help="optional; fresh seeded weights otherwise")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--sizes", default=S, help="comma-separated WxH list")
    p.add_argument("--iterations", type=int, default=S)
    p.add_argument("--warmup", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="render a synthetic annotated dataset")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--frames", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--width", type=int, default=S)
    p.add_argument("--height", type=int, default=S)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    try:
        configure_threads()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser = build_parser()
    args = parser.parse_args(argv)

    from .data import AnnotationError, ImageFormatError
    from .evaluation import EvaluationError
    from .model import WeightFormatError
    from .training import NumericalError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, AnnotationError, ImageFormatError, WeightFormatError, EvaluationError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
