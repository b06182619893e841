import argparse
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from bench import run_benchmarks
from clip_io import atomic_write_all, encode_pgm, load_clip
from config import config, debug_print, load_config_file, parse_bool, resolve_settings
from dataset import (
    MANIFEST_NAME,
    WindowDataset,
    class_labels,
    import_frames,
    make_sequences,
    preprocess,
    read_manifest,
    split_dataset,
    synth_dataset,
)
from model_store import build_model, load_model, model_summary, save_model
from models import BackboneConfig, ModelConfig, RecurrentConfig, SynthSpec, TrainConfig
from recognizer import ActivityRecognizer
from training import evaluate, train

# name -> (default, converter used for config file values)
Setting = Tuple[Any, Callable[[Any], Any]]

COMMON_SETTINGS: Dict[str, Setting] = {
    "seed": (config.SEED, int),
}
INPUT_SETTINGS: Dict[str, Setting] = {
    "height": (config.INPUT_HEIGHT, int),
    "width": (config.INPUT_WIDTH, int),
}
SYNTH_SETTINGS: Dict[str, Setting] = {
    "classes": (3, int),
    "clips_per_class": (20, int),
    "frames": (16, int),
    "size": (32, int),
}
TRAIN_SETTINGS: Dict[str, Setting] = {
    **INPUT_SETTINGS,
    "epochs": (config.EPOCHS, int),
    "batch_size": (config.BATCH_SIZE, int),
    "learning_rate": (config.LEARNING_RATE, float),
    "train_fraction": (config.TRAIN_FRACTION, float),
    "test_fraction": (0.0, float),
    "sequence_length": (config.SEQUENCE_LENGTH, int),
    "attention_hidden": (config.ATTENTION_HIDDEN, int),
    "gru_hidden": (config.GRU_HIDDEN, int),
    "gru_layers": (config.GRU_LAYERS, int),
    "channel_attention": (True, parse_bool),
    "spatial_attention": (True, parse_bool),
    "bidirectional": (True, parse_bool),
    "shuffle_frames": (False, parse_bool),
    "dtype": (config.DTYPE, str),
    "history": (None, str),
    "quiet": (False, parse_bool),
}
EVAL_SETTINGS: Dict[str, Setting] = {
    "split": ("val", str),
    "shuffle_frames": (False, parse_bool),
}
SALIENCY_SETTINGS: Dict[str, Setting] = {
    "frame": (0, int),
    "out_dir": (".", str),
}
BENCH_SETTINGS: Dict[str, Setting] = {
    **INPUT_SETTINGS,
    "warmup": (config.BENCH_WARMUP, int),
    "timed": (config.BENCH_TIMED, int),
}


def _settings(args: argparse.Namespace, known: Dict[str, Setting]) -> Dict[str, Any]:
    """Resolve `known` with precedence: flag > --config file > default"""
    known = {**COMMON_SETTINGS, **known}
    file_values = load_config_file(args.config) if args.config else None
    cli_values = {name: getattr(args, name, None) for name in known}
    return resolve_settings(
        {name: default for name, (default, _) in known.items()},
        file_values,
        cli_values,
        {name: converter for name, (_, converter) in known.items()},
    )


def _cmd_synth_data(args: argparse.Namespace) -> int:
    settings = _settings(args, SYNTH_SETTINGS)
    spec = SynthSpec(
        num_classes=settings["classes"],
        clips_per_class=settings["clips_per_class"],
        frames=settings["frames"],
        size=settings["size"],
    )
    rows = synth_dataset(spec, settings["seed"], args.out)
    print(f"wrote {len(rows)} clips and {os.path.join(args.out, MANIFEST_NAME)}")
    return 0


def _cmd_import_frames(args: argparse.Namespace) -> int:
    frames = import_frames(args.frame_dir, args.out)
    count, height, width = frames.shape[:3]
    print(f"wrote {args.out}: {count} frames of {height}x{width}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    settings = _settings(args, TRAIN_SETTINGS)
    seed = settings["seed"]
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    rows = read_manifest(args.manifest)
    labels = class_labels(rows)
    if any(row.split is None for row in rows):
        rows = split_dataset(
            rows, settings["train_fraction"], seed, settings["test_fraction"]
        )

    backbone = BackboneConfig(
        input_height=settings["height"],
        input_width=settings["width"],
        attention_hidden=settings["attention_hidden"],
        use_channel_attention=settings["channel_attention"],
        use_spatial_attention=settings["spatial_attention"],
    )
    model_config = ModelConfig(
        backbone=backbone,
        recurrent=RecurrentConfig(
            input_size=backbone.feature_size,
            hidden_size=settings["gru_hidden"],
            num_layers=settings["gru_layers"],
            bidirectional=settings["bidirectional"],
            sequence_length=settings["sequence_length"],
            num_classes=len(labels),
        ),
    )
    train_config = TrainConfig(
        learning_rate=settings["learning_rate"],
        batch_size=settings["batch_size"],
        epochs=settings["epochs"],
        seed=seed,
        sequence_length=settings["sequence_length"],
        dtype=settings["dtype"],
    )
    dtype = np.dtype(train_config.dtype)

    def load(split: str) -> WindowDataset:
        return WindowDataset.from_manifest(
            rows,
            labels,
            backbone.input_height,
            backbone.input_width,
            sequence_length=train_config.sequence_length,
            split=split,
            base_dir=base_dir,
            shuffle_frames=settings["shuffle_frames"],
            seed=seed,
            dtype=dtype,
        )

    train_set, val_set = load("train"), load("val")
    bundle = build_model(model_config, labels, seed, dtype=dtype)
    if not settings["quiet"]:
        print(model_summary(bundle))
    best, history = train(
        bundle,
        train_set,
        val_set,
        train_config,
        checkpoint_path=args.out,
        quiet=settings["quiet"],
    )
    save_model(best, args.out)
    if settings["history"]:
        history.save(settings["history"])
    best_val = max(r.val_acc for r in history.records)
    print(f"best val_acc {best_val:.4f}; model saved to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    settings = _settings(args, EVAL_SETTINGS)
    bundle = load_model(args.model)
    backbone = bundle.config.backbone
    split = None if settings["split"] == "all" else settings["split"]
    dataset = WindowDataset.from_manifest(
        read_manifest(args.manifest),
        bundle.labels,
        backbone.input_height,
        backbone.input_width,
        sequence_length=bundle.config.recurrent.sequence_length,
        split=split,
        base_dir=os.path.dirname(os.path.abspath(args.manifest)),
        shuffle_frames=settings["shuffle_frames"],
        seed=settings["seed"],
        dtype=bundle.dtype,
    )
    report = evaluate(bundle, dataset)
    print(report.to_text(bundle.labels))
    return 0


def _clip_frames(bundle, path: str) -> np.ndarray:
    backbone = bundle.config.backbone
    return preprocess(load_clip(path), backbone.input_height, backbone.input_width)


def _cmd_predict(args: argparse.Namespace) -> int:
    bundle = load_model(args.model)
    recognizer = ActivityRecognizer(bundle)
    frames = _clip_frames(bundle, args.clip)
    length = bundle.config.recurrent.sequence_length
    windows = np.stack(make_sequences(frames, length, length))
    prediction = recognizer.predict_clip(windows)
    for label, probability in recognizer.ranked(prediction):
        print(f"{label}\t{probability:.6f}")
    print(f"predicted: {prediction.label} ({prediction.confidence:.4f})")
    return 0


def _cmd_saliency(args: argparse.Namespace) -> int:
    settings = _settings(args, SALIENCY_SETTINGS)
    bundle = load_model(args.model)
    frames = _clip_frames(bundle, args.clip)
    index = settings["frame"]
    if not 0 <= index < len(frames):
        raise ValueError(f"frame {index} outside 0..{len(frames) - 1}")

    maps = ActivityRecognizer(bundle).saliency(frames[index])
    stem = os.path.splitext(os.path.basename(args.clip))[0]
    paths = [
        os.path.join(settings["out_dir"], f"{stem}_f{index}_block{block}.pgm")
        for block in range(1, len(maps) + 1)
    ]
    atomic_write_all([(path, encode_pgm(gate)) for path, gate in zip(paths, maps)])
    for path, gate in zip(paths, maps):
        print(f"{path}\t{gate.shape[1]}x{gate.shape[0]}")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    # THREADS is looked up per run so a changed config applies
    settings = _settings(args, {**BENCH_SETTINGS, "threads": (config.THREADS, int)})
    if args.model:
        if args.height is not None or args.width is not None:
            raise ValueError("--height/--width cannot be combined with --model")
        bundle = load_model(args.model)
    else:
        model_config = ModelConfig(
            backbone=BackboneConfig(
                input_height=settings["height"], input_width=settings["width"]
            )
        )
        bundle = build_model(model_config, ["class_a", "class_b"], settings["seed"])
    print(model_summary(bundle))
    reports = run_benchmarks(
        bundle,
        warmup=settings["warmup"],
        timed=settings["timed"],
        threads=settings["threads"],
        seed=settings["seed"],
        quiet=False,
    )
    for report in reports:
        print(report.to_text())
        print(report.to_record())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--debug", action="store_true", help="verbose tracing")

    sized = argparse.ArgumentParser(add_help=False)
    sized.add_argument("--height", type=int)
    sized.add_argument("--width", type=int)

    parser = argparse.ArgumentParser(
        prog="activity-recognizer",
        description="Dual-attention CNN + Bi-GRU human activity recognition",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser(
        "synth-data", parents=[common], help="generate the synthetic motion dataset"
    )
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--classes", type=int)
    synth.add_argument("--clips-per-class", dest="clips_per_class", type=int)
    synth.add_argument("--frames", type=int)
    synth.add_argument("--size", type=int)
    synth.set_defaults(handler=_cmd_synth_data)

    imports = commands.add_parser(
        "import-frames", parents=[common], help="pack P6 frames into a clip file"
    )
    imports.add_argument("frame_dir")
    imports.add_argument("out")
    imports.set_defaults(handler=_cmd_import_frames)

    trainer = commands.add_parser(
        "train", parents=[common, sized], help="train a model from a manifest"
    )
    trainer.add_argument("--manifest", required=True)
    trainer.add_argument("--out", required=True, help="model file to write")
    trainer.add_argument("--epochs", type=int)
    trainer.add_argument("--batch-size", dest="batch_size", type=int)
    trainer.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    trainer.add_argument("--train-fraction", dest="train_fraction", type=float)
    trainer.add_argument("--test-fraction", dest="test_fraction", type=float)
    trainer.add_argument("--sequence-length", dest="sequence_length", type=int)
    trainer.add_argument("--attention-hidden", dest="attention_hidden", type=int)
    trainer.add_argument("--gru-hidden", dest="gru_hidden", type=int)
    trainer.add_argument("--gru-layers", dest="gru_layers", type=int)
    trainer.add_argument(
        "--no-channel-attention",
        dest="channel_attention",
        action="store_const",
        const=False,
    )
    trainer.add_argument(
        "--no-spatial-attention",
        dest="spatial_attention",
        action="store_const",
        const=False,
    )
    trainer.add_argument(
        "--unidirectional", dest="bidirectional", action="store_const", const=False
    )
    trainer.add_argument(
        "--shuffle-frames", dest="shuffle_frames", action="store_const", const=True
    )
    trainer.add_argument("--dtype", choices=["float32", "float64"])
    trainer.add_argument("--history", help="CSV file for the per-epoch history")
    trainer.add_argument("--quiet", action="store_const", const=True)
    trainer.set_defaults(handler=_cmd_train)

    evaluator = commands.add_parser(
        "eval", parents=[common], help="accuracy and confusion matrix"
    )
    evaluator.add_argument("--model", required=True)
    evaluator.add_argument("--manifest", required=True)
    evaluator.add_argument("--split", choices=["train", "val", "test", "all"])
    evaluator.add_argument(
        "--shuffle-frames", dest="shuffle_frames", action="store_const", const=True
    )
    evaluator.set_defaults(handler=_cmd_eval)

    predictor = commands.add_parser(
        "predict", parents=[common], help="class probabilities for one clip"
    )
    predictor.add_argument("--model", required=True)
    predictor.add_argument("clip")
    predictor.set_defaults(handler=_cmd_predict)

    saliency = commands.add_parser(
        "saliency", parents=[common], help="write spatial attention maps as PGM"
    )
    saliency.add_argument("--model", required=True)
    saliency.add_argument("clip")
    saliency.add_argument("--frame", type=int)
    saliency.add_argument("--out-dir", dest="out_dir")
    saliency.set_defaults(handler=_cmd_saliency)

    bencher = commands.add_parser(
        "bench", parents=[common, sized], help="seconds per frame / frames per second"
    )
    bencher.add_argument(
        "--model", help="model file (default: fresh model sized by --height/--width)"
    )
    bencher.add_argument("--warmup", type=int)
    bencher.add_argument("--timed", type=int)
    bencher.add_argument("--threads", type=int)
    bencher.set_defaults(handler=_cmd_bench)
    return parser


def _one_line(error: BaseException) -> str:
    return " ".join(str(error).split()) or type(error).__name__


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    if args.debug:
        config.DEBUG = True
    debug_print(f"[CLI] {args.command} {vars(args)}")
    try:
        return args.handler(args)
    except (ValueError, OSError) as e:
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(cli_dispatch(argv))


if __name__ == "__main__":
    main()
