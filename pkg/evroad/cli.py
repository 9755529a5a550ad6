"""Command-line entry point: synth, ssl-labels, pretrain, finetune, eval, bench, serve, replay."""
import argparse
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from evroad import __version__
from evroad.core.config import Settings, load_model_config, resolve_configs
from evroad.core.errors import EvroadError, UsageError
from evroad.core.logger import get_logger, setup_logging
from evroad.core.utils import read_manifest, verify_inputs, write_csv, write_manifest
from evroad.services.events import DAVIS346, SensorGeometry, synth_moving_edge, synth_road_scene
from evroad.services.finetune import bench, evaluate, finetune, write_bench_csv, write_eval_csv
from evroad.services.network import ModelParams, init_model, swap_head
from evroad.services.pretrain import label_windows, pretrain, write_loss_history
from evroad.services.stream_io import (
    config_path_for,
    load_checkpoint,
    load_labeled_windows,
    parse_event_text,
    save_checkpoint,
    serialize_event_text,
    window_labels_from_events,
    window_stream,
    write_event_binary,
    write_event_labels,
)

logger = get_logger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


#-------------------------------------------------
# Shared helpers
#-------------------------------------------------
def _out_dir(path: str) -> str:
    return os.path.dirname(os.path.abspath(path))


def _dtype(settings: Settings, args) -> Any:
    return np.float32 if (args.precision or settings.general.precision) == "float32" else np.float64


def _threads(settings: Settings, args) -> int:
    return args.threads or settings.general.threads


def _parse_sets(pairs: Optional[List[str]]) -> Dict[str, str]:
    flags = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        flags[key.strip()] = value.strip()
    return flags


def _settings(args, flags: Dict[str, Any]) -> Settings:
    merged = _parse_sets(getattr(args, "set", None))
    merged.update({k: v for k, v in flags.items() if v is not None})
    return resolve_configs(args.config, merged)


def _snapshot(settings: Settings) -> Dict[str, Any]:
    return {section: getattr(settings, section).model_dump() for section in ("model", "ssl", "finetune")}


def _load(args, settings: Settings, path: str, dtype) -> ModelParams:
    """Load a checkpoint, holding it to the requested architecture when one was given."""
    if not (args.config or getattr(args, "set", None)):
        return load_checkpoint(path, dtype=dtype)
    stored = load_model_config(config_path_for(path))
    expected = settings.model.model_copy(update={"head": stored.head})
    return load_checkpoint(path, expected, dtype=dtype)


def _windows(path: str, n: int):
    geom, events = parse_event_text(path)
    return window_stream(events, n, geom).windows


def _args_snapshot(args) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _ensure_parents(args) -> None:
    for attr in ("out", "labels", "history"):
        path = getattr(args, attr, None)
        if path:
            os.makedirs(_out_dir(path), exist_ok=True)


#-------------------------------------------------
# Subcommands
#-------------------------------------------------
def cmd_synth(args, argv: List[str]) -> int:
    if args.events < 1:
        raise UsageError(f"--events must be >= 1, got {args.events}")
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    geom = SensorGeometry(args.width, args.height)
    if args.scene == "road":
        events, labels = synth_road_scene(geom, args.events, segment=args.n, seed=args.seed)
    else:
        events, labels = synth_moving_edge(geom, args.events, seed=args.seed)

    if args.binary:
        write_event_binary(args.out, geom, events, args.encoding)
    else:
        serialize_event_text(args.out, geom, events, args.encoding)
    labels_path = args.labels or f"{args.out}.labels"
    write_event_labels(labels_path, window_labels_from_events(labels, args.n))
    print(f"wrote {len(events)} events to {args.out} and labels to {labels_path}")

    write_manifest(_out_dir(args.out), "synth", argv, _args_snapshot(args), seed=args.seed)
    return 0


def cmd_ssl_labels(args, argv: List[str]) -> int:
    flags = {"n": args.n}
    if args.threshold != "median":
        flags.update({"threshold_mode": "fixed", "threshold": args.threshold})
    settings = _settings(args, flags)
    windows = _windows(args.events, settings.model.n)
    labels, a, entropies = label_windows(windows, settings.ssl)

    write_csv(args.out, ("entropy", "label"), zip(entropies, labels))
    print(f"threshold={a!r} windows={len(labels)} label1_fraction={sum(labels) / len(labels):.4f}")
    write_manifest(_out_dir(args.out), "ssl-labels", argv, _snapshot(settings), inputs=[args.events])
    return 0


def cmd_pretrain(args, argv: List[str]) -> int:
    settings = _settings(args, {
        "n": args.n, "ssl.epochs": args.epochs, "ssl.batch_size": args.batch_size,
        "ssl.lr": args.lr, "ssl.seed": args.seed, "head": "ssl_classifier",
    })
    dtype = _dtype(settings, args)
    windows = _windows(args.events, settings.model.n)
    params = init_model(settings.model, seed=settings.ssl.seed, dtype=dtype)

    result = pretrain(params, windows, settings.ssl, _threads(settings, args))
    save_checkpoint(result.params, args.out)
    history_path = args.history or f"{args.out}.history.csv"
    write_loss_history(history_path, result.history)
    print(f"threshold={result.threshold!r} final_loss={result.history[-1].mean_loss:.6f}")

    write_manifest(_out_dir(args.out), "pretrain", argv, _snapshot(settings),
                   seed=settings.ssl.seed, inputs=[args.events])
    return 0


def cmd_finetune(args, argv: List[str]) -> int:
    settings = _settings(args, {
        "n": args.n, "finetune.epochs": args.epochs, "finetune.batch_size": args.batch_size,
        "finetune.lr": args.lr, "finetune.seed": args.seed, "max_samples": args.max_samples,
    })
    dtype = _dtype(settings, args)
    seed = settings.finetune.seed
    if args.checkpoint:
        params = _load(args, settings, args.checkpoint, dtype)
        params = swap_head(params, "segmentation_head", seed=seed)
    else:
        logger.info("No pretrained checkpoint given; fine-tuning from random initialisation")
        params = init_model(settings.model.model_copy(update={"head": "segmentation_head"}), seed=seed, dtype=dtype)

    labeled = load_labeled_windows(args.events, args.labels, params.config.n)
    result = finetune(params, labeled.windows, labeled.window_labels(), settings.finetune,
                      _threads(settings, args))
    save_checkpoint(result.params, args.out)
    write_loss_history(args.history or f"{args.out}.history.csv", result.history)
    print(f"samples={result.n_samples} final_loss={result.history[-1].mean_loss:.6f}")

    write_manifest(_out_dir(args.out), "finetune", argv, _snapshot(settings), seed=seed,
                   inputs=[args.events, args.labels, args.checkpoint])
    return 0


def cmd_eval(args, argv: List[str]) -> int:
    settings = _settings(args, {})
    params = _load(args, settings, args.checkpoint, _dtype(settings, args))
    labeled = load_labeled_windows(args.events, args.labels, params.config.n)
    report = evaluate(params, labeled.windows, labeled.window_labels())
    print(f"accuracy={report.accuracy:.6f} miou={report.miou:.6f}")

    if args.out:
        write_eval_csv(args.out, report)
    write_manifest(_out_dir(args.out or args.checkpoint), "eval", argv, _snapshot(settings),
                   inputs=[args.checkpoint, args.events, args.labels])
    return 0


def cmd_bench(args, argv: List[str]) -> int:
    settings = _settings(args, {"n": args.n})
    if args.checkpoint:
        params = _load(args, settings, args.checkpoint, np.float64)
    else:
        params = init_model(settings.model, seed=0)
    report = bench(params, n_warmup=args.warmup, n_runs=args.runs)
    print(f"params={report.param_count} flops={report.flops:.0f} mean_s={report.mean_s:.6g} "
          f"median_s={report.median_s:.6g} std={report.std_s!r} windows_per_s={report.windows_per_s:.2f}")

    if args.out:
        write_bench_csv(args.out, report)
    write_manifest(_out_dir(args.out or args.checkpoint or "."), "bench", argv, _snapshot(settings),
                   inputs=[args.checkpoint])
    return 0


def cmd_serve(args, argv: List[str]) -> int:
    from evroad.main import start_server

    start_server(host=args.host, port=args.port, checkpoint=args.checkpoint)
    return 0


def cmd_replay(args, argv: List[str]) -> int:
    manifest = read_manifest(args.manifest)
    changed = verify_inputs(manifest)
    for path in changed:
        logger.warning(f"Input changed since the recorded run: {path}")
    if manifest.tool_version != __version__:
        logger.warning(f"Manifest written by version {manifest.tool_version}, running {__version__}")
    if manifest.command == "replay":
        raise UsageError("a replay manifest cannot be replayed")
    logger.info(f"Replaying {manifest.command}: {' '.join(manifest.argv)}")
    return main(manifest.argv)


#-------------------------------------------------
# Parser
#-------------------------------------------------
def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="evroad", description="Event-camera road segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--threads", type=int, help="worker threads for gradient computation")
    parser.add_argument("--precision", choices=("float64", "float32"))
    parser.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic event stream and its labels")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="label file path (default <out>.labels)")
    p.add_argument("--events", type=int, default=5000)
    p.add_argument("--width", type=int, default=DAVIS346[0])
    p.add_argument("--height", type=int, default=DAVIS346[1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene", choices=("edge", "road"), default="edge")
    p.add_argument("--n", type=int, default=50, help="events per label row")
    p.add_argument("--encoding", choices=("signed", "zero-one"), default="signed")
    p.add_argument("--binary", action="store_true", help="write the packed EVB1 format")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ssl-labels", help="polarity-entropy pretext labels per window")
    p.add_argument("--events", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--threshold", default="median", type=_threshold_arg)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ssl_labels)

    for name, func, help_text in (("pretrain", cmd_pretrain, "self-supervised pretraining"),
                                  ("finetune", cmd_finetune, "supervised road fine-tuning")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--events", required=True)
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--history", help="loss history CSV (default <out>.history.csv)")
        p.add_argument("--n", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.set_defaults(func=func)
        if name == "finetune":
            p.add_argument("--labels", required=True)
            p.add_argument("--checkpoint", help="pretrained checkpoint (random init when omitted)")
            p.add_argument("--max-samples", type=int)

    p = sub.add_parser("eval", help="accuracy and mIoU on labelled windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", help="metrics CSV")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="parameter count, FLOPs and inference timing")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", help="bench CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the HTTP prediction service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def _threshold_arg(value: str):
    if value == "median":
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'median' or a number, got {value!r}")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.log_level:
            setup_logging(args.log_level)
        _ensure_parents(args)
        return args.func(args, argv)
    except EvroadError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 2
