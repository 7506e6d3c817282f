"""Command-line entry point: ``branchycsi <command> [options]``.

Exit codes: 0 success, 2 usage or invalid configuration, 3 malformed data
(pcap, dataset, checkpoint), 4 runtime failure (I/O, missing files,
divergence). Errors are reported on stderr as ``error: <stage>: <message>``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import bench, kernels
from .csi import dataset as ds
from .csi.pcap import ParseStats, parse_pcap, write_pcap
from .csi.preprocess import AssemblyStats, RadioImage, SubcarrierMask, assemble_matrix, preprocess
from .csi.synth import Scenario, synth_capture, synth_dataset, synth_generate
from .errors import ConfigurationError, FormatError, ParameterError
from .labels import HAR_CLASSES, ROD_CLASSES
from .nn import build_branchy_ghostnet, count_layers, count_macs, load_weights, save_weights
from .nn.checkpoint import CheckpointFormatError
from .runtime import limit_threads

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
SMOKE_CHECKPOINT = "smoke.bgcn"

logger = logging.getLogger("branchycsi")


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        self.stage, self.cause = stage, cause
        super().__init__(f"{stage}: {cause}")


@contextlib.contextmanager
def stage(name: str):
    """Tag any exception raised inside with the pipeline stage that raised it."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, (ParameterError, ConfigurationError)):
        return EXIT_USAGE
    if isinstance(exc, (FormatError, CheckpointFormatError)):
        return EXIT_DATA
    return EXIT_RUNTIME


# argument types -------------------------------------------------------------


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def scenario_arg(text: str) -> Scenario:
    """``nobody``, ``two_persons`` or ``one_person/<activity>`` (class names or indices)."""
    rod_text, _, har_text = text.partition("/")

    def index(value, names):
        return int(value) if value.isdigit() else names.index(value)

    try:
        return Scenario(index(rod_text, ROD_CLASSES), index(har_text, HAR_CLASSES) if har_text else None)
    except (ValueError, ParameterError) as exc:
        raise argparse.ArgumentTypeError(f"bad scenario {text!r}: {exc}") from None


def timeline_arg(text: str) -> list:
    """Comma-separated ``scenario:packets`` segments, e.g. ``one_person/sit:900,nobody:900``."""
    segments = []
    for part in text.split(","):
        name, sep, count = part.rpartition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"segment {part!r} needs the form scenario:packets")
        segments.append((scenario_arg(name), positive_int(count)))
    return segments


# commands -----------------------------------------------------------------


def emit(args, payload: dict, text: Optional[str] = None) -> None:
    if args.format == "json" or text is None:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def load_mask(path) -> Optional[SubcarrierMask]:
    if path is None:
        return None
    with stage("load_mask"):
        return SubcarrierMask.from_file(path)


def cmd_ingest(args) -> int:
    mask = load_mask(args.mask)
    if not Path(args.pcap).is_file():
        raise StageError("parse_pcap", FileNotFoundError(f"no such capture: {args.pcap}"))
    parse_stats, asm_stats = ParseStats(), AssemblyStats()
    labels = (args.rod, args.har)
    images = []
    frames = parse_pcap(args.pcap, args.port, parse_stats)
    matrices = assemble_matrix(frames, args.window, asm_stats)
    while True:
        # each stage runs lazily inside next(); attribute failures to the right one
        try:
            matrix = next(matrices)
        except StopIteration:
            break
        except Exception as exc:
            name = "assemble_matrix" if isinstance(exc, ParameterError) else "parse_pcap"
            raise StageError(name, exc) from exc
        with stage("preprocess"):
            values = preprocess(matrix, mask, args.ma_window)
            images.append(RadioImage(values, labels[0], labels[1],
                                     {"source": Path(args.pcap).name, "start_us": matrix.start_us,
                                      "end_us": matrix.end_us}))
    with stage("dataset_write"):
        written = ds.dataset_write(images, args.out)
    counters = {
        "parse_pcap": {"packets": parse_stats.packets, "frames": parse_stats.frames,
                       "non_csi": parse_stats.non_csi, "skipped": parse_stats.skipped},
        "assemble_matrix": {"windows": asm_stats.windows, "dropped_frames": asm_stats.dropped_frames},
        "dataset_write": {"samples": written, "path": str(args.out)},
    }
    text = "\n".join(f"{name:<16} " + "  ".join(f"{k}={v}" for k, v in c.items()) for name, c in counters.items())
    emit(args, counters, text)
    return EXIT_OK


def cmd_synth(args) -> int:
    with stage("synth"):
        mask = load_mask(args.mask)
        if args.scenario is not None:
            samples = synth_generate(args.scenario, args.seed, args.count, args.window, mask)
        else:
            samples = synth_dataset(args.count, args.seed, args.window, mask)
    with stage("dataset_write"):
        n = ds.dataset_write(samples, args.out)
    emit(args, {"samples": n, "seed": args.seed, "path": str(args.out)}, f"wrote {n} samples to {args.out}")
    return EXIT_OK


def cmd_synth_capture(args) -> int:
    with stage("synth"):
        frames = synth_capture(args.timeline, args.seed)
    with stage("write_pcap"):
        n = write_pcap(frames, args.out)
    emit(args, {"frames": n, "seed": args.seed, "path": str(args.out)}, f"wrote {n} frames to {args.out}")
    return EXIT_OK


def resolve_model(path: Optional[str]):
    with stage("load_weights"):
        if path is None:
            with resources.as_file(resources.files("branchycsi") / "data" / SMOKE_CHECKPOINT) as p:
                return load_weights(p)
        return load_weights(path)


def cmd_train(args) -> int:
    from .train import TrainConfig, evaluate, train

    with stage("load_config"):
        cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
        overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr}
        raw = cfg.to_dict()
        raw.update({k: v for k, v in overrides.items() if v is not None})
        raw["seed"] = args.seed
        if args.no_flip:
            raw["flip"] = False
        cfg = TrainConfig.from_dict(raw)
    with stage("dataset_read"):
        data = ds.dataset_read(args.data)
    held_out = []
    if args.holdout:
        with stage("split"):
            data, held_out = ds.split_dataset(data, args.holdout, args.seed)
    with stage("build"):
        model = build_branchy_ghostnet(args.width, args.branch_point, seed=args.seed, strict=False)

    def on_epoch(record):
        if args.format == "json":
            print(json.dumps({"epoch_record": record.to_dict()}, sort_keys=True), flush=True)
        else:
            d = record.to_dict()
            har = "n/a" if d["har_accuracy"] is None else f"{d['har_accuracy']:.3f}"
            print(f"epoch {d['epoch']:>3}  lr {d['lr']:.2e}  loss {d['total']:.4f}  "
                  f"rod {d['rod_accuracy']:.3f}  har {har}  {d['seconds']:.1f}s", flush=True)

    with stage("train"):
        train(model, data, cfg, on_epoch)
    with stage("save_weights"):
        save_weights(model, args.out)
    result = {"checkpoint": str(args.out), "train_samples": len(data), "config": cfg.to_dict()}
    text = f"saved {args.out}"
    if held_out:
        with stage("evaluate"):
            reports = [evaluate(model, held_out, mode, args.test_batch) for mode in ("rod", "har")
                       if any((s.rod_label if mode == "rod" else s.har_label) is not None for s in held_out)]
        result["held_out"] = {r.task: r.to_dict() for r in reports}
        text += "\n" + "\n".join(r.render() for r in reports)
    emit(args, result, text)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    model = resolve_model(args.model)
    with stage("dataset_read"):
        data = ds.dataset_read(args.data)
    modes = ("rod", "har") if args.mode == "both" else (args.mode,)
    with stage("evaluate"):
        reports = [evaluate(model, data, mode, args.batch_size) for mode in modes]
    emit(args, {r.task: r.to_dict() for r in reports}, "\n".join(r.render() for r in reports))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.backend:
        with stage("kernels"):
            kernels.set_backend(args.backend)
    if args.model:
        model = resolve_model(args.model)
    else:
        with stage("build"):
            model = build_branchy_ghostnet(args.width, seed=args.seed)
    with stage("inputs"):
        if args.data:
            inputs = [s.values for s in ds.dataset_read(args.data)[:args.inputs]]
        else:
            inputs = [s.values for s in synth_dataset(args.inputs, args.seed)]
    with stage("measure"):
        rep = bench.measure(model, inputs, args.path, args.warmup, args.reps, args.threads)
    if args.reps < bench.MIN_REPORTABLE_REPS:
        logger.warning("fewer than %d reps; ratios are indicative only", bench.MIN_REPORTABLE_REPS)
    print(bench.report(rep, args.format))
    return EXIT_OK


def cmd_monitor(args) -> int:
    from .monitor import Monitor, MonitorConfig

    if not args.config:
        raise StageError("load_config", ParameterError("monitor needs --config <file>"))
    with stage("load_config"):
        cfg = MonitorConfig.from_file(args.config)
    model = resolve_model(cfg.model_path)
    sink = (lambda r: print(json.dumps(r, sort_keys=True), flush=True)) if args.format == "json" else None
    with stage("monitor"):
        stats = Monitor(cfg, model, sink).run()
    print(json.dumps({"monitor_stats": stats.to_dict()}, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_info(args) -> int:
    model = build_branchy_ghostnet(args.width, args.branch_point, strict=args.width == 1.35)
    layers = count_layers(model)
    payload = {"conv_layers": layers.conv, "fc_layers": layers.fc, "macs": count_macs(model),
               "mac_ratio": bench.mac_ratio(model), "backend": kernels.name(), "backends": kernels.available()}
    emit(args, payload, "\n".join(f"{k:<12} {v}" for k, v in payload.items()))
    return EXIT_OK


# parser -------------------------------------------------------------------


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    parser.add_argument("--threads", type=positive_int, default=d(None),
                        help="cap kernel threads; 1 gives bit-reproducible runs")
    parser.add_argument("--log-level", default=d("warning"),
                        choices=("debug", "info", "warning", "error"), help="stderr log level")
    parser.add_argument("--config", default=d(None), help="JSON config file for train or monitor")
    parser.add_argument("--format", default=d("table"), choices=("table", "json"), help="output format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchycsi", description="Wi-Fi CSI occupancy and activity sensing with an early-exit network.")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "convert a pcap capture into a radio-image dataset")
    p.add_argument("pcap", help="input capture")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--mask", help="JSON file with 'nulls' and 'pilots' tone indices")
    p.add_argument("--window", type=positive_int, default=300, help="packets per image (default 300)")
    p.add_argument("--ma-window", type=positive_int, default=5, help="moving-average length (default 5)")
    p.add_argument("--port", type=int, default=5500, help="UDP port carrying CSI (default 5500)")
    p.add_argument("--rod", type=int, choices=range(len(ROD_CLASSES)), help="occupancy label for all images")
    p.add_argument("--har", type=int, choices=range(len(HAR_CLASSES)), help="activity label for all images")

    p = add("synth", cmd_synth, "generate a synthetic radio-image dataset")
    p.add_argument("--count", type=nonneg_int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--scenario", type=scenario_arg,
                   help="single scenario, e.g. nobody or one_person/walk (default: mixed 1:2:1)")
    p.add_argument("--window", type=positive_int, default=300, help="packets per image (default 300)")
    p.add_argument("--mask", help="JSON subcarrier mask file")

    p = add("synth-capture", cmd_synth_capture, "generate a synthetic pcap capture from a scripted timeline")
    p.add_argument("--timeline", type=timeline_arg, required=True,
                   help="segments scenario:packets, e.g. one_person/sit:900,nobody:600")
    p.add_argument("--out", required=True, help="output pcap path")

    p = add("train", cmd_train, "train a model on a dataset and save a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--width", type=float, default=1.35, help="width multiplier (default 1.35)")
    p.add_argument("--branch-point", type=positive_int, default=6, help="early-exit position (default 6)")
    p.add_argument("--epochs", type=positive_int, help="override the configured epochs")
    p.add_argument("--batch-size", type=positive_int, help="override the configured batch size")
    p.add_argument("--lr", type=float, help="override the base learning rate")
    p.add_argument("--no-flip", action="store_true", help="disable time-axis flip augmentation")
    p.add_argument("--holdout", type=float, default=0.0,
                   help="fraction held out (stratified, seeded) and evaluated after training")
    p.add_argument("--test-batch", type=positive_int, default=1, help="evaluation batch size")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", help="checkpoint (default: the packaged smoke checkpoint)")
    p.add_argument("--mode", choices=("rod", "har", "both"), default="both", help="task to score")
    p.add_argument("--batch-size", type=positive_int, default=1, help="evaluation batch size (default 1)")

    p = add("bench", cmd_bench, "time the early-exit path against the full path")
    p.add_argument("--model", help="checkpoint (default: a freshly built network of --width)")
    p.add_argument("--width", type=float, default=1.35, help="width of the built network (default 1.35)")
    p.add_argument("--data", help="dataset supplying inputs (default: synthetic)")
    p.add_argument("--inputs", type=positive_int, default=4, help="distinct inputs cycled through")
    p.add_argument("--reps", type=positive_int, default=30, help="timed reps per path (default 30)")
    p.add_argument("--warmup", type=nonneg_int, default=5, help="untimed warmup reps (default 5)")
    p.add_argument("--path", choices=("both", "early", "full", "auto"), default="both", help="paths to time")
    p.add_argument("--backend", choices=("compiled", "python"), help="kernel backend")

    add("monitor", cmd_monitor, "run the streaming monitor described by --config")

    p = add("info", cmd_info, "print layer and MAC counts of a build")
    p.add_argument("--width", type=float, default=1.35, help="width multiplier")
    p.add_argument("--branch-point", type=positive_int, default=6, help="early-exit position")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.holdout and not 0 < args.holdout < 1:
        parser.error("--holdout must lie in (0, 1)")
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with limit_threads(args.threads):
            return args.func(args)
    except StageError as exc:
        print(f"error: {exc.stage}: {exc.cause}", file=sys.stderr)
        return exit_code(exc)
    except (ParameterError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
