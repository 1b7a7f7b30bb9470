"""Command-line entry point: ``pixocr {gen-data,train,infer,eval,inspect-prompts}``.

Each subcommand resolves its options from three layers (built-in preset, then
a JSON config file, then explicit flags), prints the effective config as JSON
and exits 0 on success, 1 on usage errors, 2 on data errors and 3 on runtime
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import TaskId, decode, decoded_to_png_array, task_names, to_unit
from .model import CheckpointError, load_model
from .synthdata import GENERATOR_PRESETS, DatasetError, GeneratorConfig, generate, read_dataset, write_dataset
from .train import TRAIN_PRESETS, TrainConfig, TrainingError, train_loop

log = logging.getLogger("pixocr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
TASK_CHOICES = (*task_names(), "all")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _tasks(name: str) -> list:
    return list(TaskId) if name == "all" else [TaskId.parse(name)]


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return d


def _resolve(command: str, defaults: dict, args, flag_keys: dict) -> dict:
    """Merge preset defaults < config file < flags, rejecting unknown config keys."""
    cfg = dict(defaults)
    file_cfg = _load_config_file(args.config)
    if file_cfg.get("command", command) != command:
        raise UsageError(f"config file {args.config} is for '{file_cfg['command']}', not '{command}'")
    file_cfg.pop("command", None)
    unknown = sorted(set(file_cfg) - set(cfg))
    if unknown:
        raise UsageError(f"unknown keys in config file {args.config}: {', '.join(unknown)}")
    cfg.update(file_cfg)
    for flag, key in flag_keys.items():
        val = getattr(args, flag)
        if val is not None:
            cfg[key] = val
    return cfg


def _echo(command: str, cfg: dict) -> None:
    print(json.dumps({"command": command, **cfg}, sort_keys=True))


def _preset_name(args, default: str) -> str:
    if args.preset is not None:
        return args.preset
    name = _load_config_file(args.config).get("preset", default)
    if name not in ("toy", "small"):
        raise UsageError(f"unknown preset {name!r} in {args.config}")
    return name


# --- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    preset_name = _preset_name(args, "small")
    defaults = {"task": "all", "count": 8, "out": None, "preset": preset_name,
                **GENERATOR_PRESETS[preset_name].to_dict()}
    cfg = _resolve("gen-data", defaults, args, {"task": "task", "count": "count", "out": "out",
                                                 "seed": "seed", "image_size": "image_size"})
    if not cfg["out"]:
        raise UsageError("gen-data needs --out")
    if cfg["task"] not in TASK_CHOICES or cfg["count"] < 1:
        raise UsageError(f"bad task/count: {cfg['task']!r}, {cfg['count']}")
    gen_keys = set(GeneratorConfig.__dataclass_fields__)
    try:
        gcfg = GeneratorConfig.from_dict({k: v for k, v in cfg.items() if k in gen_keys})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid generator config: {e}") from None
    cfg.update(gcfg.to_dict())
    _echo("gen-data", cfg)
    samples = generate(gcfg, _tasks(cfg["task"]), cfg["count"])
    write_dataset(samples, cfg["out"], gcfg)
    log.info("wrote %d samples to %s", len(samples), cfg["out"])
    return EXIT_OK


def cmd_train(args) -> int:
    preset_name = _preset_name(args, "small")
    base = TRAIN_PRESETS[preset_name].to_dict()
    defaults = {**base, "data": [], "out": None, "resume": None, "log_every": 1}
    cfg = _resolve("train", defaults, args, {
        "data": "data", "out": "out", "resume": "resume", "seed": "seed", "iters": "total_iters",
        "batch": "per_task_batch", "lr": "lr_start", "lr_end": "lr_end", "lr_step": "lr_step",
        "image_size": "image_size", "init": "init", "vgg_weights": "vgg_weights", "log_every": "log_every",
        "checkpoint_every": "checkpoint_every",
    })
    if not cfg["out"]:
        raise UsageError("train needs --out")
    if not cfg["data"]:
        raise UsageError("train needs at least one --data directory")
    if args.preset is not None:
        cfg["preset"] = args.preset
    run_keys = ("data", "out", "resume", "log_every")
    try:
        tcfg = TrainConfig.from_dict({k: v for k, v in cfg.items() if k not in run_keys})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training config: {e}") from None
    cfg.update(tcfg.to_dict())
    _echo("train", cfg)
    for d in cfg["data"]:
        read_dataset(d)
    if cfg["init"] != "random" and not Path(cfg["init"]).is_file():
        raise FileNotFoundError(f"init checkpoint not found: {cfg['init']}")
    _, final = train_loop(tcfg, cfg["data"], cfg["out"], resume=cfg["resume"], log_every=cfg["log_every"])
    log.info("final checkpoint: %s", final)
    return EXIT_OK


def _input_images(data: Path) -> list:
    """(id, image) pairs from a dataset directory or a plain folder of images."""
    if (data / "manifest.json").is_file():
        ds = read_dataset(data)
        return [(s.id, s.input) for s in ds]
    if not data.is_dir():
        raise FileNotFoundError(f"input directory not found: {data}")
    files = sorted(p for p in data.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise DatasetError(f"no images in {data}")
    out = []
    for p in files:
        with Image.open(p) as im:
            out.append((p.stem, np.array(im.convert("RGB"))))
    return out


def cmd_infer(args) -> int:
    cfg = _resolve("infer", {"ckpt": None, "data": None, "out": None, "task": "all"}, args,
                   {"ckpt": "ckpt", "data": "data", "out": "out", "task": "task"})
    for key in ("ckpt", "data", "out"):
        if not cfg[key]:
            raise UsageError(f"infer needs --{key}")
    if cfg["task"] not in TASK_CHOICES:
        raise UsageError(f"unknown task {cfg['task']!r}")
    _echo("infer", cfg)
    from .evaluate import predict_rgb

    model, _ = load_model(cfg["ckpt"])
    images = _input_images(Path(cfg["data"]))
    tasks = _tasks(cfg["task"])
    for task in tasks:
        root = Path(cfg["out"]) / task.label if len(tasks) > 1 else Path(cfg["out"])
        (root / "rgb").mkdir(parents=True, exist_ok=True)
        (root / "decoded").mkdir(parents=True, exist_ok=True)
        for sid, img in images:
            rgb = predict_rgb(model, img, task)
            Image.fromarray(rgb).save(root / "rgb" / f"{sid}.png")
            png = decoded_to_png_array(task, decode(task, to_unit(rgb)))
            Image.fromarray(png).save(root / "decoded" / f"{sid}.png")
        log.info("%s: wrote %d predictions to %s", task.label, len(images), root)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve("eval", {"task": "all", "pred": None, "ckpt": None, "gt": None, "embedder": "default",
                            "out": None, "csv": False},
                   args, {"task": "task", "pred": "pred", "ckpt": "ckpt", "gt": "gt", "embedder": "embedder",
                          "out": "out", "csv": "csv"})
    if not cfg["gt"]:
        raise UsageError("eval needs --gt")
    if bool(cfg["pred"]) == bool(cfg["ckpt"]):
        raise UsageError("eval needs exactly one of --pred or --ckpt")
    if cfg["task"] not in TASK_CHOICES:
        raise UsageError(f"unknown task {cfg['task']!r}")
    _echo("eval", cfg)
    from .evaluate import Embedder, evaluate_dataset

    ds = read_dataset(cfg["gt"])
    if cfg["ckpt"]:
        source, _ = load_model(cfg["ckpt"])
    else:
        source = Path(cfg["pred"])
        if not source.is_dir():
            raise FileNotFoundError(f"prediction directory not found: {source}")
    tasks = _tasks(cfg["task"])
    if cfg["task"] == "all":
        tasks = [t for t in tasks if t in ds.tasks()]
    embedder = Embedder.load(cfg["embedder"]) if TaskId.REMOVAL in tasks else None
    reports = {}
    for task in tasks:
        # with --task all, predictions for each task live in <pred>/<task>, as written by infer
        src = source
        if cfg["task"] == "all" and not cfg["ckpt"] and (source / task.label).is_dir():
            src = source / task.label
        rep = evaluate_dataset(src, ds, task, embedder)
        reports[task.label] = rep
        print(rep.table())
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        doc = {"version": 1, "reports": {k: r.to_dict() for k, r in reports.items()}}
        (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        if cfg["csv"]:
            for name, rep in reports.items():
                rep.write_csv(out / f"per_image_{name}.csv")
    return EXIT_OK


def cmd_inspect_prompts(args) -> int:
    cfg = _resolve("inspect-prompts", {"ckpt": None, "data": None, "out": None, "task": "all"}, args,
                   {"ckpt": "ckpt", "data": "data", "out": "out", "task": "task"})
    for key in ("ckpt", "data", "out"):
        if not cfg[key]:
            raise UsageError(f"inspect-prompts needs --{key}")
    _echo("inspect-prompts", cfg)
    from .analysis import inspect_prompts

    model, _ = load_model(cfg["ckpt"])
    samples = read_dataset(cfg["data"]).samples()
    summary = inspect_prompts(model, samples, cfg["out"], _tasks(cfg["task"]))
    sep = summary["separation"]
    print(f"intra {sep['intra']:.6f}  inter {sep['inter']:.6f}  ratio {sep['ratio']:.4f}"
          + ("  (untrained prompts)" if summary["meta"]["untrained"] else ""))
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def _batch(text: str) -> list:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated counts, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated counts, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixocr", description="Prompted pixel-level OCR: data, training, inference, evaluation.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def common(p, task_default_help="all"):
        p.add_argument("--config", help="JSON file with option values (flags take precedence)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--task", choices=TASK_CHOICES, help=f"task to run (default: {task_default_help})")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--preset", choices=("toy", "small"), help="generator preset (default: small)")
    p.add_argument("--count", type=int, help="samples per task (default: 8)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--image-size", type=int, dest="image_size", help="square image side, multiple of 32")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON file with option values (flags take precedence)")
    p.add_argument("--out", help="run directory for logs and checkpoints")
    p.add_argument("--data", nargs="+", help="dataset directories")
    p.add_argument("--preset", choices=("toy", "small"), help="model and schedule preset (default: small)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int, help="total iterations")
    p.add_argument("--batch", type=_batch, help="per-task batch counts: removal,segmentation,tamper")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--lr-end", type=float, dest="lr_end", help="final learning rate")
    p.add_argument("--lr-step", type=int, dest="lr_step", help="iterations per constant-lr window")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--init", help="'random' or a checkpoint to initialize from")
    p.add_argument("--vgg-weights", dest="vgg_weights", help="torchvision VGG-16 state_dict for the feature loss")
    p.add_argument("--resume", help="checkpoint to resume training from")
    p.add_argument("--ckpt-every", type=int, dest="checkpoint_every", help="checkpoint interval (0 = final only)")
    p.add_argument("--log-every", type=int, dest="log_every", help="loss log interval")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint and write raw and decoded outputs")
    common(p)
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--data", help="dataset directory or folder of images")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    common(p)
    p.add_argument("--pred", help="prediction directory written by infer")
    p.add_argument("--ckpt", help="checkpoint to run instead of reading predictions")
    p.add_argument("--gt", help="ground-truth dataset directory")
    p.add_argument("--embedder", help="'default' or a VGG-16 state_dict file used for FID")
    p.add_argument("--csv", action="store_const", const=True, help="also write per-image CSV rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-prompts", help="feature geometry before and after prompt injection")
    common(p)
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_inspect_prompts)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"pixocr {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetError, CheckpointError) as e:
        print(f"pixocr {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"pixocr {args.command}: training failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        log.debug("unhandled error", exc_info=True)
        print(f"pixocr {args.command}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
