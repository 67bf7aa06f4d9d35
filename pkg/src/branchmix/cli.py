"""Command-line entry point.

Settings resolve in three layers: a preset, then an optional flat TOML
config file, then explicit flags. Every run writes the fully resolved
settings to ``resolved_config.json`` in the output directory, which is
``--out-dir``, else ``$BRANCHMIX_OUT_DIR``, else ``./branchmix-out``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one line to stderr: ``error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BranchmixError, ConfigError

OUT_DIR_ENV = "BRANCHMIX_OUT_DIR"
DEFAULT_OUT_DIR = "branchmix-out"
SNAPSHOT_NAME = "resolved_config.json"

logger = logging.getLogger("branchmix")

PRESETS = {
    "desk": {"num_layers": 2, "model_dim": 128, "num_heads": 2},
    "small": {"num_layers": 4, "model_dim": 768, "num_heads": 12},
    "large": {"num_layers": 12, "model_dim": 1024, "num_heads": 16},
}


class UsageError(BranchmixError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config resolution -----------------------------------------------------------


def _config_keys():
    from .encoder import EncoderConfig
    from .masking import MaskConfig
    from .pretrain import ScheduleConfig

    encoder = {f.name for f in fields(EncoderConfig)} - {"seed"}
    schedule = {f.name for f in fields(ScheduleConfig)} | {"warmup_fraction"}
    train = {"batch_size", "checkpoint_every", "loss_window", "adam_betas", "adam_eps"}
    mask = {f.name for f in fields(MaskConfig)}
    quantizer = {"codebook_dim"}
    data = {"synthetic", "manifest", "duration_s", "preset"}
    return {"encoder": encoder, "schedule": schedule, "train": train, "mask": mask, "quantizer": quantizer, "data": data}


def load_config_file(path) -> dict:
    """Flat key = value TOML; unknown keys are a usage error."""
    try:
        import tomllib as tomli
    except ModuleNotFoundError:  # Python < 3.11
        import tomli

    try:
        with open(path, "rb") as fh:
            values = tomli.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from exc
    known = set().union(*_config_keys().values()) | {"seed"}
    for key, value in values.items():
        if isinstance(value, dict):
            raise UsageError(f"config file {path}: tables are not supported ([{key}]); use flat keys")
        if key not in known:
            raise UsageError(f"config file {path}: unknown key {key!r}")
    return values


def resolve_pretrain(args) -> dict:
    values = {"preset": "desk", "seed": 0, "total_steps": 500, "warmup_fraction": 0.05, "duration_s": 2.0}
    if args.config:
        values.update(load_config_file(args.config))
    flags = {
        "preset": args.preset,
        "seed": args.seed,
        "synthetic": args.synthetic,
        "manifest": args.manifest,
        "duration_s": args.duration,
        "total_steps": args.steps,
        "block_kind": args.block,
        "global_branch": args.branch,
        "num_layers": args.layers,
        "model_dim": args.dim,
        "num_heads": args.heads,
        "batch_size": args.batch_size,
        "peak_lr": args.peak_lr,
        "final_lr": args.final_lr,
        "checkpoint_every": args.checkpoint_every,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    preset = values["preset"]
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    values = {**PRESETS[preset], **values}
    if values.get("synthetic") is None and values.get("manifest") is None:
        raise UsageError("pretrain needs --synthetic N or --manifest PATH")

    keys = _config_keys()
    seed = int(values["seed"])
    section = {name: {k: values[k] for k in ks if k in values} for name, ks in keys.items()}
    if "adam_betas" in section["train"]:
        section["train"]["adam_betas"] = tuple(section["train"]["adam_betas"])
    schedule = section["schedule"]
    fraction = schedule.pop("warmup_fraction")
    schedule.setdefault("warmup_steps", max(1, int(round(fraction * schedule["total_steps"]))))
    return {"command": "pretrain", "seed": seed, **section}


def build_pretrain_configs(resolved: dict):
    from .encoder import EncoderConfig
    from .masking import MaskConfig
    from .pretrain import ScheduleConfig, TrainConfig
    from .quantizer import QuantizerConfig

    seed = resolved["seed"]
    encoder = EncoderConfig(**resolved["encoder"], seed=seed)
    schedule = ScheduleConfig(**resolved["schedule"])
    train = TrainConfig(**resolved["train"], seed=seed, mask=MaskConfig(**resolved["mask"]))
    quantizer = QuantizerConfig(
        codebook_size=encoder.vocab_size, input_dim=encoder.mel_dim, seed=seed, **resolved["quantizer"]
    )
    return encoder, schedule, train, quantizer


def out_dir_for(args) -> Path:
    path = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_snapshot(out_dir: Path, resolved: dict) -> Path:
    path = out_dir / SNAPSHOT_NAME
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True, default=list) + "\n")
    return path


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=list))


# --- subcommands --------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .data import load_clips, read_manifest, synthetic_clips
    from .pretrain import run_pretraining

    resolved = resolve_pretrain(args)
    encoder, schedule, train, quantizer = build_pretrain_configs(resolved)
    out = out_dir_for(args)
    effective = {
        "command": "pretrain",
        "seed": resolved["seed"],
        "data": resolved["data"],
        "encoder": encoder.to_dict(),
        "schedule": asdict(schedule),
        "train": asdict(train),
        "quantizer": asdict(quantizer),
        "resume": args.resume,
    }
    write_snapshot(out, _jsonable(effective))

    data = resolved["data"]
    if data.get("synthetic") is not None:
        clips = synthetic_clips(int(data["synthetic"]), resolved["seed"], float(data["duration_s"]))
    else:
        clips = load_clips(read_manifest(data["manifest"]))

    stop = {"flag": False}

    def request_stop(signum, _frame):
        stop["flag"] = True

    previous = {s: signal.signal(s, request_stop) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        result = run_pretraining(
            clips,
            encoder,
            schedule,
            train,
            quantizer,
            out_dir=out,
            resume_from=args.resume,
            should_stop=lambda: stop["flag"],
        )
    finally:
        for s, handler in previous.items():
            signal.signal(s, handler)

    step = result.state.step
    if step < schedule.total_steps:
        raise BranchmixError(f"interrupted at step {step}; checkpoint written to {result.checkpoint}")
    loss = result.state.smoothed_loss
    print(f"pretrain: step {step}/{schedule.total_steps} smoothed_loss {loss:.4f} checkpoint {result.checkpoint}")
    return 0


def cmd_census(args) -> int:
    from .encoder import count_parameters, reference_config

    overrides = {
        k: v
        for k, v in {"num_layers": args.layers, "model_dim": args.dim, "num_heads": args.heads}.items()
        if v is not None
    }
    if "model_dim" in overrides and "num_heads" not in overrides:
        overrides["num_heads"] = max(1, overrides["model_dim"] // 64)
    cfg = reference_config(args.block, args.branch, args.size, seed=args.seed or 0, **overrides)
    census = count_parameters(cfg)
    out = out_dir_for(args)
    write_snapshot(out, {"command": "census", "seed": cfg.seed, "encoder": cfg.to_dict()})
    doc = {"config": cfg.to_dict(), "census": census.to_dict()}
    (out / "census.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    width = max(len(c) for c in census.per_component)
    print(f"{cfg.block_kind} / {cfg.global_branch}, {cfg.num_layers} layers, dim {cfg.model_dim}")
    for name, count in census.per_component.items():
        print(f"  {name:<{width}}  {count:>12,d}")
    print(f"  {'total':<{width}}  {census.total:>12,d}")
    print(json.dumps(census.to_dict(), sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    from .bench import FORMATS, bench_scaling, bench_size, emit_report, size_pairs

    if args.format not in FORMATS:
        raise UsageError(f"--format must be one of {FORMATS}")
    out = out_dir_for(args)
    if args.kind == "size":
        resolved = {"command": "bench", "kind": "size", "size": args.size}
        report = bench_size(size_pairs(args.size))
    else:
        try:
            lengths = [int(x) for x in args.lengths.split(",")]
        except ValueError:
            raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
        resolved = {
            "command": "bench",
            "kind": "scaling",
            "block": args.block,
            "branch": args.branch,
            "dim": args.dim,
            "lengths": lengths,
            "reps": args.reps,
            "seed": args.seed or 0,
        }
        report = bench_scaling(args.block, args.branch, args.dim, lengths, args.reps, args.seed or 0)
    write_snapshot(out, resolved)
    ext = {"csv": "csv", "json": "json", "markdown": "md"}[args.format]
    path = Path(args.out) if args.out else out / f"bench-{args.kind}.{ext}"
    sys.stdout.write(emit_report(report, args.format, path))
    return 0


def cmd_probe(args) -> int:
    from .probe import run_probe

    overrides = {
        k: v
        for k, v in {"pooling": args.pooling, "epochs": args.epochs, "batch_size": args.batch_size}.items()
        if v is not None
    }
    seed = args.seed or 0
    out = out_dir_for(args)
    write_snapshot(
        out,
        {
            "command": "probe",
            "checkpoint": str(args.checkpoint),
            "task": args.task,
            "seed": seed,
            "size": args.size,
            "shuffle_labels": args.shuffle_labels,
            **overrides,
        },
    )
    report = run_probe(args.checkpoint, args.task, seed, args.size, args.shuffle_labels, **overrides)
    text = json.dumps(report.to_dict(), sort_keys=True)
    (out / "probe_report.json").write_text(text + "\n")
    print(text)
    print(report.summary())
    return 0


def _clips_for_export(args):
    from .data import load_clips, read_manifest
    from .probe import make_synthetic_task

    if args.manifest:
        clips = load_clips(read_manifest(args.manifest))
        return clips, None
    task = make_synthetic_task(args.task, args.size, args.seed or 0)
    return task.clips, task.labels


def cmd_export_embeddings(args) -> int:
    from .probe import extract_embeddings, write_embeddings

    out = out_dir_for(args)
    write_snapshot(
        out,
        {
            "command": "export-embeddings",
            "checkpoint": str(args.checkpoint),
            "manifest": args.manifest,
            "task": None if args.manifest else args.task,
            "size": args.size,
            "pooling": args.pooling,
            "seed": args.seed or 0,
        },
    )
    clips, labels = _clips_for_export(args)
    emb = extract_embeddings(args.checkpoint, clips, args.pooling)
    path = Path(args.out) if args.out else out / "embeddings.bin"
    write_embeddings(path, emb)
    if labels is not None:
        np.savetxt(path.with_suffix(".labels.txt"), labels, fmt="%.10g")
    print(f"export-embeddings: {emb.shape[0]} x {emb.shape[1]} -> {path}")
    return 0


def _tokenize_source(path: Path, normalizer):
    from .frontend import FEATURE_MAGIC, StackedMelSequence, extract_features, load_audio, read_feature_file

    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == FEATURE_MAGIC:
        frames, rate = read_feature_file(path)
        return frames
    feats = extract_features(load_audio(path))
    if normalizer is not None:
        feats = normalizer(feats)
    assert isinstance(feats, StackedMelSequence)
    return feats.frames


def cmd_tokenize(args) -> int:
    from .checkpoint import load_checkpoint
    from .quantizer import QuantizerConfig, RandomQuantizer, init_quantizer

    normalizer = None
    if args.quantizer:
        q = RandomQuantizer.load(args.quantizer)
    elif args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        q, normalizer = init_quantizer(ckpt.quantizer_config), ckpt.normalizer
    else:
        q = init_quantizer(QuantizerConfig(seed=args.seed or 0))
    out = out_dir_for(args)
    write_snapshot(
        out,
        {
            "command": "tokenize",
            "inputs": [str(p) for p in args.inputs],
            "quantizer": asdict(q.config),
            "normalized": normalizer is not None,
            "format": args.format,
        },
    )
    if args.save_quantizer:
        q.save(args.save_quantizer)
    for src in args.inputs:
        src = Path(src)
        tokens = q.tokenize(_tokenize_source(src, normalizer))
        if args.format == "u32":
            dest = out / f"{src.stem}.tokens.u32"
            dest.write_bytes(tokens.astype("<u4").tobytes())
        else:
            dest = out / f"{src.stem}.tokens.txt"
            dest.write_text("".join(f"{t}\n" for t in tokens))
        print(f"tokenize: {src} -> {dest} ({len(tokens)} tokens)")
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed; every random choice derives from it")
    common.add_argument("--out-dir", default=None, help=f"output directory (env {OUT_DIR_ENV})")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="branchmix", description="Masked-prediction audio encoder toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", parents=[common], help="masked-prediction pretraining")
    p.add_argument("--config", help="flat TOML file of config values")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--synthetic", type=int, default=None, metavar="N", help="train on N synthetic clips")
    p.add_argument("--manifest", default=None, help="audio path list or glob")
    p.add_argument("--duration", type=float, default=None, help="synthetic clip length in seconds")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--block", choices=("branchformer", "conformer"), default=None)
    p.add_argument("--branch", choices=("attention", "summary_mixing"), default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--final-lr", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("census", parents=[common], help="parameter count by component")
    p.add_argument("--block", choices=("branchformer", "conformer"), default="branchformer")
    p.add_argument("--branch", choices=("attention", "summary_mixing"), default="summary_mixing")
    p.add_argument("--size", choices=("small", "large"), default="large")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.set_defaults(func=cmd_census)

    p = sub.add_parser("bench", parents=[common], help="length scaling or model size report")
    p.add_argument("--kind", choices=("scaling", "size"), default="scaling")
    p.add_argument("--block", choices=("branchformer", "conformer"), default="branchformer")
    p.add_argument("--branch", choices=("attention", "summary_mixing"), default="summary_mixing")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--lengths", default="512,1024,2048,4096,8192")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--size", choices=("small", "large"), default="large")
    p.add_argument("--format", default="markdown")
    p.add_argument("--out", default=None, help="report file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("probe", parents=[common], help="frozen-backbone probe on a synthetic task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("pitch_class", "tone_count", "am_rate_regression"), default="pitch_class")
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--shuffle-labels", action="store_true", help="random-label control")
    p.add_argument("--pooling", choices=("mean", "max"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export-embeddings", parents=[common], help="pooled embeddings as f32 binary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--task", choices=("pitch_class", "tone_count", "am_rate_regression"), default="pitch_class")
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--pooling", choices=("mean", "max"), default="mean")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("tokenize", parents=[common], help="audio or feature files to token ids")
    p.add_argument("inputs", nargs="+")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--quantizer", default=None, help="quantizer snapshot file")
    group.add_argument("--checkpoint", default=None, help="take quantizer and normalizer from a checkpoint")
    p.add_argument("--format", choices=("text", "u32"), default="text")
    p.add_argument("--save-quantizer", default=None)
    p.set_defaults(func=cmd_tokenize)
    return parser


def _error_line(exc: BaseException) -> str:
    message = " ".join(str(exc).split()) or type(exc).__name__
    return f"error: {type(exc).__name__}: {message}"


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    level = logging.WARNING - 10 * args.verbose if not args.quiet else logging.ERROR
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except (BranchmixError, OSError, ValueError, RuntimeError) as exc:
        logger.debug("failure", exc_info=True)
        print(_error_line(exc), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
