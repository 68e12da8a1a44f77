"""Single executable for the full pipeline.

Subcommands: generate, convert, sample, stats, pretrain-lm, train, predict,
eval, gradcheck. Config precedence is flags > config file > defaults, and
every run echoes its effective config and seed as JSON on stderr.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import ingest, metrics, synth
from .ingest import (
    AdapterNotImplemented,
    ConversionError,
    Manifest,
    ParseError,
    UnknownDataset,
    UnknownLabel,
    balanced_sample,
    compute_stats,
    convert_dataset,
    load_entry,
    rebase_manifest_paths,
)
from .encoder import FormatError
from .model import InstructModel, ModelConfig, micro_gradcheck, vocab_from_manifest
from .schema import RecordFormatError
from .tensor import NoTargets, RandomStream, ShapeError
from .training import (
    ConfigError,
    OptimizerError,
    PartitionError,
    TrainConfig,
    make_pretrain_pairs,
    pretrain_lm,
    train,
)

log = logging.getLogger("vdu")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (
    ParseError, ConversionError, RecordFormatError, UnknownDataset, UnknownLabel,
    AdapterNotImplemented, FormatError, metrics.MissingPrediction, PartitionError,
    ConfigError, ShapeError, NoTargets, FileNotFoundError, json.JSONDecodeError,
    KeyError, ValueError,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("VDU_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _merge_dataclass(cls, file_section: dict, overrides: dict):
    """defaults < config file < explicit flags"""
    values = {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(file_section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} fields in config: {sorted(unknown)}")
    values.update(file_section)
    values.update({k: v for k, v in overrides.items() if v is not None and k in names})
    return cls(**values)


def _echo_config(command: str, seed: int, extra: dict) -> None:
    payload = {"command": command, "seed": seed}
    payload.update(extra)
    log.info("effective config: %s", json.dumps(payload, sort_keys=True, default=str))


def _manifest_base(path) -> str:
    return str(Path(path).resolve().parent)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_generate(args) -> int:
    config = _load_config_file(args.config)
    section = dict(config.get("generate", {}))
    if args.spec:
        section.update(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    spec = synth.GenSpec.from_json(json.dumps(section)) if section else synth.GenSpec()
    if args.seed is not None:
        spec.seed = args.seed
    _echo_config("generate", spec.seed, {"out": args.out, "counts": spec.counts})
    synth.generate(spec, args.out)
    print(args.out)
    return EXIT_OK


def _cmd_convert(args) -> int:
    out = Path(args.out)
    if out.suffix == ".jsonl":
        records_path = out
    else:
        out.mkdir(parents=True, exist_ok=True)
        records_path = out / f"{args.adapter}.jsonl"
    manifest_path = records_path.with_suffix(".manifest.json")
    _echo_config("convert", args.seed or 0,
                 {"adapter": args.adapter, "src": args.src, "out": str(records_path)})
    manifest = convert_dataset(args.adapter, args.src, records_path)
    manifest.save(manifest_path)
    print(json.dumps({"manifest": str(manifest_path), "counts": manifest.counts},
                     sort_keys=True))
    return EXIT_OK


def _cmd_sample(args) -> int:
    seed = args.seed if args.seed is not None else 0
    cap = args.cap if args.cap is not None else 5000
    _echo_config("sample", seed, {"cap": cap, "manifest": args.manifest})
    manifest = Manifest.load(args.manifest)
    sampled = balanced_sample(manifest, cap=cap, rng=RandomStream(seed))
    out = Path(args.out)
    rebase_manifest_paths(sampled, _manifest_base(args.manifest), str(out.resolve().parent))
    out.parent.mkdir(parents=True, exist_ok=True)
    sampled.save(out)
    print(json.dumps({"manifest": str(out), "counts": sampled.counts}, sort_keys=True))
    return EXIT_OK


def _cmd_stats(args) -> int:
    _echo_config("stats", args.seed or 0, {"manifest": args.manifest})
    manifest = Manifest.load(args.manifest)
    report = compute_stats(manifest, base_dir=_manifest_base(args.manifest))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _model_for(args, config: dict, manifest: Manifest, base_dir: str) -> InstructModel:
    if args.checkpoint:
        model = InstructModel.load_bundle(args.checkpoint)
        if args.precision and args.precision != model.cfg.precision:
            raise UsageError("cannot change precision of a stored bundle")
        return model
    overrides = {"precision": args.precision}
    cfg = _merge_dataclass(ModelConfig, config.get("model", {}), overrides)
    vocab = vocab_from_manifest(manifest, base_dir=base_dir)
    return InstructModel.build(cfg, vocab, seed=args.seed if args.seed is not None else 0)


def _train_config(args, config: dict, **extra) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "sample_cap": args.cap,
        "unfreeze_all": True if getattr(args, "unfreeze_all", False) else None,
    }
    overrides.update(extra)
    return _merge_dataclass(TrainConfig, config.get("train", {}), overrides)


def _cmd_pretrain_lm(args) -> int:
    config = _load_config_file(args.config)
    manifest = Manifest.load(args.manifest)
    base_dir = _manifest_base(args.manifest)
    model = _model_for(args, config, manifest, base_dir)
    cfg = _train_config(args, config)
    if args.steps <= cfg.warmup_steps:
        cfg.warmup_steps = max(1, args.steps // 10)
        log.info("warmup clipped to %d for a %d-step run", cfg.warmup_steps, args.steps)
    _echo_config("pretrain-lm", cfg.seed, {"steps": args.steps, "out": args.out})
    pairs = make_pretrain_pairs(manifest, base_dir=base_dir, seed=cfg.seed)
    losses = pretrain_lm(model.lm, model.vocab, pairs, args.steps, cfg)
    model.save_bundle(args.out)
    print(json.dumps({
        "bundle": str(args.out), "steps": args.steps,
        "final_loss": losses[-1] if losses else None,
    }, sort_keys=True))
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_config_file(args.config)
    manifest = Manifest.load(args.manifest)
    base_dir = _manifest_base(args.manifest)
    model = _model_for(args, config, manifest, base_dir)
    cfg = _train_config(args, config)
    _echo_config("train", cfg.seed, {
        "out": args.out, "unfreeze_all": cfg.unfreeze_all,
        "peak_lr": cfg.peak_lr, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "warmup_steps": cfg.warmup_steps, "max_steps": cfg.max_steps,
    })
    result = train(manifest, model, cfg, args.out, base_dir=base_dir)
    print(json.dumps({
        "bundle": str(result.bundle_dir), "steps": result.steps,
        "final_loss": result.losses[-1] if result.losses else None,
        "log": str(result.log_path),
    }, sort_keys=True))
    return EXIT_OK


def _cmd_predict(args) -> int:
    if not args.checkpoint:
        raise UsageError("predict needs --checkpoint pointing at a trained bundle")
    _echo_config("predict", args.seed or 0,
                 {"manifest": args.manifest, "checkpoint": args.checkpoint})
    manifest = Manifest.load(args.manifest)
    base_dir = _manifest_base(args.manifest)
    model = InstructModel.load_bundle(args.checkpoint)
    max_len = args.max_len if args.max_len is not None else 64
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            if entry.split != "held_out":
                continue
            record = load_entry(entry, base_dir=base_dir)
            records_path = str(Path(base_dir) / entry.path)
            text = model.predict(record, record.instruction.intent, records_path,
                                 max_len=max_len)
            fh.write(json.dumps({"instance_id": entry.instance_id, "prediction": text},
                                sort_keys=True) + "\n")
            n += 1
    print(json.dumps({"predictions": str(out), "count": n}, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    _echo_config("eval", args.seed or 0,
                 {"manifest": args.manifest, "predictions": args.predictions})
    manifest = Manifest.load(args.manifest)
    predictions = {}
    with open(args.predictions, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                predictions[row["instance_id"]] = row["prediction"]
    report = metrics.evaluate(manifest, predictions, base_dir=_manifest_base(args.manifest))
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.render_table())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    precision = args.precision or "f64"
    _echo_config("gradcheck", args.seed or 0, {"precision": precision})
    if precision != "f64":
        raise UsageError("gradcheck requires --precision f64")
    max_rel, n_elements, seconds = micro_gradcheck(precision)
    print(f"max_rel_err {max_rel:.3e} over {n_elements} elements in {seconds:.1f}s")
    return EXIT_OK if max_rel < 1e-4 else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="vdu", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path")
        p.add_argument("--cap", type=int)
        p.add_argument("--adapter")
        p.add_argument("--checkpoint")
        p.add_argument("--max-len", dest="max_len", type=int)
        p.add_argument("--precision", choices=["f32", "f64"])
        p.add_argument("--unfreeze-all", dest="unfreeze_all", action="store_true")
        return p

    p = common(sub.add_parser("generate", help="write the synthetic corpus"))
    p.add_argument("--spec", help="generator spec JSON")
    p.set_defaults(fn=_cmd_generate)

    p = common(sub.add_parser("convert", help="run an adapter over a source tree"))
    p.add_argument("--src", required=True)
    p.set_defaults(fn=_cmd_convert)

    p = common(sub.add_parser("sample", help="balance held-in datasets to a cap"))
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=_cmd_sample)

    p = common(sub.add_parser("stats", help="corpus statistics"))
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=_cmd_stats)

    p = common(sub.add_parser("pretrain-lm", help="pretrain the language model"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.set_defaults(fn=_cmd_pretrain_lm)

    p = common(sub.add_parser("train", help="instruction-tune the bridging module"))
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=_cmd_train)

    p = common(sub.add_parser("predict", help="greedy decode held-out instances"))
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = common(sub.add_parser("eval", help="score predictions into a report"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference oracle on the micro model"))
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


_REQUIRED_OUT = {"generate", "convert", "sample", "pretrain-lm", "train", "predict"}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in _REQUIRED_OUT and not args.out:
            raise UsageError(f"{args.command} requires --out")
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except OptimizerError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
