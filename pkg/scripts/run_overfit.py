"""Overfit study on a tiny extractive fixture.

Drives the two smoke regimes: everything trainable on 8 instances, and the
frozen-LM regime where the LM is first pretrained on text pairs and only
the bridging module plus embedding tables update afterwards.
"""

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from vdu.ingest import convert_dataset, load_entry
from vdu.metrics import exact_match
from vdu.model import InstructModel, ModelConfig, vocab_from_manifest
from vdu.synth import GenSpec, generate
from vdu.training import TrainConfig, make_pretrain_pairs, pretrain_lm, train


def build_fixture(workdir: Path, n: int = 8, seed: int = 11):
    counts = {k: 0 for k in GenSpec().counts}
    counts["synth_extract"] = n
    generate(GenSpec(seed=seed, counts=counts), workdir / "corpus")
    manifest = convert_dataset("synthetic", workdir / "corpus", workdir / "data" / "synth.jsonl")
    manifest.save(workdir / "data" / "synth.manifest.json")
    return manifest, workdir / "data"


def run_unfrozen(manifest, base_dir, out_dir, max_steps=2000, peak_lr=3e-3,
                 batch_size=8, seed=0, stop_at_loss=0.1):
    model = InstructModel.build(ModelConfig(), vocab_from_manifest(manifest, base_dir=base_dir), seed=seed)
    cfg = TrainConfig(seed=seed, batch_size=batch_size, warmup_steps=50,
                      max_steps=max_steps, peak_lr=peak_lr, unfreeze_all=True,
                      stop_at_loss=stop_at_loss, log_every=50)
    start = time.time()
    result = train(manifest, model, cfg, out_dir, base_dir=base_dir)
    return model, result, time.time() - start


def run_frozen(manifest, base_dir, out_dir, pretrain_steps=800, max_steps=2000,
               peak_lr=3e-3, batch_size=8, seed=0):
    model = InstructModel.build(ModelConfig(), vocab_from_manifest(manifest, base_dir=base_dir), seed=seed)
    pre_cfg = TrainConfig(seed=seed, batch_size=8, warmup_steps=max(1, pretrain_steps // 10),
                          peak_lr=peak_lr)
    pairs = make_pretrain_pairs(manifest, base_dir=base_dir, seed=seed)
    pre_losses = pretrain_lm(model.lm, model.vocab, pairs, pretrain_steps, pre_cfg)
    cfg = TrainConfig(seed=seed, batch_size=batch_size, warmup_steps=50,
                      max_steps=max_steps, peak_lr=peak_lr, log_every=50)
    start = time.time()
    result = train(manifest, model, cfg, out_dir, base_dir=base_dir)
    return model, result, pre_losses, time.time() - start


def gold_matches(model, manifest, base_dir) -> int:
    hits = 0
    for entry in manifest.entries:
        record = load_entry(entry, base_dir=base_dir)
        pred = model.predict(record, record.instruction.intent,
                             str(Path(base_dir) / entry.path))
        hits += exact_match(pred, record.answers)
    return hits


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--mode", choices=["unfrozen", "frozen", "both"], default="both")
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--pretrain-steps", type=int, default=800)
    parser.add_argument("--peak-lr", type=float, default=3e-3)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workdir")
    args = parser.parse_args()

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="vdu-overfit-"))
    manifest, base_dir = build_fixture(workdir, seed=11)

    if args.mode in ("unfrozen", "both"):
        model, result, elapsed = run_unfrozen(
            manifest, base_dir, workdir / "run_unfrozen", max_steps=args.steps,
            peak_lr=args.peak_lr, batch_size=args.batch_size, seed=args.seed)
        print(json.dumps({
            "mode": "unfrozen", "steps": result.steps, "seconds": round(elapsed, 1),
            "final_loss": round(result.losses[-1], 4),
            "min_loss": round(min(result.losses), 4),
        }))
        sys.stdout.flush()

    if args.mode in ("frozen", "both"):
        model, result, pre_losses, elapsed = run_frozen(
            manifest, base_dir, workdir / "run_frozen", pretrain_steps=args.pretrain_steps,
            max_steps=args.steps, peak_lr=args.peak_lr, batch_size=args.batch_size,
            seed=args.seed)
        hits = gold_matches(model, manifest, base_dir)
        print(json.dumps({
            "mode": "frozen", "steps": result.steps, "seconds": round(elapsed, 1),
            "pretrain_final": round(pre_losses[-1], 4),
            "step0_loss": round(result.losses[0], 4),
            "final_loss": round(result.losses[-1], 4),
            "drop_pct": round(100 * (1 - result.losses[-1] / result.losses[0]), 1),
            "exact_matches": f"{hits}/8",
        }))


if __name__ == "__main__":
    main()
