"""Multi-task instruction tuning: freeze partition, AdamW, LR schedule, loops.

Only docformer.* and encoder_tables.* update during instruction tuning;
vision.* and lm.* stay frozen (bitwise). The LM can first be pretrained on
text-only pairs with the same optimizer machinery, then frozen.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import Manifest, load_entry
from .lm import LmModel, lm_forward
from .model import InstructModel
from .encoder import EOS_ID, Vocab
from .schema import render_instruction, select_template
from .tensor import Parameter, RandomStream, Tensor, backward, scale, add

log = logging.getLogger("vdu")

TRAINABLE_PREFIXES = ("docformer.", "encoder_tables.")
FROZEN_PREFIXES = ("vision.", "lm.")


class PartitionError(ValueError):
    """A parameter name carries no recognized partition prefix."""


class ConfigError(ValueError):
    pass


class OptimizerError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3          # desk-scale default; tune per run
    weight_decay: float = 0.05
    warmup_steps: int = 1000
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    unfreeze_all: bool = False
    sample_cap: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 10
    max_steps: int | None = None   # cap epochs-derived total for smoke runs
    stop_at_loss: float | None = None
    answer_max_len: int = 64


def freeze_partition(
    params: list[Parameter], unfreeze_all: bool = False
) -> tuple[list[Parameter], list[Parameter]]:
    """Split parameters into (trainable, frozen) by name prefix and apply flags."""
    trainable, frozen = [], []
    for p in params:
        if unfreeze_all:
            trainable.append(p)
        elif p.name.startswith(TRAINABLE_PREFIXES):
            trainable.append(p)
        elif p.name.startswith(FROZEN_PREFIXES):
            frozen.append(p)
        else:
            raise PartitionError(f"parameter {p.name!r} has no recognized prefix")
    for p in trainable:
        p.set_trainable(True)
    for p in frozen:
        p.set_trainable(False)
    return trainable, frozen


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to the peak, then cosine decay to exactly zero."""
    if total_steps <= cfg.warmup_steps:
        raise ConfigError(
            f"total steps {total_steps} must exceed warmup {cfg.warmup_steps}"
        )
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: list[Parameter],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """Bias-corrected AdamW with decoupled decay on weight matrices only."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = grads[p.name] if grads is not None else p.grad
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in {p.name}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.data, dtype=np.float64)
        g64 = g.astype(np.float64)
        m *= beta1
        m += (1.0 - beta1) * g64
        v *= beta2
        v += (1.0 - beta2) * g64 * g64
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and p.decay:
            update = update + lr * weight_decay * p.data.astype(np.float64)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


@dataclass
class TrainResult:
    bundle_dir: Path
    checkpoint_path: Path
    log_path: Path
    losses: list[float]
    steps: int


def _instruction_for(record, manifest: Manifest, rng: RandomStream) -> str:
    templates = manifest.templates.get(record.dataset_id)
    if not templates:
        return record.instruction.intent
    template = select_template(templates, rng)
    needs = template.needs_query() or template.needs_options()
    if template.needs_query() and record.instruction.query is None:
        return record.instruction.intent
    if template.needs_options() and not record.instruction.options:
        return record.instruction.intent
    if not needs and record.instruction.query is not None:
        # query-bearing datasets keep their query visible in the instruction
        return record.instruction.intent
    return render_instruction(template, record.instruction.query, record.instruction.options)


def _batch_loss(model: InstructModel, records, instructions, paths) -> tuple[Tensor, float]:
    total: Tensor | None = None
    n_tokens = 0
    for record, text, path in zip(records, instructions, paths):
        loss_i, n_i = model.instance_loss(record, text, path)
        weighted = scale(loss_i, float(n_i))
        total = weighted if total is None else add(total, weighted)
        n_tokens += n_i
    return scale(total, 1.0 / n_tokens), float(n_tokens)


def train(
    manifest: Manifest,
    model: InstructModel,
    cfg: TrainConfig,
    out_dir,
    base_dir=None,
) -> TrainResult:
    """Instruction-tune on the held-in pool; deterministic for a fixed config+seed.

    The manifest is expected converted and balance-sampled already. Training
    logs {step, lr, loss} JSONL and writes the final weight bundle.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = [e for e in manifest.entries if e.split == "held_in"]
    if not pool:
        raise ConfigError("manifest has no held-in entries to train on")

    trainable, frozen = freeze_partition(model.parameters(), cfg.unfreeze_all)
    steps_per_epoch = math.ceil(len(pool) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = cfg.max_steps
    if total_steps <= cfg.warmup_steps:
        raise ConfigError(
            f"total steps {total_steps} must exceed warmup {cfg.warmup_steps}"
        )

    rng = RandomStream(cfg.seed)
    shuffle_rng = rng.derive("shuffle")
    template_rng = rng.derive("templates")
    state = OptimizerState()
    losses: list[float] = []
    log_path = out_dir / "train_log.jsonl"
    step = 0
    stop = False
    with open(log_path, "w", encoding="utf-8") as log_fh:
        while not stop:
            order = shuffle_rng.shuffle(list(range(len(pool))))
            for b in range(0, len(order), cfg.batch_size):
                step += 1
                batch = [pool[i] for i in order[b:b + cfg.batch_size]]
                records = [load_entry(e, base_dir=base_dir) for e in batch]
                paths = [
                    e.path if base_dir is None else str(Path(base_dir) / e.path)
                    for e in batch
                ]
                instructions = [
                    _instruction_for(r, manifest, template_rng) for r in records
                ]
                try:
                    loss, _ = _batch_loss(model, records, instructions, paths)
                except Exception as exc:
                    raise type(exc)(
                        f"{exc} (while training on {batch[0].instance_id})"
                    ) from exc
                model.zero_grads()
                backward(loss)
                lr = lr_at(step, cfg, total_steps)
                adamw_step(
                    trainable, state, lr, cfg.weight_decay,
                    beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                )
                model.zero_grads()
                loss_val = float(loss.data)
                losses.append(loss_val)
                if step % cfg.log_every == 0 or step == total_steps or step == 1:
                    log_fh.write(json.dumps(
                        {"step": step, "lr": lr, "loss": loss_val}) + "\n")
                if cfg.stop_at_loss is not None and loss_val < cfg.stop_at_loss:
                    stop = True
                    break
                if step >= total_steps:
                    stop = True
                    break

    checkpoint = model.save_bundle(out_dir)
    return TrainResult(
        bundle_dir=out_dir, checkpoint_path=checkpoint, log_path=log_path,
        losses=losses, steps=step,
    )


# ---------------------------------------------------------------------------
# LM pretraining on text-only pairs


@dataclass
class PretrainPair:
    instruction_text: str
    ocr_text: str
    target_text: str


def make_pretrain_pairs(
    manifest: Manifest, base_dir=None, seed: int = 0, denoise: bool = True
) -> list[PretrainPair]:
    """Answer-copy and gap-denoising pairs derived from the held-in corpus."""
    rng = RandomStream(seed).derive("pretrain-pairs")
    pairs: list[PretrainPair] = []
    for entry in manifest.entries:
        if entry.split != "held_in":
            continue
        record = load_entry(entry, base_dir=base_dir)
        ocr_text = " ".join(t.text for page in record.ocr for t in page)
        pairs.append(PretrainPair(record.instruction.intent, ocr_text, record.answers[0]))
        if denoise:
            words = ocr_text.split()
            if len(words) >= 4:
                span = 1 + rng.randint(min(3, len(words) - 1))
                start = rng.randint(len(words) - span + 1)
                target = " ".join(words[start:start + span])
                masked = words[:start] + ["___"] + words[start + span:]
                pairs.append(PretrainPair(
                    "Fill in the missing span marked ___ from the document.",
                    " ".join(masked), target,
                ))
    return pairs


def pretrain_lm(
    lm: LmModel,
    vocab: Vocab,
    pairs: list[PretrainPair],
    steps: int,
    cfg: TrainConfig,
) -> list[float]:
    """Train every lm.* parameter on text pairs; leaves the LM frozen again."""
    if not pairs:
        raise ValueError("pretraining corpus is empty")
    lm.set_trainable(True)
    params = lm.parameters()
    state = OptimizerState()
    rng = RandomStream(cfg.seed).derive("pretrain")
    losses: list[float] = []
    encoded = [
        (vocab.encode(p.instruction_text), vocab.encode(p.ocr_text),
         vocab.encode(p.target_text) + [EOS_ID])
        for p in pairs
    ]
    try:
        for step in range(1, steps + 1):
            total = None
            n_tokens = 0
            for _ in range(cfg.batch_size):
                ins_ids, ocr_ids, target = encoded[rng.randint(len(encoded))]
                loss_i, _ = lm_forward(lm, None, ins_ids, ocr_ids, target)
                weighted = scale(loss_i, float(len(target)))
                total = weighted if total is None else add(total, weighted)
                n_tokens += len(target)
            loss = scale(total, 1.0 / n_tokens)
            for p in params:
                p.zero_grad()
            backward(loss)
            adamw_step(
                params, state, lr_at(step, cfg, steps), cfg.weight_decay,
                beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
            )
            for p in params:
                p.zero_grad()
            losses.append(float(loss.data))
    finally:
        lm.set_trainable(False)
    return losses
