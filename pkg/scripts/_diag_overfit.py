import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from run_overfit import build_fixture

from vdu.ingest import load_entry
from vdu.model import InstructModel, ModelConfig, vocab_from_manifest
from vdu.training import TrainConfig, train

tmp = Path(tempfile.mkdtemp())
man, base = build_fixture(tmp)
vocab = vocab_from_manifest(man, base_dir=base)


def probe(tag, model_cfg, tc, steps=400):
    model = InstructModel.build(model_cfg, vocab, seed=0)
    tc.max_steps = steps
    tc.stop_at_loss = 0.1
    tc.log_every = 1000
    t0 = time.time()
    res = train(man, model, tc, tmp / f"run_{tag}", base_dir=base)
    preds = []
    for e in man.entries[:8]:
        r = load_entry(e, base_dir=base)
        preds.append(model.predict(r, r.instruction.intent, str(Path(base) / e.path), max_len=4))
    golds = [load_entry(e, base_dir=base).answers[0] for e in man.entries[:8]]
    hits = sum(p == g for p, g in zip(preds, golds))
    print(f"{tag}: steps={res.steps} final={res.losses[-1]:.3f} t={time.time()-t0:.0f}s hits={hits}/8", flush=True)
    print(f"   preds={preds}", flush=True)
    print(f"   golds={golds}", flush=True)


if __name__ == "__main__":
    probe("wd0_lr1e-3_b4", ModelConfig(),
          TrainConfig(seed=0, batch_size=4, warmup_steps=50, peak_lr=1e-3,
                      weight_decay=0.0, unfreeze_all=True))
    probe("std0.08_lr1e-3_b4", ModelConfig(init_std=0.08),
          TrainConfig(seed=0, batch_size=4, warmup_steps=50, peak_lr=1e-3,
                      weight_decay=0.0, unfreeze_all=True))
