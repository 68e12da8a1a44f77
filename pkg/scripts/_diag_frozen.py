import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from run_overfit import build_fixture, gold_matches

from vdu.model import InstructModel, ModelConfig, vocab_from_manifest
from vdu.training import TrainConfig, make_pretrain_pairs, pretrain_lm, train

tmp = Path(tempfile.mkdtemp())
man, base = build_fixture(tmp)
vocab = vocab_from_manifest(man, base_dir=base)

for pretrain_steps, tune_lr in ((600, 1e-3), (600, 3e-3)):
    model = InstructModel.build(ModelConfig(), vocab, seed=0)
    pre_cfg = TrainConfig(seed=0, batch_size=8, warmup_steps=pretrain_steps // 10,
                          peak_lr=1e-3, weight_decay=0.0)
    pairs = make_pretrain_pairs(man, base_dir=base, seed=0)
    t0 = time.time()
    pre_losses = pretrain_lm(model.lm, model.vocab, pairs, pretrain_steps, pre_cfg)
    t_pre = time.time() - t0
    cfg = TrainConfig(seed=0, batch_size=4, warmup_steps=50, max_steps=2000,
                      peak_lr=tune_lr, weight_decay=0.0, log_every=1000)
    t0 = time.time()
    res = train(man, model, cfg, tmp / f"fr{pretrain_steps}_{tune_lr}", base_dir=base)
    hits = gold_matches(model, man, base)
    drop = 100 * (1 - res.losses[-1] / res.losses[0])
    print(f"pre={pretrain_steps} ({t_pre:.0f}s, final {pre_losses[-1]:.3f}) "
          f"tune lr={tune_lr}: step0={res.losses[0]:.3f} final={res.losses[-1]:.3f} "
          f"drop={drop:.0f}% hits={hits}/8 t={time.time()-t0:.0f}s", flush=True)
