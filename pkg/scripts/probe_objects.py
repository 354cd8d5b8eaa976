"""Short-run probe: does the generator start painting objects?

Trains N steps on a small dataset and reports, every `every` steps, the
detection count on teacher-forced turn generations plus the aux losses.
Usage: python scripts/probe_objects.py [steps] [beta] [lr_g]
"""

import sys
import time

import numpy as np

from instructpaint import data as mdata
from instructpaint import losses as L
from instructpaint import metrics as mm
from instructpaint import text as mtext
from instructpaint.config import RunConfig
from instructpaint.trainer import GANTrainer, Pretrainer, TrainConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
beta = float(sys.argv[2]) if len(sys.argv) > 2 else 5.0
lr_g = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-4

cfg = RunConfig()
cfg.train.seed = 7
cfg.train.lr_g = lr_g
cfg.loss.beta = beta
episodes = mdata.generate_dataset(7, 100, grid_size=5, n_turns=5, image_size=32)
vocab = mtext.build_default_vocab()
enc = mtext.TextEncoder(np.random.default_rng(np.random.SeedSequence([7, 0])), len(vocab), 64)

pre = Pretrainer(enc, vocab, episodes, cfg.train, cfg.model)
pre.run(200)
mtext.freeze_text(enc)
tr = GANTrainer(cfg.model, cfg.train, cfg.loss, enc, vocab, episodes)

t0 = time.time()


def probe():
    """Teacher-forced generations for 15 scenes; count object detections."""
    hits = 0
    correct = 0
    total = 0
    for ep in episodes[:15]:
        imgs = tr.rollout_episode(ep, "train", rng=np.random.default_rng(99), generator=tr.gen)
        for t, img in enumerate(imgs):
            det = mm.detect_objects(img, 5)
            objs = mm.dedupe_by_category(det)
            hits += len(objs)
            correct += sum(1 for o in objs if o.category in {g.category for g in ep.turns[t].objects})
            total += 1
    return hits, correct, total


while tr.step < steps:
    tr.fit(max_steps=min(tr.step + 100, steps))
    h, c, n = probe()
    b = tr.evaluate_losses(tr.sample_batch())
    print(f"step {tr.step:5d} [{time.time() - t0:6.1f}s] detections={h} correct={c} over {n} images; "
          f"aux_d={b.aux_d:.3f} real_g={b.d_real_global:.3f} fake_g={b.d_fake_global:.3f}", flush=True)
