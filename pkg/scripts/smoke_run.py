"""Full-scale smoke rehearsal: datagen 200/50 -> pretrain 500 -> train 2000
-> eval, then compare against the untrained generator. Mirrors the
acceptance criterion so its outcome predicts the test."""

import json
import sys
import time

from instructpaint import cli

OUT = sys.argv[1] if len(sys.argv) > 1 else "/tmp/smoke"
STEPS = sys.argv[2] if len(sys.argv) > 2 else "2000"
PRE = sys.argv[3] if len(sys.argv) > 3 else "500"

t0 = time.time()


def run(args, what):
    t = time.time()
    code = cli.main(args)
    print(f"[{time.time() - t0:7.1f}s] {what}: exit {code} ({time.time() - t:.1f}s)", flush=True)
    assert code == 0, what


base = ["--out", OUT, "--seed", "7"]
run(base + ["datagen", "--n-train", "200", "--n-val", "0", "--n-test", "50"], "datagen")
run(base + ["--set", f"train.pretrain_steps={PRE}", "pretrain"], "pretrain")
run(base + ["--set", "train.max_steps=0", "train"], "train0")
run(base + ["eval", "--report", f"{OUT}/report0.json"], "eval@0")
run(base + ["--set", f"train.max_steps={STEPS}", "train", "--resume"], f"train{STEPS}")
run(base + ["eval"], f"eval@{STEPS}")

r0 = json.load(open(f"{OUT}/report0.json"))
r1 = json.load(open(f"{OUT}/report.json"))
print("step0   :", {k: round(r0[k], 4) for k in ("precision", "recall", "f1", "rsim")})
print("trained :", {k: round(r1[k], 4) for k in ("precision", "recall", "f1", "rsim")})
print("PASS" if (r1["f1"] > r0["f1"] and r1["rsim"] > r0["rsim"]) else "FAIL",
      f"total {(time.time() - t0) / 60:.1f} min")
