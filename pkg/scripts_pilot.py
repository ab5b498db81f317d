"""Pilot run of the toy end-to-end experiment (smaller than acceptance scale)."""
import json
import sys
import time

import numpy as np

from noduleseg.evaluate import prepare_cases, run_eval
from noduleseg.net import WNet, WNetConfig
from noduleseg.synth import generate_dataset
from noduleseg.train import TrainConfig, split_cases, train_stage1, train_stage2

N_CASES = int(sys.argv[1]) if len(sys.argv) > 1 else 60
SEED = 20240815

t0 = time.time()
cases = generate_dataset(N_CASES, (1.0, 8.0), (0.06, 0.14, 0.80), seed=SEED)
print(f"gen: {time.time()-t0:.0f}s", flush=True)

t0 = time.time()
prepared = prepare_cases(cases, 32)
print(f"prepare: {time.time()-t0:.0f}s", flush=True)

cfg = TrainConfig(seed=SEED, max_epochs=12)
net = WNet(WNetConfig(input_side=32, base_filters=8, depth=3), seed=SEED)

t0 = time.time()
net, h1 = train_stage1(prepared, cfg, net=net)
print(f"stage1 {time.time()-t0:.0f}s:", flush=True)
for h in h1:
    print("  ", json.dumps(h), flush=True)

t0 = time.time()
net, h2 = train_stage2(prepared, net, cfg)
print(f"stage2 {time.time()-t0:.0f}s:", flush=True)
for h in h2:
    print("  ", json.dumps(h), flush=True)

_, val_ids = split_cases([c.case_id for c in prepared], seed=cfg.seed)
val_cases = [c for c in prepared if c.case_id in set(val_ids)]
t0 = time.time()
result = run_eval(net, val_cases, cfg.loss)
print(f"eval {time.time()-t0:.0f}s on {len(val_cases)} held-out cases:", flush=True)
s = result.summary
print(json.dumps({k: v for k, v in s.items() if k != "per_radius_bin"}, indent=1))
print("per_radius_bin:", json.dumps(s["per_radius_bin"]))
print()
print(f"(a) initial mean IoU {s['initial']['mean_iou']:.3f}  (gate >= 0.50)")
print(f"(b) pct improved {s['pct_improved']:.0f}%  (gate >= 60%)")
print(f"(c) paired ASD kept {s['paired_asd']['kept_mean_mm']:.3f} <= initial "
      f"{s['paired_asd']['initial_mean_mm']:.3f}: "
      f"{s['paired_asd']['kept_mean_mm'] <= s['paired_asd']['initial_mean_mm']}")
