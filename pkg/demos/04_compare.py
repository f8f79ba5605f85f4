"""
Ring vs. baselines
==================

Same seeds, same data, five training schemes.  The eps=0 ablation is the
ring with the correction switched off.  A couple of minutes on one core.
"""
import numpy as np

from icp2pfl import parse_config, run_method

cfg = parse_config("preset = desk\nseeds = 0,1\n")
methods = ("icp2pfl", "seq-ablation", "fedavg", "cl-mi", "cl-si")

print("method         " + "  ".join(f"inst {k:<3}" for k in cfg.institutions) + "  mean")
for m in methods:
    reps = [run_method(m, cfg.train_config(s), cfg.datasets(s), cfg.arch, si_institution=1)
            for s in cfg.seeds]
    per = [np.mean([r.final(k).p for r in reps]) for k in cfg.institutions]
    print(f"{m:<14} " + "  ".join(f"{p:8.2f}" for p in per) + f"  {np.mean(per):.2f}")

# cl-si sees institution 1 only: expect it to fall off on institution 3
