"""
One ring run, node by node
==========================

Three nodes pass the model around; each visit trains, evaluates on its
characteristic set and ships a reference gradient to its neighbour.
Takes about ten seconds on one core.
"""
from icp2pfl import parse_config, run_icp2pfl

cfg = parse_config("preset = desk\n")
rep = run_icp2pfl(cfg.train_config(0), cfg.datasets(0), cfg.arch)

for v in rep.visits:
    print(f"cycle {v['cycle']}  site {v['institution']}  loss {v['loss']:.5f}  "
          f"char PSNR {v['char_psnr']:.2f}  rho {v['rho']:.3f}  "
          f"projected {v['projected_steps']}/{v['steps']}")

print(f"\n{rep.messages} messages, {rep.bytes_sent} bytes")
print("every node holds", rep.final_digest[:16], set(rep.node_digests.values()) == {rep.final_digest})
for k in rep.institutions:
    print(f"institution {k}: input {rep.input_metrics[k].p:.2f} dB -> {rep.final(k).p:.2f} dB")
