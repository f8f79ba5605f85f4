"""Command-line entry point.

    icp2pfl run       one method, every configured seed -> JSON + CSV per run
    icp2pfl compare   several methods over shared seeds -> joint CSV + summary table
    icp2pfl validate  quick invariant checks; exit 0 when all pass
    icp2pfl dump-data write the synthetic splits as tensor-bundle files

Every flag maps onto a config key (see ``--help``); flags override the file,
and ``ICP2PFL_OUTPUT_DIR`` overrides the file's ``output`` but not ``--output``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, parse_config
from .orchestrator import CSV_COLUMNS, run_method
from .proto import WireError, encode

log = logging.getLogger("icp2pfl")

ENV_OUTPUT = "ICP2PFL_OUTPUT_DIR"

# flag dest -> config key
FLAG_KEYS = {
    "preset": "preset",
    "method": "method",
    "methods": "compare.methods",
    "seeds": "seeds",
    "output": "output",
    "transport": "transport",
    "addresses": "addresses",
    "institutions": "institutions",
    "si_institution": "si.institution",
    "sigma": "train.sigma",
    "batch": "train.batch",
    "epsilon": "train.epsilon",
    "transmissions": "train.transmissions",
    "site_rounds": "train.site_rounds",
    "threshold": "train.threshold",
}


def _common(p):
    p.add_argument("-c", "--config", type=Path, help="config file (key = value lines)")
    p.add_argument("--preset", help="named value bundle, e.g. desk")
    p.add_argument("--seeds", help="comma-separated seeds [seeds]")
    p.add_argument("-o", "--output", help="output directory [output]")
    p.add_argument("--institutions", help="comma-separated institution ids [institutions]")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="set any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p):
    p.add_argument("--transport", choices=("inproc", "socket"), help="[transport]")
    p.add_argument("--addresses", help="id=host:port,... for the socket transport [addresses]")
    p.add_argument("--si-institution", help="institution for cl-si [si.institution]")
    p.add_argument("--sigma", help="learning rate [train.sigma]")
    p.add_argument("--batch", help="[train.batch]")
    p.add_argument("--epsilon", help="correction strength [train.epsilon]")
    p.add_argument("-T", "--transmissions", help="[train.transmissions]")
    p.add_argument("-S", "--site-rounds", help="[train.site_rounds]")
    p.add_argument("--threshold", help="controller threshold [train.threshold]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icp2pfl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one method for every seed")
    _common(p)
    _training(p)
    p.add_argument("-m", "--method", help="icp2pfl | fedavg | cl-si | cl-mi | seq-ablation [method]")
    p = sub.add_parser("compare", help="run several methods over shared seeds")
    _common(p)
    _training(p)
    p.add_argument("--methods", help="comma-separated methods [compare.methods]")
    p = sub.add_parser("validate", help="run the quick invariant suite")
    p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("dump-data", help="write synthetic datasets")
    _common(p)
    return parser


def load_config(args) -> ExperimentConfig:
    text = args.config.read_text() if getattr(args, "config", None) else ""
    overrides = []
    env = os.environ.get(ENV_OUTPUT)
    if env:
        overrides.append(("output", env))
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides.append((key, val))
    overrides.extend(args.overrides)
    return parse_config(text, overrides)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_one(cfg: ExperimentConfig, method: str, seed: int):
    return run_method(method, cfg.train_config(seed), cfg.datasets(seed), cfg.arch,
                      si_institution=cfg.si_institution, transport=cfg.transport,
                      addresses=cfg.addresses or None)


def cmd_run(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    for seed in cfg.seeds:
        rep = _run_one(cfg, cfg.method, seed)
        stem = out / f"{cfg.method}_seed{seed}"
        stem.with_suffix(".json").write_text(rep.to_json())
        stem.with_suffix(".csv").write_text(rep.to_csv())
        finals = "  ".join(f"k{k} {rep.final(k).p:.2f} dB" for k in rep.institutions)
        print(f"{cfg.method} seed {seed}: {rep.cycles} cycles, {finals}, digest {rep.final_digest[:12]}")
    return 0


def _fmt(values, digits):
    values = np.asarray(values, dtype=np.float64)
    sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return f"{values.mean():.{digits}f}±{sd:.{digits}f}"


def summary_table(reports, institutions) -> str:
    """Per-institution mean±std of final test PSNR and SSIM, one row per method."""
    methods = list(dict.fromkeys(r.method for r in reports))
    header = ["Method"] + [f"Inst {k} {m}" for k in institutions for m in ("PSNR", "SSIM")]
    rows = []
    first = [r for r in reports if r.method == methods[0]]
    row = ["Low-dose input"]
    for k in institutions:
        row.append(_fmt([r.input_metrics[k].p for r in first], 2))
        row.append(_fmt([r.input_metrics[k].s for r in first], 4))
    rows.append(row)
    for m in methods:
        rs = [r for r in reports if r.method == m]
        row = [m]
        for k in institutions:
            row.append(_fmt([r.final(k).p for r in rs], 2))
            row.append(_fmt([r.final(k).s for r in rs], 4))
        rows.append(row)
    widths = [max(len(str(x[i])) for x in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    reports = []
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for method in cfg.compare_methods:
            for seed in cfg.seeds:
                rep = _run_one(cfg, method, seed)
                reports.append(rep)
                w.writerows(rep.csv_rows(splits=("test",)))
                print(f"{method} seed {seed}: mean final PSNR {rep.mean_final_psnr():.2f} dB")
    table = summary_table(reports, list(cfg.institutions))
    (out / "summary.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_validate() -> int:
    from .validation import run_checks
    ok = True
    for name, passed, detail in run_checks():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return 0 if ok else 1


def cmd_dump_data(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg) / "data"
    manifest = {}
    for seed in cfg.seeds:
        d = out / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        for ds in cfg.datasets(seed):
            p = ds.protocol
            meta = np.array([p.gain, p.sigma, p.window[0], p.window[1], p.style], dtype=np.float32)
            for split in ("train", "test", "char"):
                s = ds.split(split)
                path = d / f"institution{ds.k}_{split}.icp2"
                path.write_bytes(encode({"clean": s.clean, "noisy": s.noisy, "protocol": meta}))
                manifest[str(path.relative_to(out))] = {
                    "seed": seed, "institution": ds.k, "split": split, "patches": len(s),
                    "phantom_seeds": [int(x) for x in s.seeds]}
        print(f"seed {seed}: wrote {len(cfg.institutions) * 3} files to {d}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            return cmd_validate()
        cfg = load_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "compare":
            return cmd_compare(cfg)
        return cmd_dump_data(cfg)
    except (ConfigError, OSError) as exc:
        print(f"icp2pfl: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, WireError, ArithmeticError) as exc:  # divergence, protocol, transport
        print(f"icp2pfl: run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
