"""Desk-scale experiment: data, one base model, repeated grids on both shifted domains.

    python3 scripts/run_desk.py --out runs/desk --reps 5 --jobs 1

Configs are copied into ``OUT/configs`` so that the relative data paths they
contain resolve inside OUT. Prints a per-repetition summary and writes
``OUT/summary.json``.
"""

import argparse
import json
import logging
import shutil
import time
from pathlib import Path

from xferlab import harness
from xferlab.config import ExperimentConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def best(doc, position):
    vals = [c["a_werr"] for c in doc["ranking"] if c["candidate"]["position"] == position]
    return max(vals, default=float("nan"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--domains", nargs="+", default=["acoustic", "keyword"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg_dir = args.out / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    paths = {d: Path(shutil.copy(CONFIGS / f"desk_{d}.json", cfg_dir)) for d in args.domains}
    t0 = time.time()
    for p in paths.values():
        harness.generate_data(ExperimentConfig.load(p))
    # every desk config shares the original domain and base recipe
    first = next(iter(paths.values()))
    base_reports = harness.cmd_train_base(first, args.out / "base")
    base = args.out / "base" / "base.ckpt"
    print(f"base: {', '.join(f'{k} {r.wer:.2f}' for k, r in base_reports.items())} ({time.time() - t0:.0f}s)")

    summary = {"base": {k: r.wer for k, r in base_reports.items()}, "grids": {}}
    for domain, path in paths.items():
        doc = json.loads(path.read_text())
        for r in range(args.reps):
            doc["seed"] = r
            rp = cfg_dir / f"{domain}_rep{r}.json"
            rp.write_text(json.dumps(doc))
            t = time.time()
            sel = harness.cmd_grid(rp, args.out / domain / f"rep{r}", jobs=args.jobs, base_ckpt=base)
            row = {
                "constrained": sel["constrained_winner"],
                "unconstrained": sel["unconstrained_winner"],
                **{f"best_{p}": best(sel, p) for p in ("finetune", "encoder", "decoder", "joint")},
                "seconds": round(time.time() - t, 1),
            }
            summary["grids"].setdefault(domain, []).append(row)
            print(f"{domain} rep{r}: " + ", ".join(
                f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    summary["seconds"] = round(time.time() - t0, 1)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"total {summary['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
