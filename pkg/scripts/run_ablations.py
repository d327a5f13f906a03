#!/usr/bin/env python3
"""Run the full ablation sweep (loss grid, strategy grid, baselines) on one cohort.

Expects a cohort directory produced by ``fusionprog synth`` (or
scripts/run_desk_scale.py).  Writes one markdown + JSON report covering all
three tables.  Budget several hours on a single CPU core for the desk-scale
cohort with 3 seeds; use --seeds 0 for a quick pass.
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from fusionprog.config import load_config, snapshot_config
from fusionprog.harness import render_report, run_ablation_table3, run_ablation_table4, run_baselines
from fusionprog.pipeline import prepare_data


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=Path(__file__).resolve().parent.parent / "configs/desk600.ini")
    parser.add_argument("--data", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seeds", type=str, default="0,1,2")
    parser.add_argument("--grids", type=str, default="table3,table4,table5")
    args = parser.parse_args()

    cfg = load_config(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    grids = args.grids.split(",")
    args.out.mkdir(parents=True, exist_ok=True)
    snapshot_config(cfg, args.out / "config.ini", run_meta={"verb": "run_ablations", "seeds": args.seeds})

    t0 = time.time()
    prepared = prepare_data(args.data, cfg.data)
    tables = []
    if "table3" in grids:
        print(f"loss-combination grid ({time.time() - t0:.0f}s) ...", flush=True)
        tables.append(run_ablation_table3(prepared, cfg.model, cfg.stage1, cfg.stage2, args.out / "table3", seeds))
    if "table4" in grids:
        print(f"strategy grid ({time.time() - t0:.0f}s) ...", flush=True)
        tables.append(run_ablation_table4(prepared, cfg.model, cfg.stage1, cfg.stage2, args.out / "table4", seeds))
    if "table5" in grids:
        print(f"baselines ({time.time() - t0:.0f}s) ...", flush=True)
        prepared_wo = prepare_data(args.data, replace(cfg.data, drop_nihss=True))
        tables.append(
            run_baselines(prepared, prepared_wo, cfg.model, cfg.stage1, cfg.stage2, args.out / "table5", seeds)
        )

    markdown, json_text = render_report(tables)
    (args.out / "report.md").write_text(markdown)
    (args.out / "report.json").write_text(json_text + "\n")
    print(markdown)
    print(f"done in {time.time() - t0:.0f}s; report under {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
