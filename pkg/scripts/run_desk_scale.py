#!/usr/bin/env python3
"""End-to-end desk-scale experiment: synthesize, pretrain, fine-tune, evaluate.

Equivalent to the CLI sequence

    fusionprog synth --config configs/desk600.ini --out <out>/cohort
    fusionprog train --stage 1 --config ... --data <out>/cohort --out <out>/stage1
    fusionprog train --stage 2 --init <out>/stage1/best ...
    fusionprog eval --ckpt <out>/stage2/best --split test ...

but in one process so the prepared arrays are reused.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from fusionprog.config import load_config, snapshot_config, with_seed
from fusionprog.metrics import EvalSplit
from fusionprog.pipeline import prepare_data
from fusionprog.synthgen import generate_cohort
from fusionprog.training import evaluate_split, load_model_for_eval, train_stage1, train_stage2


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=Path(__file__).resolve().parent.parent / "configs/desk600.ini")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    snapshot_config(cfg, args.out / "config.ini", run_meta={"verb": "run_desk_scale"})

    t0 = time.time()
    print("generating cohort ...", flush=True)
    generate_cohort(cfg.synth, args.out / "cohort")
    print(f"preparing data ({time.time() - t0:.0f}s) ...", flush=True)
    prepared = prepare_data(args.out / "cohort", cfg.data)

    print(f"stage 1 ({time.time() - t0:.0f}s) ...", flush=True)
    r1 = train_stage1(prepared, cfg.model, cfg.stage1, args.out / "stage1")
    print(f"stage 2 ({time.time() - t0:.0f}s) ...", flush=True)
    r2 = train_stage2(prepared, cfg.model, cfg.stage2, args.out / "stage2", init_from=r1.best_dir)

    model = load_model_for_eval(r2.best_dir, prepared)
    reports = {
        "val": evaluate_split(model, prepared.val, EvalSplit.VAL).to_dict(),
        "test": evaluate_split(model, prepared.test, EvalSplit.TEST).to_dict(),
    }
    (args.out / "metrics.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    print(json.dumps(reports, indent=2, sort_keys=True))
    print(f"done in {time.time() - t0:.0f}s; outputs under {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
