"""Command-line entry point: synth, describe, train, eval, ablate, verify.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every state-changing
command writes a resolved config snapshot under --out.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigurationError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionprog", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p, out_required=True):
        p.add_argument("--config", type=Path, default=None, help="INI config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override generation/training seeds")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    add_common(p)

    p = sub.add_parser("describe", help="summarize a cohort manifest")
    p.add_argument("--data", type=Path, required=True, help="cohort directory containing manifest.csv")

    p = sub.add_parser("train", help="run one training stage")
    add_common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--init", type=Path, default=None, help="stage-1 checkpoint to initialize stage 2 from")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint directory to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("ablate", help="run an ablation or baseline grid")
    add_common(p)
    p.add_argument("--grid", choices=("table3", "table4", "table5"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", type=str, default="0,1,2", help="comma-separated training seeds")

    p = sub.add_parser("verify", help="run oracle/gradient/metric verification suites")
    p.add_argument("--suite", choices=("losses", "gradients", "metrics", "all"), default="all")
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("FUSIONPROG_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))


def _load_experiment(args):
    from .config import load_config, with_seed

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _snapshot(cfg, args, extra: dict | None = None) -> None:
    from .config import snapshot_config

    meta = {"verb": args.verb}
    for key in ("data", "stage", "grid", "split", "seeds", "init", "resume", "ckpt"):
        value = getattr(args, key, None)
        if value is not None:
            meta[key] = str(value)
    if extra:
        meta.update(extra)
    snapshot_config(cfg, Path(args.out) / "config.ini", run_meta=meta)


def _cmd_synth(args) -> int:
    from .synthgen import describe_cohort, generate_cohort

    cfg = _load_experiment(args)
    manifest = generate_cohort(cfg.synth, args.out)
    _snapshot(cfg, args)
    summary = describe_cohort(manifest)
    print(f"wrote cohort of {len(manifest)} patients to {args.out}")
    print(summary.as_markdown())
    return 0


def _cmd_describe(args) -> int:
    from .datamodel import load_manifest
    from .synthgen import describe_cohort

    manifest = load_manifest(Path(args.data) / "manifest.csv")
    print(describe_cohort(manifest).as_markdown())
    return 0


def _cmd_train(args) -> int:
    from .pipeline import prepare_data
    from .training import train_stage1, train_stage2

    cfg = _load_experiment(args)
    prepared = prepare_data(args.data, cfg.data)
    _snapshot(cfg, args)
    if args.stage == 1:
        result = train_stage1(prepared, cfg.model, cfg.stage1, args.out, resume_from=args.resume)
        print(f"stage 1 finished: best validation loss {result.best_metric:.6f}")
    else:
        result = train_stage2(
            prepared, cfg.model, cfg.stage2, args.out, init_from=args.init, resume_from=args.resume
        )
        print(f"stage 2 finished: best validation AUC {result.best_metric:.4f}")
    print(f"checkpoints: final={result.final_dir} best={result.best_dir}")
    return 0


def _cmd_eval(args) -> int:
    import json

    from .metrics import EvalSplit
    from .pipeline import prepare_data
    from .training import evaluate_split, load_model_for_eval

    cfg = _load_experiment(args)
    prepared = prepare_data(args.data, cfg.data)
    model = load_model_for_eval(args.ckpt, prepared)
    split = prepared.split(args.split)
    report = evaluate_split(model, split, EvalSplit(args.split))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"metrics_{args.split}.json").write_text(text + "\n", encoding="utf-8")
        _snapshot(cfg, args)
    return 0


def _cmd_ablate(args) -> int:
    from dataclasses import replace

    from .harness import render_report, run_ablation_table3, run_ablation_table4, run_baselines
    from .pipeline import prepare_data

    cfg = _load_experiment(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    prepared = prepare_data(args.data, cfg.data)
    _snapshot(cfg, args)
    if args.grid == "table3":
        table = run_ablation_table3(prepared, cfg.model, cfg.stage1, cfg.stage2, args.out, seeds=seeds)
    elif args.grid == "table4":
        table = run_ablation_table4(prepared, cfg.model, cfg.stage1, cfg.stage2, args.out, seeds=seeds)
    else:
        prepared_wo = prepare_data(args.data, replace(cfg.data, drop_nihss=True))
        table = run_baselines(prepared, prepared_wo, cfg.model, cfg.stage1, cfg.stage2, args.out, seeds=seeds)
    markdown, json_text = render_report([table])
    (Path(args.out) / "report.md").write_text(markdown, encoding="utf-8")
    (Path(args.out) / "report.json").write_text(json_text + "\n", encoding="utf-8")
    print(markdown)
    return 0


def _cmd_verify(args) -> int:
    from .reference import SUITES, run_suites

    names = tuple(SUITES) if args.suite == "all" else (args.suite,)
    results, ok = run_suites(names)
    for result in results:
        print(result.line())
    return 0 if ok else 2


_COMMANDS = {
    "synth": _cmd_synth,
    "describe": _cmd_describe,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "verify": _cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return 0 if exc.code == 0 else 1
    _apply_thread_cap()
    try:
        return _COMMANDS[args.verb](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
