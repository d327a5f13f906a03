"""Ablation grids, single-modality baselines, and report rendering.

Every grid row retrains from a fixed set of seeds on identical splits so that
row-to-row differences isolate the ablated component.  Rows that fail to
train are marked FAILED and the harness keeps going.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoders import ImageEncoderConfig, StructuredEncoder, StructuredEncoderConfig, build_image_encoder
from .errors import ConfigurationError
from .fusion import FusionMode
from .losses import LossStrategy, cross_entropy
from .metrics import EvalSplit, MetricsReport, auc, compute_metrics
from .pipeline import PreparedData, SplitData
from .training import (
    ModelConfig,
    TrainConfig,
    _batch_indices,
    _make_plain_batch,
    evaluate_split,
    load_model_for_eval,
    lr_at,
    train_stage1,
    train_stage2,
)

DEFAULT_SEEDS = (0, 1, 2)

# Published reference results shipped with every report for context; the
# source cohort is private, so these are a fixed annotation, not a target.
REFERENCE_RESULTS = {
    "label": "published (private cohort; not reproducible at desk scale)",
    "val": {"auc": 0.8863, "f1": 0.8304, "acc": 83.48},
    "test": {"auc": 0.8703, "f1": 0.7968, "acc": 80.45},
}


@dataclass(frozen=True)
class GridRow:
    model_id: str
    use_intra: bool
    use_inter: bool
    use_fmcl: bool
    use_hf: bool


TABLE3_ROWS: tuple[GridRow, ...] = (
    GridRow("A", True, False, False, False),
    GridRow("B", False, True, False, False),
    GridRow("C", False, False, True, False),
    GridRow("D", False, False, False, True),
    GridRow("E", False, False, True, True),
    GridRow("F", True, True, False, False),
    GridRow("G", True, False, True, True),
    GridRow("H", False, True, True, True),
    GridRow("I", True, True, True, False),
    GridRow("J", True, True, True, True),
)

TABLE4_STRATEGIES: tuple[LossStrategy, ...] = (
    LossStrategy.AVERAGE_ALL,
    LossStrategy.RANDOM_PER_EPOCH,
    LossStrategy.RANDOM_PER_MINIBATCH,
)

BASELINE_ROWS = (
    "image_only_adc",
    "image_only_dwi",
    "structured_only",
    "structured_without_nihss",
    "fusion",
    "fusion_without_nihss",
)


@dataclass(frozen=True)
class ResultRow:
    row_id: str
    flags: dict
    val_reports: tuple[MetricsReport, ...]
    test_reports: tuple[MetricsReport, ...]
    failed: bool = False
    error: str | None = None

    def mean(self, which: str, metric: str) -> float:
        reports = self.val_reports if which == "val" else self.test_reports
        return float(np.mean([getattr(r, metric) for r in reports]))


@dataclass(frozen=True)
class ReportTable:
    table_id: str
    flag_columns: tuple[str, ...]
    rows: tuple[ResultRow, ...]


# ---------------------------------------------------------------------------
# Full-pipeline rows (one seed each)
# ---------------------------------------------------------------------------


def run_two_stage(
    prepared: PreparedData,
    model_cfg: ModelConfig,
    stage1_cfg: TrainConfig | None,
    stage2_cfg: TrainConfig,
    out_dir: str | Path,
) -> tuple[MetricsReport, MetricsReport]:
    """One end-to-end run; returns (val, test) metrics from the best stage-2 model."""
    out_dir = Path(out_dir)
    init = None
    if stage1_cfg is not None:
        stage1 = train_stage1(prepared, model_cfg, stage1_cfg, out_dir / "stage1")
        init = stage1.best_dir
    stage2 = train_stage2(prepared, model_cfg, stage2_cfg, out_dir / "stage2", init_from=init)
    model = load_model_for_eval(stage2.best_dir, prepared)
    return (
        evaluate_split(model, prepared.val, EvalSplit.VAL),
        evaluate_split(model, prepared.test, EvalSplit.TEST),
    )


def _row_configs(row: GridRow, base_stage1: TrainConfig, base_stage2: TrainConfig, seed: int):
    mode = FusionMode.HIERARCHICAL if row.use_hf else FusionMode.AVERAGE
    any_loss = row.use_intra or row.use_inter or row.use_fmcl
    stage1 = None
    if any_loss:
        stage1 = replace(
            base_stage1,
            use_intra=row.use_intra,
            use_inter=row.use_inter,
            use_fmcl=row.use_fmcl,
            fusion_mode=mode,
            seed=seed,
            contrastive=replace(base_stage1.contrastive, rng_seed=seed),
        )
    stage2 = replace(base_stage2, fusion_mode=mode, seed=seed)
    return stage1, stage2


def run_ablation_table3(
    prepared: PreparedData,
    model_cfg: ModelConfig,
    base_stage1: TrainConfig,
    base_stage2: TrainConfig,
    out_dir: str | Path,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    rows: Sequence[GridRow] = TABLE3_ROWS,
) -> ReportTable:
    out_dir = Path(out_dir)
    results = []
    for row in rows:
        flags = {
            "intra": row.use_intra,
            "inter": row.use_inter,
            "fmcl": row.use_fmcl,
            "hf": row.use_hf,
        }
        try:
            vals, tests = [], []
            for seed in seeds:
                stage1_cfg, stage2_cfg = _row_configs(row, base_stage1, base_stage2, seed)
                val, test = run_two_stage(
                    prepared, model_cfg, stage1_cfg, stage2_cfg, out_dir / row.model_id / f"seed{seed}"
                )
                vals.append(val)
                tests.append(test)
            results.append(ResultRow(row.model_id, flags, tuple(vals), tuple(tests)))
        except Exception as exc:  # keep the rest of the grid alive
            results.append(ResultRow(row.model_id, flags, (), (), failed=True, error=str(exc)))
    return ReportTable("table3", ("intra", "inter", "fmcl", "hf"), tuple(results))


def run_ablation_table4(
    prepared: PreparedData,
    model_cfg: ModelConfig,
    base_stage1: TrainConfig,
    base_stage2: TrainConfig,
    out_dir: str | Path,
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> ReportTable:
    out_dir = Path(out_dir)
    results = []
    for strategy in TABLE4_STRATEGIES:
        flags = {"strategy": strategy.value}
        try:
            vals, tests = [], []
            for seed in seeds:
                stage1_cfg = replace(
                    base_stage1,
                    seed=seed,
                    contrastive=replace(base_stage1.contrastive, strategy=strategy, rng_seed=seed),
                )
                stage2_cfg = replace(base_stage2, seed=seed)
                val, test = run_two_stage(
                    prepared, model_cfg, stage1_cfg, stage2_cfg, out_dir / strategy.value / f"seed{seed}"
                )
                vals.append(val)
                tests.append(test)
            results.append(ResultRow(strategy.value, flags, tuple(vals), tuple(tests)))
        except Exception as exc:
            results.append(ResultRow(strategy.value, flags, (), (), failed=True, error=str(exc)))
    return ReportTable("table4", ("strategy",), tuple(results))


# ---------------------------------------------------------------------------
# Single-modality baselines
# ---------------------------------------------------------------------------


class ImageOnlyClassifier(nn.Module):
    """Single image encoder plus a linear head; no fusion."""

    def __init__(self, model_cfg: ModelConfig, in_channels: int):
        super().__init__()
        image_cfg = ImageEncoderConfig(model_cfg.backbone, in_channels, model_cfg.channels)
        self.encoder = build_image_encoder(image_cfg)
        self.head = nn.Linear(image_cfg.feature_dim, 2)

    def forward(self, x):
        return self.head(self.encoder(x))


class StructuredOnlyClassifier(nn.Module):
    """Structured MLP encoder plus a linear head."""

    def __init__(self, model_cfg: ModelConfig, n_attrs: int):
        super().__init__()
        self.encoder = StructuredEncoder(StructuredEncoderConfig(n_attrs, model_cfg.structured_hidden))
        self.head = nn.Linear(model_cfg.structured_hidden[-1], 2)

    def forward(self, x):
        return self.head(self.encoder(x))


def _batch_input(batch, modality: str) -> torch.Tensor:
    return {"adc": batch.adc, "dwi": batch.dwi, "structured": batch.tabular}[modality]


def train_single_modality(
    prepared: PreparedData,
    modality: str,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> tuple[MetricsReport, MetricsReport]:
    """Supervised from-scratch baseline on one modality; selection by val AUC."""
    if modality not in ("adc", "dwi", "structured"):
        raise ConfigurationError(f"unknown baseline modality {modality!r}")
    torch.manual_seed(cfg.seed)
    if modality == "structured":
        model: nn.Module = StructuredOnlyClassifier(model_cfg, prepared.n_attrs)
    else:
        model = ImageOnlyClassifier(model_cfg, prepared.n_slices)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_stage1, betas=cfg.adam_betas)

    def scores_on(split: SplitData) -> tuple[np.ndarray, np.ndarray]:
        model.eval()
        scores, preds = [], []
        with torch.no_grad():
            for indices in _batch_indices(len(split), 64, seed=0, epoch=0, shuffle=False):
                batch = _make_plain_batch(split, indices)
                logits = model(_batch_input(batch, modality))
                scores.append(torch.softmax(logits, dim=1)[:, 1].numpy())
                preds.append(logits.argmax(dim=1).numpy())
        model.train()
        return np.concatenate(scores), np.concatenate(preds)

    best_auc = -1.0
    best_state = None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for indices in _batch_indices(len(prepared.train), cfg.batch_size, cfg.seed, epoch, shuffle=True):
            batch = _make_plain_batch(prepared.train, indices)
            loss = cross_entropy(model(_batch_input(batch, modality)), batch.labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        val_scores, _ = scores_on(prepared.val)
        val_auc = auc(val_scores, prepared.val.labels)
        if val_auc > best_auc:
            best_auc = val_auc
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    reports = []
    for split, tag in ((prepared.val, EvalSplit.VAL), (prepared.test, EvalSplit.TEST)):
        scores, preds = scores_on(split)
        reports.append(compute_metrics(scores, preds, split.labels, tag))
    return reports[0], reports[1]


def run_baselines(
    prepared: PreparedData,
    prepared_without_nihss: PreparedData,
    model_cfg: ModelConfig,
    base_stage1: TrainConfig,
    base_stage2: TrainConfig,
    out_dir: str | Path,
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> ReportTable:
    """The six-row single-modality / fusion comparison (with and without NIHSS)."""
    out_dir = Path(out_dir)
    results = []
    for row_id in BASELINE_ROWS:
        flags = {"inputs": row_id}
        try:
            vals, tests = [], []
            for seed in seeds:
                if row_id.startswith("image_only"):
                    modality = row_id.rsplit("_", 1)[1]
                    cfg = replace(base_stage1, seed=seed)
                    val, test = train_single_modality(prepared, modality, model_cfg, cfg)
                elif row_id.startswith("structured"):
                    data = prepared_without_nihss if row_id.endswith("without_nihss") else prepared
                    cfg = replace(base_stage1, seed=seed)
                    val, test = train_single_modality(data, "structured", model_cfg, cfg)
                else:
                    data = prepared_without_nihss if row_id.endswith("without_nihss") else prepared
                    stage1_cfg = replace(
                        base_stage1, seed=seed, contrastive=replace(base_stage1.contrastive, rng_seed=seed)
                    )
                    stage2_cfg = replace(base_stage2, seed=seed)
                    val, test = run_two_stage(
                        data, model_cfg, stage1_cfg, stage2_cfg, out_dir / row_id / f"seed{seed}"
                    )
                vals.append(val)
                tests.append(test)
            results.append(ResultRow(row_id, flags, tuple(vals), tuple(tests)))
        except Exception as exc:
            results.append(ResultRow(row_id, flags, (), (), failed=True, error=str(exc)))
    return ReportTable("table5", ("inputs",), tuple(results))


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------


def _fmt_flag(value) -> str:
    if isinstance(value, bool):
        return "V" if value else ""
    return str(value)


def _render_table_markdown(table: ReportTable) -> str:
    header = ["row", *table.flag_columns, "val AUC", "val F1", "val Acc(%)", "test AUC", "test F1", "test Acc(%)"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in table.rows:
        cells = [row.row_id] + [_fmt_flag(row.flags.get(c)) for c in table.flag_columns]
        if row.failed:
            cells += ["FAILED"] * 6
        else:
            cells += [
                f"{row.mean('val', 'auc'):.4f}",
                f"{row.mean('val', 'macro_f1'):.4f}",
                f"{100 * row.mean('val', 'accuracy'):.2f}",
                f"{row.mean('test', 'auc'):.4f}",
                f"{row.mean('test', 'macro_f1'):.4f}",
                f"{100 * row.mean('test', 'accuracy'):.2f}",
            ]
        lines.append("| " + " | ".join(cells) + " |")
    ref = REFERENCE_RESULTS
    ref_cells = (
        [ref["label"]]
        + [""] * len(table.flag_columns)
        + [
            f"{ref['val']['auc']:.4f}",
            f"{ref['val']['f1']:.4f}",
            f"{ref['val']['acc']:.2f}",
            f"{ref['test']['auc']:.4f}",
            f"{ref['test']['f1']:.4f}",
            f"{ref['test']['acc']:.2f}",
        ]
    )
    lines.append("| " + " | ".join(ref_cells) + " |")
    return "\n".join(lines)


def _report_to_jsonable(report: MetricsReport) -> dict:
    return report.to_dict()


def _report_from_jsonable(payload: dict) -> MetricsReport:
    return MetricsReport(
        auc=payload["auc"],
        macro_f1=payload["macro_f1"],
        accuracy=payload["accuracy"],
        split=EvalSplit(payload["split"]),
        n=payload["n"],
        confusion=tuple(tuple(int(v) for v in row) for row in payload["confusion"]),
    )


def tables_to_json(tables: Sequence[ReportTable]) -> str:
    payload = {
        "reference": REFERENCE_RESULTS,
        "tables": [
            {
                "table_id": t.table_id,
                "flag_columns": list(t.flag_columns),
                "rows": [
                    {
                        "row_id": r.row_id,
                        "flags": r.flags,
                        "val": [_report_to_jsonable(m) for m in r.val_reports],
                        "test": [_report_to_jsonable(m) for m in r.test_reports],
                        "failed": r.failed,
                        "error": r.error,
                    }
                    for r in t.rows
                ],
            }
            for t in tables
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def tables_from_json(text: str) -> list[ReportTable]:
    payload = json.loads(text)
    tables = []
    for t in payload["tables"]:
        rows = tuple(
            ResultRow(
                row_id=r["row_id"],
                flags=r["flags"],
                val_reports=tuple(_report_from_jsonable(m) for m in r["val"]),
                test_reports=tuple(_report_from_jsonable(m) for m in r["test"]),
                failed=r["failed"],
                error=r["error"],
            )
            for r in t["rows"]
        )
        tables.append(ReportTable(t["table_id"], tuple(t["flag_columns"]), rows))
    return tables


def render_report(tables: Sequence[ReportTable]) -> tuple[str, str]:
    """Deterministic (markdown, json) rendering of harness tables."""
    sections = []
    for table in tables:
        sections.append(f"## {table.table_id}\n\n{_render_table_markdown(table)}")
    markdown = "\n\n".join(sections) + "\n"
    return markdown, tables_to_json(tables)
