"""Two-stage training orchestration, checkpointing, and schedules.

Stage 1 learns representations with the contrastive objectives over augmented
views; stage 2 transfers the backbones, heads, and fusion layers, adds a fresh
classifier, and fine-tunes with cross-entropy.  All randomness (batch order,
augmented views, loss selection) comes from substreams keyed by
(seed, epoch, ...) rather than mutable generator state, so identical seeds
give byte-identical checkpoints and a resumed run equals a straight-through
run exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentPolicy, Stage, augment_image, augment_structured
from .datamodel import ImageVolume, Modality
from .encoders import (
    EMBED_DIM,
    EmbeddingSet,
    ImageBackbone,
    ImageEncoderConfig,
    ProjectionConfig,
    StructuredEncoder,
    StructuredEncoderConfig,
    build_image_encoder,
    default_projection_dims,
    ProjectionHead,
    l2_normalize,
)
from .errors import CheckpointError, ConfigurationError, TrainingError
from .fusion import FusionConfig, FusionMode, ModalityFusion
from .losses import (
    ContrastiveConfig,
    SupConResult,
    combine,
    cross_entropy,
    loss_fmcl,
    loss_inter,
    loss_intra,
)
from .metrics import EvalSplit, MetricsReport, compute_metrics
from .pipeline import PreparedData, SplitData

# Substream namespaces under the training seed.
_NS_ORDER = 11
_NS_AUG = 22
_NS_VAL_AUG = 33
_MODALITY_TAG = {"adc": 0, "dwi": 1, "structured": 2}

TRANSFER_MODULES = (
    "adc_encoder",
    "dwi_encoder",
    "structured_encoder",
    "adc_projection",
    "dwi_projection",
    "fusion",
)

MANIFEST_NAME = "manifest.json"
OPTIMIZER_BLOB = "optimizer.bin"


@dataclass(frozen=True)
class ModelConfig:
    backbone: ImageBackbone = ImageBackbone.SMALL_CNN
    channels: tuple[int, ...] = (32, 64, 128, 256)
    structured_hidden: tuple[int, ...] = (150, 100, EMBED_DIM)
    embed_dim: int = EMBED_DIM
    projection_mid: int | None = None  # None picks a width from the feature dim

    def __post_init__(self):
        if self.structured_hidden[-1] != self.embed_dim:
            raise ConfigurationError(
                f"last structured hidden dim ({self.structured_hidden[-1]}) must equal embed_dim ({self.embed_dim})"
            )


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage
    epochs: int = 20
    batch_size: int = 32
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    n_views: int = 2
    fusion_mode: FusionMode = FusionMode.HIERARCHICAL
    use_intra: bool = True
    use_inter: bool = True
    use_fmcl: bool = True
    normalize_fused: bool = True
    structured_raw_anchor: bool = False
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.lr_decay_every < 1 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("invalid learning-rate decay settings")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.stage is Stage.STAGE1:
            if self.n_views < 2:
                raise ConfigurationError("stage 1 needs at least 2 views per sample")
            if not (self.use_intra or self.use_inter or self.use_fmcl):
                raise ConfigurationError("stage 1 needs at least one contrastive loss enabled")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate for a given 0-based epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    base = cfg.lr_stage1 if cfg.stage is Stage.STAGE1 else cfg.lr_stage2
    return base * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


class FusionModel(nn.Module):
    """All modality branches plus fusion and the stage-2 classifier head."""

    def __init__(self, model_cfg: ModelConfig, in_channels: int, n_attrs: int, fusion_mode: FusionMode):
        super().__init__()
        image_cfg = ImageEncoderConfig(model_cfg.backbone, in_channels, model_cfg.channels)
        if model_cfg.projection_mid is None:
            proj_dims = default_projection_dims(image_cfg.feature_dim, model_cfg.embed_dim)
        else:
            proj_dims = (image_cfg.feature_dim, model_cfg.projection_mid, model_cfg.embed_dim)
        self.adc_encoder = build_image_encoder(image_cfg)
        self.dwi_encoder = build_image_encoder(image_cfg)
        self.structured_encoder = StructuredEncoder(StructuredEncoderConfig(n_attrs, model_cfg.structured_hidden))
        self.adc_projection = ProjectionHead(ProjectionConfig(proj_dims))
        self.dwi_projection = ProjectionHead(ProjectionConfig(proj_dims))
        self.fusion = ModalityFusion(FusionConfig(fusion_mode, model_cfg.embed_dim))
        self.classifier = nn.Linear(model_cfg.embed_dim, 2)

    def embed(self, adc: torch.Tensor, dwi: torch.Tensor, tabular: torch.Tensor):
        """Normalized per-modality embeddings (the structured projection is identity)."""
        a = l2_normalize(self.adc_projection(self.adc_encoder(adc)))
        d = l2_normalize(self.dwi_projection(self.dwi_encoder(dwi)))
        s = l2_normalize(self.structured_encoder(tabular))
        return a, d, s

    def forward(self, adc: torch.Tensor, dwi: torch.Tensor, tabular: torch.Tensor) -> torch.Tensor:
        a, d, s = self.embed(adc, dwi, tabular)
        return self.classifier(self.fusion(a, d, s))


def build_model(model_cfg: ModelConfig, prepared: PreparedData, fusion_mode: FusionMode, seed: int) -> FusionModel:
    """Construct a model with deterministic initialization from the seed."""
    torch.manual_seed(seed)
    return FusionModel(model_cfg, prepared.n_slices, prepared.n_attrs, fusion_mode)


# ---------------------------------------------------------------------------
# Batching and view generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    split: str
    adc: torch.Tensor
    dwi: torch.Tensor
    tabular: torch.Tensor
    labels: torch.Tensor
    view_of: torch.Tensor
    patient_ids: tuple[str, ...]

    @property
    def checksum(self) -> str:
        return hashlib.sha1(",".join(self.patient_ids).encode()).hexdigest()[:16]


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, _NS_ORDER, epoch)))
    return rng.permutation(n)


def _batch_indices(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool) -> Iterator[np.ndarray]:
    order = _epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _view_rng(seed: int, namespace: int, epoch: int, sample_index: int, view: int, modality: str):
    key = (seed, namespace, epoch, sample_index, view, _MODALITY_TAG[modality])
    return np.random.default_rng(np.random.SeedSequence(key))


def _make_views(
    split: SplitData,
    indices: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
    namespace: int,
) -> Batch:
    """Stage-1 multi-view batch: per sample, view 0 is the raw rendering for
    images and every extra view is augmented; structured views are all
    dropout-masked unless the raw-anchor variant is enabled."""
    policy = cfg.augment
    adc_rows, dwi_rows, tab_rows, labels, view_of, pids = [], [], [], [], [], []
    for local, sample_index in enumerate(indices):
        pid = split.patient_ids[sample_index]
        for view in range(cfg.n_views):
            if view == 0:
                adc_rows.append(split.adc[sample_index])
                dwi_rows.append(split.dwi[sample_index])
            else:
                for name, store, rows in (("adc", split.adc, adc_rows), ("dwi", split.dwi, dwi_rows)):
                    rng = _view_rng(cfg.seed, namespace, epoch, int(sample_index), view, name)
                    modality = Modality.ADC if name == "adc" else Modality.DWI
                    vol = ImageVolume(modality, store[sample_index], pid)
                    rows.append(augment_image(vol, policy, rng).voxels)
            if view == 0 and cfg.structured_raw_anchor:
                tab_rows.append(np.asarray(split.tabular[sample_index], dtype=np.float64))
            else:
                rng = _view_rng(cfg.seed, namespace, epoch, int(sample_index), view, "structured")
                tab_rows.append(augment_structured(split.tabular[sample_index], policy, rng))
            labels.append(int(split.labels[sample_index]))
            view_of.append(local)
            pids.append(pid)
    return Batch(
        split=split.name,
        adc=torch.from_numpy(np.stack(adc_rows).astype(np.float32)),
        dwi=torch.from_numpy(np.stack(dwi_rows).astype(np.float32)),
        tabular=torch.from_numpy(np.stack(tab_rows).astype(np.float32)),
        labels=torch.tensor(labels, dtype=torch.int64),
        view_of=torch.tensor(view_of, dtype=torch.int64),
        patient_ids=tuple(dict.fromkeys(pids)),
    )


def _make_plain_batch(split: SplitData, indices: np.ndarray) -> Batch:
    return Batch(
        split=split.name,
        adc=torch.from_numpy(split.adc[indices]),
        dwi=torch.from_numpy(split.dwi[indices]),
        tabular=torch.from_numpy(split.tabular[indices].astype(np.float32)),
        labels=torch.from_numpy(split.labels[indices]),
        view_of=torch.arange(len(indices)),
        patient_ids=tuple(split.patient_ids[i] for i in indices),
    )


# ---------------------------------------------------------------------------
# Checkpoint format: one raw parameter blob per module + a JSON manifest
# ---------------------------------------------------------------------------


def _module_blob(module: nn.Module) -> tuple[bytes, list[dict]]:
    meta = []
    chunks = []
    offset = 0
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        raw = arr.tobytes()  # C-order copy; keeps 0-dim shapes intact
        meta.append(
            {"param": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), meta


def module_checksums(model: nn.Module) -> dict[str, str]:
    """SHA-256 of each top-level module's serialized parameter blob."""
    return {
        name: hashlib.sha256(_module_blob(module)[0]).hexdigest() for name, module in model.named_children()
    }


def _optimizer_blob(optimizer: torch.optim.Optimizer, params: list[torch.Tensor]) -> tuple[bytes, list[dict]]:
    meta = []
    chunks = []
    offset = 0
    for i, p in enumerate(params):
        state = optimizer.state.get(p)
        if not state:
            meta.append(None)
            continue
        entry = {"index": i, "step": float(state["step"]), "moments": []}
        for key in ("exp_avg", "exp_avg_sq"):
            arr = state[key].detach().cpu().numpy()
            raw = arr.tobytes()
            entry["moments"].append(
                {"name": key, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
        meta.append(entry)
    return b"".join(chunks), meta


def save_checkpoint(
    directory: str | Path,
    model: nn.Module,
    optimizer: torch.optim.Optimizer | None,
    *,
    stage: Stage,
    epoch: int,
    seed: int,
    best_metric: float | None,
    config_snapshot: dict | None = None,
) -> Path:
    """Write a deterministic checkpoint directory (stable bytes for equal state)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    modules_meta = {}
    for name, module in model.named_children():
        blob, meta = _module_blob(module)
        (directory / f"{name}.bin").write_bytes(blob)
        modules_meta[name] = meta
    manifest = {
        "format": 1,
        "stage": stage.value,
        "epoch": epoch,
        "seed": seed,
        # All run-time randomness comes from substreams keyed by (seed, epoch,
        # ...), so the seed alone is the complete generator state.
        "rng": {"scheme": "keyed-substreams", "seed": seed},
        "best_metric": best_metric,
        "modules": modules_meta,
        "config": config_snapshot or {},
        "optimizer": None,
    }
    if optimizer is not None:
        params = [p for _, p in model.named_parameters()]
        blob, meta = _optimizer_blob(optimizer, params)
        (directory / OPTIMIZER_BLOB).write_bytes(blob)
        manifest["optimizer"] = meta
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return directory


@dataclass(frozen=True)
class LoadedCheckpoint:
    directory: Path
    manifest: dict
    module_arrays: dict[str, dict[str, np.ndarray]]
    optimizer_meta: list | None
    optimizer_raw: bytes | None

    @property
    def stage(self) -> Stage:
        return Stage(self.manifest["stage"])

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])

    @property
    def best_metric(self) -> float | None:
        return self.manifest["best_metric"]


def load_checkpoint(directory: str | Path) -> LoadedCheckpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"not a checkpoint directory (missing {MANIFEST_NAME}): {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    module_arrays: dict[str, dict[str, np.ndarray]] = {}
    for name, meta in manifest["modules"].items():
        blob_path = directory / f"{name}.bin"
        if not blob_path.exists():
            raise CheckpointError(f"missing parameter blob {name}.bin in {directory}")
        raw = blob_path.read_bytes()
        arrays = {}
        for entry in meta:
            start, n = entry["offset"], entry["nbytes"]
            arr = np.frombuffer(raw[start : start + n], dtype=np.dtype(entry["dtype"]))
            arrays[entry["param"]] = arr.reshape(entry["shape"]).copy()
        module_arrays[name] = arrays
    optimizer_raw = None
    if manifest.get("optimizer") is not None:
        opt_path = directory / OPTIMIZER_BLOB
        if not opt_path.exists():
            raise CheckpointError(f"missing {OPTIMIZER_BLOB} in {directory}")
        optimizer_raw = opt_path.read_bytes()
    return LoadedCheckpoint(directory, manifest, module_arrays, manifest.get("optimizer"), optimizer_raw)


def apply_parameters(model: nn.Module, ckpt: LoadedCheckpoint, modules: Sequence[str] | None = None) -> None:
    """Copy checkpoint blobs into the model, verifying names and shapes."""
    children = dict(model.named_children())
    for name in modules if modules is not None else ckpt.module_arrays:
        if name not in ckpt.module_arrays:
            raise CheckpointError(f"checkpoint has no blob for module {name!r}")
        if name not in children:
            raise CheckpointError(f"model has no module {name!r} to receive blob")
        module = children[name]
        state = module.state_dict()
        stored = ckpt.module_arrays[name]
        if set(stored) != set(state):
            raise CheckpointError(
                f"blob {name!r} parameters {sorted(stored)} do not match module parameters {sorted(state)}"
            )
        for param_name, arr in stored.items():
            if tuple(state[param_name].shape) != tuple(arr.shape):
                raise CheckpointError(
                    f"blob {name}.{param_name}: checkpoint shape {tuple(arr.shape)} vs model "
                    f"shape {tuple(state[param_name].shape)}"
                )
            state[param_name] = torch.from_numpy(arr).to(state[param_name].dtype)
        module.load_state_dict(state)


def restore_optimizer(optimizer: torch.optim.Optimizer, model: nn.Module, ckpt: LoadedCheckpoint) -> None:
    if ckpt.optimizer_meta is None or ckpt.optimizer_raw is None:
        raise CheckpointError(f"checkpoint {ckpt.directory} holds no optimizer state")
    params = [p for _, p in model.named_parameters()]
    if len(ckpt.optimizer_meta) != len(params):
        raise CheckpointError("optimizer state does not match the model's parameter count")
    for entry, param in zip(ckpt.optimizer_meta, params):
        if entry is None:
            continue
        state: dict = {"step": torch.tensor(float(entry["step"]))}
        for m in entry["moments"]:
            raw = ckpt.optimizer_raw[m["offset"] : m["offset"] + m["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(m["dtype"])).reshape(m["shape"]).copy()
            state[m["name"]] = torch.from_numpy(arr)
        optimizer.state[param] = state


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    final_dir: Path
    best_dir: Path
    best_metric: float
    history: tuple[dict, ...]


class _RunLog:
    def __init__(self, path: Path, append: bool):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, payload: dict) -> None:
        self._fh.write(json.dumps(payload, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _check_trainable(batch: Batch) -> None:
    if batch.split != "train":
        raise TrainingError(f"gradient step attempted on non-training split {batch.split!r}")


def _assert_finite(value: torch.Tensor, epoch: int, batch_index: int, batch: Batch) -> None:
    if not torch.isfinite(value).item():
        raise TrainingError(
            f"non-finite loss at epoch {epoch} batch {batch_index} "
            f"(patients {', '.join(batch.patient_ids[:8])}{'...' if len(batch.patient_ids) > 8 else ''})"
        )


def _stage1_components(model: FusionModel, batch: Batch, cfg: TrainConfig) -> dict[str, SupConResult]:
    a, d, s = model.embed(batch.adc, batch.dwi, batch.tabular)
    temperature = cfg.contrastive.temperature
    components: dict[str, SupConResult] = {}
    if cfg.use_intra or cfg.use_inter:
        embeddings = EmbeddingSet(a, d, s, batch.labels, batch.view_of)
        if cfg.use_intra:
            components["intra"] = loss_intra(embeddings, temperature)
        if cfg.use_inter:
            components["inter"] = loss_inter(embeddings, temperature)
    if cfg.use_fmcl:
        fused = model.fusion(a, d, s)
        if cfg.normalize_fused:
            fused = l2_normalize(fused)
        components["fmcl"] = loss_fmcl(fused, batch.labels, temperature, check_normalized=cfg.normalize_fused)
    return components


def _stage1_val_loss(model: FusionModel, split: SplitData, cfg: TrainConfig) -> float:
    """Mean of the enabled components over deterministic validation views.

    Validation views come from an epoch-independent substream, and components
    are averaged (never randomly selected) so the selection metric is
    comparable across epochs and strategies.
    """
    model.eval()
    totals, count = 0.0, 0
    with torch.no_grad():
        for indices in _batch_indices(len(split), cfg.batch_size, cfg.seed, 0, shuffle=False):
            batch = _make_views(split, indices, cfg, epoch=0, namespace=_NS_VAL_AUG)
            components = _stage1_components(model, batch, cfg)
            values = [r.value.item() for r in components.values()]
            totals += float(np.mean(values)) * len(indices)
            count += len(indices)
    model.train()
    return totals / max(count, 1)


def _config_snapshot(model_cfg: ModelConfig, cfg: TrainConfig) -> dict:
    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
            return obj.value
        return obj

    return {"model": plain(model_cfg), "train": plain(cfg)}


def _resume_state(
    model: FusionModel,
    optimizer: torch.optim.Optimizer,
    resume_from: str | Path | None,
    expected_stage: Stage,
) -> tuple[int, float | None]:
    if resume_from is None:
        return 0, None
    ckpt = load_checkpoint(resume_from)
    if ckpt.stage is not expected_stage:
        raise CheckpointError(f"cannot resume {expected_stage.value} from a {ckpt.stage.value} checkpoint")
    apply_parameters(model, ckpt)
    restore_optimizer(optimizer, model, ckpt)
    return ckpt.epoch, ckpt.best_metric


def train_stage1(
    prepared: PreparedData,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Contrastive representation learning over augmented multi-view batches."""
    if cfg.stage is not Stage.STAGE1:
        raise ConfigurationError("train_stage1 requires a stage-1 config")
    out_dir = Path(out_dir)
    model = build_model(model_cfg, prepared, cfg.fusion_mode, cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_stage1, betas=cfg.adam_betas)
    start_epoch, best = _resume_state(model, optimizer, resume_from, Stage.STAGE1)

    snapshot = _config_snapshot(model_cfg, cfg)
    log = _RunLog(out_dir / "train_log.jsonl", append=start_epoch > 0)
    (out_dir / "imputer.json").write_text(prepared.imputer.to_json() + "\n", encoding="utf-8")
    train, val = prepared.train, prepared.val
    history = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for batch_index, indices in enumerate(
                _batch_indices(len(train), cfg.batch_size, cfg.seed, epoch, shuffle=True)
            ):
                batch = _make_views(train, indices, cfg, epoch, namespace=_NS_AUG)
                _check_trainable(batch)
                components = _stage1_components(model, batch, cfg)
                total, report = combine(
                    components, cfg.contrastive.strategy, cfg.contrastive.rng_seed, epoch, batch_index
                )
                _assert_finite(total, epoch, batch_index, batch)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                log.write(
                    {"epoch": epoch, "batch": batch_index, "lr": lr, "batch_sha": batch.checksum, **report.to_dict()}
                )
            val_loss = _stage1_val_loss(model, val, cfg)
            history.append({"epoch": epoch, "val_loss": val_loss})
            log.write({"epoch": epoch, "val_loss": val_loss})
            if best is None or val_loss < best:
                best = val_loss
                save_checkpoint(
                    out_dir / "best",
                    model,
                    None,
                    stage=Stage.STAGE1,
                    epoch=epoch + 1,
                    seed=cfg.seed,
                    best_metric=best,
                    config_snapshot=snapshot,
                )
            save_checkpoint(
                out_dir / "final",
                model,
                optimizer,
                stage=Stage.STAGE1,
                epoch=epoch + 1,
                seed=cfg.seed,
                best_metric=best,
                config_snapshot=snapshot,
            )
    finally:
        log.close()
    return TrainResult(out_dir / "final", out_dir / "best", float(best), tuple(history))


def predict_scores(model: FusionModel, split: SplitData, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Class-1 probabilities and argmax predictions over one split."""
    model.eval()
    scores, preds = [], []
    with torch.no_grad():
        for indices in _batch_indices(len(split), batch_size, seed=0, epoch=0, shuffle=False):
            batch = _make_plain_batch(split, indices)
            logits = model(batch.adc, batch.dwi, batch.tabular)
            probs = torch.softmax(logits, dim=1)
            scores.append(probs[:, 1].numpy())
            preds.append(logits.argmax(dim=1).numpy())
    model.train()
    return np.concatenate(scores), np.concatenate(preds)


def evaluate_split(model: FusionModel, split: SplitData, as_split: EvalSplit) -> MetricsReport:
    scores, preds = predict_scores(model, split)
    return compute_metrics(scores, preds, split.labels, as_split)


def train_stage2(
    prepared: PreparedData,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    init_from: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Classification fine-tuning; backbones may start from a stage-1 checkpoint.

    ``init_from=None`` trains from random initialization (the no-pretraining
    ablation).  Model selection is by validation AUC.
    """
    if cfg.stage is not Stage.STAGE2:
        raise ConfigurationError("train_stage2 requires a stage-2 config")
    out_dir = Path(out_dir)
    model = build_model(model_cfg, prepared, cfg.fusion_mode, cfg.seed)
    if init_from is not None and resume_from is None:
        init = load_checkpoint(init_from)
        if init.stage is not Stage.STAGE1:
            raise CheckpointError("stage-2 initialization requires a stage-1 checkpoint")
        apply_parameters(model, init, modules=TRANSFER_MODULES)  # classifier stays fresh
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_stage2, betas=cfg.adam_betas)
    start_epoch, best = _resume_state(model, optimizer, resume_from, Stage.STAGE2)

    snapshot = _config_snapshot(model_cfg, cfg)
    log = _RunLog(out_dir / "train_log.jsonl", append=start_epoch > 0)
    (out_dir / "imputer.json").write_text(prepared.imputer.to_json() + "\n", encoding="utf-8")
    train, val = prepared.train, prepared.val
    history = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for batch_index, indices in enumerate(
                _batch_indices(len(train), cfg.batch_size, cfg.seed, epoch, shuffle=True)
            ):
                batch = _make_plain_batch(train, indices)  # no augmentation in stage 2
                _check_trainable(batch)
                logits = model(batch.adc, batch.dwi, batch.tabular)
                loss = cross_entropy(logits, batch.labels)
                _assert_finite(loss, epoch, batch_index, batch)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                log.write(
                    {
                        "epoch": epoch,
                        "batch": batch_index,
                        "lr": lr,
                        "batch_sha": batch.checksum,
                        "cross_entropy": float(loss.detach()),
                    }
                )
            val_report = evaluate_split(model, val, EvalSplit.VAL)
            history.append({"epoch": epoch, "val_auc": val_report.auc})
            log.write({"epoch": epoch, "val_auc": val_report.auc})
            if best is None or val_report.auc > best:
                best = val_report.auc
                save_checkpoint(
                    out_dir / "best",
                    model,
                    None,
                    stage=Stage.STAGE2,
                    epoch=epoch + 1,
                    seed=cfg.seed,
                    best_metric=best,
                    config_snapshot=snapshot,
                )
            save_checkpoint(
                out_dir / "final",
                model,
                optimizer,
                stage=Stage.STAGE2,
                epoch=epoch + 1,
                seed=cfg.seed,
                best_metric=best,
                config_snapshot=snapshot,
            )
    finally:
        log.close()
    return TrainResult(out_dir / "final", out_dir / "best", float(best), tuple(history))


def load_model_for_eval(ckpt_dir: str | Path, prepared: PreparedData) -> FusionModel:
    """Rebuild the model a checkpoint was trained with and load its parameters."""
    ckpt = load_checkpoint(ckpt_dir)
    cfg = ckpt.manifest.get("config", {})
    model_section = cfg.get("model", {})
    train_section = cfg.get("train", {})
    model_cfg = ModelConfig(
        backbone=ImageBackbone(model_section.get("backbone", ImageBackbone.SMALL_CNN.value)),
        channels=tuple(model_section.get("channels", (32, 64, 128, 256))),
        structured_hidden=tuple(model_section.get("structured_hidden", (150, 100, EMBED_DIM))),
        embed_dim=int(model_section.get("embed_dim", EMBED_DIM)),
        projection_mid=model_section.get("projection_mid"),
    )
    fusion_mode = FusionMode(train_section.get("fusion_mode", FusionMode.HIERARCHICAL.value))
    model = build_model(model_cfg, prepared, fusion_mode, int(ckpt.manifest.get("seed", 0)))
    apply_parameters(model, ckpt)
    return model
