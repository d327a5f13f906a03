"""Supervised contrastive losses, stage-2 cross-entropy, and loss-combination strategies.

The pairwise loss treats every row as a view; for an anchor view, candidates
are all rows of the opposite matrix (minus the anchor's own slot in the
same-matrix case) and positives are the same-class candidates.  Anchors with
no positive candidate are dropped from the average; a batch where every
anchor is dropped yields zero with a degenerate flag.  All log-sum-exp
reductions subtract the row maximum, so extreme similarity/temperature
ratios stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np
import torch

from .encoders import EmbeddingSet, assert_normalized
from .errors import ConfigurationError

# Substream namespace for loss selection, keyed (seed, epoch[, batch], ns).
_NS_CHOICE = 77

COMPONENT_ORDER = ("intra", "inter", "fmcl")


class LossStrategy(str, Enum):
    AVERAGE_ALL = "average_all"
    RANDOM_PER_EPOCH = "random_per_epoch"
    RANDOM_PER_MINIBATCH = "random_per_minibatch"


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    strategy: LossStrategy = LossStrategy.RANDOM_PER_MINIBATCH
    rng_seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.rng_seed < 0:
            raise ConfigurationError("rng_seed must be non-negative")


@dataclass(frozen=True)
class SupConResult:
    """Scalar loss plus bookkeeping about anchor survival."""

    value: torch.Tensor
    n_anchors: int
    degenerate: bool

    def item(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class LossReport:
    """Per-batch component losses and the strategy's combination of them."""

    l_intra: float | None
    l_inter: float | None
    l_fmcl: float | None
    chosen: str
    total: float

    def to_dict(self) -> dict:
        return {
            "l_intra": self.l_intra,
            "l_inter": self.l_inter,
            "l_fmcl": self.l_fmcl,
            "chosen": self.chosen,
            "total": self.total,
        }


def _as_label_tensor(labels, n: int, device) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(labels), device=device)
    if t.ndim != 1 or len(t) != n:
        raise ValueError(f"labels must be a length-{n} vector, got shape {tuple(t.shape)}")
    return t


def _per_anchor_losses(
    x: torch.Tensor,
    y: torch.Tensor,
    labels_x: torch.Tensor,
    labels_y: torch.Tensor,
    temperature: float,
    exclude_self: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor contrastive terms and the surviving-anchor mask."""
    logits = (x @ y.T) / temperature
    candidates = torch.ones_like(logits, dtype=torch.bool)
    if exclude_self:
        candidates.fill_diagonal_(False)
    positives = (labels_x[:, None] == labels_y[None, :]) & candidates

    masked_logits = logits.masked_fill(~candidates, float("-inf"))
    log_normalizer = torch.logsumexp(masked_logits, dim=1)
    log_prob = logits - log_normalizer[:, None]

    n_pos = positives.sum(dim=1)
    survivors = n_pos > 0
    pos_sum = log_prob.masked_fill(~positives, 0.0).sum(dim=1)
    per_anchor = -pos_sum / n_pos.clamp(min=1)
    return per_anchor, survivors


def _validate_pair(
    x: torch.Tensor, y: torch.Tensor, temperature: float, exclude_self: bool, check_normalized: bool = True
) -> None:
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"view matrices must be 2-d with equal width, got {tuple(x.shape)} and {tuple(y.shape)}")
    if min(x.shape[0], y.shape[0]) < 2:
        raise ValueError("contrastive loss needs at least 2 views per matrix")
    if exclude_self and x.shape[0] != y.shape[0]:
        raise ValueError("self-exclusion only makes sense for equal-length view matrices")
    if check_normalized:
        assert_normalized(x, what="anchor rows")
        assert_normalized(y, what="candidate rows")


def supcon_pairwise(
    x: torch.Tensor,
    y: torch.Tensor,
    labels,
    temperature: float,
    exclude_self: bool | None = None,
    check_normalized: bool = True,
) -> SupConResult:
    """Supervised contrastive loss with anchors from ``x`` and candidates from ``y``.

    ``exclude_self`` defaults to True exactly when ``x is y`` (same-modality
    views contrasted against themselves); views at equal indices in distinct
    matrices are legitimate candidates and positives.  ``check_normalized``
    exists only for the unnormalized-fused-embedding variant.
    """
    if exclude_self is None:
        exclude_self = x is y
    _validate_pair(x, y, temperature, exclude_self, check_normalized)
    labels_t = _as_label_tensor(labels, x.shape[0], x.device)
    per_anchor, survivors = _per_anchor_losses(x, y, labels_t, labels_t, temperature, exclude_self)
    n = int(survivors.sum())
    if n == 0:
        return SupConResult(x.new_zeros(()), 0, True)
    return SupConResult(per_anchor[survivors].mean(), n, False)


def _bidirectional_pair(x: torch.Tensor, y: torch.Tensor, labels: torch.Tensor, temperature: float) -> SupConResult:
    """Cross-modality pair term with anchors drawn symmetrically from both sides."""
    fwd, fwd_mask = _per_anchor_losses(x, y, labels, labels, temperature, exclude_self=False)
    bwd, bwd_mask = _per_anchor_losses(y, x, labels, labels, temperature, exclude_self=False)
    n = int(fwd_mask.sum() + bwd_mask.sum())
    if n == 0:
        return SupConResult(x.new_zeros(()), 0, True)
    total = fwd[fwd_mask].sum() + bwd[bwd_mask].sum()
    return SupConResult(total / n, n, False)


def loss_intra(embeddings: EmbeddingSet, temperature: float) -> SupConResult:
    """Sum of same-modality view losses over the three modalities."""
    terms = [
        supcon_pairwise(m, m, embeddings.labels, temperature, exclude_self=True)
        for m in (embeddings.a, embeddings.d, embeddings.s)
    ]
    value = terms[0].value + terms[1].value + terms[2].value
    return SupConResult(value, sum(t.n_anchors for t in terms), all(t.degenerate for t in terms))


def loss_inter(embeddings: EmbeddingSet, temperature: float) -> SupConResult:
    """Sum of cross-modality pair losses over (A,D), (D,S), (S,A)."""
    labels = _as_label_tensor(embeddings.labels, embeddings.n_views, embeddings.a.device)
    for mat in (embeddings.a, embeddings.d, embeddings.s):
        _validate_pair(mat, mat, temperature, exclude_self=False)
    pairs = (
        (embeddings.a, embeddings.d),
        (embeddings.d, embeddings.s),
        (embeddings.s, embeddings.a),
    )
    terms = [_bidirectional_pair(x, y, labels, temperature) for x, y in pairs]
    value = terms[0].value + terms[1].value + terms[2].value
    return SupConResult(value, sum(t.n_anchors for t in terms), all(t.degenerate for t in terms))


def loss_fmcl(fused: torch.Tensor, labels, temperature: float, check_normalized: bool = True) -> SupConResult:
    """Same-modality contrastive loss over the fused view embeddings."""
    return supcon_pairwise(fused, fused, labels, temperature, exclude_self=True, check_normalized=check_normalized)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax of the true class (max-subtraction stable)."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (n, n_classes), got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    labels_t = _as_label_tensor(labels, logits.shape[0], logits.device).long()
    log_normalizer = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, labels_t[:, None]).squeeze(1)
    return (log_normalizer - picked).mean()


def choose_component(enabled: tuple[str, ...], strategy: LossStrategy, seed: int, epoch: int, batch_index: int) -> str:
    """Deterministic loss pick from keyed substreams; AVERAGE_ALL returns 'average'."""
    if strategy is LossStrategy.AVERAGE_ALL:
        return "average"
    if strategy is LossStrategy.RANDOM_PER_EPOCH:
        key = (seed, epoch, _NS_CHOICE)
    else:
        key = (seed, epoch, batch_index, _NS_CHOICE)
    rng = np.random.default_rng(np.random.SeedSequence(key))
    return enabled[int(rng.integers(len(enabled)))]


def combine(
    components: Mapping[str, SupConResult],
    strategy: LossStrategy,
    seed: int,
    epoch: int,
    batch_index: int,
) -> tuple[torch.Tensor, LossReport]:
    """Combine computed component losses into the batch objective.

    Returns the differentiable total plus a plain-float report for logging.
    """
    enabled = tuple(name for name in COMPONENT_ORDER if name in components)
    if not enabled:
        raise ValueError("no loss components enabled")
    chosen = choose_component(enabled, strategy, seed, epoch, batch_index)
    if chosen == "average":
        total = sum(components[name].value for name in enabled) / len(enabled)
    else:
        total = components[chosen].value

    def maybe(name: str) -> float | None:
        return float(components[name].value.detach()) if name in components else None

    report = LossReport(
        l_intra=maybe("intra"),
        l_inter=maybe("inter"),
        l_fmcl=maybe("fmcl"),
        chosen=chosen,
        total=float(total.detach()),
    )
    return total, report
