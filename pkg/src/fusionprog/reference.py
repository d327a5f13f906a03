"""Naive reference implementations and numerical checking utilities.

Everything here is written as plain double/triple loops over Python floats,
deliberately sharing no code with the vectorized implementations it checks.
The ``verify_*`` suites back the ``verify`` CLI command; the test suite reuses
the same oracles and adds frozen hand-computed values on top.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch


# ---------------------------------------------------------------------------
# Naive contrastive losses (direct summation, no max-subtraction)
# ---------------------------------------------------------------------------


def naive_supcon_pairwise(x, y, labels, temperature: float, exclude_self: bool) -> tuple[float, bool]:
    """Anchor-by-anchor direct evaluation; returns (loss, degenerate)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    labels = list(labels)
    per_anchor = []
    for i in range(x.shape[0]):
        candidates = [k for k in range(y.shape[0]) if not (exclude_self and k == i)]
        positives = [p for p in candidates if labels[p] == labels[i]]
        if not positives:
            continue
        denom = 0.0
        for k in candidates:
            denom += math.exp(float(np.dot(x[i], y[k])) / temperature)
        total = 0.0
        for p in positives:
            total += math.log(math.exp(float(np.dot(x[i], y[p])) / temperature) / denom)
        per_anchor.append(-total / len(positives))
    if not per_anchor:
        return 0.0, True
    return sum(per_anchor) / len(per_anchor), False


def naive_bidirectional_pair(x, y, labels, temperature: float) -> tuple[float, bool]:
    """Cross-modality pair loss pooling anchors from both directions."""
    sums = 0.0
    count = 0
    for a, b in ((x, y), (y, x)):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        for i in range(a.shape[0]):
            positives = [p for p in range(b.shape[0]) if labels[p] == labels[i]]
            if not positives:
                continue
            denom = sum(math.exp(float(np.dot(a[i], b[k])) / temperature) for k in range(b.shape[0]))
            total = sum(
                math.log(math.exp(float(np.dot(a[i], b[p])) / temperature) / denom) for p in positives
            )
            sums += -total / len(positives)
            count += 1
    if count == 0:
        return 0.0, True
    return sums / count, False


def naive_loss_intra(a, d, s, labels, temperature: float) -> float:
    return sum(naive_supcon_pairwise(m, m, labels, temperature, exclude_self=True)[0] for m in (a, d, s))


def naive_loss_inter(a, d, s, labels, temperature: float) -> float:
    return (
        naive_bidirectional_pair(a, d, labels, temperature)[0]
        + naive_bidirectional_pair(d, s, labels, temperature)[0]
        + naive_bidirectional_pair(s, a, labels, temperature)[0]
    )


def naive_cross_entropy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for i, row in enumerate(logits):
        probs = [math.exp(v) for v in row]
        total += -math.log(probs[int(labels[i])] / sum(probs))
    return total / len(logits)


def naive_hierarchical_fuse(a, d, s, w1, b1, w2, b2) -> np.ndarray:
    """Explicit two-step matmul + ReLU oracle for hierarchical fusion."""
    a, d, s = (np.asarray(m, dtype=np.float64) for m in (a, d, s))
    out = []
    for i in range(a.shape[0]):
        first_in = np.concatenate([a[i], d[i]])
        h = np.maximum(0.0, np.asarray(w1, dtype=np.float64) @ first_in + np.asarray(b1, dtype=np.float64))
        second_in = np.concatenate([h, s[i]])
        out.append(np.maximum(0.0, np.asarray(w2, dtype=np.float64) @ second_in + np.asarray(b2, dtype=np.float64)))
    return np.stack(out)


# ---------------------------------------------------------------------------
# Naive metrics
# ---------------------------------------------------------------------------


def pairwise_auc(scores, labels) -> float:
    """O(n^2) rank statistic: wins + half-ties over all (positive, negative) pairs."""
    scores = [float(v) for v in scores]
    labels = [int(v) for v in labels]
    pos = [s for s, t in zip(scores, labels) if t == 1]
    neg = [s for s, t in zip(scores, labels) if t == 0]
    if not pos or not neg:
        raise ValueError("pairwise AUC needs both classes")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def naive_macro_f1(preds, labels) -> float:
    """Confusion-matrix macro-F1 with the zero-division-gives-zero convention."""
    f1s = []
    for cls in (0, 1):
        tp = sum(1 for p, t in zip(preds, labels) if p == cls and t == cls)
        fp = sum(1 for p, t in zip(preds, labels) if p == cls and t != cls)
        fn = sum(1 for p, t in zip(preds, labels) if p != cls and t == cls)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return sum(f1s) / len(f1s)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. one tensor."""
    grad = np.zeros(tensor.numel())
    flat = tensor.detach().view(-1)  # view, so writes reach the live tensor
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(fn())
            flat[i] = orig - step
            minus = float(fn())
            flat[i] = orig
            grad[i] = (plus - minus) / (2 * step)
    return grad.reshape(tuple(tensor.shape))


def max_relative_gradient_error(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative disagreement between autograd and central differences.

    The denominator is floored so that dead units (both gradients ~0) do not
    produce spurious blowups.
    """
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    value = fn()
    value.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(tuple(t.shape)) if t.grad is None else t.grad.detach().cpu().numpy().copy()
        numeric = finite_difference_gradient(fn, t, step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


# ---------------------------------------------------------------------------
# Verification suites (backing the `verify` CLI command)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _random_view_batch(rng: np.random.Generator, n: int, d: int) -> tuple[torch.Tensor, np.ndarray]:
    mat = rng.normal(size=(n, d))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    labels = rng.integers(0, 2, size=n)
    return torch.tensor(mat, dtype=torch.float64), labels


def verify_losses(n_trials: int = 1000, seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    """Vectorized contrastive losses vs. the naive loops on random batches."""
    from .encoders import EmbeddingSet
    from .losses import loss_fmcl, loss_inter, loss_intra, supcon_pairwise, cross_entropy

    rng = np.random.default_rng(seed)
    start = time.monotonic()
    worst = {"pairwise": 0.0, "intra": 0.0, "inter": 0.0, "fmcl": 0.0, "cross_entropy": 0.0}
    for _ in range(n_trials):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 9))
        temperature = float(rng.uniform(0.05, 1.0))
        a, labels = _random_view_batch(rng, n, d)
        d_mat, _ = _random_view_batch(rng, n, d)
        s_mat, _ = _random_view_batch(rng, n, d)

        got = supcon_pairwise(a, a, labels, temperature).item()
        want, _ = naive_supcon_pairwise(a.numpy(), a.numpy(), labels, temperature, exclude_self=True)
        worst["pairwise"] = max(worst["pairwise"], abs(got - want))

        emb = EmbeddingSet(a, d_mat, s_mat, torch.tensor(labels), torch.arange(n))
        got = loss_intra(emb, temperature).item()
        want = naive_loss_intra(a.numpy(), d_mat.numpy(), s_mat.numpy(), labels, temperature)
        worst["intra"] = max(worst["intra"], abs(got - want))

        got = loss_inter(emb, temperature).item()
        want = naive_loss_inter(a.numpy(), d_mat.numpy(), s_mat.numpy(), labels, temperature)
        worst["inter"] = max(worst["inter"], abs(got - want))

        got = loss_fmcl(s_mat, labels, temperature).item()
        want, _ = naive_supcon_pairwise(s_mat.numpy(), s_mat.numpy(), labels, temperature, exclude_self=True)
        worst["fmcl"] = max(worst["fmcl"], abs(got - want))

        logits = torch.tensor(rng.normal(size=(n, 2)), dtype=torch.float64)
        ce_labels = rng.integers(0, 2, size=n)
        got = float(cross_entropy(logits, ce_labels))
        want = naive_cross_entropy(logits.numpy(), ce_labels)
        worst["cross_entropy"] = max(worst["cross_entropy"], abs(got - want))
    elapsed = time.monotonic() - start

    results = [
        CheckResult(
            f"loss oracle equivalence: {name}",
            err <= tol,
            f"max |vectorized - naive| = {err:.3e} over {n_trials} batches (tol {tol:g})",
        )
        for name, err in worst.items()
    ]
    results.append(CheckResult("loss oracle runtime", elapsed < 60.0, f"{elapsed:.1f}s (budget 60s)"))
    return results


def _tiny_model_setup(seed: int = 0):
    """A full float64 model small enough for exhaustive finite differences."""
    from .encoders import (
        ImageEncoderConfig,
        ProjectionConfig,
        StructuredEncoderConfig,
        ProjectionHead,
        SmallCnnEncoder,
        StructuredEncoder,
        l2_normalize,
    )
    from .fusion import FusionConfig, FusionMode, ModalityFusion

    torch.manual_seed(seed)
    embed = 8
    img_cfg = ImageEncoderConfig(in_channels=4, channels=(6, 12))
    adc_enc = SmallCnnEncoder(img_cfg).double()
    dwi_enc = SmallCnnEncoder(img_cfg).double()
    str_enc = StructuredEncoder(StructuredEncoderConfig(in_dim=3, hidden_dims=(10, 9, embed))).double()
    adc_proj = ProjectionHead(ProjectionConfig((12, 10, embed))).double()
    dwi_proj = ProjectionHead(ProjectionConfig((12, 10, embed))).double()
    fusion = ModalityFusion(FusionConfig(mode=FusionMode.HIERARCHICAL, embed_dim=embed)).double()
    classifier = torch.nn.Linear(embed, 2).double()
    # Finite differences re-evaluate the closure many times; eval mode keeps
    # batch-norm statistics frozen so the function stays deterministic.
    for mod in (adc_enc, dwi_enc, str_enc, adc_proj, dwi_proj, fusion, classifier):
        mod.eval()

    rng = np.random.default_rng(seed)
    n_views = 6
    adc_in = torch.tensor(rng.normal(size=(n_views, 4, 8, 8)))
    dwi_in = torch.tensor(rng.normal(size=(n_views, 4, 8, 8)))
    str_in = torch.tensor(rng.normal(size=(n_views, 3)))
    labels = np.array([0, 1, 0, 1, 1, 0])

    modules = {
        "adc_encoder": adc_enc,
        "dwi_encoder": dwi_enc,
        "structured_encoder": str_enc,
        "adc_projection": adc_proj,
        "dwi_projection": dwi_proj,
        "fusion": fusion,
        "classifier": classifier,
    }

    def embeddings():
        a = l2_normalize(adc_proj(adc_enc(adc_in)))
        d = l2_normalize(dwi_proj(dwi_enc(dwi_in)))
        s = l2_normalize(str_enc(str_in))
        return a, d, s

    return modules, embeddings, labels


def verify_gradients(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    """Autograd vs. central finite differences for every loss and parameter."""
    from .encoders import EmbeddingSet, l2_normalize
    from .losses import cross_entropy, loss_fmcl, loss_inter, loss_intra

    start = time.monotonic()
    results = []
    temperature = 0.2

    # Losses w.r.t. raw (pre-normalization) embedding inputs.
    rng = np.random.default_rng(seed)
    raw = {name: torch.tensor(rng.normal(size=(6, 8)), requires_grad=True) for name in "ads"}
    labels = torch.tensor([0, 1, 0, 1, 1, 0])
    view_of = torch.arange(6)

    def emb():
        return EmbeddingSet(
            l2_normalize(raw["a"]), l2_normalize(raw["d"]), l2_normalize(raw["s"]), labels, view_of
        )

    loss_fns = {
        "intra": lambda: loss_intra(emb(), temperature).value,
        "inter": lambda: loss_inter(emb(), temperature).value,
        "fmcl": lambda: loss_fmcl(l2_normalize(raw["a"] + raw["d"] + raw["s"]), labels, temperature).value,
    }
    for name, fn in loss_fns.items():
        err = max_relative_gradient_error(fn, list(raw.values()))
        results.append(
            CheckResult(f"gradient vs embeddings: {name}", err < tol, f"max rel err {err:.2e} (tol {tol:g})")
        )

    # Losses w.r.t. every encoder/fusion/classifier parameter on a tiny model.
    modules, embeddings, labels_np = _tiny_model_setup(seed)
    labels_t = torch.tensor(labels_np)

    def full_chain(loss_name: str):
        def compute():
            a, d, s = embeddings()
            fused = modules["fusion"](a, d, s)
            if loss_name == "intra":
                return loss_intra(EmbeddingSet(a, d, s, labels_t, torch.arange(len(labels_np))), temperature).value
            if loss_name == "inter":
                return loss_inter(EmbeddingSet(a, d, s, labels_t, torch.arange(len(labels_np))), temperature).value
            if loss_name == "fmcl":
                return loss_fmcl(l2_normalize(fused), labels_np, temperature).value
            return cross_entropy(modules["classifier"](fused), labels_np)

        return compute

    for loss_name in ("intra", "inter", "fmcl", "cross_entropy"):
        params = [p for name in modules for p in modules[name].parameters()]
        err = max_relative_gradient_error(full_chain(loss_name), params)
        results.append(
            CheckResult(
                f"gradient vs parameters: {loss_name}",
                err < tol,
                f"max rel err {err:.2e} over {sum(p.numel() for p in params)} parameters (tol {tol:g})",
            )
        )

    elapsed = time.monotonic() - start
    results.append(CheckResult("gradient suite runtime", elapsed < 300.0, f"{elapsed:.1f}s (budget 300s)"))
    return results


def verify_metrics(n_trials: int = 400, seed: int = 0) -> list[CheckResult]:
    """Rank-based AUC and macro-F1 vs. their brute-force counterparts."""
    from .metrics import auc, macro_f1

    rng = np.random.default_rng(seed)
    auc_exact = True
    f1_exact = True
    for _ in range(n_trials):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # Quantized scores force plenty of ties.
        scores = np.round(rng.normal(size=n), 1)
        if auc(scores, labels) != pairwise_auc(scores, labels):
            auc_exact = False
        preds = rng.integers(0, 2, size=n)
        if macro_f1(preds, labels) != naive_macro_f1(preds, labels):
            f1_exact = False
    return [
        CheckResult("auc vs pairwise oracle", auc_exact, f"exact match on {n_trials} random score sets"),
        CheckResult("macro_f1 vs confusion oracle", f1_exact, f"exact match on {n_trials} random prediction sets"),
    ]


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "losses": verify_losses,
    "gradients": verify_gradients,
    "metrics": verify_metrics,
}


def run_suites(names: Iterable[str]) -> tuple[list[CheckResult], bool]:
    results: list[CheckResult] = []
    for name in names:
        results.extend(SUITES[name]())
    return results, all(r.passed for r in results)
