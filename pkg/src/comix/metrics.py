"""Fidelity and sparsity metrics.

Score functions are callables ``score(images, target) -> confidences``
taking an ``n x H x W x C`` batch and a target class (scalar or one per
image) and returning values in [0, 1].
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from comix.bcos import BcosNetwork, network_forward
from comix.classifier import vote_shares
from comix.data import encode_batch
from comix.errors import ContractError


@dataclass
class CurveResult:
    fractions: np.ndarray
    scores: np.ndarray
    auc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "score"])
        for f, s in zip(self.fractions, self.scores):
            w.writerow([repr(float(f)), repr(float(s))])
        return buf.getvalue()


# ------------------------------------------------------------ score adapters


def backbone_score(net: BcosNetwork):
    """Sigmoid of the target logit."""

    def score(images, target):
        _, logits = network_forward(net, encode_batch(images))
        target = np.broadcast_to(np.asarray(target), (len(images),))
        z = logits[np.arange(len(images)), target]
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    return score


def comix_score(net, bank, cdfs, M=None, K=3):
    """Share of the ``M x K`` votes that go to the target class."""

    def score(images, target):
        return vote_shares(net, bank, cdfs, encode_batch(images), target, M, K)

    return score


# ------------------------------------------------------------------- curves


def _values(attribution) -> np.ndarray:
    return np.asarray(getattr(attribution, "values", attribution), dtype=np.float64)


def pixel_order(attribution) -> np.ndarray:
    """Flat pixel indices by descending attribution, ties in row-major order."""
    return np.argsort(-_values(attribution).ravel(), kind="stable")


def curve_fractions(steps: int) -> np.ndarray:
    if steps < 2:
        raise ContractError(f"steps must be >= 2, got {steps}")
    return np.arange(steps) / (steps - 1)


def pixel_masks(attribution, steps: int) -> np.ndarray:
    """``steps x H x W`` masks; mask ``i`` marks the top ``ceil(t_i * HW)`` pixels."""
    a = _values(attribution)
    hw = a.size
    counts = -(-np.arange(steps) * hw // (steps - 1))  # exact integer ceil
    rank = np.empty(hw, dtype=np.int64)
    rank[pixel_order(a)] = np.arange(hw)
    return (rank[None, :] < counts[:, None]).reshape(steps, *a.shape)


def _check_images(x, baseline, attribution):
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if baseline.ndim == 2:
        baseline = baseline[..., None]
    if x.shape != baseline.shape:
        raise ContractError(f"image {x.shape} and baseline {baseline.shape} differ in shape")
    if _values(attribution).shape != x.shape[:2]:
        raise ContractError(f"attribution {_values(attribution).shape} does not match image {x.shape[:2]}")
    return x, baseline


def _curve(score, frames, fractions, target) -> CurveResult:
    scores = np.asarray(score(frames, target), dtype=np.float64)
    return CurveResult(fractions, scores, float(np.trapezoid(scores, fractions)))


def insertion_curve(score, x, attribution, steps: int = 100, baseline=None, target=0) -> CurveResult:
    """Reveal ``x`` on top of ``baseline`` in descending attribution order."""
    x, baseline = _check_images(x, np.zeros_like(x) if baseline is None else baseline, attribution)
    masks = pixel_masks(attribution, steps)[..., None]
    frames = np.where(masks, x[None], baseline[None])
    return _curve(score, frames, curve_fractions(steps), target)


def deletion_curve(score, x, attribution, steps: int = 100, baseline=None, target=0) -> CurveResult:
    """Replace ``x`` pixels by ``baseline`` in descending attribution order."""
    x, baseline = _check_images(x, np.zeros_like(x) if baseline is None else baseline, attribution)
    masks = pixel_masks(attribution, steps)[..., None]
    frames = np.where(masks, baseline[None], x[None])
    return _curve(score, frames, curve_fractions(steps), target)


def keep_top(x, attribution, keep_fraction: float, baseline) -> np.ndarray:
    """Keep the ``ceil(keep_fraction * HW)`` most attributed pixels, baseline elsewhere."""
    x, baseline = _check_images(x, baseline, attribution)
    a = _values(attribution)
    k = int(np.ceil(keep_fraction * a.size - 1e-9))
    rank = np.empty(a.size, dtype=np.int64)
    rank[pixel_order(a)] = np.arange(a.size)
    mask = (rank < k).reshape(a.shape)[..., None]
    return np.where(mask, x, baseline)


def average_drop_increase(score, images, attributions, targets, fraction: float = 0.5, baseline=None):
    """Average drop (%) and increase (%) when the least attributed pixels go.

    ``fraction`` of the pixels (the lowest attributed) are replaced by the
    baseline.  Drop averages ``max(0, s(x) - s(x_masked)) / s(x)``; increase
    is the share of samples whose score rises.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ContractError("average drop/increase needs at least one sample")
    if not 0 < fraction < 1:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}")
    if len(attributions) != len(images):
        raise ContractError("one attribution map per image is required")
    if baseline is None:
        baseline = images.mean(axis=0)
    targets = np.broadcast_to(np.asarray(targets), (len(images),))
    masked = np.stack([keep_top(x, a, 1.0 - fraction, baseline) for x, a in zip(images, attributions)])
    if masked.shape != images.shape:
        masked = masked.reshape(images.shape)
    full = np.asarray(score(images, targets), dtype=np.float64)
    kept = np.asarray(score(masked, targets), dtype=np.float64)
    drop = np.maximum(0.0, full - kept) / np.maximum(full, 1e-12)
    return float(drop.mean() * 100.0), float((kept > full).mean() * 100.0)


# --------------------------------------------------------- sparsity / counts


def pq_index(w, p: float = 1.0, q: float = 2.0) -> float:
    """``1 - d^(1/q - 1/p) |w|_p / |w|_q``: 0 for uniform magnitudes, near 1 when sparse."""
    w = np.abs(np.asarray(w, dtype=np.float64).ravel())
    if not (0 < p <= 1 < q):
        raise ContractError(f"need 0 < p <= 1 < q, got p={p}, q={q}")
    if w.size == 0:
        raise ContractError("pq_index of an empty vector")
    norm_q = float((w**q).sum() ** (1.0 / q))
    if norm_q == 0:
        raise ContractError("pq_index is undefined for the zero vector")
    norm_p = float((w**p).sum() ** (1.0 / p))
    value = 1.0 - w.size ** (1.0 / q - 1.0 / p) * norm_p / norm_q
    # norm inequality guarantees >= 0; rounding can dip a few ulps below
    return max(value, 0.0)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise ContractError("accuracy of an empty sample")
    return float((predictions == labels).mean() * 100.0)


def confusion_matrix(a, b, class_count: int) -> np.ndarray:
    """``out[i, j]`` counts positions with ``a == i`` and ``b == j``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ContractError("label sequences differ in length")
    for seq in (a, b):
        if seq.size and (seq.min() < 0 or seq.max() >= class_count):
            raise ContractError(f"labels must lie in [0, {class_count})")
    out = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(out, (a, b), 1)
    return out


def format_report(rows: list[tuple[str, str, object]]) -> str:
    """Tab-separated ``metric  config  value`` lines."""
    lines = ["metric\tconfig\tvalue"]
    for name, config, value in rows:
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, np.ndarray):
            value = ";".join(",".join(str(int(v)) for v in row) for row in value)
        lines.append(f"{name}\t{config}\t{value}")
    return "\n".join(lines) + "\n"
