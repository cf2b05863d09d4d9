"""Overlap metrics, the dice + BCE training loss, and metrics reports.

Hard metrics work on binary masks; two empty masks count as perfect agreement
(dice = IoU = 1). Metrics are stored in [0, 1] and only scaled by 100 for
display.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import BinaryMask
from .tensor import DimensionError, Tensor, custom_op

BCE_EPS = 1e-7
DEFAULT_THRESHOLD = 0.5


def _mask_array(m) -> np.ndarray:
    if isinstance(m, BinaryMask):
        return m.pixels.astype(bool)
    if isinstance(m, Tensor):
        m = m.data
    return np.asarray(m).astype(bool)


def confusion_counts(pred, truth) -> tuple[int, int, int]:
    """Return (both, pred_only, truth_only) pixel counts."""
    p, t = _mask_array(pred), _mask_array(truth)
    if p.shape != t.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {t.shape}")
    both = int(np.count_nonzero(p & t))
    return both, int(np.count_nonzero(p)) - both, int(np.count_nonzero(t)) - both


def dice_score(pred, truth) -> float:
    both, p_only, t_only = confusion_counts(pred, truth)
    total = 2 * both + p_only + t_only
    return 1.0 if total == 0 else 2 * both / total


def iou(pred, truth) -> float:
    both, p_only, t_only = confusion_counts(pred, truth)
    union = both + p_only + t_only
    return 1.0 if union == 0 else both / union


def binarize(prob, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Foreground where probability >= threshold. Shared by eval and predict."""
    arr = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (arr >= threshold).astype(np.uint8)


# --- soft objectives -------------------------------------------------------

def _soft_inputs(pred, truth):
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    t = _mask_array(truth).astype(p.dtype)
    if p.size != t.size:
        raise DimensionError(f"prediction has {p.size} pixels, truth has {t.size}")
    return p, t.reshape(p.shape)


def soft_dice(pred, truth, smooth: float = 0.0) -> float:
    """(2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth) over all pixels."""
    p, t = _soft_inputs(pred, truth)
    if p.min() < 0 or p.max() > 1:
        raise ValueError("soft_dice: probabilities must lie in [0, 1]")
    p = p.astype(np.float64)
    den = p.sum() + t.sum() + smooth
    if den == 0:
        return 1.0
    return float((2 * (p * t).sum() + smooth) / den)


def bce(pred, truth, eps: float = BCE_EPS) -> float:
    p, t = _soft_inputs(pred, truth)
    pc = np.clip(p.astype(np.float64), eps, 1 - eps)
    return float(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean())


def _flat_batch(pred: Tensor, truth, what: str):
    p = pred.data
    t = _mask_array(truth).astype(p.dtype).reshape(p.shape)
    if p.min() < 0 or p.max() > 1:
        raise ValueError(f"{what}: probabilities must lie in [0, 1]")
    n = p.shape[0] if p.ndim == 4 else 1
    return p.reshape(n, -1), t.reshape(n, -1)


def _dice_term(pf, tf, smooth):
    """1 - mean per-image soft dice, and its gradient w.r.t. ``pf``."""
    n = pf.shape[0]
    inter = (pf * tf).sum(axis=1)
    den = pf.sum(axis=1) + tf.sum(axis=1) + smooth
    value = 1 - ((2 * inter + smooth) / den).mean()
    d_dice = (2 * tf * den[:, None] - (2 * inter + smooth)[:, None]) / den[:, None] ** 2
    return value, -d_dice / n


def _bce_term(pf, tf, eps):
    pc = np.clip(pf, eps, 1 - eps)
    value = -(tf * np.log(pc) + (1 - tf) * np.log(1 - pc)).mean()
    inside = (pf > eps) & (pf < 1 - eps)
    return value, np.where(inside, (pc - tf) / (pc * (1 - pc)), 0) / pf.size


def _loss_op(kind, pred, terms):
    p = pred.data
    value = sum(v for v, _ in terms)
    grad = sum(g for _, g in terms)

    def bwd(g):
        return ((grad * g).reshape(p.shape).astype(p.dtype),)

    return custom_op(kind, (pred,), np.asarray(value, dtype=p.dtype), bwd)


def dice_loss(pred: Tensor, truth, smooth: float = 1.0) -> Tensor:
    """Differentiable 1 - soft dice, averaged over the images of a batch."""
    pf, tf = _flat_batch(pred, truth, "dice_loss")
    return _loss_op("dice", pred, [_dice_term(pf, tf, smooth)])


def bce_loss(pred: Tensor, truth, eps: float = BCE_EPS) -> Tensor:
    """Differentiable mean binary cross-entropy over all pixels."""
    pf, tf = _flat_batch(pred, truth, "bce_loss")
    return _loss_op("bce", pred, [_bce_term(pf, tf, eps)])


def combined_loss(pred: Tensor, truth, smooth: float = 1.0, eps: float = BCE_EPS) -> Tensor:
    """Differentiable (1 - soft dice) + mean BCE.

    For a batch ``pred[N, 1, H, W]`` the dice term is averaged over images and
    BCE over all pixels. ``truth`` may be a mask, an array of masks, or an
    array shaped like ``pred``.
    """
    pf, tf = _flat_batch(pred, truth, "combined_loss")
    return _loss_op("dice_bce", pred, [_dice_term(pf, tf, smooth), _bce_term(pf, tf, eps)])


# --- reports -----------------------------------------------------------------

@dataclass
class ImageMetrics:
    id: str
    dice: float
    iou: float
    loss: float


@dataclass
class MetricsReport:
    """Per-image and mean dice / IoU / loss for one dataset split.

    Serialized field order: id, dice, iou, loss.
    """

    per_image: list[ImageMetrics] = field(default_factory=list)
    split: str = ""

    FORMAT_VERSION = 1

    def add(self, id: str, dice: float, iou: float, loss: float) -> None:
        self.per_image.append(ImageMetrics(id, float(dice), float(iou), float(loss)))

    def _mean(self, attr: str) -> float:
        if not self.per_image:
            raise ValueError("report has no images")
        return float(np.mean([getattr(m, attr) for m in self.per_image]))

    @property
    def mean_dice(self) -> float:
        return self._mean("dice")

    @property
    def mean_iou(self) -> float:
        return self._mean("iou")

    @property
    def mean_loss(self) -> float:
        return self._mean("loss")

    def validate(self, tol: float = 1e-12) -> None:
        """Check ranges and the per-image identity iou = dice / (2 - dice)."""
        for m in self.per_image:
            if not (0 <= m.dice <= 1 and 0 <= m.iou <= 1):
                raise ValueError(f"{m.id}: metric outside [0, 1]")
            if abs(m.iou - m.dice / (2 - m.dice)) > tol:
                raise ValueError(f"{m.id}: iou {m.iou} inconsistent with dice {m.dice}")
            if not np.isfinite(m.loss):
                raise ValueError(f"{m.id}: non-finite loss")

    def to_text(self) -> str:
        lines = [f"# metrics report v{self.FORMAT_VERSION} split={self.split or '-'} (dice/iou x100)",
                 f"{'id':<32} {'dice':>8} {'iou':>8} {'loss':>10}"]
        for m in self.per_image:
            lines.append(f"{m.id:<32} {100 * m.dice:8.2f} {100 * m.iou:8.2f} {m.loss:10.5f}")
        lines.append(f"{'MEAN':<32} {100 * self.mean_dice:8.2f} {100 * self.mean_iou:8.2f} {self.mean_loss:10.5f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "version": self.FORMAT_VERSION,
            "split": self.split,
            "fields": ["id", "dice", "iou", "loss"],
            "per_image": [[m.id, m.dice, m.iou, m.loss] for m in self.per_image],
            "mean": {"dice": self.mean_dice, "iou": self.mean_iou, "loss": self.mean_loss},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rep = cls(split=d.get("split", ""))
        for row in d["per_image"]:
            rep.add(*row)
        return rep

    def save(self, directory: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        txt, js = directory / f"{stem}.txt", directory / f"{stem}.json"
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return txt, js
