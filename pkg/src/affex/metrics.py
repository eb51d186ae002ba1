"""Training losses and challenge metrics.

Losses come with analytic gradients; metrics are plain functions over
whole evaluation sets.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import NUM_CLASSES
from .errors import ContractError, RangeError, ValidationError

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 0.4
    w3: float = 0.4
    w4: float = 0.2

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3, self.w4)
        if any(w < 0 for w in ws):
            raise ContractError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ContractError("at least one loss weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [p for p in text.replace(",", " ").split() if p]
        if len(parts) != 4:
            raise ValidationError(f"weights need four numbers w1,w2,w3,w4, got {text!r}")
        return cls(*(float(p) for p in parts))

    def __str__(self):
        return ",".join(repr(w) for w in (self.w1, self.w2, self.w3, self.w4))


# --------------------------------------------------------------------------
# losses


def cross_entropy(y, p):
    """Categorical cross-entropy ``-sum(y * log(clamp(p)))`` per row.

    ``y`` must be one-hot.  Works on a single 7-vector or a batch of rows.
    The gradient with respect to the pre-softmax logits is ``p - y``.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ContractError(f"cross_entropy: target shape {y.shape} != prediction shape {p.shape}")
    one_hot = np.all((y == 0) | (y == 1), axis=-1) & (y.sum(axis=-1) == 1)
    if not np.all(one_hot):
        raise ContractError("cross_entropy target must be one-hot")
    return -(y * np.log(np.clip(p, PROB_CLAMP, 1.0))).sum(axis=-1)


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def ccc(x, y) -> float:
    """Concordance correlation coefficient with population statistics.

    Returns 1 when both sequences are the same constant (zero denominator).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ContractError(f"ccc needs two sequences of equal length >= 2, got {x.size} and {y.size}")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = np.mean(dx * dy)
    denom = np.mean(dx * dx) + np.mean(dy * dy) + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return float(np.clip(2.0 * cov / denom, -1.0, 1.0))


def ccc_loss(pred, target):
    """``1 - ccc(pred, target)`` over a mini-batch, with its gradient
    with respect to ``pred``."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ContractError(f"ccc_loss: {x.size} predictions vs {y.size} targets")
    if x.size < 2:
        raise ContractError("ccc_loss needs a batch of at least 2")
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = np.mean(dx * dy)
    denom = np.mean(dx * dx) + np.mean(dy * dy) + (mx - my) ** 2
    if denom == 0.0:
        return 0.0, np.zeros(n)
    value = 2.0 * cov / denom
    d_denom = 2.0 * (dx + (mx - my)) / n
    d_ccc = 2.0 * (dy / n * denom - cov * d_denom) / denom**2
    return 1.0 - value, -d_ccc


def mse_loss(pred5, target5):
    """Summed squared error over the 5 components; batches are averaged.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``pred5``.
    """
    p = np.asarray(pred5, dtype=np.float64)
    t = np.asarray(target5, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] != 5:
        raise ContractError(f"mse_loss needs matching [..., 5] arrays, got {p.shape} and {t.shape}")
    r = p - t
    if p.ndim == 1:
        return float((r * r).sum()), 2.0 * r
    batch = p.shape[0]
    return float((r * r).sum(axis=1).mean()), 2.0 * r / batch


def derive_mse_target(a, v):
    """``[a, v, m, a - m, v - m]`` with ``m = (a + v) / 2``.

    Accepts scalars or equal-shape arrays; the trailing axis of the result
    has length 5.
    """
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.abs(a) > 1.0) or np.any(np.abs(v) > 1.0):
        raise RangeError("arousal and valence must lie in [-1, 1]")
    m = (a + v) / 2.0
    return np.stack([a, v, m, a - m, v - m], axis=-1)


def total_loss(class_loss, ccc_arousal_loss=0.0, ccc_valence_loss=0.0, mse_l=0.0, weights=None, multitask=True):
    w = weights or LossWeights()
    if not multitask:
        return w.w1 * class_loss
    return w.w1 * class_loss + w.w2 * ccc_arousal_loss + w.w3 * ccc_valence_loss + w.w4 * mse_l


# --------------------------------------------------------------------------
# metrics


def confusion_matrix(pred_labels, true_labels) -> np.ndarray:
    pred = np.asarray(pred_labels, dtype=np.int64).ravel()
    true = np.asarray(true_labels, dtype=np.int64).ravel()
    if pred.size != true.size or pred.size < 1:
        raise ContractError(f"need equal, non-empty label sequences, got {pred.size} and {true.size}")
    if pred.min() < 0 or true.min() < 0 or pred.max() >= NUM_CLASSES or true.max() >= NUM_CLASSES:
        raise ContractError("labels must lie in [0, 6]")
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    return conf


def classification_metrics(pred_labels, true_labels):
    """``(accuracy, macro_f1, confusion)``; ``confusion[i, j]`` counts true
    ``i`` predicted ``j``.  Macro F1 averages over all 7 classes, an absent
    class (no true, no predicted instance) scoring 0."""
    conf = confusion_matrix(pred_labels, true_labels)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(NUM_CLASSES), where=denom > 0)
    accuracy = float(tp.sum() / conf.sum())
    return accuracy, float(f1.mean()), conf


def expression_score(accuracy: float, macro_f1: float) -> float:
    return 0.67 * macro_f1 + 0.33 * accuracy


def va_score(ccc_arousal: float, ccc_valence: float) -> float:
    return (ccc_arousal + ccc_valence) / 2


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary.  Fields of a track that was not scored are None."""

    accuracy: float | None = None
    macro_f1: float | None = None
    expression_score: float | None = None
    ccc_arousal: float | None = None
    ccc_valence: float | None = None
    va_score: float | None = None
    confusion: np.ndarray | None = None
    num_frames: int = 0

    @classmethod
    def build(cls, pred_labels=None, true_labels=None, pred_va=None, true_va=None) -> "MetricsReport":
        """``pred_va``/``true_va`` are ``[N, 2]`` arrays of (arousal, valence)."""
        kw = {}
        n = 0
        if pred_labels is not None:
            acc, f1, conf = classification_metrics(pred_labels, true_labels)
            kw.update(accuracy=acc, macro_f1=f1, expression_score=expression_score(acc, f1), confusion=conf)
            n = len(pred_labels)
        if pred_va is not None:
            pa, ta = np.asarray(pred_va), np.asarray(true_va)
            ca, cv = ccc(pa[:, 0], ta[:, 0]), ccc(pa[:, 1], ta[:, 1])
            kw.update(ccc_arousal=ca, ccc_valence=cv, va_score=va_score(ca, cv))
            n = max(n, len(pa))
        return cls(num_frames=n, **kw)

    @property
    def has_expression(self) -> bool:
        return self.accuracy is not None

    @property
    def has_va(self) -> bool:
        return self.va_score is not None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "confusion":
                continue
            value = getattr(self, f.name)
            lines.append(f"{f.name}={'' if value is None else repr(value)}")
        if self.confusion is not None:
            lines.append("confusion:")
            lines.extend(",".join(str(int(c)) for c in row) for row in self.confusion)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kw = {}
        rows = []
        in_conf = False
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line == "confusion:":
                in_conf = True
                continue
            if in_conf:
                rows.append([int(c) for c in line.split(",")])
                continue
            key, _, value = line.partition("=")
            if key == "num_frames":
                kw[key] = int(value)
            else:
                kw[key] = float(value) if value else None
        if rows:
            kw["confusion"] = np.array(rows, dtype=np.int64)
        return cls(**kw)
