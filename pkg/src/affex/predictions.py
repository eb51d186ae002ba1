"""Per-frame prediction tables: CSV I/O, average fusion and scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import NUM_CLASSES, DatasetManifest
from .errors import ContractError, CoverageError, ValidationError
from .metrics import MetricsReport

HEADER = ["video", "frame", *(f"p{c}" for c in range(NUM_CLASSES)), "arousal", "valence"]
PROB_SUM_TOL = 1e-6


@dataclass
class PredictionTable:
    """Rows keyed by ``(video, frame)``.

    ``probs`` is ``[N, 7]``; ``arousal``/``valence`` are ``[N]`` or both None.
    """

    keys: list[tuple[str, int]]
    probs: np.ndarray
    arousal: np.ndarray | None = None
    valence: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.keys), NUM_CLASSES):
            raise ContractError(f"probs must be [{len(self.keys)}, 7], got {self.probs.shape}")
        if len(set(self.keys)) != len(self.keys):
            raise ContractError("prediction keys must be unique")
        if (self.arousal is None) != (self.valence is None):
            raise ContractError("arousal and valence must be both present or both absent")
        if self.arousal is not None:
            self.arousal = np.asarray(self.arousal, dtype=np.float64)
            self.valence = np.asarray(self.valence, dtype=np.float64)
        sums = self.probs.sum(axis=1)
        if sums.size and np.max(np.abs(sums - 1.0)) > PROB_SUM_TOL:
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValidationError(f"probabilities for {self.keys[bad]} sum to {sums[bad]!r}")

    def __len__(self):
        return len(self.keys)

    @property
    def has_va(self) -> bool:
        return self.arousal is not None

    def index(self) -> dict[tuple[str, int], int]:
        return {k: i for i, k in enumerate(self.keys)}

    def sorted(self) -> "PredictionTable":
        order = sorted(range(len(self.keys)), key=lambda i: self.keys[i])
        return self.take(order)

    def take(self, rows) -> "PredictionTable":
        rows = list(rows)
        idx = np.array(rows, dtype=np.int64)
        return PredictionTable(
            [self.keys[i] for i in rows],
            self.probs[idx] if rows else np.zeros((0, NUM_CLASSES)),
            None if self.arousal is None else self.arousal[idx],
            None if self.valence is None else self.valence[idx],
        )

    @classmethod
    def from_frames(cls, preds) -> "PredictionTable":
        """Wrap :class:`affex.training.FramePredictions`."""
        return cls(list(preds.keys), preds.probs, preds.arousal, preds.valence)


def write_predictions(table: PredictionTable, path) -> None:
    table = table.sorted()
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot write predictions to {path}: {exc}") from exc
    with fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for i, (vid, frame) in enumerate(table.keys):
            reg = ["", ""] if not table.has_va else [repr(float(table.arousal[i])), repr(float(table.valence[i]))]
            w.writerow([vid, frame, *(repr(float(p)) for p in table.probs[i]), *reg])


def read_predictions(path) -> PredictionTable:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read predictions {path}: {exc}") from exc
    keys, probs, aro, val = [], [], [], []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise ValidationError(f"{path}: unexpected header {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise ValidationError(f"{path}:{line_no}: expected {len(HEADER)} columns, got {len(row)}")
            try:
                keys.append((row[0], int(row[1])))
                probs.append([float(x) for x in row[2:9]])
                aro.append(float(row[9]) if row[9] else None)
                val.append(float(row[10]) if row[10] else None)
            except ValueError as exc:
                raise ValidationError(f"{path}:{line_no}: {exc}") from exc
    present = [a is not None for a in aro] + [v is not None for v in val]
    if any(present) and not all(present):
        raise ValidationError(f"{path}: arousal/valence must be filled on every row or on none")
    has_va = bool(present) and all(present)
    return PredictionTable(
        keys,
        np.array(probs).reshape(-1, NUM_CLASSES),
        np.array(aro) if has_va else None,
        np.array(val) if has_va else None,
    )


def fuse_predictions(tables: list[PredictionTable]) -> PredictionTable:
    """Average fusion: per-cell mean of probabilities (renormalised) and of
    arousal/valence.  Output rows follow the first table's key order."""
    if len(tables) < 2:
        raise ContractError("fusion needs at least two prediction tables")
    base = tables[0]
    ref = set(base.keys)
    for t in tables[1:]:
        keys = set(t.keys)
        if keys != ref:
            missing = sorted(ref - keys) or sorted(keys - ref)
            raise ContractError(f"prediction tables cover different frames; first missing key {missing[0]}")
    if len({t.has_va for t in tables}) != 1:
        raise ContractError("regression columns must be present in all tables or in none")
    aligned = [t.take([t.index()[k] for k in base.keys]) for t in tables]
    probs = np.mean([t.probs for t in aligned], axis=0)
    probs /= probs.sum(axis=1, keepdims=True)
    aro = val = None
    if base.has_va:
        aro = np.mean([t.arousal for t in aligned], axis=0)
        val = np.mean([t.valence for t in aligned], axis=0)
    return PredictionTable(list(base.keys), probs, aro, val)


def score_files(pred: PredictionTable, manifest: DatasetManifest, track: str) -> MetricsReport:
    """Score a prediction table against the annotated frames of ``manifest``."""
    if track not in ("expression", "va"):
        raise ValidationError(f"track must be 'expression' or 'va', got {track!r}")
    if track == "va" and not pred.has_va:
        raise ValidationError("predictions carry no arousal/valence columns")
    index = pred.index()
    if track == "expression":
        truth = [(r.video_id, r.frame_index, int(r.expression)) for r in manifest.iter_frames() if r.expression is not None]
    else:
        truth = [(r.video_id, r.frame_index, r.va) for r in manifest.iter_frames() if r.va is not None]
    missing = [(v, f) for v, f, _ in truth if (v, f) not in index]
    if missing:
        raise CoverageError(missing)
    rows = np.array([index[(v, f)] for v, f, _ in truth], dtype=np.int64)
    if track == "expression":
        return MetricsReport.build(
            pred_labels=np.argmax(pred.probs[rows], axis=1),
            true_labels=np.array([t for _, _, t in truth]),
        )
    return MetricsReport.build(
        pred_va=np.stack([pred.arousal[rows], pred.valence[rows]], axis=1),
        true_va=np.array([(va.arousal, va.valence) for _, _, va in truth]),
    )
