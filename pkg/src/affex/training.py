"""Training loop, checkpoints, evaluation and prediction."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import nn
from .backbone import (
    Backbone,
    BackboneConfig,
    PrecomputedExtractor,
    PretrainConfig,
    augment,
    pretrain_backbone,
)
from .data import NUM_CLASSES, DatasetManifest, balanced_draw
from .errors import CompatibilityError, ConfigurationError, NumericError, ValidationError
from .metrics import LossWeights, MetricsReport
from .predictions import PredictionTable, write_predictions
from .model import FusionModel, ModelDims, ModelVariant, Targets, batch_loss, build_variant

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "affex-checkpoint/1"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    model_variant: int = 6
    block_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    augment_sigma: float = 0.05
    flip_probability: float = 0.5
    # model and backbone sizes
    d_f: int = 32
    lstm_hidden: int = 32
    lstm_depth: int = 1
    head_hidden: tuple[int, int] = (64, 32)
    backbone_hidden: tuple[int, ...] = (64, 32)
    frozen_prefix_depth: int = 2
    pretrain_epochs: int = 30
    pretrain_learning_rate: float = 1e-3

    def __post_init__(self):
        if self.optimizer.lower() not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be SGD or Adam, got {self.optimizer!r}")
        if not self.learning_rate > 0 or not self.pretrain_learning_rate > 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.block_size < 1:
            raise ConfigurationError("batch_size, epochs and block_size must be positive")
        if self.model_variant not in range(1, 7):
            raise ConfigurationError(f"model_variant must be 1..6, got {self.model_variant}")
        if self.model_variant % 2 == 0 and self.batch_size < 2:
            raise ConfigurationError("multitask variants need batch_size >= 2 for the CCC loss")
        if self.augment_sigma < 0 or not 0 <= self.flip_probability <= 1:
            raise ConfigurationError("augment_sigma must be >= 0 and flip_probability in [0, 1]")
        if self.lstm_depth not in (1, 2):
            raise ConfigurationError("lstm_depth must be 1 or 2")

    @property
    def variant(self) -> ModelVariant:
        return ModelVariant.from_id(self.model_variant, self.block_size)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.d_f, self.lstm_hidden, self.lstm_depth, tuple(self.head_hidden))

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.d_f, tuple(self.backbone_hidden), self.frozen_prefix_depth)

    @property
    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.pretrain_epochs,
            batch_size=self.batch_size,
            learning_rate=self.pretrain_learning_rate,
            optimizer=self.optimizer,
            seed=self.seed,
            augment_sigma=self.augment_sigma,
            flip_probability=self.flip_probability,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, LossWeights):
                value = [value.w1, value.w2, value.w3, value.w4]
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(data)
        if "weights" in kw and not isinstance(kw["weights"], LossWeights):
            kw["weights"] = LossWeights(*kw["weights"])
        for key in ("head_hidden", "backbone_hidden"):
            if key in kw:
                kw[key] = tuple(int(x) for x in kw[key])
        return cls(**kw)

    # ``key = value`` text form, one TrainConfig field per line

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        data = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigurationError(f"config line {line_no}: expected 'key = value'")
            if key not in types:
                raise ConfigurationError(f"config line {line_no}: unknown key {key!r}")
            try:
                data[key] = _parse_value(key, value, str(types[key]))
            except ValueError as exc:
                raise ConfigurationError(f"config line {line_no}: bad value for {key}: {exc}") from None
        return cls.from_dict(data)


def _parse_value(key, value, type_name):
    if key == "weights":
        return LossWeights.parse(value)
    if "tuple" in type_name:
        return tuple(int(v) for v in value.replace(",", " ").split())
    if type_name.startswith("int"):
        return int(value)
    if type_name.startswith("float"):
        return float(value)
    return value


def load_config(path) -> TrainConfig:
    return TrainConfig.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class EpochRecord:
    epoch: int
    total: float
    terms: dict[str, float]
    validation: MetricsReport | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [r.total for r in self.epochs]


@dataclass
class Checkpoint:
    model: FusionModel
    config: TrainConfig

    @property
    def variant(self) -> ModelVariant:
        return self.model.variant

    def meta(self) -> dict:
        m = self.model
        return {
            "format": CHECKPOINT_FORMAT,
            "variant": m.variant.id,
            "block_size": m.variant.s,
            "descriptor_dim": m.descriptor_dim,
            "dims": {
                "d_f": m.dims.d_f,
                "lstm_hidden": m.dims.lstm_hidden,
                "lstm_depth": m.dims.lstm_depth,
                "head_hidden": list(m.dims.head_hidden),
            },
            "backbone": None
            if m.backbone_config is None
            else {
                "d_f": m.backbone_config.d_f,
                "hidden_dims": list(m.backbone_config.hidden_dims),
                "frozen_prefix_depth": m.backbone_config.frozen_prefix_depth,
            },
            "config": self.config.to_dict(),
        }

    def to_bytes(self) -> bytes:
        return nn.dump_parameters(self.model.params, self.meta())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        params, meta = nn.parse_parameters(data)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CompatibilityError(f"not a model checkpoint (format {meta.get('format')!r})")
        variant = ModelVariant.from_id(meta["variant"], meta["block_size"])
        d = meta["dims"]
        dims = ModelDims(d["d_f"], d["lstm_hidden"], d["lstm_depth"], tuple(d["head_hidden"]))
        bb = meta["backbone"]
        bb_config = None if bb is None else BackboneConfig(bb["d_f"], tuple(bb["hidden_dims"]), bb["frozen_prefix_depth"])
        model = FusionModel(variant, dims, params, meta["descriptor_dim"], bb_config)
        return cls(model, TrainConfig.from_dict(meta["config"]))


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint.to_bytes())


def load_checkpoint(path, expect_variant: int | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expect_variant is not None and ckpt.variant.id != expect_variant:
        raise CompatibilityError(f"checkpoint holds variant {ckpt.variant.id}, not variant {expect_variant}")
    return ckpt


def checkpoint_roundtrip(checkpoint: Checkpoint) -> Checkpoint:
    return Checkpoint.from_bytes(checkpoint.to_bytes())


# --------------------------------------------------------------------------
# dataset flattening


@dataclass
class _Frames:
    """All frames of a manifest stacked into flat arrays (video order kept)."""

    keys: list[tuple[str, int]]
    offsets: np.ndarray  # per-row offset of its video's first row
    positions: np.ndarray  # per-row position within its video
    labels: np.ndarray  # -1 when unannotated
    va: np.ndarray  # [N, 2] (arousal, valence); NaN when unannotated
    descriptors: np.ndarray | None = None
    feats: np.ndarray | None = None
    probs: np.ndarray | None = None

    def block_rows(self, rows: np.ndarray, s: int) -> np.ndarray:
        """``[len(rows), s]`` flat row indices of each row's block, clamped at its video start."""
        rel = self.positions[rows, None] + np.arange(-s + 1, 1)[None, :]
        return self.offsets[rows, None] + np.maximum(rel, 0)


def _flatten(manifest: DatasetManifest, extractor: PrecomputedExtractor | None) -> _Frames:
    keys, offsets, positions, labels, va = [], [], [], [], []
    descs, feats, probs = [], [], []
    start = 0
    for video in manifest.videos:
        for pos, rec in enumerate(video.frames):
            keys.append((rec.video_id, rec.frame_index))
            offsets.append(start)
            positions.append(pos)
            labels.append(-1 if rec.expression is None else int(rec.expression))
            va.append((np.nan, np.nan) if rec.va is None else (rec.va.arousal, rec.va.valence))
        if extractor is None:
            descs.append(manifest.require_descriptors()[video.video_id])
        else:
            f, p = extractor.video_arrays(video)
            feats.append(f)
            probs.append(p)
        start += len(video)
    frames = _Frames(keys, np.array(offsets), np.array(positions), np.array(labels), np.array(va, dtype=np.float64))
    if extractor is None:
        frames.descriptors = np.concatenate(descs)
    else:
        frames.feats = np.concatenate(feats)
        frames.probs = np.concatenate(probs)
    return frames


def _forward_rows(model: FusionModel, frames: _Frames, rows: np.ndarray, rng=None, config: TrainConfig | None = None):
    """Model forward for target rows; augmentation applies only with ``rng``."""
    variant = model.variant
    if model.uses_backbone:
        if variant.uses_blocks:
            X = frames.descriptors[frames.block_rows(rows, variant.s)]
        else:
            X = frames.descriptors[rows]
        if rng is not None and config is not None:
            X = augment(X, rng, config.flip_probability, config.augment_sigma)
        return model.forward(X)
    if variant.uses_blocks:
        br = frames.block_rows(rows, variant.s)
        out, back = model.forward_features(
            frames.probs[rows], frames.feats[rows], frames.probs[br], frames.feats[br]
        )
    else:
        out, back = model.forward_features(frames.probs[rows], frames.feats[rows])
    return out, lambda **up: back(**up)[0]


def _resolve_extractor(model: FusionModel, extractor):
    if model.uses_backbone:
        return None
    if not isinstance(extractor, PrecomputedExtractor):
        raise CompatibilityError("checkpoint was trained on precomputed features; supply the feature file")
    if extractor.d_f != model.dims.d_f:
        raise CompatibilityError(f"feature width {extractor.d_f} != checkpoint d_f {model.dims.d_f}")
    return extractor


# --------------------------------------------------------------------------
# training


def train(
    manifest: DatasetManifest,
    val_manifest: DatasetManifest | None,
    config: TrainConfig,
    backbone: Backbone | PrecomputedExtractor | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Train one variant with class-balanced batches and the weighted loss.

    ``backbone`` may be a pretrained :class:`Backbone` (its frozen prefix is
    respected), a :class:`PrecomputedExtractor`, or None to pretrain one here
    with the config's backbone settings.
    """
    variant = config.variant
    frames_extractor = backbone if isinstance(backbone, PrecomputedExtractor) else None

    labels_present = any(rec.expression is not None for rec in manifest.iter_frames())
    if not labels_present:
        raise ConfigurationError("training manifest has no expression annotations")
    if variant.multitask and not manifest.has_va():
        raise ConfigurationError(f"variant {variant.id} is multitask but the manifest has no valence-arousal annotations")

    if backbone is None:
        backbone = pretrain_backbone(manifest, config.backbone_config, config.pretrain_config)
    if isinstance(backbone, Backbone):
        if backbone.descriptor_dim != manifest.descriptor_dim:
            raise CompatibilityError(
                f"backbone expects descriptor_dim {backbone.descriptor_dim}, manifest has {manifest.descriptor_dim}"
            )
        dims = dataclasses.replace(config.dims, d_f=backbone.config.d_f)
        model = build_variant(variant.id, dims, variant.s, seed=config.seed, backbone=backbone)
    else:
        dims = dataclasses.replace(config.dims, d_f=backbone.d_f)
        model = build_variant(variant.id, dims, variant.s, seed=config.seed, descriptor_dim=manifest.descriptor_dim)

    frames = _flatten(manifest, frames_extractor)
    eligible = frames.labels >= 0
    if variant.multitask:
        eligible &= ~np.isnan(frames.va[:, 0])
    rows = np.flatnonzero(eligible)
    class_index = {c: rows[frames.labels[rows] == c] for c in range(NUM_CLASSES)}

    rng = np.random.default_rng(config.seed)
    opt = nn.Optimizer(config.optimizer, config.learning_rate)
    steps = max(1, math.ceil(rows.size / config.batch_size))
    history = TrainHistory()
    for epoch in range(config.epochs):
        sums: dict[str, float] = {}
        total = 0.0
        for step in range(steps):
            batch = np.array(balanced_draw(class_index, config.batch_size, rng))
            out, backward = _forward_rows(model, frames, batch, rng, config)
            targets = Targets(frames.labels[batch], frames.va[batch, 0], frames.va[batch, 1])
            loss, terms, upstream = batch_loss(out, targets, config.weights, variant.multitask)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}: terms={terms}")
            opt.step(model.params, backward(**upstream))
            total += loss
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
        record = EpochRecord(epoch, total / steps, {k: v / steps for k, v in sums.items()})
        ckpt = Checkpoint(model, config)
        if val_manifest is not None:
            record.validation = evaluate(ckpt, val_manifest, frames_extractor)
        history.epochs.append(record)
        log.info("epoch %d loss %.5f", epoch, record.total)
    return Checkpoint(model, config), history


# --------------------------------------------------------------------------
# inference


@dataclass
class FramePredictions:
    keys: list[tuple[str, int]]
    probs: np.ndarray
    arousal: np.ndarray | None
    valence: np.ndarray | None


def predict_frames(checkpoint: Checkpoint, manifest: DatasetManifest, extractor=None, chunk: int = 1024) -> FramePredictions:
    model = checkpoint.model
    if model.descriptor_dim is not None and model.uses_backbone and model.descriptor_dim != manifest.descriptor_dim:
        raise CompatibilityError(
            f"checkpoint expects descriptor_dim {model.descriptor_dim}, manifest has {manifest.descriptor_dim}"
        )
    extractor = _resolve_extractor(model, extractor)
    frames = _flatten(manifest, extractor)
    if model.uses_backbone:
        # backbone outputs once per frame; blocks then index into them
        feats, probs = model.backbone.extract_many(frames.descriptors)
        frames = dataclasses.replace(frames, feats=feats, probs=probs, descriptors=None)
    n = len(frames.keys)
    probs_out = np.empty((n, NUM_CLASSES))
    aro = np.empty(n) if model.variant.multitask else None
    val = np.empty(n) if model.variant.multitask else None
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        if model.variant.uses_blocks:
            br = frames.block_rows(rows, model.variant.s)
            out, _ = model.forward_features(frames.probs[rows], frames.feats[rows], frames.probs[br], frames.feats[br])
        else:
            out, _ = model.forward_features(frames.probs[rows], frames.feats[rows])
        probs_out[rows] = out.class_probs
        if aro is not None:
            aro[rows] = out.arousal
            val[rows] = out.valence
    return FramePredictions(frames.keys, probs_out, aro, val)


def report_from_predictions(preds: FramePredictions, manifest: DatasetManifest, tracks=("expression", "va")) -> MetricsReport:
    truth = {(r.video_id, r.frame_index): r for r in manifest.iter_frames()}
    index = {k: i for i, k in enumerate(preds.keys)}
    kw = {}
    if "expression" in tracks:
        keys = [k for k in preds.keys if truth[k].expression is not None]
        if keys:
            rows = np.array([index[k] for k in keys])
            kw["pred_labels"] = np.argmax(preds.probs[rows], axis=1)
            kw["true_labels"] = np.array([int(truth[k].expression) for k in keys])
    if "va" in tracks and preds.arousal is not None:
        keys = [k for k in preds.keys if truth[k].va is not None]
        if len(keys) >= 2:
            rows = np.array([index[k] for k in keys])
            kw["pred_va"] = np.stack([preds.arousal[rows], preds.valence[rows]], axis=1)
            kw["true_va"] = np.array([(truth[k].va.arousal, truth[k].va.valence) for k in keys])
    return MetricsReport.build(**kw)


def evaluate(checkpoint: Checkpoint, manifest: DatasetManifest, extractor=None) -> MetricsReport:
    """Frame-by-frame metrics over every annotated frame of ``manifest``."""
    return report_from_predictions(predict_frames(checkpoint, manifest, extractor), manifest)


def predict(checkpoint: Checkpoint, manifest: DatasetManifest, out_path, extractor=None) -> int:
    """Write one CSV row per frame, sorted by (video, frame).  Returns the row count."""
    table = PredictionTable.from_frames(predict_frames(checkpoint, manifest, extractor))
    write_predictions(table, out_path)
    return len(table)
