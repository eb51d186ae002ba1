"""Face feature model stand-ins.

:class:`Backbone` is a small MLP over frame descriptors that outputs a
feature vector (its penultimate layer) and a 7-way probability vector.
:class:`PrecomputedExtractor` serves (features, probs) computed elsewhere.

Precomputed-feature file layout (little-endian)::

    uint32 d_f, uint32 frame_count
    per frame: uint32 id_len, id bytes (UTF-8), uint32 frame_index,
               d_f x float32 features, 7 x float32 probs
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .data import NUM_CLASSES, DatasetManifest, balanced_draw, mirror_slice
from .errors import CompatibilityError, ContractError, CoverageError, EmptyDatasetError, NumericError, ShapeError, ValidationError
from .metrics import cross_entropy, one_hot

PREFIX = "backbone."
BACKBONE_FORMAT = "affex-backbone/1"


@dataclass(frozen=True)
class BackboneConfig:
    d_f: int = 32
    hidden_dims: tuple[int, ...] = (64, 32)
    frozen_prefix_depth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.d_f < 1 or any(h < 1 for h in self.hidden_dims):
            raise ContractError("backbone widths must be positive")
        if not 0 <= self.frozen_prefix_depth < self.num_layers:
            raise ContractError(
                f"frozen_prefix_depth must be in [0, {self.num_layers - 1}] so the classifier stays trainable"
            )

    @property
    def num_layers(self) -> int:
        # hidden layers, feature layer, classifier
        return len(self.hidden_dims) + 2


@dataclass(frozen=True)
class FaceFeatureOutput:
    features: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    augment_sigma: float = 0.0
    flip_probability: float = 0.0


class Backbone:
    def __init__(self, descriptor_dim: int, config: BackboneConfig, params: nn.ParameterSet):
        self.descriptor_dim = descriptor_dim
        self.config = config
        self.params = params
        self.history: list[float] = []

    @classmethod
    def initialize(cls, descriptor_dim: int, config: BackboneConfig | None = None, seed: int = 0, zero: bool = False):
        config = config or BackboneConfig()
        rng = np.random.default_rng(seed)
        params = nn.ParameterSet()
        widths = [descriptor_dim, *config.hidden_dims, config.d_f, NUM_CLASSES]
        for j in range(config.num_layers):
            fan_in, fan_out = widths[j], widths[j + 1]
            W = np.zeros((fan_in, fan_out)) if zero else nn.glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out))
            params.add(f"{PREFIX}l{j}.W", W)
            params.add(f"{PREFIX}l{j}.b", np.zeros(fan_out))
        return cls(descriptor_dim, config, params)

    @classmethod
    def from_parameters(cls, params: nn.ParameterSet, descriptor_dim: int, config: BackboneConfig):
        sub = nn.ParameterSet()
        for name in params:
            if name.startswith(PREFIX):
                p = params.parameter(name)
                sub.add(name, p.value, p.trainable)
        return cls(descriptor_dim, config, sub)

    def freeze_prefix(self, depth: int | None = None) -> None:
        depth = self.config.frozen_prefix_depth if depth is None else depth
        for j in range(self.config.num_layers):
            for k in ("W", "b"):
                self.params.set_trainable(f"{PREFIX}l{j}.{k}", j >= depth)

    def layer_activation(self, j: int) -> str:
        return "identity" if j == self.config.num_layers - 1 else "tanh"

    def forward(self, X, params=None):
        """Map descriptors ``X [N, D]`` to ``(features, probs, backward)``.

        ``backward(d_features=None, d_probs=None, d_logits=None)`` returns
        gradients for trainable layers only, stopping at the frozen prefix.
        """
        values = self.params if params is None else params
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.descriptor_dim:
            raise ShapeError(f"backbone expects [N, {self.descriptor_dim}] descriptors, got {X.shape}")
        closures = []
        a = X
        feature_layer = len(self.config.hidden_dims)
        features = None
        for j in range(self.config.num_layers):
            a, back = nn.dense_apply(a, values[f"{PREFIX}l{j}.W"], values[f"{PREFIX}l{j}.b"], self.layer_activation(j))
            closures.append(back)
            if j == feature_layer:
                features = a
        logits = a
        probs = nn.softmax(logits)
        trainable = [self.params.is_trainable(f"{PREFIX}l{j}.W") for j in range(self.config.num_layers)]

        def backward(d_features=None, d_probs=None, d_logits=None):
            grads = {}
            d = np.zeros_like(logits) if d_logits is None else np.array(d_logits, dtype=np.float64)
            if d_probs is not None:
                d = d + nn.softmax_backward(probs, d_probs)
            first_trainable = trainable.index(True) if any(trainable) else len(trainable)
            for j in range(self.config.num_layers - 1, first_trainable - 1, -1):
                if j == feature_layer and d_features is not None:
                    d = d + d_features
                dx, dW, db = closures[j](d)
                if trainable[j]:
                    grads[f"{PREFIX}l{j}.W"] = dW
                    grads[f"{PREFIX}l{j}.b"] = db
                d = dx
            return grads

        return features, probs, backward

    def extract(self, payload) -> FaceFeatureOutput:
        payload = np.asarray(payload, dtype=np.float64)
        if payload.shape != (self.descriptor_dim,):
            raise ShapeError(f"payload length {payload.shape} != descriptor_dim {self.descriptor_dim}")
        feats, probs, _ = self.forward(payload[None])
        return FaceFeatureOutput(feats[0], probs[0])

    def extract_many(self, X) -> tuple[np.ndarray, np.ndarray]:
        feats, probs, _ = self.forward(X)
        return feats, probs


def augment(payload, rng: np.random.Generator, flip_probability: float = 0.0, augment_sigma: float = 0.0):
    """Online augmentation of descriptors (single vector or ``[..., D]`` rows).

    Each row's mirror half (see :func:`affex.data.mirror_slice`) is negated
    with probability ``flip_probability``, then Gaussian noise of scale
    ``augment_sigma`` is added.
    """
    x = np.array(payload, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    if flip_probability > 0:
        flips = rng.random(rows.shape[0]) < flip_probability
        rows[flips, mirror_slice(rows.shape[1])] *= -1.0
    if augment_sigma > 0:
        rows += augment_sigma * rng.standard_normal(rows.shape)
    return rows.reshape(x.shape)


def _expression_targets(manifest: DatasetManifest):
    descriptors = manifest.require_descriptors()
    lookup = {}
    for video in manifest.videos:
        for pos, rec in enumerate(video.frames):
            if rec.expression is not None:
                lookup[(rec.video_id, rec.frame_index)] = (descriptors[video.video_id][pos], int(rec.expression))
    return lookup


def pretrain_backbone(
    manifest: DatasetManifest, config: BackboneConfig | None = None, train_config: PretrainConfig | None = None
) -> Backbone:
    """Fit the backbone with cross-entropy on class-balanced batches.

    Every layer trains; on return the first ``frozen_prefix_depth`` layers
    are marked frozen.  ``Backbone.history`` holds the epoch-mean loss.
    """
    config = config or BackboneConfig()
    tc = train_config or PretrainConfig()
    lookup = _expression_targets(manifest)
    if not lookup:
        raise EmptyDatasetError("pretraining needs expression-annotated frames")
    rng = np.random.default_rng(tc.seed)
    backbone = Backbone.initialize(manifest.descriptor_dim, config, seed=int(rng.integers(2**31)))
    opt = nn.Optimizer(tc.optimizer, tc.learning_rate)
    steps = max(1, math.ceil(len(lookup) / tc.batch_size))
    for _ in range(tc.epochs):
        total = 0.0
        for _ in range(steps):
            keys = balanced_draw(manifest.class_index, tc.batch_size, rng)
            X = np.stack([lookup[k][0] for k in keys])
            y = one_hot([lookup[k][1] for k in keys])
            X = augment(X, rng, tc.flip_probability, tc.augment_sigma)
            _, probs, backward = backbone.forward(X)
            loss = float(cross_entropy(y, probs).mean())
            if not math.isfinite(loss):
                raise NumericError("non-finite loss during backbone pretraining")
            total += loss
            opt.step(backbone.params, backward(d_logits=(probs - y) / len(keys)))
        backbone.history.append(total / steps)
    backbone.freeze_prefix()
    return backbone


def save_backbone(path: str | Path, backbone: Backbone) -> None:
    """Parameter container with the frozen flags and architecture in its header."""
    meta = {
        "format": BACKBONE_FORMAT,
        "descriptor_dim": backbone.descriptor_dim,
        "d_f": backbone.config.d_f,
        "hidden_dims": list(backbone.config.hidden_dims),
        "frozen_prefix_depth": backbone.config.frozen_prefix_depth,
    }
    nn.save_parameters(path, backbone.params, meta)


def load_backbone(path: str | Path) -> Backbone:
    params, meta = nn.load_parameters(path)
    if meta.get("format") != BACKBONE_FORMAT:
        raise CompatibilityError(f"{path} is not a backbone file (format {meta.get('format')!r})")
    config = BackboneConfig(meta["d_f"], tuple(meta["hidden_dims"]), meta["frozen_prefix_depth"])
    return Backbone(meta["descriptor_dim"], config, params)


# --------------------------------------------------------------------------
# precomputed features


@dataclass
class PrecomputedExtractor:
    d_f: int
    table: dict[tuple[str, int], FaceFeatureOutput] = field(default_factory=dict)

    def extract(self, video_id: str, frame_index: int) -> FaceFeatureOutput:
        try:
            return self.table[(video_id, frame_index)]
        except KeyError:
            raise CoverageError([(video_id, frame_index)]) from None

    def check_coverage(self, keys: Iterable[tuple[str, int]]) -> None:
        missing = [k for k in keys if k not in self.table]
        if missing:
            raise CoverageError(missing)

    def video_arrays(self, video) -> tuple[np.ndarray, np.ndarray]:
        """``(features [n, d_f], probs [n, 7])`` for every frame of ``video``."""
        self.check_coverage((r.video_id, r.frame_index) for r in video.frames)
        outs = [self.table[(r.video_id, r.frame_index)] for r in video.frames]
        return np.stack([o.features for o in outs]), np.stack([o.probs for o in outs])


def _normalize_probs(probs: np.ndarray, key) -> np.ndarray:
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValidationError(f"frame {key}: probabilities must be finite and non-negative")
    total = probs.sum()
    if abs(total - 1.0) >= 1e-3:
        raise ValidationError(f"frame {key}: probabilities sum to {total:.6g}, off by >= 1e-3")
    return probs / total


def write_precomputed(path: str | Path, extractor: PrecomputedExtractor) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", extractor.d_f, len(extractor.table)))
        for (vid, frame), out in extractor.table.items():
            raw = vid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", frame))
            fh.write(np.asarray(out.features, dtype="<f4").tobytes())
            fh.write(np.asarray(out.probs, dtype="<f4").tobytes())


def load_precomputed(path: str | Path) -> PrecomputedExtractor:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValidationError(f"{path}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    d_f, count = struct.unpack("<II", take(8))
    table = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        vid = take(n).decode("utf-8")
        (frame,) = struct.unpack("<I", take(4))
        feats = np.frombuffer(take(4 * d_f), dtype="<f4").astype(np.float64)
        probs = np.frombuffer(take(4 * NUM_CLASSES), dtype="<f4").astype(np.float64)
        key = (vid, frame)
        if key in table:
            raise ValidationError(f"{path}: duplicate entry for {key}")
        table[key] = FaceFeatureOutput(feats, _normalize_probs(probs, key))
    if pos != len(data):
        raise ValidationError(f"{path}: {len(data) - pos} trailing bytes")
    return PrecomputedExtractor(d_f, table)


def export_features(backbone: Backbone, manifest: DatasetManifest) -> PrecomputedExtractor:
    descriptors = manifest.require_descriptors()
    table = {}
    for video in manifest.videos:
        feats, probs = backbone.extract_many(descriptors[video.video_id])
        for pos, rec in enumerate(video.frames):
            table[(rec.video_id, rec.frame_index)] = FaceFeatureOutput(feats[pos], probs[pos])
    return PrecomputedExtractor(backbone.config.d_f, table)
