"""Frames, videos, frame blocks, manifest I/O, balanced sampling and a
synthetic dataset generator.

Manifest files are JSON Lines.  The first line is a header
``{"descriptor_dim": N}``; every following line describes one frame::

    {"video": "v000", "frame": 12, "payload": "payloads/v000/000012.bin",
     "expr": 4, "valence": 0.71, "arousal": 0.43}

``expr``, ``valence`` and ``arousal`` may be missing or null.  Payload paths
are relative to the manifest's directory.  A payload file is a little-endian
``uint32`` length ``N`` followed by ``N`` ``float32`` values.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    EmptyDatasetError,
    InvalidWindowError,
    ManifestParseError,
    RangeError,
    ValidationError,
)

NUM_CLASSES = 7


class ExpressionLabel(enum.IntEnum):
    NEUTRAL = 0
    ANGRY = 1
    DISGUST = 2
    FEAR = 3
    HAPPY = 4
    SAD = 5
    SURPRISE = 6

    @property
    def display_name(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_name(cls, name: str) -> "ExpressionLabel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValidationError(f"unknown expression name {name!r}") from None


@dataclass(frozen=True)
class VAAnnotation:
    valence: float
    arousal: float

    def __post_init__(self):
        for name in ("valence", "arousal"):
            value = getattr(self, name)
            if not (-1.0 <= value <= 1.0):
                raise RangeError(f"{name}={value} outside [-1, 1]")


@dataclass(frozen=True)
class FrameRecord:
    video_id: str
    frame_index: int
    payload_ref: str
    expression: ExpressionLabel | None = None
    va: VAAnnotation | None = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValidationError(f"negative frame index {self.frame_index}")


@dataclass(frozen=True)
class VideoSequence:
    video_id: str
    frames: tuple[FrameRecord, ...]

    def __post_init__(self):
        prev = -1
        for rec in self.frames:
            if rec.video_id != self.video_id:
                raise ValidationError(f"frame of {rec.video_id!r} placed in video {self.video_id!r}")
            if rec.frame_index <= prev:
                raise ValidationError(
                    f"video {self.video_id!r}: frame index {rec.frame_index} after {prev} is not increasing"
                )
            prev = rec.frame_index

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class FrameBlock:
    """The current frame plus its ``s - 1`` predecessors, oldest first."""

    frames: tuple[FrameRecord, ...]
    s: int

    @property
    def current(self) -> FrameRecord:
        return self.frames[-1]


def build_class_index(videos: Iterable[VideoSequence]) -> dict[ExpressionLabel, tuple[tuple[str, int], ...]]:
    index: dict[ExpressionLabel, list[tuple[str, int]]] = {c: [] for c in ExpressionLabel}
    for video in videos:
        for rec in video.frames:
            if rec.expression is not None:
                index[rec.expression].append((rec.video_id, rec.frame_index))
    return {c: tuple(v) for c, v in index.items()}


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    descriptor_dim: int
    videos: tuple[VideoSequence, ...]
    class_index: Mapping[ExpressionLabel, tuple[tuple[str, int], ...]] = field(default=None)
    root: Path | None = None
    # video_id -> float64 array [len(video), descriptor_dim]; None when payloads were not read
    descriptors: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.descriptor_dim < 1:
            raise ValidationError("descriptor_dim must be >= 1")
        if self.class_index is None:
            object.__setattr__(self, "class_index", build_class_index(self.videos))

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (
            self.descriptor_dim == other.descriptor_dim
            and self.videos == other.videos
            and dict(self.class_index) == dict(other.class_index)
        )

    @property
    def num_frames(self) -> int:
        return sum(len(v) for v in self.videos)

    def video(self, video_id: str) -> VideoSequence:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)

    def iter_frames(self):
        for v in self.videos:
            yield from v.frames

    def has_va(self) -> bool:
        return any(rec.va is not None for rec in self.iter_frames())

    def require_descriptors(self) -> Mapping[str, np.ndarray]:
        if self.descriptors is None:
            raise ContractError("manifest was loaded without payloads")
        return self.descriptors


# --------------------------------------------------------------------------
# payload and manifest files


def write_payload(path: str | Path, vector) -> None:
    arr = np.asarray(vector, dtype="<f4").ravel()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.size))
        fh.write(arr.tobytes())


def read_payload(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValidationError(f"{path}: truncated payload header")
    (n,) = struct.unpack_from("<I", data)
    if len(data) != 4 + 4 * n:
        raise ValidationError(f"{path}: payload declares {n} floats but holds {(len(data) - 4) / 4:g}")
    return np.frombuffer(data, dtype="<f4", offset=4).astype(np.float64)


_FILTERS = ("expression", "va", "both", "none")


def _keep(rec: FrameRecord, require: str) -> bool:
    if require == "expression":
        return rec.expression is not None
    if require == "va":
        return rec.va is not None
    if require == "both":
        return rec.expression is not None and rec.va is not None
    return True


def _parse_frame(obj, line_no: int) -> FrameRecord:
    if not isinstance(obj, dict):
        raise ManifestParseError(line_no, "expected a JSON object")
    try:
        video = obj["video"]
        frame = obj["frame"]
        payload = obj["payload"]
    except KeyError as exc:
        raise ManifestParseError(line_no, f"missing key {exc.args[0]!r}") from None
    if not isinstance(video, str) or not isinstance(payload, str):
        raise ManifestParseError(line_no, "'video' and 'payload' must be strings")
    if isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
        raise ManifestParseError(line_no, f"'frame' must be a non-negative integer, got {frame!r}")

    expr = obj.get("expr")
    if expr is not None:
        if isinstance(expr, bool) or not isinstance(expr, int) or not 0 <= expr < NUM_CLASSES:
            raise ValidationError(f"line {line_no}: expression {expr!r} outside [0, 6]")
        expr = ExpressionLabel(expr)

    valence, arousal = obj.get("valence"), obj.get("arousal")
    va = None
    if (valence is None) != (arousal is None):
        raise ValidationError(f"line {line_no}: valence and arousal must be given together")
    if valence is not None:
        for name, value in (("valence", valence), ("arousal", arousal)):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValidationError(f"line {line_no}: {name} {value!r} is not a finite number")
            if not -1.0 <= value <= 1.0:
                raise RangeError(f"line {line_no}: {name}={value} outside [-1, 1]")
        va = VAAnnotation(float(valence), float(arousal))
    return FrameRecord(video, frame, payload, expr, va)


def load_manifest(path: str | Path, require: str = "none", load_payloads: bool = True) -> DatasetManifest:
    """Read a manifest, keeping only frames that satisfy ``require``.

    ``require`` is one of ``expression``, ``va``, ``both`` or ``none``.  With
    ``load_payloads`` every kept frame's payload is read and its length checked
    against the header's ``descriptor_dim``.
    """
    if require not in _FILTERS:
        raise ContractError(f"require must be one of {_FILTERS}, got {require!r}")
    path = Path(path)
    root = path.parent
    descriptor_dim = None
    grouped: dict[str, list[FrameRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(line_no, f"invalid JSON ({exc.msg})") from None
            if descriptor_dim is None:
                dim = obj.get("descriptor_dim") if isinstance(obj, dict) else None
                if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
                    raise ManifestParseError(line_no, "first line must be a header {\"descriptor_dim\": N} with N >= 1")
                descriptor_dim = dim
                continue
            rec = _parse_frame(obj, line_no)
            frames = grouped.setdefault(rec.video_id, [])
            if frames and rec.frame_index <= frames[-1].frame_index:
                raise ValidationError(
                    f"line {line_no}: frame {rec.frame_index} of video {rec.video_id!r} is not after frame {frames[-1].frame_index}"
                )
            frames.append(rec)
    if descriptor_dim is None:
        raise ManifestParseError(1, "empty manifest (no header)")

    videos = []
    for vid, frames in grouped.items():
        kept = tuple(r for r in frames if _keep(r, require))
        if kept:
            videos.append(VideoSequence(vid, kept))
    if not videos:
        raise EmptyDatasetError(f"{path}: no frames left after filtering with require={require!r}")

    descriptors = None
    if load_payloads:
        descriptors = {}
        for video in videos:
            arr = np.empty((len(video), descriptor_dim))
            for i, rec in enumerate(video.frames):
                vec = read_payload(root / rec.payload_ref)
                if vec.size != descriptor_dim:
                    raise ValidationError(
                        f"{rec.payload_ref}: payload length {vec.size} != descriptor_dim {descriptor_dim}"
                    )
                arr[i] = vec
            arr.setflags(write=False)
            descriptors[video.video_id] = arr
    return DatasetManifest(descriptor_dim, tuple(videos), root=root, descriptors=descriptors)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"descriptor_dim": manifest.descriptor_dim}) + "\n")
        for rec in manifest.iter_frames():
            obj = {
                "video": rec.video_id,
                "frame": rec.frame_index,
                "payload": rec.payload_ref,
                "expr": None if rec.expression is None else int(rec.expression),
                "valence": None if rec.va is None else rec.va.valence,
                "arousal": None if rec.va is None else rec.va.arousal,
            }
            fh.write(json.dumps(obj) + "\n")


# --------------------------------------------------------------------------
# blocks


def block_positions(k: int, s: int) -> np.ndarray:
    """Positions of the block ending at position ``k``, clamped at 0."""
    if s < 1:
        raise InvalidWindowError(f"window length must be >= 1, got {s}")
    return np.maximum(np.arange(k - s + 1, k + 1), 0)


def build_blocks(video: VideoSequence, s: int) -> list[FrameBlock]:
    if s < 1:
        raise InvalidWindowError(f"window length must be >= 1, got {s}")
    if len(video) == 0:
        raise ContractError(f"video {video.video_id!r} is empty")
    frames = video.frames
    return [FrameBlock(tuple(frames[p] for p in block_positions(k, s)), s) for k in range(len(frames))]


# --------------------------------------------------------------------------
# balanced sampling


def balanced_draw(
    class_index: Mapping[int, Sequence[tuple[str, int]]], n: int, rng: np.random.Generator
) -> list[tuple[str, int]]:
    """Draw ``n`` keys: a class uniformly among non-empty ones, then a frame
    uniformly within it.  Sampling is with replacement."""
    classes = [c for c in sorted(class_index) if len(class_index[c]) > 0]
    if not classes:
        raise EmptyDatasetError("no annotated frames to sample from")
    picks = rng.integers(0, len(classes), size=n)
    out = []
    for p in picks:
        members = class_index[classes[p]]
        out.append(members[int(rng.integers(0, len(members)))])
    return out


def balanced_sample(manifest: DatasetManifest, batch_size: int, seed: int) -> list[tuple[str, int]]:
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    return balanced_draw(manifest.class_index, batch_size, np.random.default_rng(seed))


# --------------------------------------------------------------------------
# synthetic data

# (valence, arousal) per class
VA_PROTOTYPES = {
    ExpressionLabel.NEUTRAL: (0.0, 0.0),
    ExpressionLabel.ANGRY: (-0.7, 0.6),
    ExpressionLabel.DISGUST: (-0.6, 0.35),
    ExpressionLabel.FEAR: (-0.4, 0.7),
    ExpressionLabel.HAPPY: (0.8, 0.5),
    ExpressionLabel.SAD: (-0.6, -0.3),
    ExpressionLabel.SURPRISE: (0.2, 0.8),
}

_PROTOTYPE_SEED = 20200305


def mirror_slice(descriptor_dim: int) -> slice:
    """Coordinates negated by the flip augmentation (the trailing half)."""
    return slice(descriptor_dim - descriptor_dim // 2, descriptor_dim)


def class_prototypes(descriptor_dim: int) -> np.ndarray:
    """Fixed unit-norm prototypes, one row per class.

    Prototypes live on the coordinates outside :func:`mirror_slice`, so the
    flip augmentation leaves the class signal intact.  They are orthonormal
    whenever that support has at least 7 coordinates.  The table depends only
    on ``descriptor_dim``, never on a dataset seed, so separately generated
    train and validation sets agree.
    """
    support = descriptor_dim - descriptor_dim // 2
    rng = np.random.default_rng(_PROTOTYPE_SEED + descriptor_dim)
    raw = rng.standard_normal((support, NUM_CLASSES))
    if support >= NUM_CLASSES:
        q, r = np.linalg.qr(raw)
        raw = q * np.sign(np.diag(r))
    protos = np.zeros((NUM_CLASSES, descriptor_dim))
    protos[:, :support] = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return protos


@dataclass(frozen=True)
class SyntheticConfig:
    num_videos: int = 30
    frames_per_video: int = 100
    descriptor_dim: int = 16
    class_separation: float = 10.0
    noise_sigma: float = 0.3
    seed: int = 0
    min_segment: int = 16
    max_segment: int = 48
    classes: tuple[int, ...] = tuple(range(NUM_CLASSES))
    va_noise: float = 0.1
    va_smoothing: float = 0.9
    video_prefix: str = "v"

    def __post_init__(self):
        for name in ("num_videos", "frames_per_video", "descriptor_dim", "min_segment", "max_segment"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.class_separation <= 0:
            raise ContractError("class_separation must be > 0")
        if self.noise_sigma < 0 or self.va_noise < 0:
            raise ContractError("noise levels must be non-negative")
        if self.max_segment < self.min_segment:
            raise ContractError("max_segment < min_segment")
        if not self.classes or any(not 0 <= c < NUM_CLASSES for c in self.classes):
            raise ContractError("classes must be a non-empty subset of 0..6")
        if not 0 <= self.va_smoothing < 1:
            raise ContractError("va_smoothing must lie in [0, 1)")


def _class_trajectory(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    labels = np.empty(cfg.frames_per_video, dtype=np.int64)
    pos, prev = 0, None
    while pos < cfg.frames_per_video:
        length = int(rng.integers(cfg.min_segment, cfg.max_segment + 1))
        choices = [c for c in cfg.classes if c != prev] or list(cfg.classes)
        prev = choices[int(rng.integers(0, len(choices)))]
        labels[pos : pos + length] = prev
        pos += length
    return labels


def generate_synthetic(config: SyntheticConfig, out_dir: str | Path) -> DatasetManifest:
    """Write a synthetic dataset under ``out_dir`` (``manifest.jsonl`` plus
    ``payloads/``) and return it loaded."""
    cfg = config
    out_dir = Path(out_dir)
    (out_dir / "payloads").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    protos = class_prototypes(cfg.descriptor_dim) * cfg.class_separation
    rho = cfg.va_smoothing
    innov = math.sqrt(1.0 - rho * rho)

    videos = []
    width = max(3, len(str(cfg.num_videos - 1)))
    for v in range(cfg.num_videos):
        vid = f"{cfg.video_prefix}{v:0{width}d}"
        (out_dir / "payloads" / vid).mkdir(exist_ok=True)
        labels = _class_trajectory(cfg, rng)
        desc = protos[labels] + cfg.noise_sigma * rng.standard_normal((cfg.frames_per_video, cfg.descriptor_dim))
        eps = rng.standard_normal((cfg.frames_per_video, 2))
        ar = np.empty_like(eps)
        ar[0] = eps[0]
        for t in range(1, cfg.frames_per_video):
            ar[t] = rho * ar[t - 1] + innov * eps[t]
        frames = []
        for k in range(cfg.frames_per_video):
            ref = f"payloads/{vid}/{k:06d}.bin"
            write_payload(out_dir / ref, desc[k])
            label = ExpressionLabel(int(labels[k]))
            val, aro = VA_PROTOTYPES[label]
            va = VAAnnotation(
                float(np.clip(val + cfg.va_noise * ar[k, 0], -1.0, 1.0)),
                float(np.clip(aro + cfg.va_noise * ar[k, 1], -1.0, 1.0)),
            )
            frames.append(FrameRecord(vid, k, ref, label, va))
        videos.append(VideoSequence(vid, tuple(frames)))

    manifest = DatasetManifest(cfg.descriptor_dim, tuple(videos), root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return load_manifest(out_dir / "manifest.jsonl")
