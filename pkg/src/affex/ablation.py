"""Six-variant ablation sweep over a shared backbone."""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import Backbone, PrecomputedExtractor, pretrain_backbone
from .data import DatasetManifest
from .errors import ConfigurationError
from .metrics import MetricsReport
from .model import VARIANT_NAMES, ModelVariant
from .training import TrainConfig, evaluate, train

COLUMNS = ("model", "accuracy", "F1", "expression_score", "ccc_arousal", "ccc_valence", "va_score")


@dataclass(frozen=True)
class AblationRow:
    variant: ModelVariant
    report: MetricsReport

    def cells(self) -> list[str]:
        r = self.report

        def fmt(x):
            return "" if x is None else f"{x:.4f}"

        return [
            str(self.variant.id),
            fmt(r.accuracy),
            fmt(r.macro_f1),
            fmt(r.expression_score),
            fmt(r.ccc_arousal),
            fmt(r.ccc_valence),
            fmt(r.va_score),
        ]


@dataclass(frozen=True)
class AblationTable:
    rows: tuple[AblationRow, ...]

    def to_text(self) -> str:
        """Comma-separated table; regression cells are blank for
        classification-only variants."""
        lines = [",".join(COLUMNS)]
        lines.extend(",".join(row.cells()) for row in self.rows)
        return "\n".join(lines) + "\n"

    def describe(self) -> str:
        return "\n".join(f"{row.variant.id}: {VARIANT_NAMES[row.variant.id]}" for row in self.rows) + "\n"


def ablate(
    manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    config: TrainConfig,
    backbone: Backbone | PrecomputedExtractor | None = None,
) -> AblationTable:
    """Train variants 1 to 6 under ``config`` and evaluate each on ``val_manifest``.

    All variants share one backbone (pretrained here when not supplied) and
    the same seed, so rows differ only in their wiring.
    """
    if not manifest.has_va() or not val_manifest.has_va():
        raise ConfigurationError("ablation needs expression and valence-arousal annotations")
    if backbone is None:
        backbone = pretrain_backbone(manifest, config.backbone_config, config.pretrain_config)
    extractor = backbone if isinstance(backbone, PrecomputedExtractor) else None
    rows = []
    for vid in range(1, 7):
        ckpt, _ = train(manifest, None, config.replace(model_variant=vid), backbone)
        rows.append(AblationRow(ckpt.variant, evaluate(ckpt, val_manifest, extractor)))
    return AblationTable(tuple(rows))
