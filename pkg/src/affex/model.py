"""Fusion model: STAT pooling, BiLSTM temporal features, feature fusion and
the classification/regression heads, plus the six ablation variants.

Variant wiring (id: blocks, LSTM, multitask)::

    1: -   -   -      2: -   -   yes
    3: yes -   -      4: yes -   yes
    5: yes yes -      6: yes yes yes
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, nn
from .backbone import Backbone, BackboneConfig
from .data import NUM_CLASSES
from .errors import ContractError, ShapeError
from .metrics import LossWeights, ccc_loss, cross_entropy, derive_mse_target, mse_loss, one_hot, total_loss

VARIANT_NAMES = {
    1: "Emotion Image",
    2: "Emotion VA Image",
    3: "Emotion Frame",
    4: "Emotion VA Frame",
    5: "Emotion Frame with LSTM",
    6: "Emotion VA Frame with LSTM",
}

# head name -> (output width, final activation)
HEADS = {"cls": (NUM_CLASSES, "identity"), "aro": (1, "tanh"), "val": (1, "tanh"), "mse": (5, "tanh")}


@dataclass(frozen=True)
class ModelVariant:
    id: int
    uses_blocks: bool
    uses_lstm: bool
    multitask: bool
    s: int = 16

    @classmethod
    def from_id(cls, variant_id: int, s: int = 16) -> "ModelVariant":
        if variant_id not in VARIANT_NAMES:
            raise ContractError(f"model variant must be 1..6, got {variant_id}")
        if s < 1:
            raise ContractError(f"block size must be >= 1, got {s}")
        return cls(
            id=variant_id,
            uses_blocks=variant_id >= 3,
            uses_lstm=variant_id >= 5,
            multitask=variant_id % 2 == 0,
            s=s,
        )

    @property
    def name(self) -> str:
        return VARIANT_NAMES[self.id]

    @property
    def heads(self) -> tuple[str, ...]:
        return ("cls", "aro", "val", "mse") if self.multitask else ("cls",)


@dataclass(frozen=True)
class ModelDims:
    d_f: int = 32
    lstm_hidden: int = 32
    lstm_depth: int = 1
    head_hidden: tuple[int, int] = (64, 32)

    def fusion_width(self, variant: ModelVariant) -> int:
        k = NUM_CLASSES + self.d_f
        return k + variant.uses_blocks * 3 * k + variant.uses_lstm * 2 * self.lstm_hidden


@dataclass
class ModelOutput:
    """Batched outputs; regression fields are None for single-task variants."""

    logits: np.ndarray
    class_probs: np.ndarray
    arousal: np.ndarray | None = None
    valence: np.ndarray | None = None
    mse_vector: np.ndarray | None = None


# --------------------------------------------------------------------------
# building blocks


def stat_pool(block_probs, block_features=None):
    """Elementwise ``[mean; max; min]`` over the rows of ``[probs | features]``.

    Accepts one block (``[s, C]`` and ``[s, d_f]``) or a batch (``[B, s, ...]``).
    ``block_features`` may be None or have zero width.
    """
    P = np.asarray(block_probs, dtype=np.float64)
    single = P.ndim == 2
    if single:
        P = P[None]
    if P.ndim != 3 or P.shape[1] < 1:
        raise ContractError(f"stat_pool needs a non-empty block, got shape {np.shape(block_probs)}")
    M = P
    if block_features is not None:
        F = np.asarray(block_features, dtype=np.float64)
        F = F[None] if single else F
        if F.shape[:2] != P.shape[:2]:
            raise ShapeError(f"block probs {P.shape} and features {F.shape} disagree on rows")
        M = np.concatenate([P, F], axis=2)
    out, _, _ = kernels.stat_pool_forward(M)
    return out[0] if single else out


def temporal_features(block_probs, lstm_params, depth: int = 1):
    """BiLSTM summary ``[2H]`` of a block's probability rows in chronological order."""
    out, _ = nn.bilstm_apply(block_probs, lstm_params, depth)
    return out


def init_heads(rng: np.random.Generator, variant: ModelVariant, dims: ModelDims) -> nn.ParameterSet:
    params = nn.ParameterSet()
    width = dims.fusion_width(variant)
    for head in variant.heads:
        out_dim, _ = HEADS[head]
        widths = [width, *dims.head_hidden, out_dim]
        for j in range(len(widths) - 1):
            params.add(f"head.{head}.l{j}.W", nn.glorot_uniform(rng, widths[j], widths[j + 1], (widths[j], widths[j + 1])))
            params.add(f"head.{head}.l{j}.b", np.zeros(widths[j + 1]))
    return params


def _apply_head(params, head: str, x, n_layers: int):
    closures = []
    a = x
    for j in range(n_layers):
        act = HEADS[head][1] if j == n_layers - 1 else "tanh"
        a, back = nn.dense_apply(a, params[f"head.{head}.l{j}.W"], params[f"head.{head}.l{j}.b"], act)
        closures.append(back)

    def backward(d_out):
        grads = {}
        d = d_out
        for j in range(n_layers - 1, -1, -1):
            d, dW, db = closures[j](d)
            grads[f"head.{head}.l{j}.W"] = dW
            grads[f"head.{head}.l{j}.b"] = db
        return d, grads

    return a, backward


def model_forward(variant: ModelVariant, dims: ModelDims, params, cur_probs, cur_feats, block_probs=None, block_feats=None):
    """Fuse per-frame and block features and run the heads.

    ``cur_probs [B, 7]`` and ``cur_feats [B, d_f]`` describe the current
    frame; ``block_probs [B, s, 7]``/``block_feats [B, s, d_f]`` are required
    exactly when the variant consumes blocks.  Returns ``(ModelOutput,
    backward)``; ``backward(d_logits, d_arousal, d_valence, d_mse)`` returns
    ``(grads, d_cur_probs, d_cur_feats, d_block_probs, d_block_feats)``.
    """
    has_block = block_probs is not None
    if has_block != variant.uses_blocks:
        raise ContractError(
            f"variant {variant.id} {'needs' if variant.uses_blocks else 'takes no'} frame block input"
        )
    cur_probs = np.asarray(cur_probs, dtype=np.float64)
    cur_feats = np.asarray(cur_feats, dtype=np.float64)
    if cur_probs.ndim != 2 or cur_probs.shape[1] != NUM_CLASSES or cur_feats.shape != (cur_probs.shape[0], dims.d_f):
        raise ShapeError(f"current probs {cur_probs.shape} / features {cur_feats.shape} do not match d_f={dims.d_f}")
    parts = [cur_probs, cur_feats]
    K = NUM_CLASSES + dims.d_f
    if variant.uses_blocks:
        block_probs = np.asarray(block_probs, dtype=np.float64)
        block_feats = np.asarray(block_feats, dtype=np.float64)
        M = np.concatenate([block_probs, block_feats], axis=2)
        if M.shape[0] != cur_probs.shape[0] or M.shape[2] != K:
            raise ShapeError(f"block shape {M.shape} does not match batch {cur_probs.shape[0]} and width {K}")
        stat, amax, amin = kernels.stat_pool_forward(M)
        parts.append(stat)
        if variant.uses_lstm:
            lstm_out, lstm_back = nn.bilstm_forward(block_probs, params, dims.lstm_depth, prefix="lstm.")
            parts.append(lstm_out)
    fused = np.concatenate(parts, axis=1)

    n_layers = len(dims.head_hidden) + 1
    outs, head_backs = {}, {}
    for head in variant.heads:
        outs[head], head_backs[head] = _apply_head(params, head, fused, n_layers)
    logits = outs["cls"]
    result = ModelOutput(logits=logits, class_probs=nn.softmax(logits))
    if variant.multitask:
        result.arousal = outs["aro"][:, 0]
        result.valence = outs["val"][:, 0]
        result.mse_vector = outs["mse"]

    def backward(d_logits, d_arousal=None, d_valence=None, d_mse=None):
        grads = {}
        upstream = {"cls": d_logits}
        if variant.multitask:
            upstream.update(aro=np.asarray(d_arousal)[:, None], val=np.asarray(d_valence)[:, None], mse=d_mse)
        d_fused = np.zeros_like(fused)
        for head in variant.heads:
            d, g = head_backs[head](upstream[head])
            d_fused += d
            grads.update(g)
        d_cp = d_fused[:, :NUM_CLASSES]
        d_cf = d_fused[:, NUM_CLASSES:K]
        d_bp = d_bf = None
        if variant.uses_blocks:
            d_M = kernels.stat_pool_backward(d_fused[:, K : 4 * K], amax, amin, M.shape[1])
            d_bp = d_M[:, :, :NUM_CLASSES]
            d_bf = d_M[:, :, NUM_CLASSES:]
            if variant.uses_lstm:
                d_lstm_in, g = lstm_back(d_fused[:, 4 * K :])
                d_bp = d_bp + d_lstm_in
                grads.update(g)
        return grads, d_cp, d_cf, d_bp, d_bf

    return result, backward


# --------------------------------------------------------------------------
# losses over a batch


@dataclass(frozen=True)
class Targets:
    labels: np.ndarray
    arousal: np.ndarray | None = None
    valence: np.ndarray | None = None


def batch_loss(output: ModelOutput, targets: Targets, weights: LossWeights, multitask: bool):
    """Weighted multi-task loss over a batch.

    Returns ``(total, terms, upstream)`` where ``upstream`` holds the
    gradients to feed into the ``model_forward`` backward closure.
    """
    B = output.logits.shape[0]
    y = one_hot(targets.labels)
    class_loss = float(cross_entropy(y, output.class_probs).mean())
    terms = {"class": class_loss}
    w = weights
    upstream = {"d_logits": w.w1 * (output.class_probs - y) / B}
    if multitask:
        la, ga = ccc_loss(output.arousal, targets.arousal)
        lv, gv = ccc_loss(output.valence, targets.valence)
        lm, gm = mse_loss(output.mse_vector, derive_mse_target(targets.arousal, targets.valence))
        terms.update(ccc_arousal=la, ccc_valence=lv, mse=lm)
        upstream.update(d_arousal=w.w2 * ga, d_valence=w.w3 * gv, d_mse=w.w4 * gm)
        total = total_loss(class_loss, la, lv, lm, w)
    else:
        total = total_loss(class_loss, weights=w, multitask=False)
    return float(total), terms, upstream


# --------------------------------------------------------------------------
# end-to-end model


class FusionModel:
    """A variant's heads (and LSTM) plus the feature source.

    ``params`` holds every parameter, including the backbone's (prefixed
    ``backbone.``) when a trainable backbone is attached.  With
    ``backbone_config=None`` the model consumes precomputed
    (features, probs) and has no backbone parameters.
    """

    def __init__(self, variant, dims, params, descriptor_dim=None, backbone_config=None):
        self.variant = variant
        self.dims = dims
        self.params = params
        self.descriptor_dim = descriptor_dim
        self.backbone_config = backbone_config
        self._backbone = None
        if backbone_config is not None:
            self._backbone = Backbone(descriptor_dim, backbone_config, params)

    @property
    def uses_backbone(self) -> bool:
        return self._backbone is not None

    @property
    def backbone(self) -> Backbone | None:
        return self._backbone

    def parameter_count(self, include_backbone: bool = False) -> int:
        return sum(v.size for k, v in self.params.items() if include_backbone or not k.startswith("backbone."))

    def forward_features(self, cur_probs, cur_feats, block_probs=None, block_feats=None):
        return model_forward(self.variant, self.dims, self.params, cur_probs, cur_feats, block_probs, block_feats)

    def forward(self, inputs):
        """Run on descriptors: ``[B, s, D]`` blocks (current frame last) for
        block variants, ``[B, D]`` current frames otherwise.  Returns
        ``(ModelOutput, backward)`` with ``backward(**upstream) -> grads``."""
        if not self.uses_backbone:
            raise ContractError("model has no backbone; use forward_features with precomputed inputs")
        X = np.asarray(inputs, dtype=np.float64)
        if self.variant.uses_blocks:
            if X.ndim != 3 or X.shape[1] != self.variant.s:
                raise ShapeError(f"expected [B, {self.variant.s}, D] blocks, got {X.shape}")
            B, s, D = X.shape
            feats, probs, bb_back = self._backbone.forward(X.reshape(B * s, D))
            bf = feats.reshape(B, s, -1)
            bp = probs.reshape(B, s, -1)
            out, back = model_forward(self.variant, self.dims, self.params, bp[:, -1], bf[:, -1], bp, bf)
        else:
            if X.ndim != 2:
                raise ShapeError(f"expected [B, D] current-frame descriptors, got {X.shape}")
            feats, probs, bb_back = self._backbone.forward(X)
            out, back = model_forward(self.variant, self.dims, self.params, probs, feats)

        def backward(**upstream):
            grads, d_cp, d_cf, d_bp, d_bf = back(**upstream)
            if self.variant.uses_blocks:
                d_bp = d_bp.copy()
                d_bf = d_bf.copy()
                d_bp[:, -1] += d_cp
                d_bf[:, -1] += d_cf
                grads.update(bb_back(d_features=d_bf.reshape(B * s, -1), d_probs=d_bp.reshape(B * s, -1)))
            else:
                grads.update(bb_back(d_features=d_cf, d_probs=d_cp))
            return grads

        return out, backward


def build_variant(
    variant_id: int,
    dims: ModelDims | None = None,
    s: int = 16,
    seed: int = 0,
    backbone: Backbone | None = None,
    descriptor_dim: int | None = None,
) -> FusionModel:
    """Seeded model for one ablation variant.

    With ``backbone`` its parameters (and frozen flags) are copied into the
    model; otherwise the model expects precomputed features.
    """
    variant = ModelVariant.from_id(variant_id, s)
    dims = dims or ModelDims(d_f=backbone.config.d_f if backbone else 32)
    if backbone is not None and backbone.config.d_f != dims.d_f:
        raise ContractError(f"backbone d_f={backbone.config.d_f} != model d_f={dims.d_f}")
    rng = np.random.default_rng(seed)
    params = init_heads(rng, variant, dims)
    if variant.uses_lstm:
        for k, v in nn.init_bilstm(rng, NUM_CLASSES, dims.lstm_hidden, dims.lstm_depth).items():
            params.add(f"lstm.{k}", v)
    bb_config: BackboneConfig | None = None
    if backbone is not None:
        params.update(backbone.params)
        bb_config = backbone.config
        descriptor_dim = backbone.descriptor_dim
    return FusionModel(variant, dims, params, descriptor_dim, bb_config)
