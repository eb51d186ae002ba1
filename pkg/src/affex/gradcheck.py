"""Finite-difference gradient suite over layers, losses and full variants.

Each component reports the maximum relative error of its analytic
gradient against central differences.  Full variants are split by
parameter group so every group can use a step suited to it: backbone and
head parameters feed the max/min pooling, whose selection can switch under
a large step, while LSTM weights sit behind the pooling and are smooth, so
they use a larger step that keeps rounding noise below the tolerance.
"""

from __future__ import annotations

import numpy as np

from . import kernels, nn
from .backbone import Backbone, BackboneConfig
from .metrics import LossWeights, ccc_loss, cross_entropy, derive_mse_target, mse_loss, one_hot
from .model import ModelDims, Targets, batch_loss, build_variant

TOLERANCE = 1e-4
SMALL_STEP = 1e-5
GROUP_STEPS = {"backbone": SMALL_STEP, "head": SMALL_STEP, "lstm": 1e-3}

SMALL_DIMS = ModelDims(d_f=4, lstm_hidden=3, lstm_depth=1, head_hidden=(5, 4))
SMALL_BACKBONE = BackboneConfig(d_f=4, hidden_dims=(5,), frozen_prefix_depth=1)
SMALL_S = 3
SMALL_BATCH = 4
SMALL_D = 6


def _projection_loss(out, R):
    return float((out * R).sum())


def check_dense(rng, activation: str) -> float:
    p = {"x": rng.standard_normal((4, 5)), "W": rng.standard_normal((5, 3)), "b": rng.standard_normal(3)}
    R = rng.standard_normal((4, 3))

    def frag():
        out, back = nn.dense_apply(p["x"], p["W"], p["b"], activation)
        dx, dW, db = back(R)
        return _projection_loss(out, R), {"x": dx, "W": dW, "b": db}

    return nn.grad_check(frag, p)


def check_softmax(rng) -> float:
    p = {"z": rng.standard_normal((4, 7))}
    R = rng.standard_normal((4, 7))

    def frag():
        probs = nn.softmax(p["z"])
        return _projection_loss(probs, R), {"z": nn.softmax_backward(probs, R)}

    return nn.grad_check(frag, p)


def check_lstm_step(rng) -> float:
    H, d = 3, 4
    p = dict(nn.init_lstm(rng, d, H))
    p.update(x=rng.standard_normal(d), h=rng.standard_normal(H) * 0.5, c=rng.standard_normal(H) * 0.5)
    Rh, Rc = rng.standard_normal(H), rng.standard_normal(H)

    def frag():
        h2, c2, back = nn.lstm_step(p["x"], p["h"], p["c"], p)
        dx, dh, dc, g = back(Rh, Rc)
        return float(h2 @ Rh + c2 @ Rc), {"x": dx, "h": dh, "c": dc, **g}

    return nn.grad_check(frag, p)


def check_bilstm(rng, depth: int) -> float:
    p = dict(nn.init_bilstm(rng, 7, 3, depth))
    p["X"] = rng.standard_normal((2, 3, 7))
    R = rng.standard_normal((2, 6))

    def frag():
        out, back = nn.bilstm_forward(p["X"], p, depth)
        dX, g = back(R)
        return _projection_loss(out, R), {"X": dX, **g}

    return nn.grad_check(frag, p)


def check_stat_pool(rng) -> float:
    p = {"M": rng.standard_normal((2, 3, 5))}
    R = rng.standard_normal((2, 15))

    def frag():
        out, amax, amin = kernels.stat_pool_forward(p["M"])
        return _projection_loss(out, R), {"M": kernels.stat_pool_backward(R, amax, amin, p["M"].shape[1])}

    return nn.grad_check(frag, p)


def check_cross_entropy(rng) -> float:
    p = {"z": rng.standard_normal((4, 7))}
    y = one_hot(rng.integers(0, 7, 4))

    def frag():
        probs = nn.softmax(p["z"])
        return float(cross_entropy(y, probs).sum()), {"z": probs - y}

    return nn.grad_check(frag, p)


def check_ccc_loss(rng) -> float:
    p = {"x": rng.uniform(-1, 1, 8)}
    y = rng.uniform(-1, 1, 8)

    def frag():
        loss, g = ccc_loss(p["x"], y)
        return loss, {"x": g}

    return nn.grad_check(frag, p)


def check_mse_loss(rng) -> float:
    p = {"x": rng.uniform(-1, 1, (4, 5))}
    t = derive_mse_target(rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4))

    def frag():
        loss, g = mse_loss(p["x"], t)
        return loss, {"x": g}

    return nn.grad_check(frag, p)


def check_variant(variant_id: int, seed: int = 0) -> dict[str, float]:
    """Per-group errors for one full variant at the small test dimensions,
    descriptors to weighted loss."""
    rng = np.random.default_rng(seed)
    bb = Backbone.initialize(SMALL_D, SMALL_BACKBONE, seed=seed)
    bb.freeze_prefix()
    model = build_variant(variant_id, SMALL_DIMS, s=SMALL_S, seed=seed + 10, backbone=bb)
    shape = (SMALL_BATCH, SMALL_S, SMALL_D) if model.variant.uses_blocks else (SMALL_BATCH, SMALL_D)
    X = rng.standard_normal(shape)
    targets = Targets(
        rng.integers(0, 7, SMALL_BATCH), rng.uniform(-1, 1, SMALL_BATCH), rng.uniform(-1, 1, SMALL_BATCH)
    )

    def frag():
        out, back = model.forward(X)
        loss, _, upstream = batch_loss(out, targets, LossWeights(), model.variant.multitask)
        return loss, back(**upstream)

    _, grads = frag()
    errors = {}
    for group, h in GROUP_STEPS.items():
        names = [n for n in grads if n.startswith(group + ".")]
        if names:
            errors[group] = nn.grad_check(frag, model.params, h=h, names=names)
    return errors


def run_suite(seed: int = 0) -> dict[str, float]:
    """``component -> max relative error`` for the whole suite."""
    rng = np.random.default_rng(seed)
    results = {
        "dense.identity": check_dense(rng, "identity"),
        "dense.tanh": check_dense(rng, "tanh"),
        "dense.relu": check_dense(rng, "relu"),
        "softmax": check_softmax(rng),
        "lstm_step": check_lstm_step(rng),
        "bilstm.depth1": check_bilstm(rng, 1),
        "bilstm.depth2": check_bilstm(rng, 2),
        "stat_pool": check_stat_pool(rng),
        "loss.cross_entropy": check_cross_entropy(rng),
        "loss.ccc": check_ccc_loss(rng),
        "loss.mse": check_mse_loss(rng),
    }
    for vid in range(1, 7):
        for group, err in check_variant(vid, seed).items():
            results[f"variant{vid}.{group}"] = err
    return results
