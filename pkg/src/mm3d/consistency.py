"""Momentum teacher, id-based correspondence, and the consistency loss.

The teacher is an EMA copy of the online encoder and never sees gradients.
Because masking keeps point ids stable, an online feature row and a teacher
feature row correspond exactly when their ids match; the consistency loss is
an info-NCE over those matched rows, with the other matched rows of the same
layer acting as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, gather, l2norm_rows, logsumexp, matmul, mul, scale, sum_all
from .encoder import EncoderParams
from .errors import ConfigError, ContractError

__all__ = [
    "TeacherState", "CorrespondencePairs", "ConsistencyConfig",
    "make_teacher", "ema_update", "match_correspondence", "csd_loss",
]


@dataclass
class TeacherState:
    params: EncoderParams
    beta: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0,1], got {self.beta}")


@dataclass
class CorrespondencePairs:
    # per hierarchy layer: (online row indices, target row indices), equal ids
    layers: list


@dataclass
class ConsistencyConfig:
    tau: float = 1.0
    normalize: bool = False

    def __post_init__(self):
        self.tau = float(self.tau)
        if self.tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.tau}")


def make_teacher(online, beta=0.999):
    """Teacher starts as an exact copy of the online encoder, gradient-free."""
    layers = []
    for layer in online.layers:
        layers.append({k: Tensor(v.data.copy()) for k, v in layer.items()})
    return TeacherState(EncoderParams(layers), beta)


def ema_update(teacher, online):
    """W_target <- beta * W_target + (1 - beta) * W_online, elementwise."""
    t_layers = teacher.params.layers
    o_layers = online.layers
    if len(t_layers) != len(o_layers):
        raise ContractError(f"teacher has {len(t_layers)} layers, online "
                            f"{len(o_layers)}")
    beta = float(teacher.beta)
    for t_layer, o_layer in zip(t_layers, o_layers):
        for key, o_tensor in o_layer.items():
            t_tensor = t_layer[key]
            if t_tensor.data.shape != o_tensor.data.shape:
                raise ContractError(
                    f"shape mismatch on '{key}': teacher {t_tensor.data.shape} "
                    f"vs online {o_tensor.data.shape}")
            # float64 intermediate: one store-rounding per step keeps long
            # EMA chains within 1e-5 of the closed form
            upd = (beta * t_tensor.data.astype(np.float64)
                   + (1.0 - beta) * o_tensor.data.astype(np.float64))
            t_tensor.data[:] = upd.astype(t_tensor.data.dtype, copy=False)
    return teacher


def match_correspondence(online, target):
    """Pair rows with equal ids, layer by layer; unmatched online rows drop out."""
    if len(online.layers) != len(target.layers):
        raise ContractError("hierarchies have different depths")
    layers = []
    for o_layer, t_layer in zip(online.layers, target.layers):
        _, o_rows, t_rows = np.intersect1d(o_layer.ids, t_layer.ids,
                                           assume_unique=True,
                                           return_indices=True)
        layers.append((o_rows.astype(np.int64), t_rows.astype(np.int64)))
    return CorrespondencePairs(layers)


def csd_loss(pairs, online, target, cfg, tape=None):
    """Info-NCE over id-matched rows of layers 1..L.

    Returns (scalar loss Tensor, list of skipped layer indices). A layer is
    skipped when it has fewer than 2 pairs (no negatives available). Teacher
    features enter as constants, so no gradient can reach them.
    """
    if len(pairs.layers) != len(online.layers) or len(pairs.layers) != len(target.layers):
        raise ContractError("pairs do not match the hierarchies")
    total = None
    skipped = []
    inv_tau = 1.0 / cfg.tau
    for layer_no in range(1, len(online.layers)):
        o_rows, t_rows = pairs.layers[layer_no]
        m = len(o_rows)
        if m < 2:
            skipped.append(layer_no)
            continue
        feats = gather(online.layers[layer_no].features, o_rows, tape)
        teacher_data = target.layers[layer_no].features.data[t_rows]
        dtype = teacher_data.dtype.type
        if cfg.normalize:
            feats = l2norm_rows(feats, tape)
            norms = np.sqrt((teacher_data.astype(np.float64) ** 2)
                            .sum(axis=1, keepdims=True))
            teacher_data = teacher_data / np.maximum(norms, 1e-12).astype(dtype)
        logits = scale(matmul(feats, Tensor(teacher_data.T, dtype=dtype), tape),
                       inv_tau, tape)
        lse = logsumexp(logits, tape)
        diag = sum_all(mul(logits, Tensor(np.eye(m), dtype=dtype), tape), tape)
        layer_loss = add(sum_all(lse, tape), scale(diag, -1.0, tape), tape)
        total = layer_loss if total is None else add(total, layer_loss, tape)
    if total is None:
        total = Tensor(np.zeros(()))
    return total, skipped
