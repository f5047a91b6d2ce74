"""Hierarchical point encoder: group, aggregate, downsample, repeat.

Layer 0 features are raw (position, color) 6-vectors. Each layer groups every
current point with its k_g nearest current points (self included), runs a
shared MLP on (neighbor feature concat relative position), max-pools over the
group, applies a second MLP, then keeps a farthest-point subsample of the
points for the next layer. All arrays are kept in ascending-id order at every
layer, which makes the whole stack exactly permutation-invariant per id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat, gather, matmul, max_over_group, relu
from .errors import ConfigError, ContractError, DegenerateSceneError
from .stats import k_smallest_rows, squared_distances

__all__ = [
    "EncoderConfig", "EncoderParams", "HierLayer", "HierFeatures",
    "fps", "init_encoder_params", "encode",
]


@dataclass
class EncoderConfig:
    n_layers: int = 3
    channels: tuple = (32, 64, 128)
    k_group: int = 8
    downsample: int = 4

    def __post_init__(self):
        self.n_layers = int(self.n_layers)
        self.channels = tuple(int(c) for c in self.channels)
        self.k_group = int(self.k_group)
        self.downsample = int(self.downsample)
        if self.n_layers < 1:
            raise ConfigError(f"need at least 1 layer, got {self.n_layers}")
        if len(self.channels) != self.n_layers:
            raise ConfigError(f"channels {self.channels} must list one width per "
                              f"layer ({self.n_layers})")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channel widths must increase, got {self.channels}")
        if self.k_group < 1:
            raise ConfigError(f"k_group must be >= 1, got {self.k_group}")
        if self.downsample < 2:
            raise ConfigError(f"downsample factor must be >= 2, got {self.downsample}")

    def layer_widths(self):
        """(input width, output width) per layer; layer-0 features are 6-wide."""
        ins = (6,) + self.channels[:-1]
        return list(zip(ins, self.channels))


@dataclass
class EncoderParams:
    layers: list  # per layer dict with Tensors w1 (in+3, C), b1 (C,), w2 (C, C), b2 (C,)

    def tensors(self):
        out = []
        for layer in self.layers:
            out.extend([layer["w1"], layer["b1"], layer["w2"], layer["b2"]])
        return out


@dataclass
class HierLayer:
    ids: np.ndarray        # (N_l,) ascending
    positions: np.ndarray  # (N_l, 3) float32
    features: Tensor       # (N_l, C_l)


@dataclass
class HierFeatures:
    layers: list  # HierLayer for l = 0..L; losses consume layers[1:]

    @property
    def n_layers(self):
        return len(self.layers) - 1


def init_encoder_params(cfg, rng, requires_grad=True):
    """He-scaled gaussian weights, zero biases."""
    layers = []
    for w_in, w_out in cfg.layer_widths():
        fan1 = w_in + 3
        layers.append({
            "w1": Tensor(rng.standard_normal((fan1, w_out)) * np.sqrt(2.0 / fan1),
                         requires_grad=requires_grad),
            "b1": Tensor(np.zeros(w_out), requires_grad=requires_grad),
            "w2": Tensor(rng.standard_normal((w_out, w_out)) * np.sqrt(2.0 / w_out),
                         requires_grad=requires_grad),
            "b2": Tensor(np.zeros(w_out), requires_grad=requires_grad),
        })
    return EncoderParams(layers)


def fps(positions, ids, m, start=None):
    """Greedy farthest-point sampling; returns m ids in pick order.

    Starts at `start` (default: smallest id); each step adds the point with
    the largest min-distance to the chosen set, ties broken by ascending id.
    """
    positions = np.asarray(positions, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    n = positions.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"fps needs 1 <= m <= {n}, got m={m}")
    if start is None:
        start_row = int(np.argmin(ids))
    else:
        matches = np.flatnonzero(ids == start)
        if matches.size != 1:
            raise ContractError(f"start id {start} not present exactly once")
        start_row = int(matches[0])

    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start_row
    diff = positions - positions[start_row]
    min_d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
    min_d2[start_row] = -np.inf
    for step in range(1, m):
        best = min_d2.max()
        cand = np.flatnonzero(min_d2 == best)
        row = cand[np.argmin(ids[cand])]
        chosen[step] = row
        diff = positions - positions[row]
        d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[row] = -np.inf
    return ids[chosen]


def _group_rows(positions, ids, k_group):
    """Rows of the k_group nearest points per point, self included.

    Ordered by ascending distance, ties by ascending id; shape (N, k_group).
    """
    n = positions.shape[0]
    out = np.empty((n, k_group), dtype=np.int64)
    chunk = max(1, min(n, 2_000_000 // max(n, 1)))
    for lo in range(0, n, chunk):
        d2 = squared_distances(positions[lo:lo + chunk], positions)
        out[lo:lo + d2.shape[0]] = k_smallest_rows(d2, ids, k_group)
    return out


def encode(scene, input_ids, params, cfg, tape):
    """Run the hierarchy over the retained ids of `scene`."""
    input_ids = np.asarray(input_ids, dtype=np.int64)
    if input_ids.size == 0:
        raise ContractError("encode needs a non-empty id set")
    if len(params.layers) != cfg.n_layers:
        raise ContractError(f"params have {len(params.layers)} layers, "
                            f"config wants {cfg.n_layers}")
    sub = scene.subset_by_ids(np.sort(input_ids))

    ids = sub.ids
    positions = sub.positions
    feats = concat([Tensor(positions), Tensor(sub.colors)], tape)
    hier = [HierLayer(ids.copy(), positions.copy(), feats)]

    for layer_no, layer in enumerate(params.layers, start=1):
        n_cur = ids.shape[0]
        if n_cur < cfg.k_group:
            raise DegenerateSceneError(
                f"layer {layer_no} has {n_cur} points, fewer than k_group="
                f"{cfg.k_group}")
        group = _group_rows(positions.astype(np.float64), ids, cfg.k_group)
        flat = group.reshape(-1)
        nbr_feats = gather(feats, flat, tape)
        rel = positions[flat] - np.repeat(positions, cfg.k_group, axis=0)
        per_nbr = concat([nbr_feats, Tensor(rel)], tape)
        h = relu(add(matmul(per_nbr, layer["w1"], tape), layer["b1"], tape), tape)
        pooled = max_over_group(h, cfg.k_group, tape)
        feats = relu(add(matmul(pooled, layer["w2"], tape), layer["b2"], tape), tape)

        m = -(-n_cur // cfg.downsample)  # ceil division
        keep_ids = fps(positions, ids, m)
        keep_sorted = np.sort(keep_ids)
        rows = np.searchsorted(ids, keep_sorted)  # ids ascending per invariant
        ids = keep_sorted
        positions = positions[rows]
        feats = gather(feats, rows, tape)
        hier.append(HierLayer(ids.copy(), positions.copy(), feats))

    return HierFeatures(hier)
