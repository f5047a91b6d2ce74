"""Folding decoder and the multi-scale symmetric chamfer loss.

Every layer-l feature is replicated r_l times; each copy is concatenated with
one point of a small 2D lattice and pushed through two 3-layer MLPs to give a
coordinate offset. Offsets are added to the replicated layer-l coordinates,
producing a predicted point set per layer, all scored against the one
full-resolution target with a symmetric chamfer distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat, gather, matmul, mul, relu, scale, sum_all
from .errors import ConfigError, ContractError, ShapeError
from .stats import squared_distances

__all__ = [
    "FoldingGrid", "DecoderConfig", "DecoderParams", "ReconPrediction",
    "build_grid", "init_decoder_params", "expand_and_fold", "chamfer",
    "loss_pc",
]


@dataclass
class FoldingGrid:
    points: np.ndarray  # (r, 2) float32, distinct

    @property
    def r(self):
        return self.points.shape[0]


def build_grid(r, grid_scale=0.05):
    """Row-major ceil(sqrt(r)) x ceil(sqrt(r)) lattice over [-1,1]^2, first r points."""
    if r < 1:
        raise ContractError(f"grid needs r >= 1, got {r}")
    side = int(np.ceil(np.sqrt(r)))
    axis = np.linspace(-1.0, 1.0, side) if side > 1 else np.array([-1.0])
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)[:r]
    return FoldingGrid((pts * grid_scale).astype(np.float32))


@dataclass
class DecoderConfig:
    hidden: int = 32
    fold_width: int = 3
    grid_scale: float = 0.05

    def __post_init__(self):
        self.hidden = int(self.hidden)
        self.fold_width = int(self.fold_width)
        self.grid_scale = float(self.grid_scale)
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden}")
        if self.fold_width < 1:
            raise ConfigError(f"fold width must be >= 1, got {self.fold_width}")
        if self.grid_scale <= 0:
            raise ConfigError(f"grid scale must be > 0, got {self.grid_scale}")


@dataclass
class DecoderParams:
    layers: list  # per encoder layer: {"psi1": [(w,b)x3], "psi2": [(w,b)x3]}

    def tensors(self):
        out = []
        for layer in self.layers:
            for mlp in ("psi1", "psi2"):
                for w, b in layer[mlp]:
                    out.extend([w, b])
        return out


@dataclass
class ReconPrediction:
    predicted: list  # per layer: Tensor (N_l * r_l, 3)
    offsets: list    # per layer: Tensor (N_l * r_l, 3)


def _mlp3(widths, rng, requires_grad):
    stack = []
    for w_in, w_out in zip(widths, widths[1:]):
        stack.append((
            Tensor(rng.standard_normal((w_in, w_out)) * np.sqrt(2.0 / w_in),
                   requires_grad=requires_grad),
            Tensor(np.zeros(w_out), requires_grad=requires_grad),
        ))
    return stack


def init_decoder_params(enc_cfg, dec_cfg, rng, requires_grad=True):
    """One folding head per encoder layer, matching that layer's feature width."""
    layers = []
    h = dec_cfg.hidden
    fold = dec_cfg.fold_width
    for c in enc_cfg.channels:
        layers.append({
            "psi1": _mlp3((c + 2, h, h, fold), rng, requires_grad),
            "psi2": _mlp3((c + fold, h, h, 3), rng, requires_grad),
        })
    return DecoderParams(layers)


def _run_mlp3(x, stack, tape):
    h = x
    for i, (w, b) in enumerate(stack):
        h = add(matmul(h, w, tape), b, tape)
        if i + 1 < len(stack):  # last layer stays linear: offsets may be negative
            h = relu(h, tape)
    return h


def expand_and_fold(hier, dparams, grids, tape):
    """Predicted point set per encoder layer (layers 1..L of the hierarchy)."""
    work_layers = hier.layers[1:]
    if not (len(work_layers) == len(dparams.layers) == len(grids)):
        raise ContractError(
            f"layer count mismatch: features {len(work_layers)}, params "
            f"{len(dparams.layers)}, grids {len(grids)}")
    predicted = []
    offsets = []
    for layer, params, grid in zip(work_layers, dparams.layers, grids):
        n = layer.ids.shape[0]
        r = grid.r
        rows = np.repeat(np.arange(n, dtype=np.int64), r)
        rep_feats = gather(layer.features, rows, tape)
        rep_grid = Tensor(np.tile(grid.points, (n, 1)))
        inner = _run_mlp3(concat([rep_feats, rep_grid], tape), params["psi1"], tape)
        delta = _run_mlp3(concat([rep_feats, inner], tape), params["psi2"], tape)
        if delta.data.shape[1] != 3:
            raise ShapeError(f"fold output must be (*, 3), got {delta.data.shape}")
        base = Tensor(layer.positions[rows])
        predicted.append(add(base, delta, tape))
        offsets.append(delta)
    return ReconPrediction(predicted, offsets)


def _nearest_rows(a, b):
    """Index of the nearest b-row for each a-row (float64, first-min ties)."""
    n = a.shape[0]
    out = np.empty(n, dtype=np.int64)
    chunk = max(1, min(n, 2_000_000 // max(b.shape[0], 1)))
    for lo in range(0, n, chunk):
        d2 = squared_distances(a[lo:lo + chunk], b)
        out[lo:lo + d2.shape[0]] = d2.argmin(axis=1)
    return out


def chamfer(a, b, tape=None):
    """Symmetric chamfer distance, differentiable w.r.t. the Tensor argument a.

    (1/A) sum_x min_y |x-y|^2 + (1/B) sum_y min_x |x-y|^2. Matches are found
    on float64 copies with ties to the lowest index; gradients flow through
    the matched squared distances.
    """
    b = np.asarray(b, dtype=np.float32)
    n_a = a.data.shape[0]
    n_b = b.shape[0]
    if n_a < 1 or n_b < 1:
        raise ContractError(f"chamfer needs non-empty sets, got {n_a} and {n_b}")
    if a.data.shape[1] != 3 or b.shape[1] != 3:
        raise ShapeError(f"chamfer expects (*, 3) point sets, got {a.data.shape} "
                         f"and {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.astype(np.float64)
    match_ab = _nearest_rows(a64, b64)
    match_ba = _nearest_rows(b64, a64)

    diff_ab = add(a, Tensor(-b[match_ab]), tape)
    term_ab = scale(sum_all(mul(diff_ab, diff_ab, tape), tape), 1.0 / n_a, tape)
    sel = gather(a, match_ba, tape)
    diff_ba = add(sel, Tensor(-b), tape)
    term_ba = scale(sum_all(mul(diff_ba, diff_ba, tape), tape), 1.0 / n_b, tape)
    return add(term_ab, term_ba, tape)


def loss_pc(pred, target_positions, tape=None):
    """Sum of per-layer chamfer distances against one full-resolution target."""
    if not pred.predicted:
        raise ContractError("prediction has no layers")
    total = None
    for layer_pred in pred.predicted:
        term = chamfer(layer_pred, target_positions, tape)
        total = term if total is None else add(total, term, tape)
    return total
