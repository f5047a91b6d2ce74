"""Caller-array bindings for the mm3d core.

Three functions cover what an external training stack consumes without
adopting the core's scene types: the per-point statistic, the single-step
informative mask, and the two loss values. Inputs cross the boundary by
copy (anything numpy can convert: lists, buffers, arrays); outputs are
fresh arrays. No call retains or mutates a caller buffer, and loss values
come back without gradients - the caller's framework owns differentiation.

Geometry, colors, and features are canonicalized to float32, the core's
training precision. Statistic values handed to `bind_mask` cross at full
precision instead: mask selection is order-sensitive, and rounding a
float64 statistic at the boundary could flip near-ties against the core's
own ranking.
"""

__version__ = "0.1.0"

import numpy as np

from mm3d import (
    ConfigError,
    ConsistencyConfig,
    ContractError,
    MaskSchedule,
    PointScene,
    StatConfig,
    StatField,
    Tensor,
    build_sequence,
    chamfer,
    compute_statistics,
    csd_loss,
)

__all__ = ["BoundaryError", "bind_losses", "bind_mask", "bind_statistics",
           "__version__"]


class BoundaryError(ValueError):
    """A caller argument failed validation at the language boundary."""


def _copy_in(name, obj, dtype, ndim, cols=None):
    """Fresh validated array from whatever the caller handed over."""
    try:
        arr = np.array(obj, dtype=dtype, order="C", copy=True)
    except (TypeError, ValueError) as exc:
        raise BoundaryError(f"{name}: cannot convert to an array "
                            f"({exc})") from exc
    if arr.ndim != ndim or (cols is not None and arr.shape[-1] != cols):
        want = (f"(N, {cols})" if cols is not None else
                "(N,)" if ndim == 1 else "(N, C)")
        raise BoundaryError(f"{name}: expected shape {want}, "
                            f"got {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise BoundaryError(f"{name}: contains non-finite values")
    return arr


def _copy_indices(name, obj):
    """(M, 2) int64 copy; rejects fractional input rather than truncating."""
    try:
        arr = np.array(obj, copy=True)
    except (TypeError, ValueError) as exc:
        raise BoundaryError(f"{name}: cannot convert to an array "
                            f"({exc})") from exc
    if arr.ndim != 2 or arr.shape[-1] != 2:
        raise BoundaryError(f"{name}: expected shape (M, 2), "
                            f"got {arr.shape}")
    if arr.size and arr.dtype.kind not in "iu":
        raise BoundaryError(f"{name}: must be integer rows, "
                            f"got dtype {arr.dtype}")
    return arr.astype(np.int64)


def _scalar(name, value, caster):
    try:
        return caster(value)
    except (TypeError, ValueError) as exc:
        raise BoundaryError(f"{name}: {exc}") from exc


def bind_statistics(positions, colors, k, alphas):
    """Per-point combined statistic over coordinate and color channels.

    positions, colors: (N, 3) reals, colors in [0, 1], N >= 2; k: neighbors
    per point; alphas: two non-negative channel weights. Returns a fresh
    (N,) array bitwise-equal to the core statistics pipeline on the same
    inputs (row i scores point i).
    """
    pos = _copy_in("positions", positions, np.float32, 2, 3)
    col = _copy_in("colors", colors, np.float32, 2, 3)
    if pos.shape[0] != col.shape[0]:
        raise BoundaryError(f"positions and colors disagree on N: "
                            f"{pos.shape[0]} vs {col.shape[0]}")
    if pos.shape[0] < 2:
        raise BoundaryError("need at least 2 points for neighborhoods")
    weights = _copy_in("alphas", alphas, np.float64, 1)
    k = _scalar("k", k, int)
    try:
        cfg = StatConfig(k=k, alphas=tuple(weights))
        scene = PointScene(pos, col,
                           np.arange(pos.shape[0], dtype=np.int64))
        field = compute_statistics(scene, cfg)
    except (ConfigError, ContractError) as exc:
        raise BoundaryError(str(exc)) from exc
    return np.array(field.d, copy=True)


def bind_mask(d, theta):
    """Indices retained after one informative-preserved mask step.

    d: (N,) per-point statistic (row i scores point i); theta: mask ratio
    in [0, 1). Returns ascending indices, exactly the core's single-step
    retained set; theta 0 keeps every index.
    """
    dvals = _copy_in("d", d, np.float64, 1)
    n = dvals.shape[0]
    if n < 1:
        raise BoundaryError("d: needs at least one value")
    theta = _scalar("theta", theta, float)
    if not 0.0 <= theta < 1.0:
        raise BoundaryError(f"theta must lie in [0, 1), got {theta}")
    ids = np.arange(n, dtype=np.int64)
    if theta == 0.0:
        return ids
    zeros = np.zeros((n, 3), dtype=np.float32)
    try:
        sched = MaskSchedule(ratios=(theta,), gap=theta, gap_mode="fixed")
        field = StatField(ids=ids, d0=np.zeros(n), d1=np.zeros(n), d=dvals)
        seq = build_sequence(PointScene(zeros, zeros, ids), field, sched)
    except (ConfigError, ContractError) as exc:
        raise BoundaryError(str(exc)) from exc
    return np.array(seq.retained_ids(1), dtype=np.int64, copy=True)


class _Level:
    def __init__(self, data):
        self.features = Tensor(data)


class _SingleLevel:
    """Two-level shell around one feature matrix; consistency scoring skips
    the raw input level, so level 0 is an empty stand-in."""

    def __init__(self, feats):
        self.layers = [_Level(np.zeros((0, feats.shape[1]),
                                       dtype=np.float32)),
                       _Level(feats)]


class _PairList:
    def __init__(self, o_rows, t_rows):
        empty = np.zeros(0, dtype=np.int64)
        self.layers = [(empty, empty), (o_rows, t_rows)]


def bind_losses(pred, target, online_feats, target_feats, pairs, tau=1.0):
    """Reconstruction and consistency loss values on caller arrays.

    pred, target: (A, 3) and (B, 3) point sets for the symmetric chamfer
    term. online_feats, target_feats: (N_o, C) and (N_t, C) feature rows
    from one encoder level; pairs: (M, 2) integer (online_row, target_row)
    correspondences, each scored against the other target rows in the
    list; tau scales the logits. Returns (l_pc, l_csd) as plain floats;
    fewer than 2 pairs leaves l_csd at 0 (no negatives to score against).
    """
    pred32 = _copy_in("pred", pred, np.float32, 2, 3)
    tgt32 = _copy_in("target", target, np.float32, 2, 3)
    if pred32.shape[0] < 1 or tgt32.shape[0] < 1:
        raise BoundaryError("pred and target each need at least one point")
    feats_o = _copy_in("online_feats", online_feats, np.float32, 2)
    feats_t = _copy_in("target_feats", target_feats, np.float32, 2)
    if feats_o.shape[1] != feats_t.shape[1]:
        raise BoundaryError(f"feature widths disagree: {feats_o.shape[1]} "
                            f"vs {feats_t.shape[1]}")
    prs = _copy_indices("pairs", pairs)
    if prs.shape[0]:
        if prs[:, 0].min() < 0 or prs[:, 0].max() >= feats_o.shape[0]:
            raise BoundaryError("pairs: online row out of range")
        if prs[:, 1].min() < 0 or prs[:, 1].max() >= feats_t.shape[0]:
            raise BoundaryError("pairs: target row out of range")
    tau = _scalar("tau", tau, float)
    if tau <= 0.0:
        raise BoundaryError(f"tau must be > 0, got {tau}")

    l_pc = float(chamfer(Tensor(pred32), tgt32).data)
    loss, _ = csd_loss(_PairList(prs[:, 0].copy(), prs[:, 1].copy()),
                       _SingleLevel(feats_o), _SingleLevel(feats_t),
                       ConsistencyConfig(tau=tau))
    return l_pc, float(loss.data)
