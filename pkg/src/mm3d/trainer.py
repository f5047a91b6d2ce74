"""Pretraining loop: masked pairs in, AdamW steps and an EMA teacher out.

One training sample per scene per epoch: draw a (retained, target) pair from
the scene's cached masked sequence, encode the retained set online and the
target set with the teacher, fold out reconstructions for the chamfer loss,
match feature rows by id for the consistency loss, and step on
zeta1 * L_PC + zeta2 * L_CSD. Gradients accumulate over `batch_size` scenes
per optimizer step; the teacher EMA follows every step.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, add, backward, scale
from .consistency import (ConsistencyConfig, TeacherState, csd_loss, ema_update,
                          make_teacher, match_correspondence)
from .decoder import (DecoderConfig, DecoderParams, build_grid, expand_and_fold,
                      init_decoder_params, loss_pc)
from .encoder import EncoderConfig, EncoderParams, encode, init_encoder_params
from .errors import (CheckpointError, ConfigError, ContractError,
                     DegenerateSceneError, NumericError)
from .masking import MaskSchedule, build_sequence, rank_by_statistics, sample_training_pair
from .scene import normalize_scene
from .stats import StatConfig, compute_statistics

__all__ = [
    "TrainConfig", "LossReport", "AdamMoments", "Checkpoint",
    "adamw_step", "init_moments", "lr_at", "train",
    "save_checkpoint", "load_checkpoint", "evaluate_reconstruction",
]

CHECKPOINT_FORMAT = "mm3d-checkpoint"
CHECKPOINT_VERSION = 1

MASK_STRATEGIES = ("informative_preserved", "informative_abandoned", "random")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr0: float = 0.001
    weight_decay: float = 0.0005
    decay_fractions: tuple = (0.6, 0.8)
    decay_factor: float = 0.1
    zeta1: float = 1.0
    zeta2: float = 1.0
    beta: float = 0.999
    tau: float = 1.0
    gap: float = 0.1
    ratios: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    gap_mode: str = "fixed"
    mask_strategy: str = "informative_preserved"
    seed: int = 0
    normalize_scenes: bool = True
    normalize_features: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    stats: StatConfig = field(default_factory=StatConfig)

    def __post_init__(self):
        self.epochs = int(self.epochs)
        self.batch_size = int(self.batch_size)
        self.seed = int(self.seed)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.zeta1 < 0 or self.zeta2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got zeta1={self.zeta1} "
                              f"zeta2={self.zeta2}")
        fracs = tuple(float(f) for f in self.decay_fractions)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ConfigError(f"decay fractions must lie in (0,1), got {fracs}")
        if any(b <= a for a, b in zip(fracs, fracs[1:])):
            raise ConfigError(f"decay fractions must increase, got {fracs}")
        self.decay_fractions = fracs
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay factor must lie in (0,1], got {self.decay_factor}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0,1], got {self.beta}")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigError(f"unknown mask strategy '{self.mask_strategy}'")
        # these constructors validate the remaining fields
        self.schedule()
        self.consistency()

    def schedule(self):
        return MaskSchedule(ratios=self.ratios, gap=self.gap, gap_mode=self.gap_mode)

    def consistency(self):
        return ConsistencyConfig(tau=self.tau, normalize=self.normalize_features)

    def to_dict(self):
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr0": self.lr0, "weight_decay": self.weight_decay,
            "decay_fractions": list(self.decay_fractions),
            "decay_factor": self.decay_factor,
            "zeta1": self.zeta1, "zeta2": self.zeta2,
            "beta": self.beta, "tau": self.tau,
            "gap": self.gap, "ratios": list(self.ratios),
            "gap_mode": self.gap_mode, "mask_strategy": self.mask_strategy,
            "seed": self.seed,
            "normalize_scenes": self.normalize_scenes,
            "normalize_features": self.normalize_features,
            "encoder": {"n_layers": self.encoder.n_layers,
                        "channels": list(self.encoder.channels),
                        "k_group": self.encoder.k_group,
                        "downsample": self.encoder.downsample},
            "decoder": {"hidden": self.decoder.hidden,
                        "fold_width": self.decoder.fold_width,
                        "grid_scale": self.decoder.grid_scale},
            "stats": {"k": self.stats.k, "alphas": list(self.stats.alphas),
                      "channels": list(self.stats.channels)},
        }

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class LossReport:
    epochs: list = field(default_factory=list)
    loss_pc: list = field(default_factory=list)
    loss_csd: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    skipped_scenes: int = 0

    def append(self, epoch, pc, csd, total, lr, secs):
        self.epochs.append(int(epoch))
        self.loss_pc.append(float(pc))
        self.loss_csd.append(float(csd))
        self.loss_total.append(float(total))
        self.lr.append(float(lr))
        self.seconds.append(float(secs))

    @property
    def n_rows(self):
        return len(self.epochs)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss_pc,loss_csd,loss_total,lr,seconds\n")
            for i in range(self.n_rows):
                fh.write(f"{self.epochs[i]},{self.loss_pc[i]!r},"
                         f"{self.loss_csd[i]!r},{self.loss_total[i]!r},"
                         f"{self.lr[i]!r},{self.seconds[i]!r}\n")


@dataclass
class AdamMoments:
    m: list
    v: list
    t: int = 0


@dataclass
class Checkpoint:
    online: EncoderParams
    teacher: TeacherState
    decoder: DecoderParams
    moments: AdamMoments
    epoch: int
    config_hash: str
    rng_state: dict


def init_moments(tensors):
    zeros = lambda t: np.zeros_like(t.data, dtype=np.float32)
    return AdamMoments(m=[zeros(t) for t in tensors],
                       v=[zeros(t) for t in tensors], t=0)


def adamw_step(params, grads, moments, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW step in place: decoupled decay, then the adaptive update."""
    if not (len(params) == len(grads) == len(moments.m) == len(moments.v)):
        raise ContractError("params, grads and moments must align")
    moments.t += 1
    t = moments.t
    corr1 = np.float32(1.0 - beta1 ** t)
    corr2 = np.float32(1.0 - beta2 ** t)
    decay_mult = np.float32(1.0 - lr * wd)
    lr32 = np.float32(lr)
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    eps32 = np.float32(eps)
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float32)
        if g.shape != p.data.shape:
            raise ContractError(f"grad {i} has shape {g.shape}, param "
                                f"{p.data.shape}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient for parameter {i} "
                               f"(shape {p.data.shape}): {bad} bad entries")
        p.data *= decay_mult
        moments.m[i] = b1 * moments.m[i] + (np.float32(1.0) - b1) * g
        moments.v[i] = b2 * moments.v[i] + (np.float32(1.0) - b2) * g * g
        m_hat = moments.m[i] / corr1
        v_hat = moments.v[i] / corr2
        p.data -= lr32 * m_hat / (np.sqrt(v_hat) + eps32)
    return params, moments


def lr_at(epoch, cfg):
    """Piecewise-constant: lr0 scaled by the decay factor at each boundary."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    hits = 0
    for frac in cfg.decay_fractions:
        if epoch >= int(math.floor(frac * cfg.epochs + 1e-9)):
            hits += 1
    return cfg.lr0 * cfg.decay_factor ** hits


def _strategy_ranking(scene, stat_field, strategy, rng):
    if strategy == "informative_preserved":
        return rank_by_statistics(stat_field)
    if strategy == "informative_abandoned":
        order = np.lexsort((stat_field.ids, stat_field.d))
        return stat_field.ids[order]
    return rng.permutation(np.sort(scene.ids))


def _encoder_feasible(n_points, enc_cfg):
    """Layer sizes never drop below the grouping size."""
    n = n_points
    for _ in range(enc_cfg.n_layers):
        if n < enc_cfg.k_group:
            return False
        n = -(-n // enc_cfg.downsample)
    return True


def _prepare_scene(index, scene, cfg, sched):
    """StatField + masked sequence for one scene; None when degenerate."""
    try:
        stat_field = compute_statistics(scene, cfg.stats)
        rng = np.random.default_rng([cfg.seed, 0xA5, index])
        ranking = _strategy_ranking(scene, stat_field, cfg.mask_strategy, rng)
        seq = build_sequence(scene, stat_field, sched, ranking=ranking)
        smallest = len(seq.sets[-1])
        if not _encoder_feasible(smallest, cfg.encoder):
            raise DegenerateSceneError(
                f"retained set of {smallest} points cannot feed "
                f"{cfg.encoder.n_layers} layers with k_group="
                f"{cfg.encoder.k_group}")
        return seq
    except DegenerateSceneError as exc:
        warnings.warn(f"skipping scene {index}: {exc}")
        return None


def _scene_loss(scene, seq, online, teacher, dec_params, cfg, sched, cons_cfg,
                grid_cache, rng):
    """Forward pass for one sampled pair; returns (tape, total, pc, csd)."""
    pair = sample_training_pair(seq, rng, sched)
    tape = Tape()
    hier = encode(scene, pair.input_ids, online, cfg.encoder, tape)
    target_sub = scene.subset_by_ids(pair.target_ids)

    l_pc = l_csd = None
    if cfg.zeta1 > 0:
        n_target = target_sub.n_points
        grids = []
        for layer in hier.layers[1:]:
            r = -(-n_target // layer.ids.shape[0])
            if r not in grid_cache:
                grid_cache[r] = build_grid(r, cfg.decoder.grid_scale)
            grids.append(grid_cache[r])
        pred = expand_and_fold(hier, dec_params, grids, tape)
        l_pc = loss_pc(pred, target_sub.positions, tape)
    if cfg.zeta2 > 0:
        target_hier = encode(scene, pair.target_ids, teacher.params, cfg.encoder,
                             None)
        pairs = match_correspondence(hier, target_hier)
        l_csd, _ = csd_loss(pairs, hier, target_hier, cons_cfg, tape)

    terms = []
    if l_pc is not None:
        terms.append(scale(l_pc, cfg.zeta1, tape))
    if l_csd is not None:
        terms.append(scale(l_csd, cfg.zeta2, tape))
    total = None
    for term in terms:
        total = term if total is None else add(total, term, tape)
    return tape, total, l_pc, l_csd


def train(dataset, cfg, n_threads=1, resume=None, snapshot_epochs=(),
          snapshot_dir=None):
    """Run the pretraining loop; returns (final Checkpoint, LossReport).

    `snapshot_epochs` lists completed-epoch counts after which a checkpoint
    file is written into `snapshot_dir`. `resume` takes a loaded Checkpoint
    and continues it under the same config.
    """
    if not dataset:
        raise ContractError("training needs a non-empty dataset")
    cfg_hash = cfg.config_hash()
    sched = cfg.schedule()
    cons_cfg = cfg.consistency()

    scenes = [normalize_scene(s) if cfg.normalize_scenes else s for s in dataset]
    prep = lambda pair: _prepare_scene(pair[0], pair[1], cfg, sched)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            prepared = list(pool.map(prep, enumerate(scenes)))
    else:
        prepared = [prep(item) for item in enumerate(scenes)]
    usable = [(scene, seq) for scene, seq in zip(scenes, prepared)
              if seq is not None]
    skipped = len(scenes) - len(usable)
    if not usable:
        raise DegenerateSceneError("every scene in the dataset is degenerate")

    if resume is not None:
        if resume.config_hash != cfg_hash:
            raise CheckpointError("checkpoint was produced under a different "
                                  "config")
        online = resume.online
        teacher = resume.teacher
        dec_params = resume.decoder
        moments = resume.moments
        start_epoch = resume.epoch
        rng = np.random.default_rng(0)
        rng.bit_generator.state = resume.rng_state
        if start_epoch >= cfg.epochs:
            raise CheckpointError(f"checkpoint already covers {start_epoch} of "
                                  f"{cfg.epochs} epochs")
    else:
        online = init_encoder_params(cfg.encoder,
                                     np.random.default_rng([cfg.seed, 1]))
        dec_params = init_decoder_params(cfg.encoder, cfg.decoder,
                                         np.random.default_rng([cfg.seed, 2]))
        teacher = make_teacher(online, cfg.beta)
        moments = init_moments(online.tensors() + dec_params.tensors())
        start_epoch = 0
        rng = np.random.default_rng([cfg.seed, 3])

    leaves = online.tensors() + dec_params.tensors()
    report = LossReport(skipped_scenes=skipped)
    grid_cache = {}

    def apply_step(n_acc, lr):
        inv = np.float32(1.0 / n_acc)
        grads = [t.grad * inv if t.grad is not None
                 else np.zeros_like(t.data, dtype=np.float32) for t in leaves]
        adamw_step(leaves, grads, moments, lr, cfg.weight_decay)
        for t in leaves:
            t.grad = None
        ema_update(teacher, online)

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        t_start = time.perf_counter()
        sum_pc = sum_csd = sum_total = 0.0
        n_acc = 0
        for scene, seq in usable:
            tape, total, l_pc, l_csd = _scene_loss(
                scene, seq, online, teacher, dec_params, cfg, sched, cons_cfg,
                grid_cache, rng)
            pc_val = float(l_pc.data) if l_pc is not None else 0.0
            csd_val = float(l_csd.data) if l_csd is not None else 0.0
            sum_pc += pc_val
            sum_csd += csd_val
            sum_total += cfg.zeta1 * pc_val + cfg.zeta2 * csd_val
            if total is not None:
                backward(tape, total)
            n_acc += 1
            if n_acc == cfg.batch_size:
                apply_step(n_acc, lr)
                n_acc = 0
        if n_acc > 0:
            apply_step(n_acc, lr)
        n_used = len(usable)
        report.append(epoch, sum_pc / n_used, sum_csd / n_used,
                      sum_total / n_used, lr, time.perf_counter() - t_start)
        done = epoch + 1
        if done in set(snapshot_epochs):
            if snapshot_dir is None:
                raise ContractError("snapshot_epochs given without snapshot_dir")
            ckpt = Checkpoint(online, teacher, dec_params, moments, done,
                              cfg_hash, rng.bit_generator.state)
            save_checkpoint(ckpt, f"{snapshot_dir}/checkpoint_epoch{done}.mmck")

    final = Checkpoint(online, teacher, dec_params, moments, cfg.epochs,
                       cfg_hash, rng.bit_generator.state)
    return final, report


def evaluate_reconstruction(dataset, online, dec_params, cfg, theta=0.4):
    """Mean reconstruction loss: preserved-top retained set against the full
    scene, no sampling, no gradients. Degenerate scenes are skipped."""
    sched = MaskSchedule(ratios=(theta,), gap=theta, gap_mode="fixed")
    total = 0.0
    used = 0
    grid_cache = {}
    for scene in dataset:
        scene = normalize_scene(scene) if cfg.normalize_scenes else scene
        try:
            stat_field = compute_statistics(scene, cfg.stats)
            seq = build_sequence(scene, stat_field, sched)
            input_ids = seq.sets[0]
            if not _encoder_feasible(len(input_ids), cfg.encoder):
                raise DegenerateSceneError("retained set too small to encode")
            hier = encode(scene, input_ids, online, cfg.encoder, None)
            grids = []
            for layer in hier.layers[1:]:
                r = -(-scene.n_points // layer.ids.shape[0])
                if r not in grid_cache:
                    grid_cache[r] = build_grid(r, cfg.decoder.grid_scale)
                grids.append(grid_cache[r])
            pred = expand_and_fold(hier, dec_params, grids, None)
            total += float(loss_pc(pred, scene.positions, None).data)
            used += 1
        except DegenerateSceneError as exc:
            warnings.warn(f"evaluation skipped a scene: {exc}")
    if used == 0:
        raise DegenerateSceneError("no evaluable scenes")
    return total / used


# ----------------------------------------------------------- checkpoint file

def _named_tensors(online, teacher, dec_params):
    """(name, array) pairs in the declared checkpoint order."""
    out = []
    for prefix, params in (("online", online), ("teacher", teacher.params)):
        for l, layer in enumerate(params.layers):
            for key in ("w1", "b1", "w2", "b2"):
                out.append((f"{prefix}/{l}/{key}", layer[key].data))
    for l, layer in enumerate(dec_params.layers):
        for branch in ("psi1", "psi2"):
            for i, (w, b) in enumerate(layer[branch]):
                out.append((f"decoder/{l}/{branch}/{i}/w", w.data))
                out.append((f"decoder/{l}/{branch}/{i}/b", b.data))
    return out


def save_checkpoint(ckpt, path):
    arrays = _named_tensors(ckpt.online, ckpt.teacher, ckpt.decoder)
    for i, m in enumerate(ckpt.moments.m):
        arrays.append((f"adam_m/{i}", m))
    for i, v in enumerate(ckpt.moments.v):
        arrays.append((f"adam_v/{i}", v))
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": int(ckpt.epoch),
        "step": int(ckpt.moments.t),
        "beta": float(ckpt.teacher.beta),
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "arrays": [{"name": name, "shape": list(arr.shape)}
                   for name, arr in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line)
    except ValueError as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a checkpoint file: format "
                              f"{header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} "
                              f"unsupported (want {CHECKPOINT_VERSION})")
    shapes = [(entry["name"], tuple(entry["shape"]))
              for entry in header["arrays"]]
    expected = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in shapes) * 4
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint blob has {len(blob)} bytes, "
                              f"declared arrays need {expected}")
    arrays = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=offset).reshape(shape).copy()
        arrays[name] = arr
        offset += count * 4

    def collect(prefix, requires_grad):
        layers = []
        l = 0
        while f"{prefix}/{l}/w1" in arrays:
            layers.append({key: Tensor(arrays[f"{prefix}/{l}/{key}"],
                                       requires_grad=requires_grad)
                           for key in ("w1", "b1", "w2", "b2")})
            l += 1
        if not layers:
            raise CheckpointError(f"checkpoint lists no '{prefix}' arrays")
        return EncoderParams(layers)

    online = collect("online", True)
    teacher = TeacherState(collect("teacher", False), float(header["beta"]))
    dec_layers = []
    l = 0
    while f"decoder/{l}/psi1/0/w" in arrays:
        layer = {}
        for branch in ("psi1", "psi2"):
            stack = []
            i = 0
            while f"decoder/{l}/{branch}/{i}/w" in arrays:
                stack.append((Tensor(arrays[f"decoder/{l}/{branch}/{i}/w"],
                                     requires_grad=True),
                              Tensor(arrays[f"decoder/{l}/{branch}/{i}/b"],
                                     requires_grad=True)))
                i += 1
            layer[branch] = stack
        dec_layers.append(layer)
        l += 1
    if not dec_layers:
        raise CheckpointError("checkpoint lists no decoder arrays")
    decoder = DecoderParams(dec_layers)

    n_moments = sum(1 for name in arrays if name.startswith("adam_m/"))
    moments = AdamMoments(m=[arrays[f"adam_m/{i}"] for i in range(n_moments)],
                          v=[arrays[f"adam_v/{i}"] for i in range(n_moments)],
                          t=int(header["step"]))
    rng_state = header["rng_state"]
    return Checkpoint(online, teacher, decoder, moments, int(header["epoch"]),
                      header["config_hash"], rng_state)
