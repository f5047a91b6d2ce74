"""Self-supervised pretraining for 3D point scenes.

The pipeline: per-point local statistics over coordinate and color channels,
informative-preserved progressive masking, a hierarchical point encoder with
a folding decoder trained on chamfer reconstruction, and an EMA teacher
providing an id-matched consistency loss.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, gradcheck
from .consistency import (ConsistencyConfig, TeacherState, csd_loss, ema_update,
                          make_teacher, match_correspondence)
from .decoder import (DecoderConfig, DecoderParams, build_grid, chamfer,
                      expand_and_fold, init_decoder_params, loss_pc)
from .encoder import (EncoderConfig, EncoderParams, HierFeatures, encode, fps,
                      init_encoder_params)
from .errors import (CheckpointError, ConfigError, ContractError,
                     DegenerateSceneError, NumericError, PlyParseError,
                     ShapeError)
from .masking import (MaskSchedule, MaskedSequence, TrainingPair, baseline_mask,
                      build_sequence, rank_by_statistics, sample_training_pair)
from .scene import (PointScene, SynthObject, SynthSpec, synth_scene,
                    load_ply, load_synth_spec, normalize_scene, save_ply)
from .stats import (StatConfig, StatField, compute_statistics, export_heatmap,
                    knn_exact, write_stats_csv)
from .trainer import (Checkpoint, LossReport, TrainConfig, adamw_step,
                      evaluate_reconstruction, load_checkpoint, lr_at,
                      save_checkpoint, train)

__all__ = [
    "__version__",
    "Tape", "Tensor", "backward", "gradcheck",
    "ConsistencyConfig", "TeacherState", "csd_loss", "ema_update",
    "make_teacher", "match_correspondence",
    "DecoderConfig", "DecoderParams", "build_grid", "chamfer",
    "expand_and_fold", "init_decoder_params", "loss_pc",
    "EncoderConfig", "EncoderParams", "HierFeatures", "encode", "fps",
    "init_encoder_params",
    "CheckpointError", "ConfigError", "ContractError", "DegenerateSceneError",
    "NumericError", "PlyParseError", "ShapeError",
    "MaskSchedule", "MaskedSequence", "TrainingPair", "baseline_mask",
    "build_sequence", "rank_by_statistics", "sample_training_pair",
    "PointScene", "SynthObject", "SynthSpec", "synth_scene",
    "load_ply", "load_synth_spec", "normalize_scene", "save_ply",
    "StatConfig", "StatField", "compute_statistics", "export_heatmap",
    "knn_exact", "write_stats_csv",
    "Checkpoint", "LossReport", "TrainConfig", "adamw_step",
    "evaluate_reconstruction", "load_checkpoint", "lr_at", "save_checkpoint",
    "train",
]
