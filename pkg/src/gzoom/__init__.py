"""Saliency-grounded evidence pools and top-k decision refinement.

The pipeline: train a small whole-image CNN, locate each class's evidence
with a grounding method (contrastive excitation backprop, Grad-CAM, or
RISE), mine zoomed-in evidence patches by adversarial erasing, train an
evidence CNN on the patches, and re-rank the whole-image classifier's
top-k candidates with patch posteriors.
"""

from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .data import (Dataset, SyntheticSpec, generate, ingest_folder,
                   load_dataset, localization_score, save_dataset)
from .errors import (BadMagicError, ConfigError, DataFormatError, GzoomError,
                     NoEvidenceError, NumericError, ShapeError,
                     TrainingDivergedError, TruncatedError, UsageError,
                     VersionError)
from .grounding import (GroundingConfig, RiseConfig, SaliencyMap, erase,
                        excitation_backprop, extract_patch, grad_cam, ground,
                        ground_grids, peak, rise, rise_masks)
from .network import (Model, ModelSpec, conventional_spec, evidence_spec,
                      topk)
from .pool import (EvidencePatch, EvidencePool, build_ensemble_pool,
                   build_pool, load_pool, save_pool, train_evidence_cnn,
                   verify_pool)
from .refinement import MetricsReport, RefinementConfig, RefinementTrace, \
    evaluate, refine
from .training import TrainConfig, accuracy, eval_view, train
from .util import derive_seed, new_rng
from .viz import read_pnm, write_pgm, write_ppm, write_ppm_overlay

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "ConfigError", "DataFormatError", "Dataset",
    "EvidencePatch", "EvidencePool", "GroundingConfig", "GzoomError",
    "MetricsReport", "Model", "ModelSpec", "NoEvidenceError", "NumericError",
    "RefinementConfig", "RefinementTrace", "RiseConfig", "SaliencyMap",
    "ShapeError", "SyntheticSpec", "TrainConfig", "TrainingDivergedError",
    "TruncatedError", "UsageError", "VersionError", "accuracy",
    "build_ensemble_pool", "build_pool", "checkpoint_hash",
    "conventional_spec", "derive_seed", "erase", "eval_view", "evaluate",
    "evidence_spec", "excitation_backprop", "extract_patch", "generate",
    "grad_cam", "ground", "ground_grids", "ingest_folder", "load_checkpoint",
    "load_dataset", "load_pool", "localization_score", "new_rng", "peak",
    "read_pnm", "refine", "rise", "rise_masks", "save_checkpoint",
    "save_dataset", "save_pool", "topk", "train", "train_evidence_cnn",
    "verify_pool", "write_pgm", "write_ppm", "write_ppm_overlay",
]
