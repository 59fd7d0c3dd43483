"""Desk-scale toolkit for layer-regression adversarial example detection.

The pieces compose in pipeline order: synthesize or load data, train a
classifier, fit the detector to its frozen activations, attack, and
evaluate.  Import the submodules directly; the package namespace only
re-exports the handful of entry points most scripts need.
"""

from .attacks import AttackConfig, adaptive_pgd, apgd_s, bim, fgsm, pgd
from .baselines import TransformSpec, bit_reduce, median_smooth, mismatch_score
from .checkpoint import load_adversarial, load_checkpoint, save_adversarial, save_checkpoint
from .data import load_idx_dataset, make_dataset
from .detector import Detector, RegressorTrainConfig, make_tap_spec, score, train_regressor
from .evaluate import auroc, build_eval_sets, epsilon_sweep, evaluate_detector
from .models import Classifier, ModelConfig, TrainConfig, train_classifier

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "adaptive_pgd", "apgd_s", "bim", "fgsm", "pgd",
    "TransformSpec", "bit_reduce", "median_smooth", "mismatch_score",
    "load_adversarial", "load_checkpoint", "save_adversarial", "save_checkpoint",
    "load_idx_dataset", "make_dataset",
    "Detector", "RegressorTrainConfig", "make_tap_spec", "score", "train_regressor",
    "auroc", "build_eval_sets", "epsilon_sweep", "evaluate_detector",
    "Classifier", "ModelConfig", "TrainConfig", "train_classifier",
    "__version__",
]
