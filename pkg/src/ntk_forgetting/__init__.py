"""Catastrophic forgetting of linearized (NTK-regime) models under projection-based continual learning."""
from .config import ConfigError, ExperimentConfig, load_config
from .forgetting import ForgettingAnalysis, cf_bound, cf_closed_form, drift, overlap_matrix, spectrum_report
from .harness import compare_report, run_experiment
from .learners import METHODS, Hyper, LearnerState, MemoryBasis, train_sequence
from .metrics import EvalMatrix, average_accuracy, eval_matrix, evaluate, forgetting_measure
from .model import FeatureMap, Weights, apply_feature_map, kernel, make_feature_map, predict
from .spectral import (ComplementProjector, OrthonormalBasis, SvdFactors, explained_variance_ratio,
                       gram_schmidt_append, principal_angle_cosines, project_complement, thin_svd)
from .tasks import TaskDataset, TaskSequence, generate, load_csv, write_csv

__version__ = "0.1.0"
