"""Few-shot open-set recognition over embedding vectors."""

from .classifier import FeatureHead, PrototypeSet, classify, compute_logits, compute_prototypes, embed
from .embeddings import Dataset, LabelSplit, SyntheticConfig, generate_synthetic, load_embeddings, split_labels
from .episodes import UNKNOWN, EpisodeSpec, EpisodeTask, sample_balanced_eval, sample_known_task, sample_unknown_task
from .metrics import MetricsReport, aupr, auroc, fs_accuracy, os_accuracy, oscr
from .runner import ExperimentConfig, compare, evaluate, run_experiment, train

__version__ = "0.1.0"
