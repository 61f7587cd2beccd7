"""Group-balanced synthetic pretraining for debiasing image classifiers."""

from .errors import FairgenError
from .groups import DatasetItem, GroupedDataset, GroupKey, SplitSpec, construct_biased_split, load_manifest, save_manifest
from .losses import ce_loss, combined_loss, gdro_loss, supcon_loss
from .metrics import GroupMetrics, emit_report, evaluate
from .pipeline import ExperimentConfig, run_experiment, run_matrix, run_pipeline, run_stage
from .toy import ShapeWorldConfig, generate_shapeworld

__version__ = "0.1.0"
