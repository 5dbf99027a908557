"""Volumetric retinal fluid segmentation toolkit for OCT/OCTA scans."""

from .volumes import (
    BACKGROUND,
    FLUID,
    TISSUE,
    UNRESOLVED,
    LabelVolume,
    ProbabilityVolume,
    ScanVolume,
    VolumeFormatError,
    load_volume,
    save_volume,
)
from .phantom import Ellipsoid, PhantomSpec, ShadowSpec, SurfaceUndulation, apply_shadows, generate_phantom
from .preprocess import FusionConfig, augment_flip, fuse, normalize, prepare_input, smooth_bscans
from .grading import GraderSet, label_stats, resolve, vote_merge
from .losses import LossConfig, jaccard_class_loss, total_loss
from .network import ModelConfig, RefNet, build_model, load_checkpoint, predict_volume, save_checkpoint
from .training import PlateauScheduler, TrainConfig, TrainHistory, split_dataset, train
from .metrics import ConfusionCounts, MetricRow, aroc, confusion, evaluate_model, f1, iou, sweep_beta
from .volumetry import FluidReport, connected_components, enface_projection, fluid_report, fluid_volume, simulate_sparse_sampling, thickness_map
from .registration import ChangeMap, RegistrationResult, change_map, estimate_bm_surface, flatten_axial, register_lateral, register_pair
from .datasets import LabeledVolume, load_dataset, random_phantom_spec, synthesize_labeled

__version__ = "0.1.0"
