"""Feature-suppressed contrast for siamese self-supervised pre-training.

The package suppresses the most responsive spatial locations of one view's
feature map during contrast, ramping the suppressed fraction up over training,
and adds the suppressed comparison as a second loss term on BYOL- and
SimSiam-style frameworks. Includes a synthetic desk-scale dataset, a
reproducible trainer, and a linear/fine-tune evaluation harness with
ablations and diagnostics.
"""

from .augment import AugmentPolicy, derive_sample_seed, sample_view_pair
from .data import (
    DatasetManifest,
    SubsetSpec,
    build_manifest,
    generate_synthetic,
    stratified_subset,
)
from .errors import CheckpointError, IngestionError, TrainingDiverged, ValidationError
from .frameworks import (
    EncoderSpec,
    HeadSpec,
    LossReport,
    SiameseNet,
    byol_distance,
    ema_update,
    feasc_total_loss,
    load_backbone,
    load_checkpoint,
    mi_lower_bound_terms,
    save_checkpoint,
    simsiam_distance,
)
from .suppression import (
    RampSchedule,
    SuppressionMask,
    build_mask,
    compute_response_map,
    mask_low_response,
    mask_random,
    ramp_up_eta,
    suppress_features,
    suppressed_count,
)
from .trainer import TrainConfig, lr_at, train
from .evaluation import AblationSpec, EvalConfig, export_heatmap, finetune, linear_probe

__version__ = "0.1.0"
