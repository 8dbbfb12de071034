"""ocusynth: dual-branch style-based synthesis of paired VIS/NIR ocular images,
few-shot semantic mask generation from synthesis features, and a downstream
segmentation harness that validates label quality."""

from .config import (
    ConfigError,
    DataConfig,
    RunConfig,
    SegTrainConfig,
    SMGConfig,
    SynthesisConfig,
    TrainConfig,
    load_run_config,
)
from .generator import (
    BimodalPair,
    DualBranchGenerator,
    FeatureStack,
    modulated_conv2d,
    style_mix,
    tap_fingerprint,
    weights_fingerprint,
)
from .discriminator import Discriminator, r1_penalty
from .training import (
    PairDataset,
    Trainer,
    load_checkpoint,
    path_length_penalty,
    regularization_gammas,
    train,
)
from .smg import (
    AnnotatedSample,
    SMGModel,
    extract_hypercolumns,
    load_smg,
    majority_vote,
    predict_mask,
    save_smg,
    train_smg,
)
from .dataset import (
    DatasetManifest,
    TripletRecord,
    composite_alignment_image,
    generate_triplets,
    nearest_training_sample,
    read_manifest,
)
from .metrics import (
    SegMetrics,
    alignment_score,
    perceptual_distance,
    segmentation_metrics,
)
from .procedural import OcularParams, render_dataset, render_sample, sample_params
from .segmenter import SegmenterModel, evaluate_segmenter, load_segmenter, train_segmenter

__version__ = "0.1.0"
