"""boxcap: joint open-world detection and dense-captioning pretraining on
synthetic scenes, with a deterministic training loop and its own evaluators."""

from .assign import Assignment, atss_assign, build_alignment_targets, centerness_target
from .caption import (
    CaptionDecoder,
    ClassAgnosticResult,
    caption_lm_loss,
    class_agnostic_proposals,
    generate_caption,
)
from .concepts import (
    ConceptDictionary,
    ConceptSet,
    InvalidConcept,
    build_concept,
    sample_negatives,
)
from .dataio import Dataset, generate_dataset, load_dataset, load_dictionary
from .encoders import (
    AnchorGrid,
    ImageEncoder,
    ModelConfig,
    RegionOutputs,
    TextEmbeddings,
    TextEncoder,
    alignment_scores,
    build_anchors,
)
from .inference import two_stage_inference, zero_shot_detect
from .losses import (
    LossWeights,
    detection_loss,
    focal_alignment_loss,
    giou_loss,
    total_loss,
)
from .metrics import (
    DenseCapPrediction,
    Detection,
    DetectionKind,
    densecap_map,
    detection_ap,
    meteor,
    nms,
)
from .model import BoxCapModel, arch_hash
from .samples import Source, UnifiedSample
from .scenes import SceneSpec, SceneSpecError, generate_scene, render_scene
from .tokenizer import TokenSeq, Vocabulary, detokenize, normalize, tokenize
from .train import (
    ArchMismatch,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    checkpoint_load,
    checkpoint_save,
    fit,
)

__version__ = "0.1.0"
