"""Training-free test-time improvement for concept bottleneck models.

The package trains a small concept bottleneck model (CBM) on feature vectors,
stores per-class concept activation statistics on validation data, flags
confusion concepts on a handful of labeled out-of-domain samples and corrects
them with a global concept mask at inference time.
"""

from cbmshift.adaptation import (
    ConceptMask,
    ConfusionReport,
    IdentificationConfig,
    OodActivationTable,
    build_mask,
    collect_ood_activations,
    identify_confusion,
    masked_predict,
)
from cbmshift.data import (
    ActivationRecord,
    ClassVocabulary,
    ConceptVocabulary,
    FormatError,
    Sample,
    SplitDataset,
    load_activations_csv,
    load_samples_csv,
    write_activations_csv,
    write_samples_csv,
)
from cbmshift.evaluation import EvalResult, compare, evaluate
from cbmshift.memory import ConceptMemory, build_memory, load_memory, save_memory
from cbmshift.model import CbmParameters, ForwardTrace, LossConfig, backward, forward, joint_loss
from cbmshift.synthshift import ShiftScenario, make_scenario
from cbmshift.training import AdamWState, TrainConfig, adamw_step, fine_tune, train

__version__ = "0.1.0"

__all__ = [
    "ActivationRecord",
    "AdamWState",
    "CbmParameters",
    "ClassVocabulary",
    "ConceptMask",
    "ConceptMemory",
    "ConceptVocabulary",
    "ConfusionReport",
    "EvalResult",
    "FormatError",
    "ForwardTrace",
    "IdentificationConfig",
    "LossConfig",
    "OodActivationTable",
    "Sample",
    "ShiftScenario",
    "SplitDataset",
    "TrainConfig",
    "adamw_step",
    "backward",
    "build_mask",
    "build_memory",
    "collect_ood_activations",
    "compare",
    "evaluate",
    "fine_tune",
    "forward",
    "identify_confusion",
    "joint_loss",
    "load_activations_csv",
    "load_memory",
    "load_samples_csv",
    "make_scenario",
    "masked_predict",
    "save_memory",
    "train",
    "write_activations_csv",
    "write_samples_csv",
]
