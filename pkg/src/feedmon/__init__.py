"""feedmon: simulator-backed execution monitoring for assistive feeding tasks.

Multimodal HMM-SVM anomaly detection with threshold baselines and ROC
evaluation, a finite-state task executor with shared-autonomy triggers, and a
service API for the operator console.

The service layer stays behind ``feedmon.service`` so the core package
imports without the web stack.
"""

__version__ = "0.1.0"

from .sequences import (
    AnomalyInjection,
    AnomalyKind,
    MultimodalSequence,
    SequenceLabel,
    Task,
    generate_corpus,
    generate_nominal,
    load_corpus,
    record_to_sequence,
    save_corpus,
)
from .hmm import ProgressHmm, TrainingDivergedError
from .svm import ConvergenceWarning, WeightedRbfSvm, median_heuristic_gamma
from .detector import (
    DetectionResult,
    DynamicThresholdDetector,
    FixedThresholdDetector,
    HmmSvmDetector,
    load_detector,
    load_detector_file,
    save_detector,
    step_training_set,
)
from .evaluation import (
    METHODS,
    LatencyReport,
    RocResult,
    auc_upper_envelope,
    detection_latency,
    evaluate_methods,
    evaluate_roc,
    stratified_folds,
)
from .fsm import (
    FsmDefinition,
    FsmState,
    RejectedTriggerError,
    ReplayMismatchError,
    SessionState,
    Trigger,
    replay,
)
from .runner import (
    ExecutionRecord,
    RecordStore,
    ScriptedEvents,
    SessionConfig,
    phase_sequences,
    run_session,
)

__all__ = [
    "__version__",
    "AnomalyInjection",
    "AnomalyKind",
    "MultimodalSequence",
    "SequenceLabel",
    "Task",
    "generate_corpus",
    "generate_nominal",
    "load_corpus",
    "record_to_sequence",
    "save_corpus",
    "ProgressHmm",
    "TrainingDivergedError",
    "ConvergenceWarning",
    "WeightedRbfSvm",
    "median_heuristic_gamma",
    "DetectionResult",
    "DynamicThresholdDetector",
    "FixedThresholdDetector",
    "HmmSvmDetector",
    "load_detector",
    "load_detector_file",
    "save_detector",
    "step_training_set",
    "METHODS",
    "LatencyReport",
    "RocResult",
    "auc_upper_envelope",
    "detection_latency",
    "evaluate_methods",
    "evaluate_roc",
    "stratified_folds",
    "FsmDefinition",
    "FsmState",
    "RejectedTriggerError",
    "ReplayMismatchError",
    "SessionState",
    "Trigger",
    "replay",
    "ExecutionRecord",
    "RecordStore",
    "ScriptedEvents",
    "SessionConfig",
    "phase_sequences",
    "run_session",
]
