"""ROC evaluation of detectors under stratified cross-validation.

One HMM is fit per fold on the nominal training split and shared by every
method and sweep value; the SVM training kernel is likewise computed once
per fold.  Counts are pooled over folds per sweep value, giving one ROC
point per value, and the area is taken under the monotone upper envelope of
those points anchored at (0,0) and (1,1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .detector import (
    DynamicThresholdDetector,
    FixedThresholdDetector,
    HmmSvmDetector,
    step_training_set,
)
from .hmm import ProgressHmm
from .sequences import MultimodalSequence, SequenceLabel
from .svm import ConvergenceWarning, median_heuristic_gamma, rbf_kernel
from .validation import check_count

METHODS = ("hmm_svm", "fixed_threshold", "dynamic_threshold")


@dataclass(frozen=True)
class RocPoint:
    """Pooled confusion counts for one sweep value."""

    sweep_value: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def tpr(self) -> float:
        total = self.tp + self.fn
        return self.tp / total if total else 0.0

    @property
    def fpr(self) -> float:
        total = self.fp + self.tn
        return self.fp / total if total else 0.0


@dataclass(frozen=True)
class RocResult:
    """Sweep outcome for one method."""

    method: str
    points: list[RocPoint]
    auc: float

    def table(self) -> str:
        lines = [
            f"method: {self.method}   auc: {self.auc:.4f}",
            f"{'sweep':>10} {'tp':>5} {'fp':>5} {'tn':>5} {'fn':>5} {'tpr':>7} {'fpr':>7}",
        ]
        for p in self.points:
            lines.append(
                f"{p.sweep_value:>10.4g} {p.tp:>5} {p.fp:>5} {p.tn:>5} {p.fn:>5}"
                f" {p.tpr:>7.3f} {p.fpr:>7.3f}"
            )
        return "\n".join(lines)


def stratified_folds(labels, n_folds: int = 4, seed: int = 0):
    """Deterministic stratified split into train/test index pairs.

    Every index lands in exactly one test fold and per-fold class counts
    differ by at most one within each class.
    """
    labels = np.asarray(labels, dtype=bool)
    check_count(n_folds, "n_folds", minimum=2)
    for value in (False, True):
        if np.sum(labels == value) < n_folds:
            raise ValueError(
                f"class {value} has fewer members than n_folds={n_folds}"
            )
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=int)
    for value in (False, True):
        indices = np.flatnonzero(labels == value)
        rng.shuffle(indices)
        fold_of[indices] = np.arange(len(indices)) % n_folds
    return [
        (np.flatnonzero(fold_of != fold), np.flatnonzero(fold_of == fold))
        for fold in range(n_folds)
    ]


def auc_upper_envelope(fprs, tprs) -> float:
    """Trapezoid area under the monotone upper envelope of ROC points.

    Points are anchored at (0,0) and (1,1); at equal FPR the best TPR wins,
    and TPR is made non-decreasing by a running maximum so that a sweep
    whose points backtrack still yields the area of its attainable hull.
    """
    pairs = sorted(zip(list(fprs) + [0.0, 1.0], list(tprs) + [0.0, 1.0]))
    xs: list[float] = []
    ys: list[float] = []
    best = 0.0
    for x, y in pairs:
        if not 0.0 <= x <= 1.0 or not 0.0 <= y <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
        best = max(best, y)
        if xs and x == xs[-1]:
            ys[-1] = best
        else:
            xs.append(x)
            ys.append(best)
    area = 0.0
    for i in range(1, len(xs)):
        area += (xs[i] - xs[i - 1]) * 0.5 * (ys[i] + ys[i - 1])
    return area


def evaluate_methods(
    sequences: list[MultimodalSequence],
    sweeps: dict[str, list[float]],
    *,
    n_folds: int = 4,
    seed: int = 0,
    n_states: int = 20,
    subsample: int = 2,
    c_base: float = 1.0,
    n_clusters: int = 5,
    hmm_params: dict | None = None,
    svm_params: dict | None = None,
) -> dict[str, RocResult]:
    """Cross-validated ROC sweep for several methods over one corpus.

    ``sweeps`` maps method names to their sweep values: the positive class
    weight for "hmm_svm" and the threshold sensitivity for the others.
    """
    for method in sweeps:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    is_anomalous = [s.label is SequenceLabel.ANOMALOUS for s in sequences]
    folds = stratified_folds(is_anomalous, n_folds=n_folds, seed=seed)
    counts: dict[str, dict[float, np.ndarray]] = {
        m: {v: np.zeros(4, dtype=int) for v in values} for m, values in sweeps.items()
    }

    for train_idx, test_idx in folds:
        train = [sequences[i] for i in train_idx]
        test = [sequences[i] for i in test_idx]
        hmm = ProgressHmm(n_states=n_states, **(hmm_params or {})).fit(
            [s for s in train if s.label is SequenceLabel.NOMINAL]
        )
        train_mats = hmm.feature_matrices(train)
        test_mats = hmm.feature_matrices(test)
        test_anomalous = [s.label is SequenceLabel.ANOMALOUS for s in test]

        for method, values in sweeps.items():
            for detector in _sweep_detectors(
                method, values, train, hmm, train_mats,
                subsample=subsample, c_base=c_base, n_clusters=n_clusters,
                seed=seed, svm_params=svm_params,
            ):
                tally = counts[method][detector_sweep_value(method, detector)]
                for matrix, truth in zip(test_mats, test_anomalous):
                    flagged = bool(np.any(detector.score_steps(matrix) >= 0.0))
                    if truth:
                        tally[0 if flagged else 3] += 1
                    else:
                        tally[1 if flagged else 2] += 1

    results = {}
    for method, values in sweeps.items():
        points = [
            RocPoint(v, *(int(c) for c in counts[method][v])) for v in values
        ]
        auc = auc_upper_envelope([p.fpr for p in points], [p.tpr for p in points])
        results[method] = RocResult(method=method, points=points, auc=auc)
    return results


def detector_sweep_value(method: str, detector) -> float:
    return detector.w_pos if method == "hmm_svm" else detector.sensitivity


def _sweep_detectors(
    method, values, train, hmm, train_mats, *,
    subsample, c_base, n_clusters, seed, svm_params,
):
    if method == "hmm_svm":
        labels = [s.label for s in train]
        onsets = [s.anomaly_onset for s in train]
        x, _ = step_training_set(train_mats, labels, onsets, subsample)
        gamma = median_heuristic_gamma(x)
        gram = rbf_kernel(x, x, gamma)
        for value in values:
            detector = HmmSvmDetector(
                n_states=hmm.n_states,
                subsample=subsample,
                c_base=c_base,
                w_pos=value,
                gamma=gamma,
                **(svm_params or {}),
            )
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                detector.fit(train, hmm=hmm, matrices=train_mats, gram=gram)
            yield detector
    elif method == "fixed_threshold":
        for value in values:
            yield FixedThresholdDetector(
                n_states=hmm.n_states, sensitivity=value
            ).fit(train, hmm=hmm, matrices=train_mats)
    elif method == "dynamic_threshold":
        for value in values:
            yield DynamicThresholdDetector(
                n_states=hmm.n_states,
                sensitivity=value,
                n_clusters=n_clusters,
                seed=seed,
            ).fit(train, hmm=hmm, matrices=train_mats)
    else:
        raise ValueError(f"unknown method {method!r}")


def evaluate_roc(sequences, method: str, sweep_values, **kwargs) -> RocResult:
    """Single-method convenience wrapper around evaluate_methods."""
    return evaluate_methods(sequences, {method: list(sweep_values)}, **kwargs)[method]


@dataclass(frozen=True)
class LatencyReport:
    """Detection timing over anomalous sequences.

    ``latencies`` holds first_detection - onset for runs caught at or after
    their onset; ``early`` counts runs that fired before the fault existed,
    ``missed`` runs that never fired.
    """

    latencies: list[int]
    early: int
    missed: int
    n_anomalous: int

    @property
    def median_latency(self) -> float:
        if not self.latencies:
            return float("inf")
        return float(np.median(self.latencies))

    @property
    def clean_prefix_fraction(self) -> float:
        if not self.n_anomalous:
            return 1.0
        return 1.0 - self.early / self.n_anomalous


def detection_latency(detector, sequences) -> LatencyReport:
    """Run the detector over anomalous sequences and time first detections."""
    latencies: list[int] = []
    early = 0
    missed = 0
    total = 0
    for seq in sequences:
        if seq.label is not SequenceLabel.ANOMALOUS:
            continue
        total += 1
        result = detector.detect(seq)
        if not result.flagged:
            missed += 1
        elif result.first_detection_step < seq.anomaly_onset:
            early += 1
        else:
            latencies.append(result.first_detection_step - seq.anomaly_onset)
    return LatencyReport(latencies=latencies, early=early, missed=missed, n_anomalous=total)
