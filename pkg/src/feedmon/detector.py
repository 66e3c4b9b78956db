"""Anomaly detectors over HMM features.

Three strategies share one contract: score every timestep of a sequence so
that a score >= 0 means "anomalous here", and flag the sequence if any
timestep fires.

- HmmSvmDetector: discriminative SVM over per-timestep feature vectors
  (progress distribution + normalized log-likelihood).  Trained on nominal
  steps as -1 and post-onset anomalous steps as +1; pre-onset steps of
  anomalous runs are discarded because the fault has not happened yet.
- FixedThresholdDetector: one global log-likelihood floor, mean - c * std
  over all nominal training steps.
- DynamicThresholdDetector: log-likelihood floors conditioned on execution
  phase, one per cluster of nominal progress vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .hmm import ForwardFilter, HmmFeatures, ProgressHmm
from .sequences import MultimodalSequence, SequenceLabel
from .svm import WeightedRbfSvm
from .validation import check_count

DETECTOR_FORMAT = "feedmon-detector"
DETECTOR_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DetectionResult:
    """Sequence-level verdict with the per-step score trace."""

    flagged: bool
    first_detection_step: int | None
    step_scores: np.ndarray


def step_training_set(
    matrices: list[np.ndarray],
    labels: list[SequenceLabel],
    onsets: list[int | None],
    subsample: int = 2,
):
    """Per-timestep SVM training set from per-sequence feature matrices.

    Nominal sequences contribute every ``subsample``-th row with label -1.
    Anomalous sequences contribute every ``subsample``-th row from the onset
    onward with label +1; rows before the onset are dropped, not labeled.
    """
    check_count(subsample, "subsample", minimum=1)
    xs = []
    ys = []
    for matrix, label, onset in zip(matrices, labels, onsets):
        if label is SequenceLabel.NOMINAL:
            rows = matrix[::subsample]
            xs.append(rows)
            ys.append(-np.ones(len(rows)))
        else:
            if onset is None:
                raise ValueError("anomalous sequence without an onset")
            rows = matrix[onset::subsample]
            xs.append(rows)
            ys.append(np.ones(len(rows)))
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys)
    return x, y


def _features_of(sequences):
    labels = [seq.label for seq in sequences]
    onsets = [seq.anomaly_onset for seq in sequences]
    return labels, onsets


def _fit_hmm(sequences, n_states, hmm_params):
    nominal = [s for s in sequences if s.label is SequenceLabel.NOMINAL]
    params = {"n_states": n_states}
    params.update(hmm_params or {})
    return ProgressHmm(**params).fit(nominal)


class HmmSvmDetector(BaseEstimator):
    """SVM over per-timestep HMM features.

    ``w_pos`` is the sweep knob: larger values penalize missed anomalous
    steps more, moving the operating point toward higher detection rates at
    the cost of false alarms.
    """

    def __init__(
        self,
        n_states: int = 20,
        subsample: int = 2,
        c_base: float = 1.0,
        w_pos: float = 1.0,
        w_neg: float = 1.0,
        gamma="median",
        tol: float = 1e-3,
        max_passes: int = 200,
        hmm_params: dict | None = None,
    ):
        self.n_states = n_states
        self.subsample = subsample
        self.c_base = c_base
        self.w_pos = w_pos
        self.w_neg = w_neg
        self.gamma = gamma
        self.tol = tol
        self.max_passes = max_passes
        self.hmm_params = hmm_params

    def fit(
        self,
        sequences: list[MultimodalSequence],
        *,
        hmm: ProgressHmm | None = None,
        matrices: list[np.ndarray] | None = None,
        gram: np.ndarray | None = None,
    ) -> "HmmSvmDetector":
        """Train on a mixed corpus.

        ``hmm`` and ``matrices`` (features aligned with ``sequences``) allow
        a cross-validation harness to reuse work across detectors; ``gram``
        additionally shares the training kernel across sweep values and must
        match the step training set this fit derives.
        """
        if not any(s.label is SequenceLabel.ANOMALOUS for s in sequences):
            raise ValueError("training corpus has no anomalous sequences")
        self.hmm_ = hmm if hmm is not None else _fit_hmm(sequences, self.n_states, self.hmm_params)
        if matrices is None:
            matrices = self.hmm_.feature_matrices(sequences)
        labels, onsets = _features_of(sequences)
        x, y = step_training_set(matrices, labels, onsets, self.subsample)
        self.svm_ = WeightedRbfSvm(
            c_base=self.c_base,
            w_pos=self.w_pos,
            w_neg=self.w_neg,
            gamma=self.gamma,
            tol=self.tol,
            max_passes=self.max_passes,
        ).fit(x, y, gram=gram)
        return self

    def score_steps(self, matrix: np.ndarray) -> np.ndarray:
        self._check_fitted()
        return self.svm_.decision_function(matrix)

    def detect(self, seq: MultimodalSequence) -> DetectionResult:
        self._check_fitted()
        return result_from_scores(self.score_steps(self.hmm_.feature_matrix(seq)))

    def _check_fitted(self) -> None:
        if not hasattr(self, "svm_"):
            raise ValueError("detector is not fitted")

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "format": DETECTOR_FORMAT,
            "version": DETECTOR_FORMAT_VERSION,
            "method": "hmm_svm",
            "subsample": self.subsample,
            "hmm": self.hmm_.to_dict(),
            "svm": self.svm_.to_dict(),
        }


class FixedThresholdDetector(BaseEstimator):
    """Global log-likelihood floor: mean - sensitivity * std over all
    nominal training timesteps; any step below the floor fires."""

    def __init__(
        self,
        n_states: int = 20,
        sensitivity: float = 2.0,
        hmm_params: dict | None = None,
    ):
        self.n_states = n_states
        self.sensitivity = sensitivity
        self.hmm_params = hmm_params

    def fit(
        self,
        sequences: list[MultimodalSequence],
        *,
        hmm: ProgressHmm | None = None,
        matrices: list[np.ndarray] | None = None,
    ) -> "FixedThresholdDetector":
        nominal = [s for s in sequences if s.label is SequenceLabel.NOMINAL]
        if len(nominal) < 2:
            raise ValueError("need at least 2 nominal training sequences")
        self.hmm_ = hmm if hmm is not None else _fit_hmm(sequences, self.n_states, self.hmm_params)
        if matrices is None:
            matrices = self.hmm_.feature_matrices(nominal)
        else:
            matrices = [
                m for m, s in zip(matrices, sequences) if s.label is SequenceLabel.NOMINAL
            ]
        logliks = np.concatenate([m[:, -1] for m in matrices])
        self.loglik_mean_ = float(logliks.mean())
        self.loglik_std_ = float(logliks.std())
        self.threshold_ = self.loglik_mean_ - self.sensitivity * self.loglik_std_
        return self

    def score_steps(self, matrix: np.ndarray) -> np.ndarray:
        self._check_fitted()
        return self.threshold_ - matrix[:, -1]

    def detect(self, seq: MultimodalSequence) -> DetectionResult:
        self._check_fitted()
        return result_from_scores(self.score_steps(self.hmm_.feature_matrix(seq)))

    def _check_fitted(self) -> None:
        if not hasattr(self, "threshold_"):
            raise ValueError("detector is not fitted")

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "format": DETECTOR_FORMAT,
            "version": DETECTOR_FORMAT_VERSION,
            "method": "fixed_threshold",
            "sensitivity": self.sensitivity,
            "threshold": self.threshold_,
            "loglik_mean": self.loglik_mean_,
            "loglik_std": self.loglik_std_,
            "hmm": self.hmm_.to_dict(),
        }


class DynamicThresholdDetector(BaseEstimator):
    """Phase-conditioned log-likelihood floors.

    Nominal progress vectors are clustered with seeded k-means; each cluster
    keeps its own mean - sensitivity * std floor, so phases that are noisy
    under the model get slack while quiet phases stay tight.
    """

    def __init__(
        self,
        n_states: int = 20,
        sensitivity: float = 2.0,
        n_clusters: int = 5,
        seed: int = 0,
        hmm_params: dict | None = None,
    ):
        self.n_states = n_states
        self.sensitivity = sensitivity
        self.n_clusters = n_clusters
        self.seed = seed
        self.hmm_params = hmm_params

    def fit(
        self,
        sequences: list[MultimodalSequence],
        *,
        hmm: ProgressHmm | None = None,
        matrices: list[np.ndarray] | None = None,
    ) -> "DynamicThresholdDetector":
        check_count(self.n_clusters, "n_clusters", minimum=1)
        nominal = [s for s in sequences if s.label is SequenceLabel.NOMINAL]
        if len(nominal) < 2:
            raise ValueError("need at least 2 nominal training sequences")
        self.hmm_ = hmm if hmm is not None else _fit_hmm(sequences, self.n_states, self.hmm_params)
        if matrices is None:
            matrices = self.hmm_.feature_matrices(nominal)
        else:
            matrices = [
                m for m, s in zip(matrices, sequences) if s.label is SequenceLabel.NOMINAL
            ]
        progress = np.concatenate([m[:, :-1] for m in matrices])
        logliks = np.concatenate([m[:, -1] for m in matrices])
        k = min(self.n_clusters, len(progress))
        centroids, assignments = _kmeans(progress, k, self.seed)
        global_std = float(logliks.std())
        means = np.empty(k)
        stds = np.empty(k)
        for j in range(k):
            member = logliks[assignments == j]
            means[j] = member.mean() if len(member) else float(logliks.mean())
            # Singleton clusters have no spread to estimate; borrow the
            # global one rather than collapsing the floor onto the mean.
            stds[j] = member.std() if len(member) >= 2 else global_std
        self.centroids_ = centroids
        self.thresholds_ = means - self.sensitivity * stds
        self.centroids_.setflags(write=False)
        self.thresholds_.setflags(write=False)
        return self

    def score_steps(self, matrix: np.ndarray) -> np.ndarray:
        self._check_fitted()
        nearest = _nearest_centroid(matrix[:, :-1], self.centroids_)
        return self.thresholds_[nearest] - matrix[:, -1]

    def detect(self, seq: MultimodalSequence) -> DetectionResult:
        self._check_fitted()
        return result_from_scores(self.score_steps(self.hmm_.feature_matrix(seq)))

    def _check_fitted(self) -> None:
        if not hasattr(self, "thresholds_"):
            raise ValueError("detector is not fitted")

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "format": DETECTOR_FORMAT,
            "version": DETECTOR_FORMAT_VERSION,
            "method": "dynamic_threshold",
            "sensitivity": self.sensitivity,
            "centroids": self.centroids_.tolist(),
            "thresholds": self.thresholds_.tolist(),
            "hmm": self.hmm_.to_dict(),
        }


def result_from_scores(scores: np.ndarray) -> DetectionResult:
    scores = np.asarray(scores, dtype=float)
    fired = scores >= 0.0
    if fired.any():
        first = int(np.argmax(fired))
        return DetectionResult(True, first, scores)
    return DetectionResult(False, None, scores)


def _kmeans(points: np.ndarray, k: int, seed: int, max_iterations: int = 100):
    """Plain seeded Lloyd iteration; empty clusters keep their centroid."""
    rng = np.random.default_rng(seed)
    centroids = points[rng.choice(len(points), size=k, replace=False)].copy()
    assignments = None
    for _ in range(max_iterations):
        new_assignments = _nearest_centroid(points, centroids)
        if assignments is not None and np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return centroids, assignments


def _nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    distances = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.argmin(distances, axis=1)


@dataclass(frozen=True)
class OnlineStepResult:
    """One streamed observation's outcome."""

    step_index: int
    features: HmmFeatures
    score: float
    fired: bool
    alarm: bool


class OnlineDetector:
    """Streaming wrapper around a fitted detector for one session.

    The alarm latches: once any step fires, ``alarm`` stays True for the
    rest of the stream.  ``degraded`` mirrors the forward filter's underflow
    flag so callers can distrust scores if it ever trips.
    """

    def __init__(self, detector):
        detector._check_fitted()
        self._detector = detector
        self._filter: ForwardFilter = detector.hmm_.start_filter()
        self._step = 0
        self.alarm = False
        self.alarm_step: int | None = None

    @property
    def degraded(self) -> bool:
        return self._filter.degraded

    @property
    def steps_seen(self) -> int:
        return self._step

    def step(self, observation) -> OnlineStepResult:
        features = self._filter.step(observation)
        row = np.concatenate([features.progress, [features.log_likelihood]])
        score = float(self._detector.score_steps(row[None, :])[0])
        fired = score >= 0.0
        if fired and not self.alarm:
            self.alarm = True
            self.alarm_step = self._step
        result = OnlineStepResult(
            step_index=self._step,
            features=features,
            score=score,
            fired=fired,
            alarm=self.alarm,
        )
        self._step += 1
        return result


def load_detector(doc: dict):
    """Rebuild any detector from its serialized form."""
    if doc.get("format") != DETECTOR_FORMAT:
        raise ValueError(f"format: expected {DETECTOR_FORMAT!r}, got {doc.get('format')!r}")
    if doc.get("version") != DETECTOR_FORMAT_VERSION:
        raise ValueError(f"version: unsupported value {doc.get('version')!r}")
    method = doc.get("method")
    hmm = ProgressHmm.from_dict(doc["hmm"])
    if method == "hmm_svm":
        detector = HmmSvmDetector(n_states=hmm.n_states, subsample=int(doc["subsample"]))
        detector.hmm_ = hmm
        detector.svm_ = WeightedRbfSvm.from_dict(doc["svm"])
        if detector.svm_.n_features_in_ != hmm.n_states + 1:
            raise ValueError("svm: feature width does not match the HMM state count")
        return detector
    if method == "fixed_threshold":
        detector = FixedThresholdDetector(
            n_states=hmm.n_states, sensitivity=float(doc["sensitivity"])
        )
        threshold = float(doc["threshold"])
        if not np.isfinite(threshold):
            raise ValueError("threshold: must be finite")
        detector.hmm_ = hmm
        detector.threshold_ = threshold
        detector.loglik_mean_ = float(doc.get("loglik_mean", threshold))
        detector.loglik_std_ = float(doc.get("loglik_std", 0.0))
        return detector
    if method == "dynamic_threshold":
        centroids = np.asarray(doc["centroids"], dtype=float)
        thresholds = np.asarray(doc["thresholds"], dtype=float)
        if centroids.ndim != 2 or centroids.shape[1] != hmm.n_states:
            raise ValueError("centroids: shape does not match the HMM state count")
        if thresholds.shape != (len(centroids),):
            raise ValueError("thresholds: length must match centroids")
        if not np.all(np.isfinite(centroids)) or not np.all(np.isfinite(thresholds)):
            raise ValueError("centroids/thresholds: contains non-finite values")
        detector = DynamicThresholdDetector(
            n_states=hmm.n_states,
            sensitivity=float(doc["sensitivity"]),
            n_clusters=len(centroids),
        )
        detector.hmm_ = hmm
        detector.centroids_ = centroids
        detector.thresholds_ = thresholds
        detector.centroids_.setflags(write=False)
        detector.thresholds_.setflags(write=False)
        return detector
    raise ValueError(f"method: unknown detector method {method!r}")


def save_detector(detector, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(detector.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_detector_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return load_detector(json.load(fh))
