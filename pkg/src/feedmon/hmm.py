"""Left-to-right Gaussian HMM over nominal executions.

Fit with Baum-Welch EM on nominal sequences only; at inference the scaled
forward recursion emits, per timestep, the posterior hidden-state
distribution (execution progress) and the per-timestep-normalized cumulative
log-likelihood.  Both feed the downstream anomaly classifiers.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .sequences import MultimodalSequence, SequenceLabel
from .validation import as_float_array, check_finite

_LOG_2PI = float(np.log(2.0 * np.pi))
_TINY = np.finfo(float).tiny

HMM_FORMAT = "feedmon-hmm"
HMM_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """EM produced non-finite quantities; carries the failing iteration."""

    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        message = f"EM training diverged at iteration {iteration}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


@dataclass(frozen=True)
class HmmFeatures:
    """Per-timestep HMM output: progress vector and log-likelihood.

    ``log_likelihood`` is the cumulative log-probability of the observation
    prefix divided by the number of steps seen; the raw cumulative value is
    kept in ``cumulative_log_likelihood`` for experimentation.
    """

    progress: np.ndarray
    log_likelihood: float
    cumulative_log_likelihood: float
    degraded: bool = False


class ForwardFilter:
    """Running scaled-forward state for one live observation stream.

    Owned by a single session; not shared across threads.
    """

    def __init__(self, hmm: "ProgressHmm"):
        self._hmm = hmm
        self._alpha: np.ndarray | None = None
        self._cumulative_log = 0.0
        self._t = 0
        self.degraded = False

    @property
    def steps_seen(self) -> int:
        return self._t

    def step(self, observation) -> HmmFeatures:
        """Consume one D-vector observation and return updated features."""
        hmm = self._hmm
        obs = as_float_array(observation, "observation", ndim=1)
        if obs.shape[0] != hmm.n_channels_:
            raise ValueError(
                f"observation has {obs.shape[0]} channels, model expects {hmm.n_channels_}"
            )
        check_finite(obs, "observation")
        x = (obs - hmm.channel_means_) / hmm.channel_stds_
        log_b = hmm._log_emission(x)
        shift = float(log_b.max())
        b = np.exp(log_b - shift)
        if self._t == 0:
            unnormalized = hmm.initial_dist_ * b
        else:
            unnormalized = (self._alpha @ hmm.transition_) * b
        norm = float(unnormalized.sum())
        if norm <= _TINY:
            # Variance floor keeps per-state densities finite, so this only
            # triggers on pathological float underflow; clamp and flag.
            self.degraded = True
            norm = _TINY
            if self._alpha is None:
                self._alpha = hmm.initial_dist_.copy()
        else:
            self._alpha = unnormalized / norm
        self._cumulative_log += float(np.log(norm)) + shift
        self._t += 1
        return HmmFeatures(
            progress=self._alpha.copy(),
            log_likelihood=self._cumulative_log / self._t,
            cumulative_log_likelihood=self._cumulative_log,
            degraded=self.degraded,
        )


class ProgressHmm(BaseEstimator):
    """Left-to-right HMM with diagonal-Gaussian emissions.

    States may only self-loop or advance to the next state, so the forward
    posterior reads as task progress.  Inputs are z-scored per channel with
    statistics learned from the training set and stored on the model, making
    inference self-contained.

    Parameters
    ----------
    n_states : number of hidden states.
    max_iterations : EM iteration cap.
    loglik_tolerance : stop when the total log-likelihood improves by less.
    variance_floor : lower bound for emission variances (standardized units).
    init : "uniform" initializes each state from the corresponding 1/K slice
        of every training sequence; "random" assigns timesteps to states at
        random (seeded).
    outlier_refit : after a provisional fit, drop training sequences whose
        normalized log-likelihood falls below the 5th percentile minus three
        IQRs, then refit once.
    seed : RNG seed, only consumed by ``init="random"``.
    """

    def __init__(
        self,
        n_states: int = 20,
        max_iterations: int = 50,
        loglik_tolerance: float = 1e-4,
        variance_floor: float = 1e-4,
        init: str = "uniform",
        outlier_refit: bool = True,
        seed: int = 0,
    ):
        self.n_states = n_states
        self.max_iterations = max_iterations
        self.loglik_tolerance = loglik_tolerance
        self.variance_floor = variance_floor
        self.init = init
        self.outlier_refit = outlier_refit
        self.seed = seed

    # -- fitting ------------------------------------------------------------

    def fit(self, sequences: list[MultimodalSequence]) -> "ProgressHmm":
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if len(sequences) < 2:
            raise ValueError("need at least 2 training sequences")
        first = sequences[0]
        for i, seq in enumerate(sequences):
            if seq.label is not SequenceLabel.NOMINAL:
                raise ValueError(f"training sequence {i} is not Nominal")
            if seq.channels != first.channels:
                raise ValueError(f"training sequence {i} has a different channel layout")

        self.channels_ = first.channels
        self.n_channels_ = len(first.channels)
        raw = [np.asarray(s.samples, dtype=float) for s in sequences]
        self._fit_standardizer(raw)
        data = [self._standardize(x) for x in raw]
        self._run_em(data)
        self.n_dropped_outliers_ = 0
        if self.outlier_refit:
            per_seq = np.array(
                [ll / len(x) for ll, x in zip(self._per_sequence_loglik(data), data)]
            )
            q5 = np.percentile(per_seq, 5)
            iqr = np.percentile(per_seq, 75) - np.percentile(per_seq, 25)
            keep = per_seq >= q5 - 3.0 * iqr
            if not keep.all() and keep.sum() >= 2:
                self.n_dropped_outliers_ = int((~keep).sum())
                kept_raw = [x for x, k in zip(raw, keep) if k]
                self._fit_standardizer(kept_raw)
                self._run_em([self._standardize(x) for x in kept_raw])
        self._freeze()
        return self

    def _fit_standardizer(self, raw: list[np.ndarray]) -> None:
        pooled = np.concatenate(raw, axis=0)
        means = pooled.mean(axis=0)
        stds = pooled.std(axis=0)
        stds[stds == 0.0] = 1.0
        self.channel_means_ = means
        self.channel_stds_ = stds

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.channel_means_) / self.channel_stds_

    def _initialize(self, data: list[np.ndarray]) -> None:
        k = self.n_states
        d = self.n_channels_
        if self.init == "random":
            rng = np.random.default_rng(self.seed)
            assignments = [rng.integers(0, k, size=len(x)) for x in data]
        elif self.init == "uniform":
            assignments = [
                np.repeat(np.arange(k), np.diff(np.linspace(0, len(x), k + 1).astype(int)))
                for x in data
            ]
        else:
            raise ValueError(f"unknown init {self.init!r}")
        means = np.zeros((k, d))
        variances = np.ones((k, d))
        pooled = np.concatenate(data, axis=0)
        for state in range(k):
            chunk = np.concatenate(
                [x[a == state] for x, a in zip(data, assignments)], axis=0
            )
            if len(chunk) == 0:
                chunk = pooled
            means[state] = chunk.mean(axis=0)
            variances[state] = np.maximum(chunk.var(axis=0), self.variance_floor)
        mean_len = float(np.mean([len(x) for x in data]))
        expected_dwell = max(mean_len / k, 1.0 + 1e-6)
        stay = float(np.clip(1.0 - 1.0 / expected_dwell, 0.05, 0.999))
        transition = np.zeros((k, k))
        for i in range(k - 1):
            transition[i, i] = stay
            transition[i, i + 1] = 1.0 - stay
        transition[k - 1, k - 1] = 1.0
        initial = np.zeros(k)
        initial[0] = 1.0
        self.initial_dist_ = initial
        self.transition_ = transition
        self.emission_means_ = means
        self.emission_vars_ = variances

    def _log_emission_matrix(self, x: np.ndarray) -> np.ndarray:
        """log p(x_t | state k) for standardized x with shape (..., D)."""
        means = self.emission_means_
        variances = self.emission_vars_
        diff = x[..., None, :] - means
        quad = np.sum(diff * diff / variances, axis=-1)
        log_norm = np.sum(np.log(variances), axis=-1) + self.n_channels_ * _LOG_2PI
        return -0.5 * (quad + log_norm)

    def _log_emission(self, x: np.ndarray) -> np.ndarray:
        return self._log_emission_matrix(x[None, :])[0]

    def _forward_pass(self, batch: np.ndarray):
        """Scaled forward over a (N, T, D) batch of standardized sequences.

        Emission densities are max-shifted in log space before
        exponentiation, so the returned normalizers pair with ``shift``:
        log p(x_1..t) = sum of log(norms) + shift up to t.
        """
        n, t_len, _ = batch.shape
        k = self.n_states
        log_b = self._log_emission_matrix(batch)  # (N, T, K)
        shift = log_b.max(axis=2)
        b = np.exp(log_b - shift[..., None])
        alphas = np.empty((n, t_len, k))
        norms = np.empty((n, t_len))
        current = self.initial_dist_[None, :] * b[:, 0, :]
        for t in range(t_len):
            if t > 0:
                current = (alphas[:, t - 1, :] @ self.transition_) * b[:, t, :]
            norm = current.sum(axis=1)
            norm = np.maximum(norm, _TINY)
            alphas[:, t, :] = current / norm[:, None]
            norms[:, t] = norm
        loglik = np.sum(np.log(norms) + shift, axis=1)
        return alphas, norms, b, shift, loglik

    def _em_step(self, grouped: dict[int, np.ndarray]):
        """One E+M sweep over length-grouped batches; returns the E-step loglik."""
        k = self.n_states
        d = self.n_channels_
        pi_acc = np.zeros(k)
        xi_acc = np.zeros((k, k))
        gamma_acc = np.zeros(k)
        mean_acc = np.zeros((k, d))
        sq_acc = np.zeros((k, d))
        total_loglik = 0.0
        n_sequences = 0
        for batch in grouped.values():
            n, t_len, _ = batch.shape
            alphas, norms, b, _, loglik = self._forward_pass(batch)
            total_loglik += float(loglik.sum())
            n_sequences += n
            beta = np.ones((n, k))
            gammas = np.empty((n, t_len, k))
            gammas[:, -1, :] = alphas[:, -1, :] * beta
            for t in range(t_len - 2, -1, -1):
                weighted = b[:, t + 1, :] * beta / norms[:, t + 1, None]
                xi_acc += np.einsum("ni,nj->ij", alphas[:, t, :], weighted) * self.transition_
                beta = weighted @ self.transition_.T
                gammas[:, t, :] = alphas[:, t, :] * beta
            pi_acc += gammas[:, 0, :].sum(axis=0)
            flat_g = gammas.reshape(-1, k)
            flat_x = batch.reshape(-1, d)
            gamma_acc += flat_g.sum(axis=0)
            mean_acc += flat_g.T @ flat_x
            sq_acc += flat_g.T @ (flat_x * flat_x)

        occupied = gamma_acc > 1e-12
        new_means = self.emission_means_.copy()
        new_vars = self.emission_vars_.copy()
        new_means[occupied] = mean_acc[occupied] / gamma_acc[occupied, None]
        second_moment = sq_acc[occupied] / gamma_acc[occupied, None]
        new_vars[occupied] = np.maximum(
            second_moment - new_means[occupied] ** 2, self.variance_floor
        )
        row_sums = xi_acc.sum(axis=1)
        new_transition = self.transition_.copy()
        has_mass = row_sums > 1e-300
        new_transition[has_mass] = xi_acc[has_mass] / row_sums[has_mass, None]
        new_transition[k - 1] = self.transition_[k - 1]
        new_initial = pi_acc / max(n_sequences, 1)
        total = new_initial.sum()
        if total > 0:
            new_initial = new_initial / total
        self.initial_dist_ = new_initial
        self.transition_ = new_transition
        self.emission_means_ = new_means
        self.emission_vars_ = new_vars
        return total_loglik

    def _run_em(self, data: list[np.ndarray]) -> None:
        grouped_lists = defaultdict(list)
        for x in data:
            grouped_lists[len(x)].append(x)
        grouped = {t: np.stack(xs) for t, xs in grouped_lists.items()}
        self._initialize(data)
        trace = []
        for iteration in range(self.max_iterations):
            loglik = self._em_step(grouped)
            if not np.isfinite(loglik):
                raise TrainingDivergedError(iteration, "log-likelihood became non-finite")
            for name in ("initial_dist_", "transition_", "emission_means_", "emission_vars_"):
                if not np.all(np.isfinite(getattr(self, name))):
                    raise TrainingDivergedError(iteration, f"{name} became non-finite")
            trace.append(loglik)
            if len(trace) > 1 and trace[-1] - trace[-2] < self.loglik_tolerance:
                break
        self.loglik_trace_ = trace
        self.n_iter_ = len(trace)

    def _per_sequence_loglik(self, data: list[np.ndarray]) -> list[float]:
        return [float(self._forward_pass(x[None])[4][0]) for x in data]

    def _freeze(self) -> None:
        for name in ("initial_dist_", "transition_", "emission_means_",
                     "emission_vars_", "channel_means_", "channel_stds_"):
            getattr(self, name).setflags(write=False)

    # -- inference ----------------------------------------------------------

    def start_filter(self) -> ForwardFilter:
        """Fresh forward filter for one observation stream."""
        self._check_fitted()
        return ForwardFilter(self)

    def featurize(self, seq: MultimodalSequence) -> list[HmmFeatures]:
        """Per-timestep features for a whole sequence (batch over step())."""
        self._check_fitted()
        self._check_layout(seq)
        filt = self.start_filter()
        return [filt.step(row) for row in np.asarray(seq.samples)]

    def feature_matrix(self, seq: MultimodalSequence) -> np.ndarray:
        """(T, K+1) matrix: progress columns then normalized log-likelihood."""
        features = self.featurize(seq)
        progress = np.stack([f.progress for f in features])
        loglik = np.array([f.log_likelihood for f in features])
        return np.column_stack([progress, loglik])

    def feature_matrices(self, sequences: list[MultimodalSequence]) -> list[np.ndarray]:
        """Batched feature extraction, vectorized across equal-length sequences."""
        self._check_fitted()
        by_length: dict[int, list[int]] = defaultdict(list)
        for idx, seq in enumerate(sequences):
            self._check_layout(seq)
            by_length[seq.n_steps].append(idx)
        out: list[np.ndarray | None] = [None] * len(sequences)
        for t_len, indices in by_length.items():
            batch = np.stack(
                [self._standardize(np.asarray(sequences[i].samples)) for i in indices]
            )
            alphas, norms, _, shift, _ = self._forward_pass(batch)
            cumulative = np.cumsum(np.log(norms) + shift, axis=1)
            normalized = cumulative / np.arange(1, t_len + 1)[None, :]
            for row, i in enumerate(indices):
                out[i] = np.column_stack([alphas[row], normalized[row]])
        return out  # type: ignore[return-value]

    def _check_layout(self, seq: MultimodalSequence) -> None:
        if seq.n_channels != self.n_channels_:
            raise ValueError(
                f"sequence has {seq.n_channels} channels, model expects {self.n_channels_}"
            )
        if self.channels_ and seq.channels != self.channels_:
            raise ValueError(
                f"sequence channels {seq.channels} do not match model layout {self.channels_}"
            )

    def _check_fitted(self) -> None:
        if not hasattr(self, "transition_"):
            raise ValueError("model is not fitted")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "format": HMM_FORMAT,
            "version": HMM_FORMAT_VERSION,
            "n_states": self.n_states,
            "variance_floor": self.variance_floor,
            "channels": list(self.channels_),
            "initial_dist": self.initial_dist_.tolist(),
            "transition": self.transition_.tolist(),
            "emission_means": self.emission_means_.tolist(),
            "emission_vars": self.emission_vars_.tolist(),
            "channel_means": self.channel_means_.tolist(),
            "channel_stds": self.channel_stds_.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProgressHmm":
        if doc.get("format") != HMM_FORMAT:
            raise ValueError(f"format: expected {HMM_FORMAT!r}, got {doc.get('format')!r}")
        if doc.get("version") != HMM_FORMAT_VERSION:
            raise ValueError(f"version: unsupported value {doc.get('version')!r}")
        k = int(doc["n_states"])
        floor = float(doc["variance_floor"])
        model = cls(n_states=k, variance_floor=floor)
        initial = as_float_array(doc["initial_dist"], "initial_dist", ndim=1)
        transition = as_float_array(doc["transition"], "transition", ndim=2)
        means = as_float_array(doc["emission_means"], "emission_means", ndim=2)
        variances = as_float_array(doc["emission_vars"], "emission_vars", ndim=2)
        channel_means = as_float_array(doc["channel_means"], "channel_means", ndim=1)
        channel_stds = as_float_array(doc["channel_stds"], "channel_stds", ndim=1)
        channels = tuple(doc["channels"])

        if initial.shape != (k,):
            raise ValueError(f"initial_dist: expected shape ({k},), got {initial.shape}")
        if abs(initial.sum() - 1.0) > 1e-9 or np.any(initial < 0):
            raise ValueError("initial_dist: must be a probability vector summing to 1 within 1e-9")
        if transition.shape != (k, k):
            raise ValueError(f"transition: expected shape ({k}, {k}), got {transition.shape}")
        if np.any(transition < 0) or np.any(np.abs(transition.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transition: every row must sum to 1 within 1e-9")
        band = np.triu(np.tril(np.ones((k, k)), 1))
        if np.any(transition[band == 0] != 0.0):
            raise ValueError("transition: left-to-right structure violated (nonzero off-band entry)")
        if means.shape != variances.shape or means.ndim != 2 or means.shape[0] != k:
            raise ValueError("emission_means/emission_vars: inconsistent shapes")
        if np.any(variances < floor):
            raise ValueError("emission_vars: entries below the variance floor")
        d = means.shape[1]
        if channel_means.shape != (d,) or channel_stds.shape != (d,) or len(channels) != d:
            raise ValueError("channel_means/channel_stds/channels: dimension mismatch")
        if np.any(channel_stds <= 0):
            raise ValueError("channel_stds: must be positive")
        for name, arr in (
            ("initial_dist", initial), ("transition", transition),
            ("emission_means", means), ("emission_vars", variances),
            ("channel_means", channel_means), ("channel_stds", channel_stds),
        ):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: contains non-finite values")

        model.channels_ = channels
        model.n_channels_ = d
        model.initial_dist_ = initial
        model.transition_ = transition
        model.emission_means_ = means
        model.emission_vars_ = variances
        model.channel_means_ = channel_means
        model.channel_stds_ = channel_stds
        model.loglik_trace_ = []
        model._freeze()
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ProgressHmm":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
