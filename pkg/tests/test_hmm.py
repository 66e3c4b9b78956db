"""Tests for the progress HMM: forward filtering, EM training, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedmon.hmm import (
    HMM_FORMAT,
    HMM_FORMAT_VERSION,
    ForwardFilter,
    HmmFeatures,
    ProgressHmm,
    TrainingDivergedError,
)
from feedmon.sequences import MultimodalSequence, SequenceLabel, Task, generate_nominal
from oracles import brute_force_loglik, brute_force_posterior, random_left_right_model


def model_from_params(params, variance_floor=1e-4, channel_means=None, channel_stds=None):
    """Wrap raw parameter arrays into a fitted ProgressHmm via its loader."""
    k, d = np.asarray(params["emission_means"]).shape
    doc = {
        "format": HMM_FORMAT,
        "version": HMM_FORMAT_VERSION,
        "n_states": k,
        "variance_floor": variance_floor,
        "channels": [f"c{i}" for i in range(d)],
        "initial_dist": np.asarray(params["initial_dist"]).tolist(),
        "transition": np.asarray(params["transition"]).tolist(),
        "emission_means": np.asarray(params["emission_means"]).tolist(),
        "emission_vars": np.asarray(params["emission_vars"]).tolist(),
        "channel_means": list(channel_means) if channel_means is not None else [0.0] * d,
        "channel_stds": list(channel_stds) if channel_stds is not None else [1.0] * d,
    }
    return ProgressHmm.from_dict(doc)


def plain_sequence(samples, channels=None):
    samples = np.asarray(samples, dtype=float)
    if channels is None:
        channels = tuple(f"c{i}" for i in range(samples.shape[1]))
    return MultimodalSequence(
        task=Task.SCOOPING,
        sample_rate_hz=10.0,
        channels=channels,
        samples=samples,
        label=SequenceLabel.NOMINAL,
    )


# -- forward filter vs. enumeration oracle ---------------------------------


def test_filter_matches_brute_force_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(20):
        params = random_left_right_model(rng)
        model = model_from_params(params)
        n_steps = int(rng.integers(2, 7))
        obs = rng.normal(0.0, 1.5, size=(n_steps, model.n_channels_))
        filt = model.start_filter()
        features = [filt.step(row) for row in obs]
        want = brute_force_loglik(
            params["initial_dist"], params["transition"],
            params["emission_means"], params["emission_vars"], obs,
        )
        got = features[-1].cumulative_log_likelihood
        assert abs(np.expm1(got - want)) < 1e-9


def test_progress_matches_brute_force_posterior():
    rng = np.random.default_rng(11)
    params = random_left_right_model(rng, max_states=3, max_channels=1)
    model = model_from_params(params)
    obs = rng.normal(0.0, 1.0, size=(5, model.n_channels_))
    filt = model.start_filter()
    features = [filt.step(row) for row in obs]
    for t in range(5):
        want = brute_force_posterior(
            params["initial_dist"], params["transition"],
            params["emission_means"], params["emission_vars"], obs, t,
        )
        np.testing.assert_allclose(features[t].progress, want, atol=1e-12)


def test_normalized_loglik_is_cumulative_over_steps():
    params = random_left_right_model(np.random.default_rng(2))
    model = model_from_params(params)
    obs = np.random.default_rng(3).normal(size=(6, model.n_channels_))
    filt = model.start_filter()
    features = [filt.step(row) for row in obs]
    for t, feat in enumerate(features):
        assert feat.log_likelihood == pytest.approx(
            feat.cumulative_log_likelihood / (t + 1), rel=1e-12
        )


def test_filter_rejects_wrong_dimension():
    params = random_left_right_model(np.random.default_rng(5), max_channels=2)
    model = model_from_params(params)
    filt = model.start_filter()
    with pytest.raises(ValueError, match="channels"):
        filt.step(np.zeros(model.n_channels_ + 1))


def test_filter_rejects_non_finite_observation():
    params = random_left_right_model(np.random.default_rng(5), max_channels=1)
    model = model_from_params(params)
    filt = model.start_filter()
    with pytest.raises(ValueError, match="finite"):
        filt.step(np.array([np.nan]))


# -- progress semantics ------------------------------------------------------


def test_progress_concentrates_on_advancing_state():
    # Observations sit exactly on successive state means while the variance
    # floor keeps densities sharp, so the posterior must track the advance.
    params = {
        "initial_dist": [1.0, 0.0, 0.0],
        "transition": [[0.8, 0.2, 0.0], [0.0, 0.8, 0.2], [0.0, 0.0, 1.0]],
        "emission_means": [[0.0], [5.0], [10.0]],
        "emission_vars": [[1e-4], [1e-4], [1e-4]],
    }
    model = model_from_params(params)
    obs = np.array([[0.0]] * 4 + [[5.0]] * 4 + [[10.0]] * 4)
    filt = model.start_filter()
    for t, row in enumerate(obs):
        feat = filt.step(row)
        block = t // 4
        assert int(np.argmax(feat.progress)) == block
        assert feat.progress[block] > 0.99
        assert not feat.degraded


@settings(max_examples=40, deadline=None)
@given(
    model_seed=st.integers(0, 2**32 - 1),
    obs_seed=st.integers(0, 2**32 - 1),
    n_steps=st.integers(2, 8),
)
def test_progress_is_distribution_with_left_to_right_support(model_seed, obs_seed, n_steps):
    params = random_left_right_model(np.random.default_rng(model_seed))
    params["initial_dist"] = np.zeros(len(params["initial_dist"]))
    params["initial_dist"][0] = 1.0
    model = model_from_params(params)
    obs = np.random.default_rng(obs_seed).normal(0.0, 2.0, size=(n_steps, model.n_channels_))
    filt = model.start_filter()
    for t, row in enumerate(obs):
        feat = filt.step(row)
        assert np.all(feat.progress >= 0.0)
        assert feat.progress.sum() == pytest.approx(1.0, abs=1e-12)
        # Starting in state 0, state j is unreachable before step j.
        assert np.all(feat.progress[t + 1 :] == 0.0)


# -- EM training --------------------------------------------------------------


def test_em_loglik_trace_is_monotone():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(12)]
    for seed in range(3):
        hmm = ProgressHmm(
            n_states=8, max_iterations=40, init="random", seed=seed, outlier_refit=False
        )
        hmm.fit(seqs)
        trace = np.array(hmm.loglik_trace_)
        assert len(trace) >= 2
        assert np.all(np.diff(trace) >= -1e-8)


def test_em_improves_on_initialization():
    seqs = [generate_nominal(Task.FEEDING, seed=s) for s in range(8)]
    hmm = ProgressHmm(n_states=6, outlier_refit=False).fit(seqs)
    assert hmm.loglik_trace_[-1] > hmm.loglik_trace_[0]


def test_uniform_init_fit_is_deterministic():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(6)]
    first = ProgressHmm(n_states=5).fit(seqs)
    second = ProgressHmm(n_states=5).fit(seqs)
    np.testing.assert_array_equal(first.transition_, second.transition_)
    np.testing.assert_array_equal(first.emission_means_, second.emission_means_)


def test_fit_preserves_left_to_right_structure():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(6)]
    hmm = ProgressHmm(n_states=5).fit(seqs)
    k = hmm.n_states
    band = np.triu(np.tril(np.ones((k, k)), 1))
    assert np.all(hmm.transition_[band == 0] == 0.0)
    np.testing.assert_allclose(hmm.transition_.sum(axis=1), np.ones(k), atol=1e-12)
    assert hmm.transition_[k - 1, k - 1] == 1.0
    np.testing.assert_allclose(hmm.initial_dist_.sum(), 1.0, atol=1e-12)
    assert np.all(hmm.emission_vars_ >= hmm.variance_floor)


def test_fit_recovers_two_regime_means():
    rng = np.random.default_rng(3)
    data = []
    for _ in range(10):
        first = rng.normal(0.0, 1.0, size=(50, 1))
        second = rng.normal(5.0, 1.0, size=(50, 1))
        data.append(plain_sequence(np.vstack([first, second]), channels=("x",)))
    hmm = ProgressHmm(n_states=2, outlier_refit=False).fit(data)
    raw_means = np.sort((hmm.emission_means_ * hmm.channel_stds_ + hmm.channel_means_).ravel())
    assert abs(raw_means[0] - 0.0) < 0.3
    assert abs(raw_means[1] - 5.0) < 0.3


def test_single_state_mean_is_global_mean():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(4)]
    hmm = ProgressHmm(n_states=1, outlier_refit=False).fit(seqs)
    raw_mean = hmm.emission_means_[0] * hmm.channel_stds_ + hmm.channel_means_
    pooled = np.concatenate([np.asarray(s.samples) for s in seqs]).mean(axis=0)
    np.testing.assert_allclose(raw_mean, pooled, rtol=1e-9)


def test_fit_handles_ragged_lengths():
    seqs = [
        generate_nominal(Task.SCOOPING, duration_s=d, seed=s)
        for s, d in enumerate([10.0, 8.0, 10.0, 12.0, 8.0, 10.0])
    ]
    hmm = ProgressHmm(n_states=4, outlier_refit=False).fit(seqs)
    assert np.all(np.diff(hmm.loglik_trace_) >= -1e-8)


def test_outlier_sequence_is_dropped_and_refit():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(12)]
    weird = plain_sequence(
        np.asarray(seqs[0].samples) * 10.0 + 30.0, channels=seqs[0].channels
    )
    hmm = ProgressHmm(n_states=5, outlier_refit=True).fit(seqs + [weird])
    assert hmm.n_dropped_outliers_ >= 1
    clean = ProgressHmm(n_states=5, outlier_refit=True).fit(seqs)
    assert clean.n_dropped_outliers_ == 0


def test_fit_requires_two_nominal_sequences_with_shared_layout():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(3)]
    with pytest.raises(ValueError, match="at least 2"):
        ProgressHmm().fit(seqs[:1])
    anomalous = MultimodalSequence(
        task=Task.SCOOPING,
        sample_rate_hz=10.0,
        channels=seqs[0].channels,
        samples=np.asarray(seqs[0].samples),
        label=SequenceLabel.ANOMALOUS,
        anomaly_onset=3,
    )
    with pytest.raises(ValueError, match="not Nominal"):
        ProgressHmm().fit([seqs[0], anomalous])
    other_layout = plain_sequence(np.zeros((20, 1)), channels=("x",))
    with pytest.raises(ValueError, match="channel layout"):
        ProgressHmm().fit([seqs[0], other_layout])


def test_unfitted_model_refuses_inference():
    with pytest.raises(ValueError, match="not fitted"):
        ProgressHmm().start_filter()


def test_fitted_parameters_are_read_only():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(4)]
    hmm = ProgressHmm(n_states=3).fit(seqs)
    with pytest.raises(ValueError):
        hmm.transition_[0, 0] = 0.5


# -- standardization ----------------------------------------------------------


def test_power_of_two_channel_scaling_gives_identical_features():
    # Binary scaling preserves every mantissa through mean/std/z-score, so
    # features of the scaled corpus must be bit-identical.
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(6)]
    scaled = [
        plain_sequence(np.asarray(s.samples) * 4.0, channels=s.channels) for s in seqs
    ]
    base = ProgressHmm(n_states=4, outlier_refit=False).fit(seqs)
    other = ProgressHmm(n_states=4, outlier_refit=False).fit(scaled)
    probe = seqs[0]
    probe_scaled = scaled[0]
    np.testing.assert_array_equal(
        base.feature_matrix(probe), other.feature_matrix(probe_scaled)
    )


def test_channel_shift_changes_features_only_negligibly():
    seqs = [generate_nominal(Task.FEEDING, seed=s) for s in range(6)]
    shifted = [
        plain_sequence(np.asarray(s.samples) + 7.0, channels=s.channels) for s in seqs
    ]
    base = ProgressHmm(n_states=4, outlier_refit=False).fit(seqs)
    other = ProgressHmm(n_states=4, outlier_refit=False).fit(shifted)
    np.testing.assert_allclose(
        base.feature_matrix(seqs[0]),
        other.feature_matrix(shifted[0]),
        atol=1e-6,
    )


def test_constant_channel_does_not_crash_standardizer():
    samples = np.column_stack([np.linspace(0, 1, 30), np.full(30, 2.5)])
    seqs = [plain_sequence(samples + i * 0.0, channels=("a", "b")) for i in range(3)]
    hmm = ProgressHmm(n_states=2, outlier_refit=False).fit(seqs)
    assert np.all(np.isfinite(hmm.feature_matrix(seqs[0])))


# -- batching -----------------------------------------------------------------


def test_batched_features_match_streaming_filter():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(6)]
    ragged = seqs + [generate_nominal(Task.SCOOPING, duration_s=7.0, seed=99)]
    hmm = ProgressHmm(n_states=5, outlier_refit=False).fit(seqs)
    batched = hmm.feature_matrices(ragged)
    for seq, matrix in zip(ragged, batched):
        np.testing.assert_allclose(matrix, hmm.feature_matrix(seq), atol=1e-10)


def test_feature_matrix_layout():
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(4)]
    hmm = ProgressHmm(n_states=3, outlier_refit=False).fit(seqs)
    matrix = hmm.feature_matrix(seqs[0])
    assert matrix.shape == (seqs[0].n_steps, hmm.n_states + 1)
    np.testing.assert_allclose(matrix[:, :-1].sum(axis=1), 1.0, atol=1e-9)


# -- serialization ------------------------------------------------------------


def test_round_trip_preserves_inference(tmp_path):
    seqs = [generate_nominal(Task.FEEDING, seed=s) for s in range(5)]
    hmm = ProgressHmm(n_states=4, outlier_refit=False).fit(seqs)
    path = tmp_path / "model.json"
    hmm.save(path)
    loaded = ProgressHmm.load(path)
    np.testing.assert_array_equal(
        hmm.feature_matrix(seqs[0]), loaded.feature_matrix(seqs[0])
    )
    assert loaded.channels_ == hmm.channels_


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: d.update(version=99), "version"),
        (lambda d: d.update(format="something-else"), "format"),
        (lambda d: d["transition"][0].__setitem__(0, 0.9), "transition"),
        (lambda d: d["initial_dist"].__setitem__(0, 0.5), "initial_dist"),
        (lambda d: d["emission_vars"][0].__setitem__(0, 0.0), "emission_vars"),
        (lambda d: d["channel_stds"].__setitem__(0, -1.0), "channel_stds"),
        (lambda d: d["channel_means"].pop(), "channel_means"),
    ],
)
def test_loader_rejects_invalid_documents(mutate, field):
    seqs = [generate_nominal(Task.SCOOPING, seed=s) for s in range(4)]
    doc = ProgressHmm(n_states=3, outlier_refit=False).fit(seqs).to_dict()
    mutate(doc)
    with pytest.raises(ValueError, match=field):
        ProgressHmm.from_dict(doc)


def test_loader_rejects_off_band_transition():
    params = {
        "initial_dist": [1.0, 0.0, 0.0],
        "transition": [[0.5, 0.3, 0.2], [0.0, 0.7, 0.3], [0.0, 0.0, 1.0]],
        "emission_means": [[0.0], [1.0], [2.0]],
        "emission_vars": [[1.0], [1.0], [1.0]],
    }
    with pytest.raises(ValueError, match="left-to-right"):
        model_from_params(params)
