"""Synthetic multimodal sensor sequences for scooping and feeding tasks.

Stands in for the physical spoon-mounted sensor suite: each task has a
piecewise-linear nominal profile per channel (shipped as package data in
``data/task_profiles.json``), and three fault injectors produce labeled
anomalous variants with ground-truth onset indices.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .validation import (
    as_float_array,
    check_count,
    check_finite,
    check_non_negative,
    check_positive,
    check_unit_interval,
)

FORCE_CHANNEL = "force_magnitude"
AUDIO_CHANNEL = "audio_energy"

# Injection shape constants (seconds of task time).
FORCE_PUSH_DURATION_S = 1.5
LOUD_SOUND_DURATION_S = 0.8
MOUTH_CLOSED_RAMP_S = 0.3
# Peak amplitude per unit magnitude, in channel noise-std units.  2.0 keeps a
# magnitude-2 injection clearly above a 2-sigma exceedance while staying
# inside the range where the detectors are not trivially perfect.
AMPLITUDE_PER_MAGNITUDE_STD = 2.0


class Task(str, Enum):
    SCOOPING = "Scooping"
    FEEDING = "Feeding"


class SequenceLabel(str, Enum):
    NOMINAL = "Nominal"
    ANOMALOUS = "Anomalous"


class AnomalyKind(str, Enum):
    FORCE_PUSH = "ForcePush"
    LOUD_SOUND = "LoudSound"
    MOUTH_CLOSED = "MouthClosed"


def anomaly_kinds_for(task: Task) -> tuple[AnomalyKind, ...]:
    """Injectable anomaly kinds for a task (MouthClosed is feeding-only)."""
    if Task(task) is Task.FEEDING:
        return (AnomalyKind.FORCE_PUSH, AnomalyKind.LOUD_SOUND, AnomalyKind.MOUTH_CLOSED)
    return (AnomalyKind.FORCE_PUSH, AnomalyKind.LOUD_SOUND)


@dataclass(frozen=True)
class ChannelSpec:
    """One sensor channel: a nominal piecewise-linear template plus noise.

    ``nominal_profile`` is a sequence of (phase, value) knots; phases must
    start at 0.0, end at 1.0 and be non-decreasing so the template is defined
    on the whole phase interval.
    """

    name: str
    nominal_profile: tuple[tuple[float, float], ...]
    noise_std: float
    units: str = ""

    def __post_init__(self):
        check_non_negative(self.noise_std, "noise_std")
        knots = tuple((float(p), float(v)) for p, v in self.nominal_profile)
        if len(knots) < 2:
            raise ValueError("nominal_profile needs at least two knots")
        phases = [p for p, _ in knots]
        if phases[0] != 0.0 or phases[-1] != 1.0:
            raise ValueError("nominal_profile must span phase [0, 1]")
        if any(b < a for a, b in zip(phases, phases[1:])):
            raise ValueError("nominal_profile phases must be non-decreasing")
        object.__setattr__(self, "nominal_profile", knots)

    def value_at(self, phase) -> np.ndarray:
        """Evaluate the template at the given phase(s) in [0, 1]."""
        phases = [p for p, _ in self.nominal_profile]
        values = [v for _, v in self.nominal_profile]
        return np.interp(phase, phases, values)


@dataclass(frozen=True)
class TaskProfile:
    """Per-task generation defaults: channel templates, rate and duration."""

    task: Task
    sample_rate_hz: float
    duration_s: float
    channels: tuple[ChannelSpec, ...]

    def __post_init__(self):
        check_positive(self.sample_rate_hz, "sample_rate_hz")
        check_positive(self.duration_s, "duration_s")
        if not self.channels:
            raise ValueError("profile needs at least one channel")

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    def channel(self, name: str) -> ChannelSpec:
        for spec in self.channels:
            if spec.name == name:
                return spec
        raise ValueError(f"profile has no channel named {name!r}")


@dataclass(frozen=True, eq=False)
class MultimodalSequence:
    """Fixed-rate multimodal time series with task tag and anomaly truth.

    ``samples`` is a read-only T x D matrix; ``anomaly_onset`` is set exactly
    when the label is Anomalous.
    """

    task: Task
    sample_rate_hz: float
    channels: tuple[str, ...]
    samples: np.ndarray
    label: SequenceLabel
    anomaly_onset: int | None = None
    anomaly_kind: AnomalyKind | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "label", SequenceLabel(self.label))
        if self.anomaly_kind is not None:
            object.__setattr__(self, "anomaly_kind", AnomalyKind(self.anomaly_kind))
        object.__setattr__(self, "channels", tuple(self.channels))
        check_positive(self.sample_rate_hz, "sample_rate_hz")
        samples = as_float_array(self.samples, "samples", ndim=2)
        check_finite(samples, "samples")
        t, d = samples.shape
        if t < 2:
            raise ValueError(f"sequence needs at least 2 timesteps, got {t}")
        if d < 1 or d != len(self.channels):
            raise ValueError(
                f"samples have {d} columns but {len(self.channels)} channel names"
            )
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.label is SequenceLabel.ANOMALOUS:
            if self.anomaly_onset is None:
                raise ValueError("anomalous sequence requires anomaly_onset")
            if not 0 <= self.anomaly_onset < t:
                raise ValueError(
                    f"anomaly_onset {self.anomaly_onset} outside [0, {t})"
                )
        elif self.anomaly_onset is not None:
            raise ValueError("nominal sequence must not carry anomaly_onset")

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def channel_index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise ValueError(f"sequence has no channel named {name!r}") from None


@dataclass(frozen=True)
class AnomalyInjection:
    """A fault to inject: kind, onset as a task-phase fraction, magnitude."""

    kind: AnomalyKind
    onset_phase: float
    magnitude: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AnomalyKind(self.kind))
        check_unit_interval(self.onset_phase, "onset_phase")
        check_non_negative(self.magnitude, "magnitude")


@lru_cache(maxsize=1)
def default_profiles() -> dict[Task, TaskProfile]:
    """Load the shipped task profiles (package data, not code)."""
    text = importlib.resources.files("feedmon.data").joinpath("task_profiles.json").read_text()
    return parse_profiles(json.loads(text))


def parse_profiles(doc: dict) -> dict[Task, TaskProfile]:
    profiles = {}
    for task_name, spec in doc["tasks"].items():
        task = Task(task_name)
        channels = tuple(
            ChannelSpec(
                name=ch["name"],
                nominal_profile=tuple((p, v) for p, v in ch["profile"]),
                noise_std=ch["noise_std"],
                units=ch.get("units", ""),
            )
            for ch in spec["channels"]
        )
        profiles[task] = TaskProfile(
            task=task,
            sample_rate_hz=spec["sample_rate_hz"],
            duration_s=spec["duration_s"],
            channels=channels,
        )
    return profiles


def generate_nominal(
    task: Task,
    duration_s: float | None = None,
    seed: int = 0,
    *,
    profile: TaskProfile | None = None,
) -> MultimodalSequence:
    """Generate one nominal sequence for a task.

    Each channel is its template evaluated at phase t/T plus centered
    Gaussian noise.  Deterministic for a fixed seed.
    """
    task = Task(task)
    prof = profile if profile is not None else default_profiles()[task]
    if duration_s is None:
        duration_s = prof.duration_s
    check_positive(duration_s, "duration_s")
    n_steps = int(round(duration_s * prof.sample_rate_hz))
    if n_steps < 2:
        raise ValueError(
            f"duration {duration_s} s at {prof.sample_rate_hz} Hz yields {n_steps} "
            "samples; need at least 2"
        )
    phases = np.arange(n_steps) / n_steps
    rng = np.random.default_rng(seed)
    columns = []
    for spec in prof.channels:
        noise = rng.normal(0.0, spec.noise_std, size=n_steps) if spec.noise_std > 0 else 0.0
        columns.append(spec.value_at(phases) + noise)
    return MultimodalSequence(
        task=task,
        sample_rate_hz=prof.sample_rate_hz,
        channels=prof.channel_names,
        samples=np.column_stack(columns),
        label=SequenceLabel.NOMINAL,
        seed=seed,
    )


def inject_anomaly(
    seq: MultimodalSequence,
    injection: AnomalyInjection,
    seed: int = 0,
    *,
    profile: TaskProfile | None = None,
) -> MultimodalSequence:
    """Return an anomalous copy of a nominal sequence.

    ForcePush adds a transient bump to the force channel, LoudSound a
    decaying burst to the audio channel, and MouthClosed (feeding only) holds
    the force channel at an elevated contact level after onset.  Samples
    before the onset index are never altered.
    """
    if seq.label is not SequenceLabel.NOMINAL:
        raise ValueError("can only inject anomalies into a nominal sequence")
    kind = AnomalyKind(injection.kind)
    if kind not in anomaly_kinds_for(seq.task):
        raise ValueError(f"{kind.value} cannot be injected into a {seq.task.value} sequence")
    prof = profile if profile is not None else default_profiles()[seq.task]

    n_steps = seq.n_steps
    onset = min(int(round(injection.onset_phase * n_steps)), n_steps - 1)
    rate = seq.sample_rate_hz
    since_onset = (np.arange(n_steps) - onset) / rate
    samples = np.array(seq.samples)
    rng = np.random.default_rng(seed)

    if kind is AnomalyKind.FORCE_PUSH:
        col = seq.channel_index(FORCE_CHANNEL)
        sigma = prof.channel(FORCE_CHANNEL).noise_std
        amplitude = AMPLITUDE_PER_MAGNITUDE_STD * injection.magnitude * sigma
        inside = (since_onset >= 0) & (since_onset <= FORCE_PUSH_DURATION_S)
        bump = np.zeros(n_steps)
        bump[inside] = amplitude * np.sin(np.pi * since_onset[inside] / FORCE_PUSH_DURATION_S) ** 2
        samples[:, col] += bump
    elif kind is AnomalyKind.LOUD_SOUND:
        col = seq.channel_index(AUDIO_CHANNEL)
        sigma = prof.channel(AUDIO_CHANNEL).noise_std
        amplitude = AMPLITUDE_PER_MAGNITUDE_STD * injection.magnitude * sigma
        inside = (since_onset >= 0) & (since_onset <= LOUD_SOUND_DURATION_S)
        # Instant bang at onset, raised-cosine decay, noisy texture.
        envelope = np.cos(0.5 * np.pi * since_onset[inside] / LOUD_SOUND_DURATION_S) ** 2
        texture = 0.7 + 0.3 * rng.uniform(size=int(inside.sum()))
        burst = np.zeros(n_steps)
        burst[inside] = amplitude * envelope * texture
        samples[:, col] += burst
    else:  # MOUTH_CLOSED
        col = seq.channel_index(FORCE_CHANNEL)
        spec = prof.channel(FORCE_CHANNEL)
        sigma = spec.noise_std
        after = since_onset >= 0
        ramp = np.clip(since_onset[after] / MOUTH_CLOSED_RAMP_S, 0.0, 1.0)
        phases = np.arange(n_steps) / n_steps
        # Cancel the nominal release so the force holds at its onset level,
        # then sit magnitude * sigma above it.  Scaled so magnitude 0 is the
        # identity.
        hold = np.clip(spec.value_at(phases[onset]) - spec.value_at(phases[after]), 0.0, None)
        elevation = min(1.0, injection.magnitude) * hold
        elevation = elevation + injection.magnitude * sigma * ramp
        samples[after, col] += elevation

    return MultimodalSequence(
        task=seq.task,
        sample_rate_hz=rate,
        channels=seq.channels,
        samples=samples,
        label=SequenceLabel.ANOMALOUS,
        anomaly_onset=onset,
        anomaly_kind=kind,
        seed=seq.seed,
    )


def generate_corpus(
    task: Task,
    n_nominal: int,
    n_anomalous: int,
    seed: int = 0,
    *,
    profile: TaskProfile | None = None,
    duration_s: float | None = None,
    magnitude: float = 2.0,
    onset_range: tuple[float, float] = (0.1, 0.85),
) -> list[MultimodalSequence]:
    """Generate a labeled corpus: nominal block first, then anomalous.

    Anomaly kinds are drawn uniformly over the kinds valid for the task and
    onsets uniformly over ``onset_range``.  Deterministic for a fixed seed.
    """
    task = Task(task)
    check_count(n_nominal, "n_nominal")
    check_count(n_anomalous, "n_anomalous")
    check_unit_interval(onset_range[0], "onset_range[0]")
    check_unit_interval(onset_range[1], "onset_range[1]")
    rng = np.random.default_rng(seed)
    total = n_nominal + n_anomalous
    gen_seeds = rng.integers(0, 2**63, size=total)
    kinds = anomaly_kinds_for(task)
    kind_picks = rng.integers(0, len(kinds), size=n_anomalous)
    onsets = rng.uniform(onset_range[0], onset_range[1], size=n_anomalous)
    inject_seeds = rng.integers(0, 2**63, size=n_anomalous)

    corpus = [
        generate_nominal(task, duration_s, int(gen_seeds[i]), profile=profile)
        for i in range(n_nominal)
    ]
    for j in range(n_anomalous):
        base = generate_nominal(
            task, duration_s, int(gen_seeds[n_nominal + j]), profile=profile
        )
        injection = AnomalyInjection(
            kind=kinds[kind_picks[j]], onset_phase=float(onsets[j]), magnitude=magnitude
        )
        corpus.append(inject_anomaly(base, injection, int(inject_seeds[j]), profile=profile))
    return corpus


# --- corpus serialization (line-delimited JSON) ---------------------------
#
# One record per line with the fields below; names and enum spellings are the
# format contract (see docs/formats.md).

def sequence_to_record(seq: MultimodalSequence) -> dict:
    return {
        "task": seq.task.value,
        "sample_rate_hz": seq.sample_rate_hz,
        "channels": list(seq.channels),
        "samples": [list(map(float, row)) for row in seq.samples],
        "label": seq.label.value,
        "anomaly_onset": seq.anomaly_onset,
        "anomaly_kind": seq.anomaly_kind.value if seq.anomaly_kind else None,
        "seed": seq.seed,
    }


def record_to_sequence(record: dict) -> MultimodalSequence:
    try:
        return MultimodalSequence(
            task=Task(record["task"]),
            sample_rate_hz=record["sample_rate_hz"],
            channels=tuple(record["channels"]),
            samples=np.asarray(record["samples"], dtype=float),
            label=SequenceLabel(record["label"]),
            anomaly_onset=record["anomaly_onset"],
            anomaly_kind=AnomalyKind(record["anomaly_kind"]) if record.get("anomaly_kind") else None,
            seed=record.get("seed"),
        )
    except KeyError as exc:
        raise ValueError(f"corpus record missing field {exc.args[0]!r}") from None


def dump_corpus(sequences: Iterable[MultimodalSequence]) -> str:
    return "".join(json.dumps(sequence_to_record(s), sort_keys=True) + "\n" for s in sequences)


def save_corpus(sequences: Sequence[MultimodalSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_corpus(sequences))


def load_corpus(path) -> list[MultimodalSequence]:
    sequences = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sequences.append(record_to_sequence(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"invalid corpus record at line {lineno}: {exc}") from exc
    return sequences
