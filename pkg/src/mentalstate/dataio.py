"""Recording container, state-epoch derivation and synthetic sessions.

On disk a recording is a pair of files sharing a stem:

* ``<name>.f32`` -- little-endian float32 samples, frame interleaved
  (one frame = one sample of every channel, in metadata channel order).
* ``<name>.meta.json`` -- UTF-8 JSON sidecar with ``subject_id``,
  ``session_id``, ``sample_rate_hz``, ``channel_names`` and ``annotations``.

A plain CSV (header of channel names, one row per frame) is accepted as an
alternative input.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, IoFailure, MalformedContainer, SessionTooShort

EMOTIV_CHANNELS = (
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1",
    "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
)
DEFAULT_FS = 128.0
EPOCH_MINUTES = 10.0
MIN_SESSION_MINUTES = 3 * EPOCH_MINUTES

PAYLOAD_SUFFIX = ".f32"
META_SUFFIX = ".meta.json"


class State(IntEnum):
    FOCUSED = 0
    UNFOCUSED = 1
    DROWSY = 2


STATE_NAMES = {s: s.name.lower() for s in State}


def parse_state(value) -> State:
    """Accept a State, its integer code, or its lowercase name."""
    if isinstance(value, State):
        return value
    if isinstance(value, str):
        try:
            return State[value.upper()]
        except KeyError:
            raise ValueError(f"unknown state label {value!r}") from None
    return State(int(value))


@dataclass(frozen=True)
class Annotation:
    label: State
    start_sample: int
    end_sample: int

    def __post_init__(self):
        object.__setattr__(self, "label", parse_state(self.label))
        if self.start_sample < 0 or self.end_sample <= self.start_sample:
            raise ValueError(
                f"annotation range [{self.start_sample}, {self.end_sample}) is empty or negative"
            )

    def to_dict(self) -> dict:
        return {
            "label": int(self.label),
            "start_sample": int(self.start_sample),
            "end_sample": int(self.end_sample),
        }


@dataclass
class RecordingMeta:
    subject_id: str
    session_id: str
    sample_rate_hz: float = DEFAULT_FS
    channel_names: list[str] = field(default_factory=lambda: list(EMOTIV_CHANNELS))
    annotations: list[Annotation] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "session_id": self.session_id,
            "sample_rate_hz": self.sample_rate_hz,
            "channel_names": list(self.channel_names),
            "annotations": [a.to_dict() for a in self.annotations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecordingMeta":
        try:
            return cls(
                subject_id=str(d["subject_id"]),
                session_id=str(d["session_id"]),
                sample_rate_hz=float(d["sample_rate_hz"]),
                channel_names=[str(c) for c in d["channel_names"]],
                annotations=[
                    Annotation(a["label"], int(a["start_sample"]), int(a["end_sample"]))
                    for a in d.get("annotations", [])
                ],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedContainer(f"bad metadata: {exc}") from exc


@dataclass
class Recording:
    meta: RecordingMeta
    samples: np.ndarray  # [n_channels, n_samples], float32

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        validate_recording(self)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.meta.sample_rate_hz


@dataclass
class LabeledEpoch:
    label: State
    samples: np.ndarray  # [n_channels, epoch_length]
    session_id: str
    start_sample: int = 0

    def __post_init__(self):
        self.label = parse_state(self.label)
        if self.samples.ndim != 2 or self.samples.shape[1] == 0:
            raise ValueError("epoch must be a non-empty channels x samples matrix")


def validate_recording(rec: Recording) -> None:
    """Raise MalformedContainer unless every Recording invariant holds."""
    meta, x = rec.meta, rec.samples
    if not (meta.sample_rate_hz > 0 and math.isfinite(meta.sample_rate_hz)):
        raise MalformedContainer(f"sample rate must be positive, got {meta.sample_rate_hz}")
    if not meta.channel_names:
        raise MalformedContainer("channel_names is empty")
    if len(set(meta.channel_names)) != len(meta.channel_names):
        raise MalformedContainer("channel_names contains duplicates")
    if x.ndim != 2 or x.shape[0] != len(meta.channel_names):
        raise MalformedContainer(
            f"sample matrix shape {x.shape} does not match {len(meta.channel_names)} channels"
        )
    if not np.all(np.isfinite(x)):
        raise MalformedContainer("samples contain non-finite values")
    spans = sorted((a.start_sample, a.end_sample) for a in meta.annotations)
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        if s1 < e0:
            raise MalformedContainer(f"annotations overlap at sample {s1}")
    if spans and spans[-1][1] > x.shape[1]:
        raise MalformedContainer(
            f"annotation ends at {spans[-1][1]} beyond recording length {x.shape[1]}"
        )


# ---------------------------------------------------------------- file io


def _stem(path: Path) -> Path:
    name = path.name
    for suffix in (META_SUFFIX, PAYLOAD_SUFFIX):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def container_paths(path) -> tuple[Path, Path]:
    """Return (payload, sidecar) paths for a container stem or either member."""
    stem = _stem(Path(path))
    return stem.with_name(stem.name + PAYLOAD_SUFFIX), stem.with_name(stem.name + META_SUFFIX)


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_recording(rec: Recording, path) -> None:
    validate_recording(rec)
    payload, sidecar = container_paths(path)
    frames = np.ascontiguousarray(rec.samples.T, dtype="<f4")
    meta = json.dumps(rec.meta.to_dict(), indent=2, sort_keys=True) + "\n"
    _write_atomic(payload, frames.tobytes())
    _write_atomic(sidecar, meta.encode("utf-8"))


def load_recording(path) -> Recording:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    payload, sidecar = container_paths(path)
    try:
        meta_text = sidecar.read_text(encoding="utf-8")
        raw = payload.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read container {path}: {exc}") from exc
    try:
        meta = RecordingMeta.from_dict(json.loads(meta_text))
    except json.JSONDecodeError as exc:
        raise MalformedContainer(f"{sidecar}: invalid JSON ({exc})") from exc
    n_ch = len(meta.channel_names)
    if len(raw) % 4:
        raise MalformedContainer(f"{payload}: size {len(raw)} is not a whole number of float32")
    values = np.frombuffer(raw, dtype="<f4")
    if n_ch == 0 or values.size % n_ch:
        raise MalformedContainer(
            f"{payload}: {values.size} values not divisible by {n_ch} channels"
        )
    samples = values.reshape(-1, n_ch).T.astype(np.float32)
    return Recording(meta, samples)


def _load_csv(path: Path) -> Recording:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise MalformedContainer(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if any(len(r) != len(header) for r in body):
        raise MalformedContainer(f"{path}: ragged rows")
    try:
        values = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise MalformedContainer(f"{path}: {exc}") from exc
    values = values.reshape(len(body), len(header))
    meta = RecordingMeta(subject_id=path.stem, session_id=path.stem, channel_names=header)
    return Recording(meta, values.T)


# ---------------------------------------------------------------- epochs


def derive_state_epochs(rec: Recording) -> list[LabeledEpoch]:
    """Cut a session into its labeled state epochs.

    Explicit annotations are passed through. Without them the session
    timeline applies: focused for the first 10 minutes, unfocused for the
    next 10, drowsy for the final 10. Anything between minute 20 and the
    last 10 minutes stays unlabeled.
    """
    meta = rec.meta
    if meta.annotations:
        return [
            LabeledEpoch(a.label, rec.samples[:, a.start_sample:a.end_sample],
                         meta.session_id, a.start_sample)
            for a in meta.annotations
        ]
    fs = meta.sample_rate_hz
    span = int(round(EPOCH_MINUTES * 60 * fs))
    total = rec.n_samples
    if total < 3 * span:
        raise SessionTooShort(
            f"session {meta.session_id} lasts {total / fs / 60:.2f} min; "
            f"{MIN_SESSION_MINUTES:g} min needed without annotations"
        )
    ranges = [
        (State.FOCUSED, 0, span),
        (State.UNFOCUSED, span, 2 * span),
        (State.DROWSY, total - span, total),
    ]
    return [LabeledEpoch(lab, rec.samples[:, a:b], meta.session_id, a) for lab, a, b in ranges]


# ---------------------------------------------------------------- synthesis


@dataclass
class SyntheticSpec:
    """Shape of a synthetic cohort.

    ``snr`` is the power ratio of the state oscillation to the broadband
    noise. ``session_confound_strength`` scales nuisance structure that is
    specific to one session: a per-channel gain/offset fixed for the whole
    session, plus a per-channel gain pattern redrawn for each state segment
    of that session (electrode settling). Offsets fall in the filter
    stopband; gains survive filtering and the global clip normalization.
    Neither carries information about the state across sessions.
    ``expressing_fraction`` is the share of sessions whose state rhythms are
    present; the others are noise plus confound only, which weakens the
    class signal that transfers between sessions.
    """

    n_subjects: int = 5
    n_sessions: int = 31
    session_minutes: float = 35.0
    class_band_centers_hz: dict = field(
        default_factory=lambda: {State.FOCUSED: 20.0, State.UNFOCUSED: 10.0, State.DROWSY: 5.0}
    )
    snr: float = 4.0
    rhythm_bandwidth_hz: float = 0.4
    expressing_fraction: float = 1.0
    session_confound_strength: float = 0.0
    sample_rate_hz: float = DEFAULT_FS
    channel_names: tuple = EMOTIV_CHANNELS

    def validate(self) -> None:
        if self.n_subjects < 1 or self.n_sessions < 1:
            raise InvalidSpec("n_subjects and n_sessions must be >= 1")
        if self.n_subjects > self.n_sessions:
            raise InvalidSpec("more subjects than sessions")
        if not (MIN_SESSION_MINUTES <= self.session_minutes <= 55):
            raise InvalidSpec(f"session_minutes must lie in [30, 55], got {self.session_minutes}")
        if not self.snr > 0:
            raise InvalidSpec("snr must be positive")
        if not self.rhythm_bandwidth_hz > 0:
            raise InvalidSpec("rhythm_bandwidth_hz must be positive")
        if not 0 < self.expressing_fraction <= 1:
            raise InvalidSpec("expressing_fraction must lie in (0, 1]")
        if not self.session_confound_strength >= 0:
            raise InvalidSpec("session_confound_strength must be >= 0")
        centers = {parse_state(k): float(v) for k, v in self.class_band_centers_hz.items()}
        if set(centers) != set(State):
            raise InvalidSpec("class_band_centers_hz needs one entry per state")
        for state, f in centers.items():
            if not 1.0 < f < 40.0:
                raise InvalidSpec(f"{STATE_NAMES[state]} band center {f} Hz outside (1, 40)")
        if not self.sample_rate_hz > 80:
            raise InvalidSpec("sample rate must exceed twice the 40 Hz band edge")

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_sessions": self.n_sessions,
            "session_minutes": self.session_minutes,
            "class_band_centers_hz": {
                STATE_NAMES[parse_state(k)]: float(v) for k, v in self.class_band_centers_hz.items()
            },
            "snr": self.snr,
            "rhythm_bandwidth_hz": self.rhythm_bandwidth_hz,
            "expressing_fraction": self.expressing_fraction,
            "session_confound_strength": self.session_confound_strength,
            "sample_rate_hz": self.sample_rate_hz,
            "channel_names": list(self.channel_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "class_band_centers_hz" in d:
            d["class_band_centers_hz"] = {
                parse_state(k): float(v) for k, v in d["class_band_centers_hz"].items()
            }
        if "channel_names" in d:
            d["channel_names"] = tuple(d["channel_names"])
        return cls(**d)


def _narrowband(rng, n, fs, center, bandwidth, n_channels):
    """Unit-power oscillation around ``center`` Hz with a Gaussian spectral line."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shape = np.exp(-0.5 * ((freqs - center) / bandwidth) ** 2)
    spec = shape * (rng.standard_normal((n_channels, freqs.size))
                    + 1j * rng.standard_normal((n_channels, freqs.size)))
    x = np.fft.irfft(spec, n=n, axis=1)
    return x / x.std(axis=1, keepdims=True)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int) -> list[Recording]:
    spec.validate()
    fs = spec.sample_rate_hz
    n_ch = len(spec.channel_names)
    total = int(round(spec.session_minutes * 60 * fs))
    span = int(round(EPOCH_MINUTES * 60 * fs))
    centers = {parse_state(k): float(v) for k, v in spec.class_band_centers_hz.items()}
    amp = math.sqrt(spec.snr)
    strength = spec.session_confound_strength
    root = np.random.SeedSequence(seed)
    children = root.spawn(spec.n_sessions)
    expressing = np.ones(spec.n_sessions, dtype=bool)
    if spec.expressing_fraction < 1:
        # a fixed share of sessions (at least one) carries no state rhythm at all
        n_silent = spec.n_sessions - max(1, int(round(spec.expressing_fraction * spec.n_sessions)))
        silent = np.random.default_rng(root.spawn(1)[0]).permutation(spec.n_sessions)[:n_silent]
        expressing[silent] = False

    recordings = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        x = rng.standard_normal((n_ch, total))
        segments = [
            (State.FOCUSED, 0, span),
            (State.UNFOCUSED, span, 2 * span),
            (State.UNFOCUSED, 2 * span, total - span),
            (State.DROWSY, total - span, total),
        ]
        for state, a, b in segments:
            if b <= a:
                continue
            osc = _narrowband(rng, b - a, fs, centers[state], spec.rhythm_bandwidth_hz, n_ch)
            if expressing[i]:
                x[:, a:b] += amp * osc
            if strength > 0:
                x[:, a:b] *= np.exp(strength * rng.standard_normal((n_ch, 1)))
        if strength > 0:
            gain = np.exp(0.5 * strength * rng.standard_normal((n_ch, 1)))
            offset = strength * rng.standard_normal((n_ch, 1))
            x = gain * x + offset
        subject = i % spec.n_subjects
        meta = RecordingMeta(
            subject_id=f"S{subject + 1:02d}",
            session_id=f"S{subject + 1:02d}-R{i + 1:02d}",
            sample_rate_hz=fs,
            channel_names=list(spec.channel_names),
        )
        recordings.append(Recording(meta, x.astype(np.float32)))
    return recordings
