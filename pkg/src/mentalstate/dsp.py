"""Signal chain: bandpass, segmentation into clips, clip normalization, band power."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .dataio import LabeledEpoch, Recording, State
from .errors import ClipTooShort, DegenerateClip, InvalidBand, SignalTooShort


@dataclass(frozen=True)
class FilterSpec:
    low_cut_hz: float = 1.0
    high_cut_hz: float = 40.0
    order: int = 4  # total bandpass order; order/2 biquads

    def validate(self, fs: float) -> None:
        if self.order < 2 or self.order % 2:
            raise InvalidBand(f"filter order must be an even integer >= 2, got {self.order}")
        if not 0 < self.low_cut_hz < self.high_cut_hz < fs / 2:
            raise InvalidBand(
                f"need 0 < low ({self.low_cut_hz}) < high ({self.high_cut_hz}) < fs/2 ({fs / 2})"
            )

    @property
    def settle_samples(self) -> int:
        return 10 * self.order


@dataclass(frozen=True)
class SosCascade:
    sections: np.ndarray  # [n_sections, 6] rows of b0 b1 b2 a0 a1 a2
    pad: int = 0  # reflect padding applied by filtfilt on each end

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(row[3:]) for row in self.sections])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


def design_bandpass(spec: FilterSpec, fs: float) -> SosCascade:
    """Butterworth bandpass (bilinear transform) as second-order sections."""
    spec.validate(fs)
    sos = sps.butter(spec.order // 2, [spec.low_cut_hz, spec.high_cut_hz],
                     btype="bandpass", fs=fs, output="sos")
    sos = sos / sos[:, 3:4]
    return SosCascade(sections=sos, pad=3 * spec.settle_samples)


def filtfilt(x: np.ndarray, sos: SosCascade) -> np.ndarray:
    """Zero-phase forward-backward application of ``sos`` to one channel.

    Both ends are reflect-padded by ``sos.pad`` samples; the recursion
    starts from the steady state of the first padded sample.
    """
    x = np.asarray(x, dtype=np.float64)
    pad = sos.pad
    if x.ndim != 1:
        raise ValueError("filtfilt expects a single channel")
    if x.size <= max(pad, 1):
        raise SignalTooShort(f"signal of {x.size} samples; need more than {pad}")
    ext = np.pad(x, pad, mode="reflect") if pad else x
    zi = sps.sosfilt_zi(sos.sections)
    y, _ = sps.sosfilt(sos.sections, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.sosfilt(sos.sections, y, zi=zi * y[0])
    y = y[::-1]
    return y[pad:pad + x.size] if pad else y


def filter_recording(rec: Recording, spec: FilterSpec = FilterSpec()) -> Recording:
    """Bandpass every channel of a recording; metadata is kept."""
    sos = design_bandpass(spec, rec.meta.sample_rate_hz)
    out = np.empty_like(rec.samples)
    for c in range(rec.n_channels):
        out[c] = filtfilt(rec.samples[c], sos)
    return Recording(rec.meta, out)


# ---------------------------------------------------------------- clips


@dataclass(frozen=True)
class SegmentationConfig:
    window_s: float = 15.0
    overlap_s: float = 14.0

    def samples(self, fs: float) -> tuple[int, int]:
        """Return (window, stride) in samples, validating the config at ``fs``."""
        if not 0 <= self.overlap_s < self.window_s:
            raise ValueError(f"need 0 <= overlap ({self.overlap_s}) < window ({self.window_s})")
        w = self.window_s * fs
        s = (self.window_s - self.overlap_s) * fs
        if abs(w - round(w)) > 1e-9 or abs(s - round(s)) > 1e-9:
            raise ValueError(f"window {w} / stride {s} are not whole samples at {fs} Hz")
        return int(round(w)), int(round(s))


@dataclass
class Clip:
    data: np.ndarray  # [n_channels, window]
    label: State
    session_id: str
    origin_sample: int


def clip_count(n: int, window: int, stride: int) -> int:
    return 0 if n < window else (n - window) // stride + 1


def segment(epoch: LabeledEpoch, cfg: SegmentationConfig, fs: float) -> list[Clip]:
    w, s = cfg.samples(fs)
    n = epoch.samples.shape[1]
    return [
        Clip(epoch.samples[:, i * s:i * s + w], epoch.label, epoch.session_id,
             epoch.start_sample + i * s)
        for i in range(clip_count(n, w, s))
    ]


def normalization_stats(data: np.ndarray) -> tuple[float, float]:
    """Scalar mean and population std over every channel and sample."""
    d = np.asarray(data, dtype=np.float64)
    return float(d.mean()), float(d.std())


def normalize_array(data: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Normalize one clip array (or a stack of clips along axis 0) globally per clip."""
    d = np.asarray(data, dtype=np.float64)
    axes = tuple(range(d.ndim - 2, d.ndim))
    mean = d.mean(axis=axes, keepdims=True)
    std = d.std(axis=axes, keepdims=True)
    if np.any(std < 1e-12):
        raise DegenerateClip("clip has (near) zero standard deviation")
    return ((d - mean) / std).astype(dtype)


def normalize_clip(clip: Clip) -> Clip:
    data = normalize_array(clip.data, dtype=np.float64)
    return Clip(data, clip.label, clip.session_id, clip.origin_sample)


# ---------------------------------------------------------------- band power


@dataclass(frozen=True)
class BandDef:
    name: str
    low_hz: float
    high_hz: float


DEFAULT_BANDS = (
    BandDef("delta", 1.0, 4.0),
    BandDef("theta", 4.0, 8.0),
    BandDef("alpha", 8.0, 13.0),
    BandDef("beta", 13.0, 30.0),
    BandDef("gamma", 30.0, 40.0),
)


def periodogram(x: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided periodogram along the last axis; power density per Hz."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2 / (fs * n)
    if n % 2 == 0:
        spec[..., 1:-1] *= 2
    else:
        spec[..., 1:] *= 2
    return np.fft.rfftfreq(n, 1.0 / fs), spec


def _band_masks(freqs, bands):
    top = max(b.high_hz for b in bands)
    return [
        (freqs >= b.low_hz) & ((freqs < b.high_hz) | ((b.high_hz == top) & (freqs <= top)))
        for b in bands
    ]


def band_power(clip, bands=DEFAULT_BANDS, fs: float = 128.0) -> np.ndarray:
    """Per-channel periodogram power integrated over each band -> [n_channels, n_bands].

    Bands are half-open [low, high) except the topmost, which includes its
    upper edge.
    """
    data = clip.data if isinstance(clip, Clip) else np.asarray(clip)
    if data.shape[-1] < fs:
        raise ClipTooShort(f"clip of {data.shape[-1]} samples shorter than 1 s at {fs} Hz")
    freqs, pxx = periodogram(data, fs)
    df = freqs[1] - freqs[0]
    return np.stack([pxx[..., m].sum(axis=-1) * df for m in _band_masks(freqs, bands)], axis=-1)


def total_power(clip, fs: float = 128.0, low_hz: float = 1.0, high_hz: float = 40.0) -> np.ndarray:
    data = clip.data if isinstance(clip, Clip) else np.asarray(clip)
    freqs, pxx = periodogram(data, fs)
    m = (freqs >= low_hz) & (freqs <= high_hz)
    return pxx[..., m].sum(axis=-1) * (freqs[1] - freqs[0])
