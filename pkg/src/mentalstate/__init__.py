"""EEG mental-state decoding: bandpass preprocessing, a residual 1-D CNN on
numpy, a band-power kNN baseline and leakage-aware cross-validation."""

__version__ = "0.1.0"
