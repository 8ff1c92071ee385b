"""Log band-power features with a brute-force k-nearest-neighbour classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import State
from .dsp import DEFAULT_BANDS, Clip, band_power
from .errors import EmptyTrainingSet, KTooLarge
from .evalharness import (
    SESSION_LEVEL, CVReport, FilterSpec, SegmentationConfig, cv_folds, fold_result, parse_protocol,
)

LOG_FLOOR = 1e-12


@dataclass
class FeatureVector:
    values: np.ndarray  # channel-major: [ch0 delta..gamma, ch1 delta..gamma, ...]
    label: State
    session_id: str


def log_band_power(data, fs=128.0, bands=DEFAULT_BANDS) -> np.ndarray:
    """log10 band power flattened channel-major; works on one clip or a stack."""
    bp = band_power(np.asarray(data), bands, fs)
    return np.log10(bp + LOG_FLOOR).reshape(*bp.shape[:-2], -1)


def extract_features(clip: Clip, fs=128.0) -> FeatureVector:
    return FeatureVector(log_band_power(clip.data, fs), clip.label, clip.session_id)


@dataclass
class KnnModel:
    vectors: np.ndarray  # [n, d]
    labels: np.ndarray  # [n]
    k: int = 5


def knn_fit(features, k: int = 5) -> KnnModel:
    features = list(features)
    if not features:
        raise EmptyTrainingSet("kNN needs at least one training vector")
    if k < 1:
        raise ValueError("k must be >= 1")
    return KnnModel(np.stack([f.values for f in features]).astype(np.float64),
                    np.array([int(f.label) for f in features]), k)


def knn_predict_many(model: KnnModel, queries: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Majority vote over the k nearest (Euclidean) training vectors.

    Distance ties go to the earlier training vector, vote ties to the
    smaller label.
    """
    n = model.labels.size
    if model.k > n:
        raise KTooLarge(f"k={model.k} exceeds {n} training vectors")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n_classes = max(len(State), int(model.labels.max()) + 1)
    out = np.empty(q.shape[0], dtype=np.int64)
    for s in range(0, q.shape[0], chunk):
        d = ((q[s:s + chunk, None, :] - model.vectors[None]) ** 2).sum(axis=2)
        nearest = np.argsort(d, axis=1, kind="stable")[:, :model.k]
        for i, row in enumerate(model.labels[nearest]):
            out[s + i] = np.bincount(row, minlength=n_classes).argmax()
    return out


def knn_predict(model: KnnModel, query) -> State:
    values = query.values if isinstance(query, FeatureVector) else query
    return State(int(knn_predict_many(model, np.asarray(values)[None])[0]))


def _clipset_features(clips, fs, batch=256):
    parts = [log_band_power(clips.batch(np.arange(s, min(s + batch, len(clips)))), fs)
             for s in range(0, len(clips), batch)]
    return np.concatenate(parts) if parts else np.zeros((0, 0))


def run_knn_cv(recordings, protocol, seg_cfg=SegmentationConfig(), *, k_neighbors=5, k=5,
               seed=0, filter_spec=FilterSpec()) -> CVReport:
    """Cross-validate the band-power kNN under either protocol."""
    protocol = parse_protocol(protocol)
    recordings = list(recordings)
    fs = recordings[0].meta.sample_rate_hz if recordings else 128.0
    folds = []
    for fold, tr, va, tu, vu in cv_folds(recordings, protocol, seg_cfg, k, seed, filter_spec):
        model = KnnModel(_clipset_features(tr, fs), tr.labels.copy(), k_neighbors)
        res = fold_result(va.labels, knn_predict_many(model, _clipset_features(va, fs)), fold)
        if protocol == SESSION_LEVEL:
            res.train_units, res.val_units = tu, vu
        folds.append(res)
    return CVReport(protocol, seed, folds)
