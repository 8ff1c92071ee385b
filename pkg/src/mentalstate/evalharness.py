"""Cross-validation protocols, training loop and accuracy reporting.

Two protocols are supported:

``clip_level``
    Segment every epoch first, then deal clips into folds. Overlapping
    clips from one epoch land on both sides of the split, which is the
    leakage mechanism this harness exists to measure.
``session_level``
    Deal whole sessions into folds first, then segment. No validation
    clip shares a session with any training clip.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import LabeledEpoch, Recording, State, derive_state_epochs
from .dsp import Clip, FilterSpec, SegmentationConfig, clip_count, filter_recording, normalize_array
from .errors import EmptyEvalSet, EmptyTrainingSet, InsufficientBatch, TooFewUnits
from .model import Model, ModelConfig, build_model
from .nn import Adam, softmax_cross_entropy

log = logging.getLogger(__name__)

CLIP_LEVEL = "clip_level"
SESSION_LEVEL = "session_level"
PROTOCOLS = (CLIP_LEVEL, SESSION_LEVEL)
N_CLASSES = len(State)


def parse_protocol(name: str) -> str:
    aliases = {"clip": CLIP_LEVEL, "session": SESSION_LEVEL}
    p = aliases.get(name, name)
    if p not in PROTOCOLS:
        raise ValueError(f"unknown protocol {name!r}; expected clip or session")
    return p


# ---------------------------------------------------------------- clip sets


class ClipSet:
    """Labeled clips addressed by index, materialized one batch at a time.

    Built either lazily over epochs (windows are cut and normalized on
    demand) or from a list of already normalized Clip objects.
    """

    def __init__(self, labels, session_ids, origins, *, epochs=None, epoch_index=None,
                 offsets=None, window=None, data=None):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.session_ids = np.asarray(session_ids, dtype=object)
        self.origins = np.asarray(origins, dtype=np.int64)
        self._epochs = epochs
        self._epoch_index = None if epoch_index is None else np.asarray(epoch_index, dtype=np.int64)
        self._offsets = None if offsets is None else np.asarray(offsets, dtype=np.int64)
        self.window = window
        self._data = data

    @classmethod
    def from_epochs(cls, epochs: list[LabeledEpoch], cfg: SegmentationConfig, fs: float):
        w, s = cfg.samples(fs)
        ep_idx, offsets, labels, sessions, origins = [], [], [], [], []
        for i, ep in enumerate(epochs):
            n = clip_count(ep.samples.shape[1], w, s)
            off = np.arange(n) * s
            ep_idx.append(np.full(n, i))
            offsets.append(off)
            labels.append(np.full(n, int(ep.label)))
            sessions.extend([ep.session_id] * n)
            origins.append(ep.start_sample + off)
        cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, np.int64)  # noqa: E731
        return cls(cat(labels), sessions, cat(origins), epochs=list(epochs),
                   epoch_index=cat(ep_idx), offsets=cat(offsets), window=w)

    @classmethod
    def from_clips(cls, clips: list[Clip]):
        """Wrap clips that are already normalized."""
        data = np.stack([c.data for c in clips]).astype(np.float32) if clips else None
        return cls([int(c.label) for c in clips], [c.session_id for c in clips],
                   [c.origin_sample for c in clips], data=data,
                   window=None if data is None else data.shape[2])

    def __len__(self):
        return self.labels.size

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ClipSet(
            self.labels[idx], self.session_ids[idx], self.origins[idx],
            epochs=self._epochs,
            epoch_index=None if self._epoch_index is None else self._epoch_index[idx],
            offsets=None if self._offsets is None else self._offsets[idx],
            window=self.window,
            data=None if self._data is None else self._data[idx],
        )

    def raw(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if self._data is not None:
            return self._data[idx]
        return np.stack([
            self._epochs[e].samples[:, o:o + self.window]
            for e, o in zip(self._epoch_index[idx], self._offsets[idx])
        ])

    def batch(self, idx) -> np.ndarray:
        """Normalized float32 clips [b, channels, window]."""
        if self._data is not None:
            return self.raw(idx)
        return normalize_array(self.raw(idx))

    def clip(self, i) -> Clip:
        return Clip(self.raw([i])[0], State(int(self.labels[i])), str(self.session_ids[i]),
                    int(self.origins[i]))

    def sample_ranges(self) -> list[tuple[str, int, int, int]]:
        """(session_id, label, start, end) sample range of every clip."""
        return [(str(s), int(l), int(o), int(o) + self.window)
                for s, l, o in zip(self.session_ids, self.labels, self.origins)]


def preprocess(recordings, filter_spec: FilterSpec = FilterSpec()) -> list[LabeledEpoch]:
    """Filter whole recordings, then cut the labeled state epochs."""
    epochs = []
    for rec in recordings:
        epochs.extend(derive_state_epochs(filter_recording(rec, filter_spec)))
    return epochs


# ---------------------------------------------------------------- splits


@dataclass
class SplitPlan:
    protocol: str
    k: int
    assignments: dict  # unit id -> fold index
    seed: int

    def fold_units(self, fold: int) -> list:
        return [u for u, f in self.assignments.items() if f == fold]

    def fold_sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.assignments.values():
            counts[f] += 1
        return counts


def make_clip_split(n_clips: int, k: int = 5, seed: int = 0) -> SplitPlan:
    if k < 1 or n_clips < k:
        raise TooFewUnits(f"{n_clips} clips cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n_clips)
    return SplitPlan(CLIP_LEVEL, k, {int(c): i % k for i, c in enumerate(perm)}, seed)


def make_session_split(session_ids, k: int = 5, seed: int = 0) -> SplitPlan:
    sessions = sorted(set(session_ids))
    if k < 1 or len(sessions) < k:
        raise TooFewUnits(f"{len(sessions)} sessions cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(sessions))
    return SplitPlan(SESSION_LEVEL, k, {sessions[j]: i % k for i, j in enumerate(perm)}, seed)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self):
        return dict(batch_size=self.batch_size, epochs=self.epochs, seed=self.seed, lr=self.lr,
                    beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def _as_clipset(clips) -> ClipSet:
    return clips if isinstance(clips, ClipSet) else ClipSet.from_clips(list(clips))


def train(model_cfg: ModelConfig, train_clips, cfg: TrainConfig = TrainConfig()):
    """Fit a fresh model. Returns (model, per-epoch mean loss history)."""
    cfg.validate()
    clips = _as_clipset(train_clips)
    n = len(clips)
    if n == 0:
        raise EmptyTrainingSet("no training clips")
    if n < 2:
        raise InsufficientBatch("at least 2 training clips are needed for batch norm")
    model = build_model(model_cfg, seed=cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            x = clips.batch(idx)
            logits = model.forward(x, train=True, dropout_seed=int(rng.integers(2**63)))
            loss, grad = softmax_cross_entropy(logits, clips.labels[idx])
            model.backward(grad, input_grad=False)
            opt.step(model.parameters(), model.gradients())
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d mean loss %.4f", epoch + 1, history[-1])
    return model, history


# ---------------------------------------------------------------- evaluation


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    confusion: np.ndarray  # rows = true, columns = predicted
    n_eval: int
    loss_history: list = field(default_factory=list)
    train_units: list = field(default_factory=list)
    val_units: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "accuracy": self.accuracy,
            "confusion": [int(v) for v in np.asarray(self.confusion).ravel()],
            "n_eval": self.n_eval,
            "loss_history": list(self.loss_history),
            "train_units": list(self.train_units),
            "val_units": list(self.val_units),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(d["fold"], d["accuracy"],
                   np.asarray(d["confusion"], dtype=np.int64).reshape(N_CLASSES, N_CLASSES),
                   d["n_eval"], list(d.get("loss_history", [])),
                   list(d.get("train_units", [])), list(d.get("val_units", [])))


def confusion_matrix(true, pred, n_classes=N_CLASSES) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return m


def fold_result(true, pred, fold=0) -> FoldResult:
    true = np.asarray(true)
    if true.size == 0:
        raise EmptyEvalSet("no evaluation clips")
    m = confusion_matrix(true, pred)
    return FoldResult(fold, float(np.trace(m) / m.sum()), m, int(m.sum()))


def predict_labels(model: Model, clips: ClipSet, batch_size=256) -> np.ndarray:
    out = []
    for start in range(0, len(clips), batch_size):
        idx = np.arange(start, min(start + batch_size, len(clips)))
        out.append(model.predict_proba(clips.batch(idx)).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, eval_clips, fold: int = 0) -> FoldResult:
    clips = _as_clipset(eval_clips)
    if len(clips) == 0:
        raise EmptyEvalSet("no evaluation clips")
    return fold_result(clips.labels, predict_labels(model, clips), fold)


# ---------------------------------------------------------------- cross-validation


@dataclass
class CVReport:
    protocol: str
    seed: int
    folds: list

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def pooled_confusion(self) -> np.ndarray:
        return sum(np.asarray(f.confusion) for f in self.folds)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "folds": [f.to_dict() for f in self.folds],
            "mean_accuracy": self.mean_accuracy,
            "pooled_confusion": [int(v) for v in self.pooled_confusion.ravel()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CVReport":
        return cls(d["protocol"], d["seed"], [FoldResult.from_dict(f) for f in d["folds"]])

    @classmethod
    def from_json(cls, text: str) -> "CVReport":
        return cls.from_dict(json.loads(text))

    def confusion_csv(self) -> str:
        names = [s.name.lower() for s in State]
        lines = ["fold,true," + ",".join(f"pred_{n}" for n in names)]
        for f in self.folds:
            for i, row in enumerate(np.asarray(f.confusion)):
                lines.append(f"{f.fold},{names[i]}," + ",".join(str(int(v)) for v in row))
        for i, row in enumerate(self.pooled_confusion):
            lines.append(f"pooled,{names[i]}," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def cv_folds(recordings, protocol, seg_cfg=SegmentationConfig(), k=5, seed=0,
             filter_spec=FilterSpec()):
    """Yield (fold, train ClipSet, validation ClipSet, train units, val units).

    Units are session ids under ``session_level`` and clip indices under
    ``clip_level``.
    """
    protocol = parse_protocol(protocol)
    recordings = list(recordings)
    if not recordings:
        raise EmptyTrainingSet("no recordings")
    fs = recordings[0].meta.sample_rate_hz
    epochs = preprocess(recordings, filter_spec)
    if protocol == SESSION_LEVEL:
        plan = make_session_split([r.meta.session_id for r in recordings], k, seed)
        for fold in range(k):
            val = set(plan.fold_units(fold))
            tr_eps = [e for e in epochs if e.session_id not in val]
            va_eps = [e for e in epochs if e.session_id in val]
            train_units = sorted(u for u in plan.assignments if u not in val)
            yield (fold, ClipSet.from_epochs(tr_eps, seg_cfg, fs),
                   ClipSet.from_epochs(va_eps, seg_cfg, fs), train_units, sorted(val))
    else:
        clips = ClipSet.from_epochs(epochs, seg_cfg, fs)
        plan = make_clip_split(len(clips), k, seed)
        folds = np.array([plan.assignments[i] for i in range(len(clips))])
        for fold in range(k):
            tr = np.flatnonzero(folds != fold)
            va = np.flatnonzero(folds == fold)
            yield fold, clips.subset(tr), clips.subset(va), tr.tolist(), va.tolist()


def _fold_train_config(cfg: TrainConfig, fold: int) -> TrainConfig:
    return TrainConfig(cfg.batch_size, cfg.epochs, cfg.seed * 1000 + fold,
                       cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def _run_fold(args):
    fold, tr, va, tr_units, va_units, model_cfg, train_cfg = args
    model, history = train(model_cfg, tr, _fold_train_config(train_cfg, fold))
    res = evaluate(model, va, fold)
    res.loss_history = history
    res.train_units, res.val_units = tr_units, va_units
    log.info("fold %d accuracy %.4f (%d clips)", fold, res.accuracy, res.n_eval)
    return res


def _compact_units(protocol, units):
    # clip indices are reported as counts only; session ids are listed
    return units if protocol == SESSION_LEVEL else []


def run_cv(recordings, protocol, seg_cfg=SegmentationConfig(), model_cfg=ModelConfig(),
           train_cfg=TrainConfig(), *, k=5, seed=0, filter_spec=FilterSpec(),
           workers=1) -> CVReport:
    """Pipeline per fold: train on k-1 folds, evaluate on the held-out fold."""
    protocol = parse_protocol(protocol)
    jobs = [
        (fold, tr, va, _compact_units(protocol, tu), _compact_units(protocol, vu),
         model_cfg, train_cfg)
        for fold, tr, va, tu, vu in cv_folds(recordings, protocol, seg_cfg, k, seed, filter_spec)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_run_fold, jobs))
    else:
        folds = [_run_fold(j) for j in jobs]
    return CVReport(protocol, seed, folds)


# ---------------------------------------------------------------- leakage


@dataclass
class GapReport:
    seed: int
    clip_report: CVReport
    session_report: CVReport

    @property
    def fold_gaps(self) -> list[float]:
        return [c.accuracy - s.accuracy
                for c, s in zip(self.clip_report.folds, self.session_report.folds)]

    @property
    def mean_gap(self) -> float:
        return self.clip_report.mean_accuracy - self.session_report.mean_accuracy

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "clip_level_mean_accuracy": self.clip_report.mean_accuracy,
            "session_level_mean_accuracy": self.session_report.mean_accuracy,
            "fold_gaps": self.fold_gaps,
            "mean_gap": self.mean_gap,
            "clip_level": self.clip_report.to_dict(),
            "session_level": self.session_report.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GapReport":
        d = json.loads(text)
        return cls(d["seed"], CVReport.from_dict(d["clip_level"]),
                   CVReport.from_dict(d["session_level"]))


def leakage_gap(recordings, seg_cfg=SegmentationConfig(), model_cfg=ModelConfig(),
                train_cfg=TrainConfig(), seed=0, *, k=5, filter_spec=FilterSpec(),
                workers=1) -> GapReport:
    """Run both protocols with shared seeds; the gap is clip minus session accuracy."""
    recordings = list(recordings)
    kw = dict(k=k, seed=seed, filter_spec=filter_spec, workers=workers)
    clip = run_cv(recordings, CLIP_LEVEL, seg_cfg, model_cfg, train_cfg, **kw)
    session = run_cv(recordings, SESSION_LEVEL, seg_cfg, model_cfg, train_cfg, **kw)
    return GapReport(seed, clip, session)


def overlap_witness(train: ClipSet, val: ClipSet, min_fraction=14 / 15):
    """Find a train/validation clip pair from one epoch sharing >= min_fraction of samples.

    Returns (train_index, val_index, shared_fraction) or None.
    """
    w = train.window
    need = min_fraction * w
    by_key = {}
    for i, (s, lab, o) in enumerate(zip(train.session_ids, train.labels, train.origins)):
        by_key.setdefault((s, int(lab)), []).append((int(o), i))
    for key in by_key:
        by_key[key].sort()
    for j, (s, lab, o) in enumerate(zip(val.session_ids, val.labels, val.origins)):
        cands = by_key.get((s, int(lab)), [])
        starts = np.array([c[0] for c in cands])
        if starts.size == 0:
            continue
        shared = w - np.abs(starts - int(o))
        best = int(np.argmax(shared))
        if shared[best] >= need - 1e-9:
            return cands[best][1], j, float(shared[best] / w)
    return None
