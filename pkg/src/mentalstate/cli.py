"""Command-line front end.

Settings come from three layers, later ones winning: built-in defaults,
the JSON file given with ``--config``, then explicit flags. Exit status is
0 on success, 1 on an operational failure and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, dsp, evalharness, model as modelmod
from .errors import MentalStateError

log = logging.getLogger("mentalstate")

CONFIG_HELP = """\
Config file: a JSON object with any of the sections
  "data", "seed", "protocol", "k", "threads",
  "filter": {"low_cut_hz", "high_cut_hz", "order"},
  "segmentation": {"window_s", "overlap_s"},
  "model": {"input_channels", "input_len", "kernel_lens", "channels",
            "downsample_factor", "dropout_keep", "n_classes"} or {"blocks": [...]},
  "train": {"batch_size", "epochs", "seed", "lr", "beta1", "beta2", "eps"},
  "synth": {"n_subjects", "n_sessions", "session_minutes", "snr",
            "rhythm_bandwidth_hz", "expressing_fraction",
            "session_confound_strength", "channel_names"}.
Precedence: defaults < config file < command-line flags.
"""


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


@dataclass
class RunConfig:
    data: str | None = None
    out: str | None = None
    seed: int = 0
    protocol: str = "session"
    k: int = 5
    threads: int = 1
    filter: dsp.FilterSpec = field(default_factory=dsp.FilterSpec)
    segmentation: dsp.SegmentationConfig = field(default_factory=dsp.SegmentationConfig)
    model: modelmod.ModelConfig = field(default_factory=modelmod.ModelConfig)
    train: evalharness.TrainConfig = field(default_factory=evalharness.TrainConfig)
    synth: dict = field(default_factory=dict)

    def validate(self, fs=dataio.DEFAULT_FS):
        """Check every embedded config before any work starts."""
        try:
            self.filter.validate(fs)
            w, _ = self.segmentation.samples(fs)
            self.model.validate()
            self.train.validate()
            evalharness.parse_protocol(self.protocol)
        except (MentalStateError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from exc
        if w != self.model.input_len:
            raise UsageError(
                f"segmentation window of {w} samples does not match model input_len "
                f"{self.model.input_len}"
            )
        if self.k < 1:
            raise UsageError("k must be >= 1")


def load_run_config(args) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise StageError("config", f"cannot read config file {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    try:
        cfg = RunConfig(
            data=raw.get("data"),
            out=raw.get("out"),
            seed=int(raw.get("seed", 0)),
            protocol=raw.get("protocol", "session"),
            k=int(raw.get("k", 5)),
            threads=int(raw.get("threads", 1)),
            filter=dsp.FilterSpec(**raw.get("filter", {})),
            segmentation=dsp.SegmentationConfig(**raw.get("segmentation", {})),
            model=modelmod.ModelConfig.from_dict(raw.get("model", {})),
            train=evalharness.TrainConfig(**raw.get("train", {})),
            synth=dict(raw.get("synth", {})),
        )
    except (TypeError, ValueError, MentalStateError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    for name in ("data", "out", "seed", "protocol", "k", "threads"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "epochs", None) is not None:
        t = cfg.train
        cfg.train = evalharness.TrainConfig(t.batch_size, args.epochs, t.seed, t.lr,
                                            t.beta1, t.beta2, t.eps)
    if getattr(args, "seed", None) is not None:
        t = cfg.train
        cfg.train = evalharness.TrainConfig(t.batch_size, t.epochs, args.seed, t.lr,
                                            t.beta1, t.beta2, t.eps)
    return cfg


# ---------------------------------------------------------------- helpers


def _write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _recording_paths(data) -> list[Path]:
    p = Path(data)
    if p.is_file() or p.with_name(p.name + dataio.META_SUFFIX).exists():
        return [p]
    if not p.is_dir():
        raise StageError("load", f"data path {p} does not exist")
    metas = sorted(p.glob("*" + dataio.META_SUFFIX))
    csvs = sorted(p.glob("*.csv"))
    if not metas and not csvs:
        raise StageError("load", f"no recordings found in {p}")
    return metas + csvs


def _load_all(data):
    if data is None:
        raise UsageError("no data path given (--data or \"data\" in the config)")
    try:
        return [dataio.load_recording(p) for p in _recording_paths(data)]
    except MentalStateError as exc:
        raise StageError("load", exc) from exc


def _require_out(cfg):
    if not cfg.out:
        raise UsageError("no output path given (--out)")
    return Path(cfg.out)


def _loss_tsv(histories) -> str:
    lines = ["# epoch\t" + "\t".join(f"fold{i}" for i in range(len(histories)))]
    for e in range(max((len(h) for h in histories), default=0)):
        vals = [f"{h[e]:.6f}" if e < len(h) else "nan" for h in histories]
        lines.append(f"{e + 1}\t" + "\t".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig):
    out = _require_out(cfg)
    spec_kw = dict(cfg.synth)
    for flag, key in (("sessions", "n_sessions"), ("subjects", "n_subjects"),
                      ("minutes", "session_minutes"), ("snr", "snr"),
                      ("confound", "session_confound_strength")):
        value = getattr(args, flag)
        if value is not None:
            spec_kw[key] = value
    try:
        spec = dataio.SyntheticSpec.from_dict(spec_kw)
        spec.validate()
    except (TypeError, MentalStateError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    try:
        recs = dataio.generate_synthetic_dataset(spec, cfg.seed)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for rec in recs:
            stem = out / rec.meta.session_id
            dataio.save_recording(rec, stem)
            files.append(rec.meta.session_id)
    except (OSError, MentalStateError) as exc:
        raise StageError("synth", exc) from exc
    manifest = {"seed": cfg.seed, "spec": spec.to_dict(),
                "recordings": [{"payload": f + dataio.PAYLOAD_SUFFIX, "meta": f + dataio.META_SUFFIX}
                               for f in files]}
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} recordings to {out}")


def cmd_preprocess(args, cfg: RunConfig):
    out = _require_out(cfg)
    recs = _load_all(cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["session_id,label,origin_sample"]
    try:
        for rec in recs:
            filtered = dsp.filter_recording(rec, cfg.filter)
            dataio.save_recording(filtered, out / rec.meta.session_id)
            fs = rec.meta.sample_rate_hz
            for ep in dataio.derive_state_epochs(filtered):
                for clip in dsp.segment(ep, cfg.segmentation, fs):
                    rows.append(f"{clip.session_id},{int(clip.label)},{clip.origin_sample}")
    except MentalStateError as exc:
        raise StageError("preprocess", exc) from exc
    _write_text(out / "clips.csv", "\n".join(rows) + "\n")
    print(f"preprocessed {len(recs)} recordings, {len(rows) - 1} clips")


def _check_channels(cfg_model, recs):
    for rec in recs:
        if rec.n_channels != cfg_model.input_channels:
            raise StageError(
                "predict",
                f"channel count mismatch: model expects {cfg_model.input_channels} channels, "
                f"recording {rec.meta.session_id} has {rec.n_channels}",
            )


def cmd_train(args, cfg: RunConfig):
    out = _require_out(cfg)
    recs = _load_all(cfg.data)
    _check_channels(cfg.model, recs)
    try:
        fs = recs[0].meta.sample_rate_hz
        epochs = evalharness.preprocess(recs, cfg.filter)
        clips = evalharness.ClipSet.from_epochs(epochs, cfg.segmentation, fs)
        model, history = evalharness.train(cfg.model, clips, cfg.train)
    except MentalStateError as exc:
        raise StageError("train", exc) from exc
    modelmod.save_model(model, out)
    _write_text(out.with_name(out.name + ".loss.json"), json.dumps({"loss_history": history}) + "\n")
    if args.loss_tsv:
        _write_text(args.loss_tsv, _loss_tsv([history]))
    print(f"final_loss={history[-1]:.6f}")


def cmd_predict(args, cfg: RunConfig):
    out = _require_out(cfg)
    try:
        model = modelmod.load_model(args.model)
    except (OSError, MentalStateError) as exc:
        raise StageError("load model", exc) from exc
    recs = _load_all(cfg.data)
    _check_channels(model.config, recs)
    rows = ["origin_sample,label,p_focused,p_unfocused,p_drowsy,session_id,true_label"]
    n_correct = n_labeled = 0
    try:
        for rec in recs:
            fs = rec.meta.sample_rate_hz
            filtered = dsp.filter_recording(rec, cfg.filter)
            try:
                epochs = dataio.derive_state_epochs(filtered)
                labeled = True
            except MentalStateError:
                epochs = [dataio.LabeledEpoch(0, filtered.samples, rec.meta.session_id, 0)]
                labeled = False
            clips = evalharness.ClipSet.from_epochs(epochs, cfg.segmentation, fs)
            if clips.window != model.config.input_len:
                raise StageError("predict", f"clip length {clips.window} does not match model "
                                            f"input_len {model.config.input_len}")
            probs = np.concatenate([
                model.predict_proba(clips.batch(np.arange(s, min(s + 256, len(clips)))))
                for s in range(0, len(clips), 256)
            ]) if len(clips) else np.zeros((0, 3))
            for i, p in enumerate(probs):
                pred = int(np.argmax(p))
                truth = int(clips.labels[i]) if labeled else ""
                if labeled:
                    n_labeled += 1
                    n_correct += int(pred == clips.labels[i])
                probs_txt = ",".join(f"{v:.6f}" for v in p)
                rows.append(f"{clips.origins[i]},{pred},{probs_txt},{rec.meta.session_id},{truth}")
    except MentalStateError as exc:
        raise StageError("predict", exc) from exc
    _write_text(out, "\n".join(rows) + "\n")
    if n_labeled:
        print(f"accuracy={n_correct / n_labeled:.6f}")
    print(f"wrote {len(rows) - 1} predictions to {out}")


def cmd_eval_cv(args, cfg: RunConfig):
    out = _require_out(cfg)
    recs = _load_all(cfg.data)
    try:
        report = evalharness.run_cv(recs, cfg.protocol, cfg.segmentation, cfg.model, cfg.train,
                                    k=cfg.k, seed=cfg.seed, filter_spec=cfg.filter,
                                    workers=cfg.threads)
    except MentalStateError as exc:
        raise StageError("eval-cv", exc) from exc
    _write_text(out, report.to_json())
    if args.confusion_csv:
        _write_text(args.confusion_csv, report.confusion_csv())
    if args.loss_tsv:
        _write_text(args.loss_tsv, _loss_tsv([f.loss_history for f in report.folds]))
    print(f"mean_accuracy={report.mean_accuracy:.6f}")


def cmd_leakage(args, cfg: RunConfig):
    out = _require_out(cfg)
    recs = _load_all(cfg.data)
    try:
        gap = evalharness.leakage_gap(recs, cfg.segmentation, cfg.model, cfg.train, cfg.seed,
                                      k=cfg.k, filter_spec=cfg.filter, workers=cfg.threads)
    except MentalStateError as exc:
        raise StageError("leakage", exc) from exc
    _write_text(out, gap.to_json())
    print(f"clip_level_mean_accuracy={gap.clip_report.mean_accuracy:.6f}")
    print(f"session_level_mean_accuracy={gap.session_report.mean_accuracy:.6f}")
    print(f"mean_gap={gap.mean_gap:.6f}")


def cmd_gradcheck(args, cfg: RunConfig):
    from .verification import gradcheck_suite

    reports = gradcheck_suite(seed=cfg.seed)
    for r in reports:
        print(r.line())
    if cfg.out:
        payload = [{"name": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance,
                    "passed": r.passed, "n_checked": r.n_checked} for r in reports]
        _write_text(cfg.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    failed = [r for r in reports if not r.passed]
    if failed:
        raise StageError("gradcheck", f"{len(failed)} gradient check(s) failed")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see --help for the schema)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=_positive_int, help="folds trained in parallel")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="mentalstate", description="EEG mental-state decoding toolkit",
        epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic sessions")
    p.add_argument("--sessions", type=_positive_int)
    p.add_argument("--subjects", type=_positive_int)
    p.add_argument("--minutes", type=float)
    p.add_argument("--snr", type=float)
    p.add_argument("--confound", type=float, help="session confound strength")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="filter recordings and index clips")
    p.add_argument("--data")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train on all clips, write a checkpoint")
    p.add_argument("--data")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--loss-tsv", help="also write the loss curve as TSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="per-clip predictions as CSV")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval-cv", parents=[common], help="k-fold cross-validation report")
    p.add_argument("--data")
    p.add_argument("--protocol", choices=["clip", "session"])
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--confusion-csv", help="also write confusion matrices as CSV")
    p.add_argument("--loss-tsv", help="also write per-fold loss curves as TSV")
    p.set_defaults(func=cmd_eval_cv)

    p = sub.add_parser("leakage", parents=[common], help="clip- vs session-level accuracy gap")
    p.add_argument("--data")
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--epochs", type=_positive_int)
    p.set_defaults(func=cmd_leakage)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        if args.command not in ("synth", "gradcheck"):
            cfg.validate()
        args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mentalstate {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"mentalstate {args.command}: {exc.stage} failed: {exc}", file=sys.stderr)
        return 1
    except (OSError, MentalStateError) as exc:
        print(f"mentalstate {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - exit status must stay in {0, 1, 2}
        print(f"mentalstate {args.command}: unexpected failure: {exc!r}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
