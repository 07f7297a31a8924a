"""Command-line driver: ``mmaffect {synth,extract,train,eval,report}``.

Settings come from an INI file (``--config``) and ``--set section.key=value``
overrides, which win. Every command writes into a fresh run directory under
``paths.out_dir`` and never overwrites an existing one.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import experiments as ex
from .autoencoder import FineTuneConfig, TieViolation
from .features import (
    EYE_FEATURE_NAMES, DataFormatError, EyeStreams, FeatureMatrix, Saccade, check_paired, eeg_window_features,
    eye_features, read_feature_csv, segment, write_feature_csv,
)
from .rbm import CdConfig

log = logging.getLogger("mmaffect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
MODALITIES = ("eeg", "eye")


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# config keys

@dataclass(frozen=True)
class Key:
    section: str
    name: str
    type: type
    default: object
    help: str = ""

    @property
    def dotted(self) -> str:
        return f"{self.section}.{self.name}"


def _from_dataclass(section: str, obj, skip=(), helps=None) -> list[Key]:
    helps = helps or {}
    out = []
    for f in fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        if value is None:
            value = 0 if f.name == "n_persistent_chains" else ""
        typ = type(value) if not isinstance(value, bool) else bool
        out.append(Key(section, f.name, typ, value, helps.get(f.name, "")))
    return out


def _build_keys() -> list[Key]:
    pipe = ex.PipelineConfig()
    keys = [
        Key("run", "seed", int, 0, "root seed of every random stream"),
        Key("run", "task", str, "facilitation", "facilitation | unimodal | crossmodal"),
        Key("paths", "eeg", str, "", "EEG feature CSV(s), comma separated; one run per file"),
        Key("paths", "eye", str, "", "eye feature CSV(s), paired with paths.eeg"),
        Key("paths", "raw", str, "", "raw EEG signal CSV for extract"),
        Key("paths", "eye_streams", str, "", "eye-tracker window records (JSON) for extract"),
        Key("paths", "models", str, "", "run directory written by train (for eval)"),
        Key("paths", "report", str, "", "report.json or a run directory (for report)"),
        Key("paths", "out_dir", str, "runs", "parent of per-run output directories"),
        Key("paths", "run_name", str, "", "run directory name; default <timestamp>_seed<seed>"),
    ]
    keys += _from_dataclass("synth", ex.SynthSpec(), skip=("seed",))
    keys += _from_dataclass("rbm", pipe.rbm, helps={"n_persistent_chains": "0 means one per minibatch row"})
    keys += [
        Key("stack", "hidden_sizes", str, "", "per-modality overrides, e.g. eeg=48,eye=24"),
        Key("stack", "shared_layer_size", int, 0, "0 picks 64, or 128 above 1000 input columns"),
    ]
    keys += _from_dataclass("finetune", pipe.finetune)
    keys += [
        Key("svm", "C", float, pipe.svm_C, "hinge-loss weight"),
        Key("svm", "epochs", int, pipe.svm_epochs, "passes over the training rows"),
    ]
    split = ex.SplitRule()
    keys += _from_dataclass("split", split, helps={"target": "rating column to binarize (DEAP-style)"})
    keys += [
        Key("extract", "window_seconds", float, 1.0, "non-overlapping EEG window length"),
        Key("extract", "channels", str, "", "comma-separated channel subset; empty keeps all"),
        Key("eval", "repeats", int, pipe.repeats, "train each deep model this many times"),
        Key("eval", "coupled_crossmodal", bool, pipe.coupled_crossmodal,
            "fine-tune the two cross-modal DAEs through one shared decoder"),
        Key("eval", "permutation_null", bool, True, "add shuffled-label controls to crossmodal"),
        Key("eval", "null_permutations", int, pipe.null_permutations, "label shuffles per direction"),
        Key("eval", "test_modalities", str, "", "unimodal task: modalities to test, comma separated"),
        Key("report", "format", str, "text", "text | json | csv"),
    ]
    return keys


KEYS = _build_keys()
KEY_INDEX = {k.dotted: k for k in KEYS}


def _parse_value(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.type is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return key.type(raw)
    except ValueError:
        raise ConfigError(f"{key.dotted}: cannot read {raw!r} as {key.type.__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {k.dotted: k.default for k in KEYS}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config file: {e}") from None
        for section in parser.sections():
            for name, raw in parser.items(section):
                dotted = f"{section}.{name}"
                if dotted not in KEY_INDEX:
                    raise ConfigError(f"unknown config key {dotted!r}")
                cfg[dotted] = _parse_value(KEY_INDEX[dotted], raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        dotted = dotted.strip()
        if dotted not in KEY_INDEX:
            raise ConfigError(f"unknown config key {dotted!r}")
        cfg[dotted] = _parse_value(KEY_INDEX[dotted], raw)
    if cfg["run.task"] not in ex.TASKS:
        raise ConfigError(f"unknown task {cfg['run.task']!r}; choose from {', '.join(ex.TASKS)}")
    return cfg


def dump_config(cfg: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for k in KEYS:
        if not parser.has_section(k.section):
            parser.add_section(k.section)
        parser.set(k.section, k.name, _format_value(cfg[k.dotted]))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _section(cfg: dict, section: str) -> dict:
    return {k.name: cfg[k.dotted] for k in KEYS if k.section == section}


def _list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_pipeline(cfg: dict) -> ex.PipelineConfig:
    try:
        rbm = _section(cfg, "rbm")
        rbm["n_persistent_chains"] = rbm["n_persistent_chains"] or None
        hidden = {}
        for item in _list(cfg["stack.hidden_sizes"]):
            name, _, size = item.partition("=")
            if name not in MODALITIES:
                raise ValueError(f"stack.hidden_sizes names unknown modality {name!r}")
            hidden[name] = int(size)
        return ex.PipelineConfig(
            rbm=CdConfig(**rbm),
            finetune=FineTuneConfig(**_section(cfg, "finetune")),
            svm_C=cfg["svm.C"], svm_epochs=cfg["svm.epochs"],
            hidden_sizes=hidden, shared_size=cfg["stack.shared_layer_size"] or None,
            repeats=cfg["eval.repeats"], coupled_crossmodal=cfg["eval.coupled_crossmodal"],
            null_permutations=cfg["eval.null_permutations"],
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def build_split(cfg: dict) -> ex.SplitRule:
    s = _section(cfg, "split")
    s["target"] = s["target"] or None
    try:
        return ex.SplitRule(**s)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def build_synth(cfg: dict) -> ex.SynthSpec:
    try:
        return ex.SynthSpec(seed=cfg["run.seed"], **_section(cfg, "synth"))
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


# ----------------------------------------------------------------------------
# files

def make_run_dir(cfg: dict) -> Path:
    name = cfg["paths.run_name"] or f"{time.strftime('%Y%m%dT%H%M%S')}_seed{cfg['run.seed']}"
    path = Path(cfg["paths.out_dir"]) / name
    if path.exists():
        raise UsageError(f"refusing to overwrite existing run directory {path}")
    path.mkdir(parents=True)
    (path / "config.ini").write_text(dump_config(cfg))
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read(path: str) -> FeatureMatrix:
    if not Path(path).is_file():
        raise DataFormatError(f"{path}: no such file")
    return read_feature_csv(path)


def load_datasets(cfg: dict, require_both: bool) -> tuple[list[dict[str, FeatureMatrix]], list[str]]:
    eeg, eye = _list(cfg["paths.eeg"]), _list(cfg["paths.eye"])
    if not eeg and not eye:
        raise ConfigError("no input files: set paths.eeg and paths.eye")
    if require_both and (not eeg or not eye):
        raise DataFormatError("this task needs paired EEG and eye feature files")
    if eeg and eye and len(eeg) != len(eye):
        raise DataFormatError(f"{len(eeg)} EEG files but {len(eye)} eye files")
    datasets, inputs = [], []
    for i in range(max(len(eeg), len(eye))):
        d = {}
        if eeg:
            d["eeg"] = _read(eeg[i])
            inputs.append(eeg[i])
        if eye:
            d["eye"] = _read(eye[i])
            inputs.append(eye[i])
        try:
            check_paired(d)
        except ValueError as e:
            raise DataFormatError(f"run {i}: {e}") from None
        datasets.append(d)
    return datasets, inputs


# ----------------------------------------------------------------------------
# commands

def cmd_synth(cfg: dict) -> int:
    spec = build_synth(cfg)
    data = ex.generate_synthetic(spec)
    out = make_run_dir(cfg)
    for name, fm in data.items():
        write_feature_csv(fm, out / f"{name}.csv")
    print(out)
    return EXIT_OK


def read_raw_eeg(path: str):
    """``# sample_rate=<Hz>`` line(s), then ``subject,clip,label,<channels>`` with one sample per row."""
    meta, body = {}, []
    try:
        with open(path, encoding="utf-8", newline="") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"{path}: {e}") from None
    for n, line in enumerate(lines, start=1):
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            meta[k.strip()] = v.strip()
        elif line.strip():
            body.append((n, line))
    if "sample_rate" not in meta:
        raise DataFormatError(f"{path}: missing '# sample_rate=<Hz>' header line")
    try:
        rate = float(meta["sample_rate"])
    except ValueError:
        raise DataFormatError(f"{path}: sample_rate {meta['sample_rate']!r} is not numeric") from None
    if not body:
        raise DataFormatError(f"{path}: no header row")
    header = next(csv.reader([body[0][1]]))
    if header[:3] != ["subject", "clip", "label"] or len(header) < 4:
        raise DataFormatError(f"{path}: header must be subject,clip,label,<channel>...")
    channels = header[3:]
    groups: dict[tuple, list] = {}
    for line_no, line in body[1:]:
        row = next(csv.reader([line]))
        if len(row) != len(header):
            raise DataFormatError(f"{path}: line {line_no} has {len(row)} cells, expected {len(header)}")
        try:
            clip = int(row[1])
        except ValueError:
            raise DataFormatError(f"{path}: line {line_no}, column 'clip': {row[1]!r} is not an integer") from None
        vals = []
        for c, cell in enumerate(row[3:]):
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {line_no}, column {channels[c]!r}: {cell!r} is not numeric") from None
        groups.setdefault((row[0], clip, row[2]), []).append(vals)
    return rate, channels, {k: np.array(v) for k, v in groups.items()}


def window_id(subject: str, clip: int, window: int) -> str:
    return f"{subject}-{clip}-{window:04d}"


def read_eye_records(path: str, default_span: float) -> FeatureMatrix:
    try:
        with open(path, encoding="utf-8") as f:
            records = json.load(f)
    except OSError as e:
        raise DataFormatError(f"{path}: {e}") from None
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON ({e})") from None
    rows, ids, subjects, clips, labels = [], [], [], [], []
    for i, r in enumerate(records):
        try:
            streams = EyeStreams(
                r["pupil_x"], r["pupil_y"], float(r["pupil_rate"]),
                r.get("dispersion_x", []), r.get("dispersion_y", []),
                r.get("fixation_durations", []), r.get("blink_durations", []),
                [Saccade(float(s["duration"]), float(s["amplitude"]), float(s["latency"]))
                 for s in r.get("saccades", [])],
            )
            rows.append(eye_features(streams, float(r.get("window_span", default_span))))
            ids.append(window_id(str(r["subject"]), int(r["clip"]), int(r.get("window", 0))))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: record {i}: {e}") from None
        subjects.append(str(r["subject"]))
        clips.append(int(r["clip"]))
        labels.append(str(r.get("label", "")))
    has_labels = any(labels)
    return FeatureMatrix(np.array(rows).reshape(len(rows), len(EYE_FEATURE_NAMES)), list(EYE_FEATURE_NAMES),
                         labels if has_labels else None, ids, subjects, clips)


def cmd_extract(cfg: dict) -> int:
    raw = cfg["paths.raw"]
    if not raw:
        raise ConfigError("extract needs paths.raw")
    span = cfg["extract.window_seconds"]
    rate, channels, groups = read_raw_eeg(raw)
    keep = _list(cfg["extract.channels"]) or channels
    missing = [c for c in keep if c not in channels]
    if missing:
        raise ConfigError(f"extract.channels names unknown channels {missing}")
    cols = [channels.index(c) for c in keep]
    rows, ids, subjects, clips, labels, names = [], [], [], [], [], None
    for (subject, clip, label), samples in groups.items():
        for w, window in enumerate(segment(samples[:, cols], rate, span)):
            try:
                feats, names = eeg_window_features(window, rate, keep)
            except ValueError as e:
                raise DataFormatError(f"{raw}: {e}") from None
            rows.append(feats)
            ids.append(window_id(subject, clip, w))
            subjects.append(subject)
            clips.append(clip)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{raw}: no complete {span}-second window")
    out = make_run_dir(cfg)
    write_feature_csv(FeatureMatrix(np.array(rows), names, labels, ids, subjects, clips), out / "eeg.csv")
    if cfg["paths.eye_streams"]:
        write_feature_csv(read_eye_records(cfg["paths.eye_streams"], span), out / "eye.csv")
    else:
        log.warning("no eye streams given (paths.eye_streams); wrote EEG features only")
    print(out)
    return EXIT_OK


def _report_config(pipe: ex.PipelineConfig, split: ex.SplitRule) -> dict:
    return {"pipeline": pipe.snapshot(), "split": asdict(split)}


def _task_kwargs(cfg: dict) -> dict:
    if cfg["run.task"] == "unimodal":
        return {"test_modalities": _list(cfg["eval.test_modalities"]) or None}
    if cfg["run.task"] == "crossmodal":
        return {"permutation_null": cfg["eval.permutation_null"]}
    return {}


def _write_report(report: ex.ExperimentReport, out: Path, stem: str = "report") -> None:
    (out / f"{stem}.json").write_text(report.dumps())
    (out / f"{stem}.txt").write_text(report.to_text())
    (out / f"{stem}_runs.csv").write_text(report.runs_csv())


def cmd_train(cfg: dict) -> int:
    task, seed = cfg["run.task"], cfg["run.seed"]
    pipe, split = build_pipeline(cfg), build_split(cfg)
    datasets, inputs = load_datasets(cfg, require_both=True)
    classes = ex.all_classes(datasets)
    out = make_run_dir(cfg)
    runs = []
    for i, d in enumerate(datasets):
        rng = ex.run_stream(seed, i)
        train, test = ex.apply_split(d, split, rng)
        models = ex.fit_task(task, train, pipe, rng, classes, **_task_kwargs(cfg))
        models.save(out / "models" / f"run{i:03d}")
        preds = ex.predict_task(models, test)
        runs.append(ex.score_task(models, preds, next(iter(test.values())).labels, f"run{i:03d}"))
    report = ex.make_report(task, classes, runs, _report_config(pipe, split), seed)
    _write_report(report, out, "validation")
    manifest = {
        "seed": seed, "task": task,
        "inputs": [{"path": p, "sha256": sha256_file(p)} for p in inputs],
        "eeg": cfg["paths.eeg"], "eye": cfg["paths.eye"],
        "config": {k.dotted: cfg[k.dotted] for k in KEYS},
        "validation": {m: report.mean(m) for m in report.method_names},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(out)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    models_dir = Path(cfg["paths.models"]) if cfg["paths.models"] else None
    if models_dir is None:
        raise ConfigError("eval needs paths.models (a train run directory)")
    manifest_path = models_dir / "manifest.json"
    if not manifest_path.is_file():
        raise DataFormatError(f"{models_dir}: no manifest.json; is this a train run directory?")
    manifest = json.loads(manifest_path.read_text())
    trained = dict(manifest["config"])
    # data paths may be redirected; everything that shaped the models comes from the manifest
    if cfg["paths.eeg"] or cfg["paths.eye"]:
        trained["paths.eeg"], trained["paths.eye"] = cfg["paths.eeg"], cfg["paths.eye"]
    task, seed = trained["run.task"], trained["run.seed"]
    pipe, split = build_pipeline(trained), build_split(trained)
    datasets, _ = load_datasets(trained, require_both=False)
    classes = ex.all_classes(datasets)
    runs = []
    for i, d in enumerate(datasets):
        mdir = models_dir / "models" / f"run{i:03d}"
        if not (mdir / "models.json").is_file():
            raise DataFormatError(f"missing trained models for run {i} in {mdir}")
        models = ex.TaskModels.load(mdir)
        _, test = ex.apply_split(d, split, ex.run_stream(seed, i))
        preds = ex.predict_task(models, test)
        runs.append(ex.score_task(models, preds, next(iter(test.values())).labels, f"run{i:03d}"))
    report = ex.make_report(task, classes, runs, _report_config(pipe, split), seed)
    out = make_run_dir(cfg)
    _write_report(report, out)
    sys.stdout.write(report.to_text())
    print(out)
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    path = Path(cfg["paths.report"]) if cfg["paths.report"] else None
    if path is None:
        raise ConfigError("report needs paths.report")
    if path.is_dir():
        path = path / "report.json"
    if not path.is_file():
        raise DataFormatError(f"{path}: no such report")
    try:
        report = ex.ExperimentReport.loads(path.read_text())
    except (ValueError, KeyError) as e:
        raise DataFormatError(f"{path}: {e}") from None
    report.check()
    fmt = cfg["report.format"]
    if fmt == "text":
        sys.stdout.write(report.to_text())
    elif fmt == "json":
        sys.stdout.write(report.dumps())
    elif fmt == "csv":
        sys.stdout.write(report.runs_csv())
    else:
        raise ConfigError(f"report.format must be text, json or csv, not {fmt!r}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "write a paired synthetic EEG/eye feature set"),
    "extract": (cmd_extract, "PSD/DE features from a raw EEG CSV, eye features from window records"),
    "train": (cmd_train, "fit scalers, autoencoders and classifiers for run.task"),
    "eval": (cmd_eval, "score trained models on their held-out rows and write a report"),
    "report": (cmd_report, "print a stored report as text, JSON or CSV"),
}


# ----------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _key_listing() -> str:
    lines = ["config keys (section.key = default):"]
    for k in KEYS:
        default = _format_value(k.default)
        lines.append(f"  {k.dotted} = {default}" + (f"    # {k.help}" if k.help else ""))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmaffect", description=__doc__.splitlines()[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_key_listing())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_key_listing(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="INI file with [section] key = value entries")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; may be repeated")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s: %(message)s", level=logging.WARNING)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        if args.command is None:
            raise UsageError("choose a command: " + ", ".join(COMMANDS))
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command][0](cfg)
    except (UsageError, ConfigError) as e:
        print(f"mmaffect: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ex.ProtocolError, TieViolation) as e:
        print(f"mmaffect: internal invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataFormatError, ValueError, KeyError, OSError) as e:
        print(f"mmaffect: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
