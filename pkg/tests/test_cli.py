import json

import numpy as np
import pytest

from mmaffect import cli
from mmaffect.features import read_feature_csv

QUICK = ["rbm.epochs=2", "finetune.epochs=2", "svm.epochs=3", "stack.shared_layer_size=6",
         "eval.null_permutations=2", "synth.rows_per_class=20", "synth.eeg_dim=10", "synth.eye_dim=6"]


def run(*args, sets=(), out=None):
    argv = list(args)
    for s in list(QUICK) + list(sets):
        argv += ["--set", s]
    if out is not None:
        argv += ["--set", f"paths.out_dir={out}"]
    return cli.main(argv)


@pytest.fixture
def synth_dir(tmp_path):
    assert run("synth", sets=["paths.run_name=data"], out=tmp_path) == 0
    return tmp_path / "data"


def paths(d):
    return [f"paths.eeg={d / 'eeg.csv'}", f"paths.eye={d / 'eye.csv'}"]


def test_synth_writes_paired_reproducible_files(tmp_path, synth_dir):
    eeg, eye = read_feature_csv(str(synth_dir / "eeg.csv")), read_feature_csv(str(synth_dir / "eye.csv"))
    assert eeg.ids == eye.ids and len(eeg) == 3 * 20
    assert eeg.shape[1] == 10 and eye.shape[1] == 6
    assert run("synth", sets=["paths.run_name=again"], out=tmp_path) == 0
    for name in ("eeg.csv", "eye.csv"):
        assert (synth_dir / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    assert (synth_dir / "config.ini").is_file()


def test_run_directories_are_never_overwritten(tmp_path, synth_dir, capsys):
    before = (synth_dir / "eeg.csv").read_bytes()
    assert run("synth", sets=["paths.run_name=data", "run.seed=1"], out=tmp_path) == 1
    assert "refusing to overwrite" in capsys.readouterr().err
    assert (synth_dir / "eeg.csv").read_bytes() == before


@pytest.mark.parametrize("task,methods", [
    ("facilitation", ["eeg", "eye", "concat", "bdae"]),
    ("unimodal", ["raw_eeg", "dae_eeg", "raw_eye", "dae_eye"]),
    ("crossmodal", ["eeg_to_eye", "eeg_to_eye_permuted", "eye_to_eeg", "eye_to_eeg_permuted"]),
])
def test_train_then_eval_reproduces_validation(tmp_path, synth_dir, task, methods, capsys):
    common = paths(synth_dir) + [f"run.task={task}"]
    assert run("train", sets=common + ["paths.run_name=train"], out=tmp_path) == 0
    train_dir = tmp_path / "train"
    manifest = json.loads((train_dir / "manifest.json").read_text())
    assert [i["path"] for i in manifest["inputs"]] == [str(synth_dir / "eeg.csv"), str(synth_dir / "eye.csv")]
    assert manifest["config"]["run.task"] == task
    assert (train_dir / "models" / "run000" / "models.json").is_file()
    assert run("eval", sets=[f"paths.models={train_dir}", "paths.run_name=eval"], out=tmp_path) == 0
    report = (tmp_path / "eval" / "report.json").read_text()
    assert report == (train_dir / "validation.json").read_text()
    assert list(json.loads(report)["summary"]) == methods
    assert (tmp_path / "eval" / "report_runs.csv").read_text().startswith("run_id,method,accuracy\n")
    capsys.readouterr()
    for fmt in ("text", "json", "csv"):
        assert run("report", sets=[f"paths.report={tmp_path / 'eval'}", f"report.format={fmt}"]) == 0
    printed = capsys.readouterr().out
    assert "chance:" in printed and '"format": "mmaffect.report"' in printed


def test_commands_are_byte_identical_across_reruns(tmp_path, synth_dir):
    for name in ("a", "b"):
        assert run("train", sets=paths(synth_dir) + [f"paths.run_name={name}"], out=tmp_path) == 0
    for f in ("validation.json", "validation_runs.csv",
              "models/run000/net_bdae.0.json", "models/run000/svm_concat.json", "models/run000/scaler_eeg.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifests = [json.loads((tmp_path / n / "manifest.json").read_text()) for n in ("a", "b")]
    for m in manifests:
        del m["config"]["paths.run_name"]  # the only input that differs
    assert manifests[0] == manifests[1]


def test_manifest_hash_tracks_input_bytes(tmp_path, synth_dir):
    p = synth_dir / "eeg.csv"
    h = cli.sha256_file(p)
    text = p.read_text()
    assert cli.sha256_file(p) == h
    p.write_text(text.replace("0.", "1.", 1))
    assert cli.sha256_file(p) != h
    p.write_text(text)
    assert cli.sha256_file(p) == h


def test_unpaired_files_are_a_data_error(tmp_path, synth_dir, capsys):
    lines = (synth_dir / "eye.csv").read_text().splitlines(keepends=True)
    short = tmp_path / "eye_short.csv"
    short.write_text("".join(lines[:-1]))
    sets = [f"paths.eeg={synth_dir / 'eeg.csv'}", f"paths.eye={short}", "paths.run_name=t"]
    assert run("train", sets=sets, out=tmp_path) == 2
    assert "row" in capsys.readouterr().err
    assert not (tmp_path / "t").exists()


def test_non_numeric_cell_reports_row_and_column(tmp_path, synth_dir, capsys):
    lines = (synth_dir / "eeg.csv").read_text().splitlines(keepends=True)
    cells = lines[3].split(",")
    cells[5] = "n/a"
    lines[3] = ",".join(cells)
    bad = tmp_path / "bad.csv"
    bad.write_text("".join(lines))
    sets = [f"paths.eeg={bad}", f"paths.eye={synth_dir / 'eye.csv'}"]
    assert run("train", sets=sets, out=tmp_path) == 2
    err = capsys.readouterr().err
    assert "row 4" in err and "eeg_1" in err


def test_usage_and_config_errors(tmp_path, synth_dir, capsys):
    assert cli.main(["train", "--set", "run.task=fusion"]) == 1
    assert "fusion" in capsys.readouterr().err
    assert cli.main(["train", "--set", "rbm.learning_rat=0.1"]) == 1
    assert "rbm.learning_rat" in capsys.readouterr().err
    assert cli.main(["frobnicate"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["train", "--set", "rbm.epochs=many"]) == 1
    ini = tmp_path / "run.ini"
    ini.write_text("[rbm]\nepochs = 7\n[svm]\nC = 2.5\n")
    cfg = cli.load_config(str(ini), ["rbm.epochs=9"])
    assert cfg["rbm.epochs"] == 9 and cfg["svm.C"] == 2.5 and cfg["run.seed"] == 0
    ini.write_text("[rbm]\nwobble = 1\n")
    with pytest.raises(cli.ConfigError):
        cli.load_config(str(ini), [])


def test_config_round_trips_through_ini(tmp_path):
    cfg = cli.load_config(None, ["finetune.loss=mse", "split.target=valence", "eval.coupled_crossmodal=false"])
    ini = tmp_path / "c.ini"
    ini.write_text(cli.dump_config(cfg))
    assert cli.load_config(str(ini), []) == cfg


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_help_lists_every_key_with_default(command, capsys):
    with pytest.raises(SystemExit) as stop:
        cli.main([command, "--help"])
    assert stop.value.code == 0
    text = capsys.readouterr().out
    for key in cli.KEYS:
        assert f"{key.dotted} = {cli._format_value(key.default)}" in text


def write_raw(path, n_channels=62, seconds=2.5, fs=200.0, clips=(1, 2)):
    rng = np.random.default_rng(0)
    lines = [f"# sample_rate={fs}", "subject,clip,label," + ",".join(f"ch{i}" for i in range(n_channels))]
    for clip in clips:
        for row in rng.normal(size=(int(seconds * fs), n_channels)):
            lines.append(f"s1,{clip},positive," + ",".join(f"{v:.6f}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def test_extract_eeg_only_warns_and_succeeds(tmp_path, caplog):
    raw = tmp_path / "raw.csv"
    write_raw(raw)
    assert run("extract", sets=[f"paths.raw={raw}", "paths.run_name=x"], out=tmp_path) == 0
    fm = read_feature_csv(str(tmp_path / "x" / "eeg.csv"))
    assert fm.shape == (4, 620)  # two whole 1 s windows per clip
    assert fm.ids == ["s1-1-0000", "s1-1-0001", "s1-2-0000", "s1-2-0001"]
    assert not (tmp_path / "x" / "eye.csv").exists()
    assert "no eye streams" in caplog.text


def test_extract_with_eye_records(tmp_path):
    raw = tmp_path / "raw.csv"
    write_raw(raw, n_channels=4, seconds=1.0, clips=(3,))
    rec = {"subject": "s1", "clip": 3, "window": 0, "label": "positive", "pupil_rate": 10.0,
           "pupil_x": list(np.linspace(3, 4, 10)), "pupil_y": [3.0] * 10,
           "blink_durations": [100.0], "saccades": [{"duration": 30, "amplitude": 2, "latency": 200}]}
    streams = tmp_path / "eye.json"
    streams.write_text(json.dumps([rec]))
    assert run("extract", sets=[f"paths.raw={raw}", f"paths.eye_streams={streams}", "paths.run_name=x"],
               out=tmp_path) == 0
    eeg = read_feature_csv(str(tmp_path / "x" / "eeg.csv"))
    eye = read_feature_csv(str(tmp_path / "x" / "eye.csv"))
    assert eeg.shape == (1, 40) and eye.shape == (1, 33) and eeg.ids == eye.ids


def test_extract_errors(tmp_path, capsys):
    raw = tmp_path / "raw.csv"
    write_raw(raw, n_channels=3, seconds=1.0)
    text = raw.read_text().splitlines()
    text[5] = text[5].rsplit(",", 1)[0] + ",abc"
    raw.write_text("\n".join(text) + "\n")
    assert run("extract", sets=[f"paths.raw={raw}"], out=tmp_path) == 2
    err = capsys.readouterr().err
    assert "line 6" in err and "'ch2'" in err
    write_raw(raw, n_channels=3, seconds=1.0, fs=80.0)
    assert run("extract", sets=[f"paths.raw={raw}"], out=tmp_path) == 2
    assert "sample rate" in capsys.readouterr().err
    raw.write_text("subject,clip,label,ch0\ns,1,x,0.1\n")
    assert run("extract", sets=[f"paths.raw={raw}"], out=tmp_path) == 2
    assert "sample_rate" in capsys.readouterr().err


def test_eval_without_artifacts(tmp_path):
    assert run("eval", sets=[f"paths.models={tmp_path / 'nowhere'}"], out=tmp_path) == 2
    assert run("eval") == 1
