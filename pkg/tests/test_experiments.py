import numpy as np
import pytest

from mmaffect import autoencoder as ae
from mmaffect import experiments as ex
from mmaffect.autoencoder import FineTuneConfig
from mmaffect.classifier import accuracy, predict, train_svm
from mmaffect.experiments import PipelineConfig, SplitRule, SynthSpec
from mmaffect.features import FeatureMatrix
from mmaffect.numeric import RngStream
from mmaffect.rbm import CdConfig

from oracles import confusion_loops

SMALL = SynthSpec(eeg_dim=12, eye_dim=8, rows_per_class=30, seed=3)


def quick(**kw):
    base = dict(rbm=CdConfig(epochs=3), finetune=FineTuneConfig(epochs=3), svm_epochs=5,
                shared_size=6, null_permutations=3)
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def data():
    return ex.generate_synthetic(SMALL)


# -- splits -------------------------------------------------------------------------------

def test_seed_split_trains_on_first_nine_clips(data):
    train, test = ex.apply_split(data, SplitRule("seed"))
    assert sorted(set(train["eeg"].clips)) == list(range(1, 10))
    assert sorted(set(test["eye"].clips)) == list(range(10, 16))
    assert set(train["eeg"].labels) == set(test["eeg"].labels) == {"class0", "class1", "class2"}
    assert train["eeg"].ids == train["eye"].ids


def test_deap_split_is_disjoint_cover_and_seeded():
    fm = FeatureMatrix(np.zeros((1000, 1)), ids=[f"r{i}" for i in range(1000)])
    tr, te = ex.apply_split(fm, SplitRule("deap"), RngStream(1))
    assert len(tr) == 900 and len(te) == 100
    assert set(tr.ids).isdisjoint(te.ids) and len(set(tr.ids) | set(te.ids)) == 1000
    tr2, _ = ex.apply_split(fm, SplitRule("deap"), RngStream(1))
    assert tr.ids == tr2.ids
    tr3, _ = ex.apply_split(fm, SplitRule("deap"), RngStream(2))
    assert tr.ids != tr3.ids


def test_deap_binarization_boundary():
    assert list(ex.binarize_ratings([5.0, 5.1, 1.0, 9.0])) == ["low", "high", "low", "high"]
    fm = FeatureMatrix(np.zeros((10, 1)), meta={"valence": np.array([5.0, 5.1] * 5)})
    tr, te = ex.apply_split(fm, SplitRule("deap", target="valence"), RngStream(0))
    both = np.concatenate([tr.labels, te.labels])
    assert sorted(both) == ["high"] * 5 + ["low"] * 5


def test_split_errors():
    with pytest.raises(ValueError, match="clip"):
        ex.apply_split(FeatureMatrix(np.zeros((4, 1))), SplitRule("seed"))
    with pytest.raises(ValueError, match="rating"):
        ex.apply_split(FeatureMatrix(np.zeros((4, 1))), SplitRule("deap", target="arousal"))
    with pytest.raises(ValueError):
        SplitRule("kfold")
    a = FeatureMatrix(np.zeros((2, 1)), ids=["a", "b"])
    b = FeatureMatrix(np.zeros((2, 1)), ids=["a", "c"])
    with pytest.raises(ValueError):
        ex.apply_split({"eeg": a, "eye": b}, SplitRule("deap"))


# -- synthetic data ---------------------------------------------------------------------

def test_synthetic_shapes_and_balance():
    d = ex.generate_synthetic(SynthSpec(rows_per_class=100))
    assert set(d) == {"eeg", "eye"} and d["eeg"].ids == d["eye"].ids
    assert d["eeg"].shape == (300, 40) and d["eye"].shape == (300, 16)
    labels, counts = np.unique(d["eeg"].labels, return_counts=True)
    assert list(counts) == [100, 100, 100]
    for fm in d.values():
        assert np.all((fm.values > 0) & (fm.values < 1))


def test_noise_free_rows_with_equal_latent_are_identical():
    d = ex.generate_synthetic(SynthSpec(noise=0.0, latent_spread=0.0, rows_per_class=5))
    for fm in d.values():
        for c in set(fm.labels):
            rows = fm.values[fm.labels == c]
            np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))


def test_synthetic_is_seeded():
    a, b = ex.generate_synthetic(SMALL), ex.generate_synthetic(SMALL)
    np.testing.assert_array_equal(a["eeg"].values, b["eeg"].values)
    c = ex.generate_synthetic(SynthSpec(eeg_dim=12, eye_dim=8, rows_per_class=30, seed=4))
    assert not np.array_equal(a["eeg"].values, c["eeg"].values)


@pytest.mark.parametrize("modality", ["eeg", "eye"])
def test_each_raw_modality_is_linearly_learnable(modality):
    train, test = ex.apply_split(ex.generate_synthetic(SynthSpec()), SplitRule("seed"))
    scaler = ex.fit_scaler(train[modality])
    clf = train_svm(scaler.apply(train[modality]), rng=RngStream(0))
    assert accuracy(predict(clf, scaler.apply(test[modality]))[0], test[modality].labels) > 0.8


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(n_classes=0)
    with pytest.raises(ValueError):
        SynthSpec(noise=-1.0)


# -- confusion matrices and reports -----------------------------------------------------

CLASSES = ["negative", "neutral", "positive"]


def test_confusion_examples():
    y = ["negative", "neutral", "positive", "neutral"]
    np.testing.assert_array_equal(ex.confusion_matrix(y, y, CLASSES), np.eye(3))
    cm = ex.confusion_matrix(["negative", "positive", "positive", "neutral"], ["positive"] * 4, CLASSES)
    assert np.count_nonzero(cm.sum(axis=1)) == 1
    np.testing.assert_allclose(cm[2], [0.25, 0.25, 0.5])
    with pytest.raises(ValueError, match="unknown"):
        ex.confusion_matrix(["neutral"], ["angry"], CLASSES)
    with pytest.raises(ValueError):
        ex.confusion_matrix(["neutral"], [], CLASSES)


def test_confusion_matches_loop_oracle():
    rng = RngStream(5)
    pred = [CLASSES[i] for i in (rng.uniform(200) * 3).astype(int)]
    truth = [CLASSES[i] for i in (rng.uniform(200) * 3).astype(int)]
    np.testing.assert_allclose(ex.confusion_matrix(pred, truth, CLASSES), confusion_loops(pred, truth, CLASSES), atol=1e-15)


def test_method_result_consistency():
    rng = RngStream(6)
    truth = [CLASSES[i] for i in (rng.uniform(50) * 3).astype(int)]
    pred = [CLASSES[i] for i in (rng.uniform(50) * 3).astype(int)]
    res = ex.score({"m": pred}, truth, CLASSES)["m"]
    res.check()
    cm = np.array(res.confusion)
    np.testing.assert_allclose(cm.sum(axis=1), 1.0, atol=1e-9)
    assert res.accuracy == pytest.approx(np.dot(np.diag(cm), res.class_counts) / 50, abs=1e-9)
    bad = ex.MethodResult(res.accuracy + 0.1, res.confusion, res.class_counts, res.predictions)
    with pytest.raises(ex.ProtocolError):
        bad.check()


def two_run_report():
    runs = [ex.RunResult("run001", ex.score({"a": ["x", "y", "y"]}, ["x", "y", "x"], ["x", "y"])),
            ex.RunResult("run000", ex.score({"a": ["x", "y", "x"]}, ["x", "y", "x"], ["x", "y"]))]
    return ex.make_report("facilitation", ["x", "y"], runs, {"k": 1}, 7)


def test_report_statistics_and_formats():
    rep = two_run_report()
    assert [r.run_id for r in rep.runs] == ["run000", "run001"]
    np.testing.assert_allclose(rep.accuracies("a"), [1.0, 2 / 3])
    assert rep.mean("a") == pytest.approx(5 / 6)
    assert rep.std("a") == pytest.approx(np.std([1.0, 2 / 3], ddof=1))
    np.testing.assert_allclose(rep.pooled_confusion("a"), [[0.75, 0.25], [0.0, 1.0]])
    assert rep.chance == 0.5
    text = rep.dumps()
    assert ex.ExperimentReport.loads(text).dumps() == text
    assert rep.runs_csv().splitlines() == ["run_id,method,accuracy", "run000,a,1.0",
                                           f"run001,a,{2 / 3!r}"]
    body = rep.to_text()
    assert "83.33" in body and "91.01" in body and "89.94" in body
    with pytest.raises(ValueError):
        ex.ExperimentReport.loads('{"format": "other"}')


def test_reference_lines_cover_each_task():
    refs = {t: dict(ex.REFERENCE_LINES[t]) for t in ex.TASKS}
    assert 91.01 in refs["facilitation"].values() and 89.94 in refs["facilitation"].values()
    assert {81.19, 82.11} <= set(refs["unimodal"].values())
    assert {66.23, 66.45} <= set(refs["crossmodal"].values())


# -- task runners -----------------------------------------------------------------------

def tracked_split(data, log):
    train, test = ex.apply_split(data, SplitRule("seed"))
    return ({k: v.track(log, "train") for k, v in train.items()},
            {k: v.track(log, "test") for k, v in test.items()})


@pytest.mark.parametrize("task", ex.TASKS)
def test_held_out_labels_are_read_only_after_prediction(task, data, monkeypatch):
    log = []
    real_predict = ex.predict

    def logged_predict(clf, fm):
        log.append(("predict", ""))
        return real_predict(clf, fm)

    monkeypatch.setattr(ex, "predict", logged_predict)
    train, test = tracked_split(data, log)
    run = ex.evaluate_task(task, train, test, quick(), RngStream(0))
    run_predictions = {k: v.predictions for k, v in run.methods.items()}
    last_predict = max(i for i, e in enumerate(log) if e[0] == "predict")
    label_reads = [i for i, e in enumerate(log) if e == ("test", "labels")]
    assert label_reads and min(label_reads) > last_predict
    assert ("test", "values") in log

    # scrambled held-out labels cannot change what is predicted
    monkeypatch.setattr(ex, "predict", real_predict)
    scrambled = {k: v.with_labels(v.labels[::-1]) for k, v in test.items()}
    models = ex.fit_task(task, train, quick(), RngStream(0))
    assert ex.predict_task(models, scrambled) == run_predictions


def test_report_is_reproducible(data):
    a = ex.run_multimodal_facilitation(data, SplitRule("seed"), quick(), seed=5)
    b = ex.run_multimodal_facilitation(data, SplitRule("seed"), quick(), seed=5)
    assert a.dumps() == b.dumps()
    assert a.method_names == ["eeg", "eye", "concat", "bdae"]
    c = ex.run_multimodal_facilitation(data, SplitRule("seed"), quick(), seed=6)
    assert c.accuracies("bdae").size == 1


def test_unimodal_report_with_zero_finetune_epochs(data):
    cfg = quick(finetune=FineTuneConfig(epochs=0))
    rep = ex.run_unimodal_enhancement(data, SplitRule("seed"), cfg, test_modalities=["eye"])
    assert rep.method_names == ["raw_eye", "dae_eye"]
    rep.check()
    for m in rep.method_names:
        assert 0.0 <= rep.mean(m) <= 1.0


def test_repeats_pool_into_one_method(data):
    rep = ex.run_unimodal_enhancement(data, SplitRule("seed"), quick(repeats=2), test_modalities=["eeg"])
    res = rep.runs[0].methods["dae_eeg"]
    assert len(res.predictions) == 2 * len(ex.apply_split(data, SplitRule("seed"))[1]["eeg"])
    rep.check()


def test_crossmodal_report_layout(data):
    rep = ex.run_cross_modal(data, SplitRule("seed"), quick())
    assert rep.method_names == ["eeg_to_eye", "eeg_to_eye_permuted", "eye_to_eeg", "eye_to_eeg_permuted"]
    assert rep.chance == pytest.approx(1 / 3)
    assert "33.33%" in rep.to_text()
    train, test = ex.apply_split(data, SplitRule("seed"))
    n_null = len(rep.runs[0].methods["eye_to_eeg_permuted"].predictions)
    assert n_null == 3 * len(test["eeg"])


class Lopsided(PipelineConfig):
    def stack_spec(self, kind, dims, input_modality=None):
        spec = super().stack_spec(kind, dims, input_modality)
        return ae.StackSpec(spec.kind, spec.modalities, spec.hidden_sizes,
                            6 if input_modality == "eeg" else 4, spec.input_modality)


def test_crossmodal_shared_size_mismatch(data):
    cfg = Lopsided(rbm=CdConfig(epochs=1), finetune=FineTuneConfig(epochs=1))
    with pytest.raises(ValueError, match="shared-layer size"):
        ex.train_crossmodal_daes(data, cfg, RngStream(0))


def test_unknown_task_and_unpaired_rows(data):
    with pytest.raises(ValueError, match="unknown task"):
        ex.run_task("fusion", data, SplitRule("seed"), quick())
    broken = dict(data)
    broken["eye"] = broken["eye"].subset(np.arange(len(broken["eye"]) - 1))
    with pytest.raises(ValueError):
        ex.run_multimodal_facilitation(broken, SplitRule("seed"), quick())


def test_task_models_round_trip(data, tmp_path):
    train, test = ex.apply_split(data, SplitRule("seed"))
    for task in ex.TASKS:
        models = ex.fit_task(task, train, quick(), RngStream(1))
        files = models.save(tmp_path / task)
        assert "models.json" in files
        back = ex.TaskModels.load(tmp_path / task)
        assert ex.predict_task(back, test) == ex.predict_task(models, test)
        assert back.save(tmp_path / f"{task}-again") == files
        for f in files:
            assert (tmp_path / task / f).read_text() == (tmp_path / f"{task}-again" / f).read_text()


def test_several_datasets_become_runs(data):
    other = ex.generate_synthetic(SynthSpec(eeg_dim=12, eye_dim=8, rows_per_class=30, seed=9))
    rep = ex.run_multimodal_facilitation([data, other], SplitRule("seed"), quick())
    assert [r.run_id for r in rep.runs] == ["run000", "run001"]
    assert rep.accuracies("eeg").size == 2
