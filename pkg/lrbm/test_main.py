"""
Tests for the file formats and the command-line workflow: preprocess,
train, predict, evaluate, robustness, synth, inspect and features.
"""

import csv
import json
import logging

import numpy as np
import pytest

from lrbm import main as cli
from lrbm.classify import ClassifierBundle, PairwiseCalibration, evaluate, scores_for_samples
from lrbm.core import LrbmModel, SequenceSample
from lrbm.data import NormStats, PreprocessConfig
from lrbm.errors import ConfigError, DataError, NumericalError
from lrbm.formats import (
    DatasetHeader,
    bundle_text,
    load_bundle,
    load_models,
    model_from_dict,
    model_to_dict,
    read_dataset,
    save_bundle,
    save_models,
    write_dataset,
)
from lrbm.train import TrainConfig
from lrbm.utils import thread_count

logger = logging.getLogger(__name__)

QUICK = TrainConfig(epochs=3, n_hidden=4, candidates=2, minibatch=8, seed=3)
MEANS = {"A": -3.0, "B": 0.0, "C": 3.0}


def _mean_model(value: float) -> LrbmModel:
    return LrbmModel(a=np.full((2, 2), value), b=np.zeros(0), W=np.zeros((2, 0, 2)), U=np.zeros((2, 2)))


def _read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def synth_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("synth") / "synth.jsonl"
    cli.cmd_synth(3, 12, 1.5, 0, str(path))
    return str(path)


@pytest.fixture(scope="module")
def bundle_path(tmp_path_factory, synth_path):
    path = tmp_path_factory.mktemp("bundle") / "bundle.json"
    cli.cmd_train(synth_path, str(path), QUICK, threads=2)
    return str(path)


@pytest.fixture
def mean_bundle_path(tmp_path):
    models = tuple(_mean_model(v) for v in MEANS.values())
    bundle = ClassifierBundle(models=models, calibration=PairwiseCalibration(np.zeros(3), 1.0, tuple(MEANS)))
    return save_bundle(str(tmp_path / "means.json"), bundle)


@pytest.fixture
def six_sample_path(tmp_path):
    # (position, true label): two of six are misclassified by the mean bundle
    fixture = [(-3.0, "A"), (-3.0, "A"), (0.0, "B"), (3.0, "B"), (3.0, "C"), (0.0, "C")]
    samples = [SequenceSample(np.full((2, 2), v), label=label, id=f"s{k}") for k, (v, label) in enumerate(fixture)]
    return write_dataset(str(tmp_path / "six.jsonl"), DatasetHeader(d=2), samples)


# --- dataset format ---

def test_dataset_round_trip_with_missing_entries(tmp_path):
    path = tmp_path / "raw.jsonl"
    path.write_text(
        '{"format": "lrbm-dataset", "version": 1, "d": 2}\n'
        '{"id": "a", "label": "x", "frames": [[1.5, null], [2.0, 3.0], [0.1, 0.2]]}\n'
    )
    header, raws = read_dataset(str(path))
    assert header.d == 2
    assert raws[0].n_raw == 3
    assert raws[0].missing[1, 0] and raws[0].missing.sum() == 1

    out = tmp_path / "copy.jsonl"
    write_dataset(str(out), header, raws)
    _, again = read_dataset(str(out))
    np.testing.assert_array_equal(again[0].missing, raws[0].missing)
    np.testing.assert_array_equal(again[0].frames[~again[0].missing], raws[0].frames[~raws[0].missing])


@pytest.mark.parametrize(
    "lines, line_no",
    [
        (['{"id": "a", "frames": [[1.0]]}'], 1),
        (['{"format": "lrbm-dataset", "version": 1, "d": 1}', '{"id": "a", "frames": [[1.0]]}', "{not json"], 3),
        (['{"format": "lrbm-dataset", "version": 1, "d": 2}', '{"id": "a", "frames": [[1.0]]}'], 2),
        (['{"format": "lrbm-dataset", "version": 7, "d": 2}'], 1),
    ],
)
def test_malformed_dataset_lines_are_reported(tmp_path, lines, line_no):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=f"line {line_no}"):
        read_dataset(str(path))


# --- model and bundle formats ---

def test_model_round_trip_is_bit_exact(tiny_model):
    restored = model_from_dict(json.loads(json.dumps(model_to_dict(tiny_model))))
    for name in ("a", "b", "W", "U"):
        np.testing.assert_array_equal(getattr(restored, name), getattr(tiny_model, name))
    np.testing.assert_array_equal(restored.U, restored.U.T)


def test_models_file_round_trip(tmp_path, tiny_model):
    path = save_models(str(tmp_path / "models.json"), [tiny_model, tiny_model], ["p", "q"])
    models, labels = load_models(path)
    assert labels == ["p", "q"]
    np.testing.assert_array_equal(models[1].W, tiny_model.W)


def test_bundle_round_trip_and_byte_identical_resave(tmp_path, tiny_model):
    bundle = ClassifierBundle(
        models=(tiny_model, tiny_model.with_params(b=tiny_model.b + 0.1)),
        calibration=PairwiseCalibration(np.array([0.123456789012345]), 2.5, ("x", "y")),
        norm_stats=NormStats(mean=np.array([0.1, 0.2, 1 / 3]), std=np.array([1.0, 2.0, 3.0])),
        preprocess=PreprocessConfig(target_length=2, smoothing_window=3),
        scoring="vote",
        metadata={"note": "round trip"},
    )
    path = save_bundle(str(tmp_path / "bundle.json"), bundle)
    restored = load_bundle(path)
    assert bundle_text(restored) == open(path).read()
    np.testing.assert_array_equal(restored.calibration.C, bundle.calibration.C)
    np.testing.assert_array_equal(restored.norm_stats.mean, bundle.norm_stats.mean)
    assert restored.preprocess == bundle.preprocess
    assert restored.scoring == "vote"


def test_load_bundle_rejects_foreign_json(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(DataError):
        load_bundle(str(path))


# --- preprocess ---

def test_preprocess_identity_config(tmp_path, synth_path):
    out = str(tmp_path / "same.jsonl")
    cli.cmd_preprocess(synth_path, out, smooth_window=1)
    _, before = read_dataset(synth_path)
    _, after = read_dataset(out)
    for x, y in zip(before, after):
        np.testing.assert_array_equal(x.frames, y.frames)


def test_preprocess_target_length_and_determinism(tmp_path):
    raw = tmp_path / "var.jsonl"
    raw.write_text(
        '{"format": "lrbm-dataset", "version": 1, "d": 1}\n'
        '{"id": "a", "label": "x", "frames": [[0.0], [1.0], [2.0]]}\n'
        '{"id": "b", "label": "y", "frames": [[0.0], [null], [4.0], [1.0], [5.0]]}\n'
    )
    first, second = str(tmp_path / "o1.jsonl"), str(tmp_path / "o2.jsonl")
    cli.cmd_preprocess(str(raw), first, target_length=10, fit_stats=str(tmp_path / "stats.json"))
    cli.cmd_preprocess(str(raw), second, target_length=10, fit_stats=str(tmp_path / "stats2.json"))
    _, samples = read_dataset(first)
    assert all(s.n_raw == 10 for s in samples)
    assert open(first, "rb").read() == open(second, "rb").read()


# --- skeleton bone lengths across files ---

def _bone_dataset(path, bone: float, seed: int, per_class: int = 6, n_t: int = 4) -> str:
    """Two-joint skeletons (root, tip) whose bone points along x or y by class."""
    rng = np.random.default_rng(seed)
    samples = []
    for label, axis in (("reach", 0), ("raise", 1)):
        for k in range(per_class):
            root = rng.normal(size=(3, n_t))
            direction = 0.2 * rng.normal(size=(3, n_t))
            direction[axis] += 1.0
            tip = root + bone * direction / np.linalg.norm(direction, axis=0)
            samples.append(SequenceSample(np.vstack([root, tip]), label=label, id=f"{label}-{k}"))
    return write_dataset(str(path), DatasetHeader(d=6, topology=(-1, 0)), samples)


def _bone_lengths_of(frames: np.ndarray) -> np.ndarray:
    return np.linalg.norm(frames[3:] - frames[:3], axis=0)


def test_preprocess_applies_training_bone_lengths_to_test_file(tmp_path):
    train = _bone_dataset(tmp_path / "train.jsonl", bone=2.0, seed=1)
    test = _bone_dataset(tmp_path / "test.jsonl", bone=5.0, seed=2)
    bones = str(tmp_path / "bones.json")

    cli.cmd_preprocess(train, str(tmp_path / "train_out.jsonl"), smooth_window=1, fit_bones=bones)
    saved = json.loads(open(bones).read())
    assert saved["topology"] == [-1, 0]
    np.testing.assert_allclose(saved["bone_lengths"], [0.0, 2.0])

    applied = str(tmp_path / "test_out.jsonl")
    cli.cmd_preprocess(test, applied, smooth_window=1, bone_lengths_path=bones)
    _, raws = read_dataset(applied)
    for raw in raws:
        np.testing.assert_allclose(_bone_lengths_of(raw.frames), 2.0)

    own = str(tmp_path / "test_own.jsonl")
    cli.cmd_preprocess(test, own, smooth_window=1, skeleton=True)
    _, raws = read_dataset(own)
    np.testing.assert_allclose(_bone_lengths_of(raws[0].frames), 5.0)
    logger.info("✓ Test file renormalized to the training bone lengths")


def test_preprocess_rejects_bone_lengths_for_another_skeleton(tmp_path):
    test = _bone_dataset(tmp_path / "test.jsonl", bone=5.0, seed=2)
    bones = tmp_path / "bones.json"
    bones.write_text('{"topology": [-1, 0, 1], "bone_lengths": [0.0, 1.0, 1.0]}')
    with pytest.raises(DataError):
        cli.cmd_preprocess(test, str(tmp_path / "out.jsonl"), bone_lengths_path=str(bones))
    bones.write_text('{"lengths": [0.0, 1.0]}')
    with pytest.raises(DataError):
        cli.cmd_preprocess(test, str(tmp_path / "out.jsonl"), bone_lengths_path=str(bones))


def test_train_skeleton_stores_training_bone_lengths(tmp_path):
    train = _bone_dataset(tmp_path / "train.jsonl", bone=2.0, seed=1)
    test = _bone_dataset(tmp_path / "test.jsonl", bone=5.0, seed=2)
    out = str(tmp_path / "bundle.json")

    cli.cmd_train(train, out, QUICK, val_fraction=0.0, skeleton=True)
    bundle = load_bundle(out)
    np.testing.assert_allclose(bundle.bone_lengths, [0.0, 2.0])

    _, raws = read_dataset(test)
    for sample in cli.prepare_samples(bundle, raws):
        frames = sample.frames
        if bundle.norm_stats is not None:
            frames = frames * bundle.norm_stats.std[:, None] + bundle.norm_stats.mean[:, None]
        np.testing.assert_allclose(_bone_lengths_of(frames), 2.0)
    logger.info("✓ Bundle carries training bone lengths into scoring")


def test_train_skeleton_needs_topology(tmp_path, synth_path):
    with pytest.raises(DataError):
        cli.cmd_train(synth_path, str(tmp_path / "b.json"), QUICK, skeleton=True)


# --- train ---

def test_train_writes_loadable_bundle(bundle_path):
    bundle = load_bundle(bundle_path)
    assert bundle.class_labels == ("class_0", "class_1", "class_2")
    assert all(m.n_h == 4 for m in bundle.models)
    assert 0.01 <= bundle.calibration.alpha <= 100.0
    assert bundle.metadata["config_hash"] == QUICK.hash()


def test_train_is_byte_identical_for_a_fixed_seed(tmp_path, synth_path, bundle_path):
    again = str(tmp_path / "again.json")
    cli.cmd_train(synth_path, again, QUICK, threads=1)
    assert open(again, "rb").read() == open(bundle_path, "rb").read()


def test_freeze_u_gives_zero_interactions(tmp_path, synth_path):
    bundle = cli.cmd_train(synth_path, str(tmp_path / "rbm.json"), TrainConfig(epochs=2, n_hidden=3, candidates=1, learn_interactions=False))
    for model in load_bundle(str(tmp_path / "rbm.json")).models:
        np.testing.assert_array_equal(model.U, 0.0)
    assert bundle.metadata["train_config"]["learn_interactions"] is False


def test_train_requires_two_classes_and_two_samples(tmp_path):
    one_class = [SequenceSample(np.ones((2, 2)) * k, label="only", id=str(k)) for k in range(3)]
    path = write_dataset(str(tmp_path / "one.jsonl"), DatasetHeader(d=2), one_class)
    with pytest.raises(DataError):
        cli.cmd_train(path, str(tmp_path / "b.json"), QUICK)

    sparse = one_class + [SequenceSample(np.zeros((2, 2)), label="rare", id="r")]
    path = write_dataset(str(tmp_path / "sparse.jsonl"), DatasetHeader(d=2), sparse)
    with pytest.raises(DataError, match="rare"):
        cli.cmd_train(path, str(tmp_path / "b.json"), QUICK)


# --- predict and evaluate ---

def test_predict_single_sample_row(tmp_path, bundle_path, synth_path):
    _, raws = read_dataset(synth_path)
    single = write_dataset(str(tmp_path / "one.jsonl"), DatasetHeader(d=3), raws[:1])
    out = str(tmp_path / "pred.csv")
    cli.cmd_predict(bundle_path, single, out)
    rows = _read_csv(out)
    assert rows[0] == ["id", "predicted", "score_class_0", "score_class_1", "score_class_2"]
    assert len(rows) == 2 and len(rows[1]) == 5


def test_predict_is_deterministic_and_matches_evaluate_scores(tmp_path, bundle_path, synth_path):
    first, second = str(tmp_path / "p1.csv"), str(tmp_path / "p2.csv")
    scores = cli.cmd_predict(bundle_path, synth_path, first)
    cli.cmd_predict(bundle_path, synth_path, second)
    assert open(first, "rb").read() == open(second, "rb").read()

    bundle = load_bundle(bundle_path)
    _, raws = read_dataset(synth_path)
    np.testing.assert_array_equal(scores, scores_for_samples(bundle, cli.prepare_samples(bundle, raws)))


def test_evaluate_hand_tallied_fixture(tmp_path, mean_bundle_path, six_sample_path):
    out = str(tmp_path / "report.json")
    report = cli.cmd_evaluate(mean_bundle_path, six_sample_path, out)
    assert report["confusion_counts"] == [[2, 0, 0], [0, 1, 1], [0, 1, 1]]
    assert report["accuracy"] == pytest.approx(4 / 6)
    assert report["hit_rate"] == {"A": 1.0, "B": 0.5, "C": 0.5}
    assert report["macro_accuracy"] == pytest.approx(2 / 3)
    assert set(report) >= {"auc", "group_f1", "confusion_percent"}
    rows = _read_csv(str(tmp_path / "report_confusion.csv"))
    assert rows[0] == ["true\\predicted", "A", "B", "C"]
    assert json.loads(open(out).read())["n_samples"] == 6


def test_evaluate_perfect_bundle(tmp_path, mean_bundle_path):
    samples = [SequenceSample(np.full((2, 2), v), label=label, id=label) for label, v in MEANS.items()]
    path = write_dataset(str(tmp_path / "clean.jsonl"), DatasetHeader(d=2), samples)
    report = cli.cmd_evaluate(mean_bundle_path, path, str(tmp_path / "r.json"), str(tmp_path / "c.csv"))
    assert report["accuracy"] == 1.0


def test_evaluate_with_groups(tmp_path, mean_bundle_path, six_sample_path):
    groups = tmp_path / "groups.json"
    groups.write_text('{"A": "left", "B": "right", "C": "right"}')
    report = cli.cmd_evaluate(mean_bundle_path, six_sample_path, str(tmp_path / "g.json"), groups_path=str(groups))
    assert report["group_f1"] == {"left": 1.0, "right": 1.0}


def test_predict_rejects_mismatched_dimensions(tmp_path, mean_bundle_path):
    wrong = write_dataset(str(tmp_path / "wide.jsonl"), DatasetHeader(d=3), [SequenceSample(np.zeros((3, 2)), id="w")])
    with pytest.raises(ValueError):
        cli.cmd_predict(mean_bundle_path, wrong, str(tmp_path / "p.csv"))


# --- robustness ---

def test_robustness_curve_shape_and_clean_row(tmp_path, bundle_path, synth_path):
    out = str(tmp_path / "curve.csv")
    rows = cli.cmd_robustness(bundle_path, synth_path, "missing", [0.0, 0.25, 0.5], [0, 1], out)
    assert len(rows) == 3
    bundle = load_bundle(bundle_path)
    _, raws = read_dataset(synth_path)
    clean = evaluate(bundle, cli.prepare_samples(bundle, raws)).accuracy
    assert rows[0]["mean_accuracy"] == clean and rows[0]["std_accuracy"] == 0.0
    table = _read_csv(out)
    assert table[0] == ["mode", "fraction", "mean_accuracy", "std_accuracy", "n_seeds"]
    assert len(table) == 4


def test_robustness_rejects_large_fractions(bundle_path, synth_path, tmp_path):
    with pytest.raises(ConfigError):
        cli.cmd_robustness(bundle_path, synth_path, "noise", [0.6], [0], str(tmp_path / "c.csv"))


# --- synth, inspect, features ---

def test_synth_is_deterministic_and_writes_models(tmp_path):
    first, second = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    cli.cmd_synth(2, 5, 1.0, 4, first, models_path=str(tmp_path / "models.json"))
    cli.cmd_synth(2, 5, 1.0, 4, second)
    assert open(first, "rb").read() == open(second, "rb").read()
    models, labels = load_models(str(tmp_path / "models.json"))
    assert labels == ["class_0", "class_1"] and len(models) == 2


def test_inspect_reports_model_statistics(tmp_path, bundle_path):
    payload = cli.cmd_inspect(bundle_path, str(tmp_path / "inspect.json"))
    assert len(payload["models"]) == 3
    assert all(m["lambda_max_U"] <= 0.95 + 1e-12 for m in payload["models"])
    assert len(payload["transitivity_defects"]) == 3


def test_features_export(tmp_path, bundle_path, synth_path):
    out = str(tmp_path / "features.csv")
    cli.cmd_features(bundle_path, synth_path, out)
    rows = _read_csv(out)
    assert rows[0][:3] == ["id", "label", "class_0:h0"]
    assert len(rows[0]) == 2 + 3 * 4
    assert len(rows) == 1 + 36


# --- entry point ---

def test_main_exit_codes(tmp_path, synth_path, bundle_path, monkeypatch):
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["train", synth_path, str(tmp_path / "b.json"), "--epochs", "0"]) == 2
    assert cli.main(["predict", bundle_path, str(tmp_path / "missing.jsonl"), str(tmp_path / "p.csv")]) == 3
    assert cli.main(["robustness", bundle_path, synth_path, str(tmp_path / "c.csv"), "--mode", "noise", "--fractions", "0.7"]) == 2

    def diverge(args):
        raise NumericalError("boom")

    monkeypatch.setattr(cli, "run", diverge)
    assert cli.main(["inspect", bundle_path]) == 4


def test_malformed_side_json_is_a_data_error(tmp_path, mean_bundle_path, six_sample_path):
    broken = tmp_path / "broken.json"
    broken.write_text('{"A": "left", ')
    with pytest.raises(DataError):
        cli.cmd_evaluate(mean_bundle_path, six_sample_path, str(tmp_path / "r.json"), groups_path=str(broken))
    with pytest.raises(DataError):
        cli.cmd_preprocess(six_sample_path, str(tmp_path / "o.jsonl"), normalize_stats=str(broken))

    not_a_mapping = tmp_path / "list.json"
    not_a_mapping.write_text("[1, 2]")
    with pytest.raises(DataError):
        cli.cmd_evaluate(mean_bundle_path, six_sample_path, str(tmp_path / "r.json"), groups_path=str(not_a_mapping))

    assert cli.main(["evaluate", mean_bundle_path, six_sample_path, str(tmp_path / "r.json"), "--groups", str(broken)]) == 3
    assert cli.main(["preprocess", six_sample_path, str(tmp_path / "o.jsonl"), "--normalize-stats", str(broken)]) == 3
    logger.info("✓ Malformed --groups and --normalize-stats exit with the data error code")


def test_main_train_and_evaluate_end_to_end(tmp_path, synth_path):
    bundle = str(tmp_path / "cli.json")
    code = cli.main(["train", synth_path, bundle, "--epochs", "2", "--n-hidden", "3", "--candidates", "1", "--freeze-u", "--seed", "5"])
    assert code == 0
    assert cli.main(["evaluate", bundle, synth_path, str(tmp_path / "report.json")]) == 0
    assert cli.main(["inspect", bundle]) == 0
    for model in load_bundle(bundle).models:
        np.testing.assert_array_equal(model.U, 0.0)


def test_thread_count_reads_environment(monkeypatch):
    monkeypatch.setenv("LRBM_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("LRBM_THREADS", "zero")
    with pytest.raises(ConfigError):
        thread_count()
    monkeypatch.setenv("LRBM_THREADS", "0")
    with pytest.raises(ConfigError):
        thread_count()
