import numpy as np
import pytest

from src.errors import ConfigError
from src.models.records import DatasetMeta
from src.models.schemas import AnnotatorSpec, OptConfig, PretrainConfig
from src.services.data import annotate, confusion_annotator, gen_blobs
from src.services.nnet import Mlp
from src.services.pretrain import (
    Classifier,
    evaluate_classifier,
    heldout_accuracy,
    load_classifier,
    pretrain_classifier,
    save_classifier,
    save_history,
)


def quick_config(**overrides) -> PretrainConfig:
    values = dict(opt=OptConfig(epochs=10, batch_size=64), warmup_epochs=2, hidden=[16])
    values.update(overrides)
    return PretrainConfig(**values)


@pytest.fixture(scope="module")
def noisy_blobs():
    train, test = gen_blobs(4, 8, 1200, 600, 3.0, seed=7)
    specs = [confusion_annotator(4, 0.7)] * 3
    return annotate(train, specs, 7), test


def test_clean_separable_blobs():
    train, test = gen_blobs(4, 8, 1000, 500, 10.0, seed=1)
    perfect = AnnotatorSpec(kind="confusion_matrix", confusion=np.eye(4).tolist())
    classifier = pretrain_classifier(annotate(train, [perfect, perfect], 1), quick_config(), seed=1)
    assert evaluate_classifier(classifier, test) > 0.99
    assert max(e.heldout_accuracy for e in classifier.history) > 0.99


def test_selection_disabled_configs_agree(noisy_blobs):
    train, _ = noisy_blobs
    never_filtered = pretrain_classifier(train, quick_config(small_loss_keep_ratio=0.7, warmup_epochs=10), seed=2)
    plain = pretrain_classifier(train, quick_config(small_loss_keep_ratio=1.0, warmup_epochs=0), seed=2)
    assert never_filtered.net.same_parameters(plain.net)
    assert all(e.kept_fraction == 1.0 for e in plain.history)


def test_small_loss_filter_keeps_ratio(noisy_blobs):
    classifier = pretrain_classifier(noisy_blobs[0], quick_config(small_loss_keep_ratio=0.7), seed=2)
    assert classifier.history[0].kept_fraction == 1.0
    assert classifier.history[-1].kept_fraction == pytest.approx(0.7, abs=0.02)


def test_small_loss_filter_under_noise():
    train, test = gen_blobs(4, 8, 1200, 600, 8.0, seed=11)
    train = annotate(train, [confusion_annotator(4, 0.7)] * 3, 11)
    filtered = pretrain_classifier(train, quick_config(small_loss_keep_ratio=0.7), seed=5)
    plain = pretrain_classifier(train, quick_config(small_loss_keep_ratio=1.0), seed=5)
    assert filtered.best_epoch >= 2
    assert evaluate_classifier(filtered, test) >= evaluate_classifier(plain, test)


def test_heldout_accuracy_averages_annotators():
    annotations = np.array([[0, 0, 1], [1, 2, 1], [2, 2, 2], [3, 0, 3]])
    assert heldout_accuracy(annotations, np.array([0, 1, 2, 3])) == pytest.approx(9 / 12)


def test_pretraining_is_deterministic(tmp_path, noisy_blobs):
    for name in ("a", "b"):
        save_classifier(pretrain_classifier(noisy_blobs[0], quick_config(), seed=3), tmp_path / f"{name}.weights")
    assert (tmp_path / "a.weights").read_bytes() == (tmp_path / "b.weights").read_bytes()


def test_best_snapshot_not_worse_than_final(noisy_blobs):
    classifier = pretrain_classifier(noisy_blobs[0], quick_config(), seed=4)
    best = classifier.history[classifier.best_epoch].heldout_accuracy
    assert classifier.best_epoch >= 2
    assert best >= classifier.history[-1].heldout_accuracy
    assert best == max(e.heldout_accuracy for e in classifier.history[2:])


def test_plain_training_snapshots_every_epoch(noisy_blobs):
    classifier = pretrain_classifier(noisy_blobs[0], quick_config(small_loss_keep_ratio=1.0), seed=4)
    assert classifier.history[classifier.best_epoch].heldout_accuracy == max(e.heldout_accuracy for e in classifier.history)


def test_zero_weight_classifier_is_chance():
    _, test = gen_blobs(4, 8, 4, 400, 3.0, seed=0)
    classifier = Classifier(Mlp.zeros([8, 4]), DatasetMeta(4, 1, 8))
    assert evaluate_classifier(classifier, test) == pytest.approx(0.25, abs=0.03)


def test_pretraining_needs_annotations():
    train, _ = gen_blobs(3, 4, 30, 3, 2.0, seed=0)
    with pytest.raises(ConfigError):
        pretrain_classifier(train, quick_config(), seed=0)


def test_warmup_cannot_exceed_epochs():
    with pytest.raises(ValueError):
        quick_config(warmup_epochs=11)


def test_classifier_file_round_trip(tmp_path, classifier):
    path = tmp_path / "classifier.weights"
    save_classifier(classifier, path, config_hash="ab" * 32)
    assert (tmp_path / "classifier.weights.meta").read_text().startswith("classes=4 dim=8 annotators=3 seed=3 config=abababababab")
    loaded = load_classifier(path)
    assert loaded.net.same_parameters(classifier.net)
    assert loaded.meta == classifier.meta


def test_history_csv(tmp_path, classifier):
    path = tmp_path / "pretrain_log.csv"
    save_history(classifier, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss,heldout_accuracy,kept_fraction,lr"
    assert len(lines) == len(classifier.history) + 1
