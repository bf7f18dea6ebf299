import math
from pathlib import Path

import numpy as np
import pytest

from src.config import load_config
from src.errors import ConfigError, ContractError
from src.models.records import BaselineRow, CoveragePoint, MultiRaterExample, PredictionRecord
from src.models.schemas import AnnotatorSpec
from src.services.consensus import build_consensus_dataset, consensus_accuracy, majority_votes
from src.services.data import annotate, subset_annotators
from src.services.evaluation import (
    baseline_confidence_deferral,
    baselines_simple,
    emit_baselines,
    emit_curve,
    emit_predictions,
    evaluate_system,
    lambda_coverage_correlation,
    pool_majority,
    read_curve,
    resolve_truth,
    sweep_lambda,
)
from src.services.lecomh import CollabNet, SelectionNet, final_prediction
from src.services.nnet import Mlp
from src.services.pipeline import generate_datasets
from src.services.pretrain import evaluate_classifier, pretrain_classifier

ROOT = Path(__file__).resolve().parent.parent


def stub_selection(logits, feature_dim=8):
    logits = np.asarray(logits, dtype=np.float64)
    weights = np.zeros((feature_dim, len(logits)))
    return SelectionNet(Mlp([feature_dim, len(logits)], [weights], [logits]))


def majority_collab():
    return CollabNet(Mlp.zeros([16, 4]), 4, head="majority")


@pytest.fixture(scope="module")
def consensus(blobs, classifier):
    return build_consensus_dataset(blobs[0], classifier)


# evaluate_system

def test_ai_alone_system_has_full_coverage(blobs, classifier):
    _, test = blobs
    records, summary = evaluate_system(
        stub_selection([10.0, 0.0, 0.0, 0.0]), majority_collab(), classifier, test, seed=1
    )
    assert summary.coverage == 1.0
    assert summary.mean_cost == 0.0
    assert summary.accuracy == pytest.approx(evaluate_classifier(classifier, test), abs=1e-12)
    assert all(r.chosen_index == 0 for r in records)


def test_full_query_system_has_zero_coverage(blobs, classifier):
    _, test = blobs
    records, summary = evaluate_system(
        stub_selection([0.0, 0.0, 0.0, 10.0]), majority_collab(), classifier, test, seed=1
    )
    assert summary.coverage == 0.0
    assert summary.mean_cost == 3.0
    assert len(records) == len(test)
    assert summary.accuracy == pytest.approx(np.mean([r.correct for r in records]))


def test_sampled_selection_with_peaked_logits(blobs, classifier):
    _, test = blobs
    _, summary = evaluate_system(
        stub_selection([60.0, 0.0, 0.0, 0.0]), majority_collab(), classifier, test, seed=2, hard=False
    )
    assert summary.coverage == 1.0


def test_evaluation_is_deterministic(blobs, classifier):
    _, test = blobs
    rng = np.random.default_rng(5)
    selection = SelectionNet(Mlp.create([8, 6, 4], rng))
    collab = CollabNet.create(3, 4, [8], rng)
    first = evaluate_system(selection, collab, classifier, test, seed=9, hard=False)
    second = evaluate_system(selection, collab, classifier, test, seed=9, hard=False)
    assert first == second


def test_evaluation_matches_single_example_prediction(blobs, classifier):
    _, test = blobs
    rng = np.random.default_rng(6)
    selection = SelectionNet(Mlp.create([8, 6, 4], rng))
    collab = CollabNet.create(3, 4, [8], rng)
    records, _ = evaluate_system(selection, collab, classifier, test, seed=21, temperature=5.0, hard=False)
    for i in range(15):
        example_rng = np.random.default_rng([21, i])
        picked = test.annotations[i, example_rng.choice(test.n_annotators, 3, replace=False)]
        example = MultiRaterExample(test.features[i], picked)
        probs, sample = final_prediction(classifier, selection, collab, example, 5.0, example_rng)
        assert records[i].chosen_index == sample.chosen_index
        assert records[i].predicted == int(np.argmax(probs))


def test_pool_smaller_than_system_is_rejected(blobs, classifier):
    _, test = blobs
    small_pool = subset_annotators(test, [0, 1])
    with pytest.raises(ConfigError):
        evaluate_system(stub_selection([1.0, 0.0, 0.0, 0.0]), majority_collab(), classifier, small_pool, seed=0)


def test_empty_test_set_is_rejected(blobs, classifier):
    _, test = blobs
    with pytest.raises(ContractError):
        evaluate_system(stub_selection([1.0, 0.0, 0.0, 0.0]), majority_collab(), classifier, test.subset([]), seed=0)


# ground truth and baselines

def test_truth_falls_back_to_pool_majority(blobs):
    _, test = blobs
    partial = test.ground_truth.copy()
    partial[:10] = -1
    unlabeled = test.subset(np.arange(len(test)))
    unlabeled.ground_truth = partial
    truth = resolve_truth(unlabeled)
    np.testing.assert_array_equal(truth[:10], pool_majority(test)[:10])
    np.testing.assert_array_equal(truth[10:], test.ground_truth[10:])


def test_pool_majority_ties_go_to_lowest_class(blobs):
    _, test = blobs
    rows = test.subset([0, 1])
    rows = rows.with_annotations(np.array([[3, 1, 2], [2, 2, 0]]))
    np.testing.assert_array_equal(pool_majority(rows), [1, 2])


def test_deferral_endpoints_match_simple_baselines(blobs, classifier):
    _, test = blobs
    rows = {r.name: r for r in baselines_simple(test, classifier, seed=0)}
    points = baseline_confidence_deferral(classifier, test, [0.0, 0.5, 1.0])
    assert points[2].coverage == 1.0 and points[2].mean_cost == 0.0
    assert points[2].accuracy == rows["AI"].accuracy
    assert points[0].coverage == 0.0 and points[0].mean_cost == test.n_annotators
    assert points[0].accuracy == rows["Majority"].accuracy
    assert points[1].coverage == 0.5
    assert points[1].mean_cost == 1.5


def test_deferral_rounds_to_whole_examples(blobs, classifier):
    _, test = blobs
    (point,) = baseline_confidence_deferral(classifier, test.subset(range(7)), [0.5])
    # floor(3.5 + 0.5) = 4 deferred out of 7
    assert point.coverage == pytest.approx(3 / 7)
    assert point.mean_cost == pytest.approx(4 * 3 / 7)


def test_deferral_rejects_bad_targets(blobs, classifier):
    with pytest.raises(ConfigError):
        baseline_confidence_deferral(classifier, blobs[1], [1.5])


def test_baselines_with_perfect_annotators(blobs, classifier):
    _, test = blobs
    perfect = AnnotatorSpec(kind="confusion_matrix", confusion=np.eye(4).tolist())
    test = annotate(test, [perfect] * 3, seed=1)
    rows = baselines_simple(test, classifier, seed=0)
    assert [r.name for r in rows] == ["AI", "Human", "Majority"]
    human, majority = rows[1], rows[2]
    assert (human.coverage, human.cost, human.accuracy) == (0.0, 1.0, 1.0)
    assert (majority.coverage, majority.cost, majority.accuracy) == (0.0, 3.0, 1.0)


# sweep

def test_single_leg_sweep_has_no_spread(consensus, classifier, blobs, make_lecomh_config):
    config = make_lecomh_config(opt={"epochs": 2, "batch_size": 64})
    points, legs = sweep_lambda(consensus, classifier, blobs[1], config, [0.5], trials=1, seed=3)
    assert len(points) == 1 and len(legs) == 1
    assert points[0].lambda_ == 0.5
    assert points[0].accuracy_std == 0.0
    assert points[0].trials == 1
    assert legs[0].seed == 3


def test_sweep_standard_error(consensus, classifier, blobs, make_lecomh_config):
    config = make_lecomh_config(opt={"epochs": 1, "batch_size": 64})
    points, legs = sweep_lambda(consensus, classifier, blobs[1], config, [0.0], trials=5, seed=10)
    accuracies = [leg.summary.accuracy for leg in legs]
    assert [leg.seed for leg in legs] == [10, 11, 12, 13, 14]
    assert points[0].accuracy == pytest.approx(np.mean(accuracies), abs=1e-12)
    expected = np.std(accuracies, ddof=1) / math.sqrt(5)
    assert points[0].accuracy_std == pytest.approx(expected, abs=1e-12)


def test_sweep_workers_do_not_change_results(tmp_path, consensus, classifier, blobs, make_lecomh_config):
    config = make_lecomh_config(opt={"epochs": 2, "batch_size": 64})
    serial, _ = sweep_lambda(consensus, classifier, blobs[1], config, [1.0, 0.0], trials=1, seed=4)
    threaded, _ = sweep_lambda(
        consensus, classifier, blobs[1], config, [1.0, 0.0], trials=1, seed=4, workers=2, leg_root=tmp_path
    )
    assert serial == threaded
    assert [p.lambda_ for p in serial] == [0.0, 1.0]
    assert (tmp_path / "lambda-1-trial-0" / "collab.weights").is_file()
    assert (tmp_path / "lambda-0-trial-0" / "training_log.csv").is_file()


def test_sweep_argument_checks(consensus, classifier, blobs, make_lecomh_config):
    with pytest.raises(ConfigError):
        sweep_lambda(consensus, classifier, blobs[1], make_lecomh_config(), [], trials=1, seed=0)
    with pytest.raises(ConfigError):
        sweep_lambda(consensus, classifier, blobs[1], make_lecomh_config(), [0.0], trials=0, seed=0)
    with pytest.raises(ConfigError, match="distinct"):
        sweep_lambda(consensus, classifier, blobs[1], make_lecomh_config(), [0.0, 0.0], trials=1, seed=0)


def test_lambda_coverage_correlation():
    def point(lam, coverage):
        return CoveragePoint(lam, coverage, 0.0, 0.5)

    assert lambda_coverage_correlation([point(0, 0.1), point(1, 0.5), point(5, 0.9)]) == pytest.approx(1.0)
    assert lambda_coverage_correlation([point(0, 0.9), point(1, 0.5), point(5, 0.1)]) == pytest.approx(-1.0)
    assert math.isnan(lambda_coverage_correlation([point(0, 0.5)]))
    assert math.isnan(lambda_coverage_correlation([point(0, 0.5), point(1, 0.5)]))


# metric files

def test_curve_is_sorted_by_coverage(tmp_path):
    points = [
        CoveragePoint(1.0, 0.8, 0.4, 0.9, 0.01, 3),
        CoveragePoint(0.0, 0.1, 2.5, 0.95, 0.0, 3),
        CoveragePoint(None, 0.5, 1.5, 0.875),
    ]
    path = tmp_path / "curve.csv"
    emit_curve(points, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "lambda,coverage,mean_cost,accuracy,accuracy_std,trials"
    assert [float(line.split(",")[1]) for line in lines[1:]] == [0.1, 0.5, 0.8]
    assert lines[2].startswith(",0.5,")
    assert read_curve(path) == sorted(points, key=lambda p: p.coverage)


def test_single_point_curve(tmp_path):
    path = tmp_path / "curve.csv"
    emit_curve([CoveragePoint(0.2, 0.3, 1.0, 0.7)], path)
    assert len(path.read_text().splitlines()) == 2
    with pytest.raises(ContractError):
        emit_curve([], tmp_path / "empty.csv")


def test_curve_with_foreign_columns_is_rejected(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("coverage,accuracy\n0.5,0.9\n")
    with pytest.raises(ContractError):
        read_curve(path)


def test_baseline_and_prediction_files(tmp_path):
    emit_baselines([BaselineRow("AI", 1.0, 0.0, 0.85)], tmp_path / "baselines.csv")
    assert (tmp_path / "baselines.csv").read_text() == "name,coverage,cost,accuracy\nAI,1,0,0.84999999999999998\n"
    emit_predictions([PredictionRecord(0, 2, 1, True), PredictionRecord(1, 0, 0, False)], tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines() == [
        "index,predicted,chosen_index,correct",
        "0,2,1,1",
        "1,0,0,0",
    ]


# fixed-seed benchmark

@pytest.mark.slow
def test_benchmark_sweep():
    config = load_config(ROOT / "configs" / "benchmark.conf")
    train, test = generate_datasets(config)
    classifier = pretrain_classifier(train, config.pretrain, config.seed)
    assert 0.82 <= evaluate_classifier(classifier, test) <= 0.90
    consensus = build_consensus_dataset(
        train, classifier, config.consensus.quality_threshold, config.consensus.method, config.seed
    )
    votes = majority_votes(train.annotations, train.n_classes, classifier.predict_proba(train.features))
    retained = consensus.retained
    assert consensus_accuracy(consensus) >= float((votes[retained] == train.ground_truth[retained]).mean()) - 0.01
    points, legs = sweep_lambda(
        consensus, classifier, test, config.lecomh, config.eval.lambdas, config.eval.trials, config.seed
    )
    rows = {r.name: r for r in baselines_simple(test, classifier, config.seed)}
    best = max(p.accuracy for p in points)
    assert best > rows["AI"].accuracy
    assert best > rows["Majority"].accuracy
    assert lambda_coverage_correlation(points) > 0
    by_lambda = {p.lambda_: p for p in points}
    assert by_lambda[5.0].coverage - by_lambda[0.0].coverage >= 0.2

    losses = np.array([e.loss for e in legs[0].log.epochs])
    smoothed = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smoothed) <= 1e-3)
