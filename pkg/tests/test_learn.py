"""Tests for feature extraction, boosted stumps, the FFNN and FedAvg."""

from __future__ import annotations

import numpy as np
import pytest

from config import FEATURE_COUNT, AttackKind
from datagen import default_profiles, gen_trace, inject_attack
from errors import DegenerateDataError, InvalidArgumentError, ShapeError
from learn import (
    FEATURE_NAMES,
    Dataset,
    FeatureVector,
    ModelParams,
    Stump,
    evaluate,
    extract_features,
    fedavg,
    ffnn_loss_and_grad,
    ffnn_predict_proba,
    ffnn_train,
    init_params,
    predict_central,
    predict_central_batch,
    threshold,
    train_central,
    train_test_split,
    weight_count,
)
from records import empty_trace, records_of
from utils import substream


def _separable(seed: int, n: int = 120, column: int = 3) -> Dataset:
    rng = substream(seed, 'separable')
    features = rng.random((n, FEATURE_COUNT))
    labels = (features[:, column] > 0.5).astype(np.int64)
    return Dataset(features, labels)


def _update(layers, seed: int, oem_id: int = 0, **changes) -> ModelParams:
    params = init_params(layers, seed=seed, oem_id=oem_id)
    return params.with_weights(params.weights, **changes)


def _benign(seed: int = 0):
    profile = default_profiles(3)[0]
    return gen_trace(profile, 128, substream(seed, 'benign'))


@pytest.mark.unit
def test_feature_names_cover_every_feature() -> None:
    assert len(FEATURE_NAMES) == FEATURE_COUNT
    assert FEATURE_NAMES[5] == 'burst_share'
    assert FEATURE_NAMES[15] == 'id_dispersion'


@pytest.mark.unit
def test_benign_window_features() -> None:
    vector = extract_features(_benign())
    assert vector.label == 0
    assert vector.values.shape == (FEATURE_COUNT,)
    assert np.all(np.isfinite(vector.values))
    assert vector.values[5] < 0.05


@pytest.mark.unit
def test_dos_window_has_a_burst_and_a_label() -> None:
    trace = inject_attack(_benign(), AttackKind.DOS, 0.3, substream(0, 'dos'))
    vector = extract_features(trace)
    assert vector.label == 1
    assert vector.values[5] >= 0.05


@pytest.mark.unit
def test_features_match_for_record_list_and_array() -> None:
    trace = _benign(4)
    assert np.array_equal(
        extract_features(records_of(trace)).values, extract_features(trace).values
    )


@pytest.mark.unit
def test_empty_window_is_rejected() -> None:
    with pytest.raises(InvalidArgumentError):
        extract_features(empty_trace(0))


@pytest.mark.unit
def test_feature_vector_validation() -> None:
    with pytest.raises(ShapeError):
        FeatureVector(np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        FeatureVector(np.full(FEATURE_COUNT, np.nan))
    with pytest.raises(InvalidArgumentError):
        FeatureVector(np.zeros(FEATURE_COUNT), label=2)


@pytest.mark.unit
def test_stump_ties_score_mean_of_leaves() -> None:
    stump = Stump(0, 0.5, -1.0, 3.0)
    x = np.zeros((3, FEATURE_COUNT))
    x[:, 0] = [0.2, 0.5, 0.9]
    assert list(stump.scores(x)) == [-1.0, 1.0, 3.0]


@pytest.mark.unit
def test_train_central_separates_a_single_feature() -> None:
    data = _separable(1)
    model = train_central(data, rounds=20)
    predictions = threshold(predict_central_batch(model, data.features))
    assert evaluate(predictions, data.labels).accuracy == 1.0
    assert model.stumps[0].feature == 3
    assert 0.0 <= predict_central(model, data.vectors()[0]) <= 1.0


@pytest.mark.unit
def test_train_central_without_rounds_predicts_the_prior() -> None:
    data = _separable(2)
    model = train_central(data, rounds=0)
    probabilities = predict_central_batch(model, data.features)
    assert np.allclose(probabilities, data.positive_fraction)


@pytest.mark.unit
def test_train_central_needs_both_classes() -> None:
    data = _separable(3)
    only_benign = data.subset(data.labels == 0)
    with pytest.raises(DegenerateDataError):
        train_central(only_benign)
    with pytest.raises(DegenerateDataError):
        train_central(Dataset.empty())


@pytest.mark.unit
def test_model_params_validation() -> None:
    assert weight_count((16, 64, 32, 1)) == 3201
    with pytest.raises(ShapeError):
        ModelParams((4, 2, 1), np.zeros(5))
    with pytest.raises(ShapeError):
        ModelParams((4,), np.zeros(0))
    with pytest.raises(InvalidArgumentError):
        ModelParams((2, 1), np.zeros(3), sample_count=-1)


@pytest.mark.unit
@pytest.mark.parametrize('seed', range(20))
def test_ffnn_gradient_matches_finite_differences(seed) -> None:
    """Analytic gradient against central differences on small random nets."""
    rng = substream(seed, 'gradcheck')
    layer_sizes = (3, int(rng.integers(2, 6)), int(rng.integers(2, 5)), 1)
    weights = rng.normal(0.0, 0.5, size=weight_count(layer_sizes))
    features = rng.normal(size=(7, 3))
    labels = rng.integers(0, 2, size=7)

    def loss(w: np.ndarray) -> float:
        return ffnn_loss_and_grad(layer_sizes, w, features, labels, 3.0)[0]

    _, grad = ffnn_loss_and_grad(layer_sizes, weights, features, labels, 3.0)
    eps = 1e-6
    numeric = np.zeros_like(weights)
    for i in range(weights.size):
        step = np.zeros_like(weights)
        step[i] = eps
        numeric[i] = (loss(weights + step) - loss(weights - step)) / (2 * eps)

    scale = max(np.linalg.norm(grad) + np.linalg.norm(numeric), 1e-12)
    assert np.linalg.norm(grad - numeric) / scale < 1e-4


@pytest.mark.unit
def test_ffnn_training_lowers_the_loss() -> None:
    data = _separable(5, n=200)
    params = init_params((FEATURE_COUNT, 8, 1), seed=0)
    before, _ = ffnn_loss_and_grad(
        params.layer_sizes, params.weights, data.features, data.labels
    )
    trained = ffnn_train(params, data, epochs=20, learning_rate=0.1, seed=0)
    after, _ = ffnn_loss_and_grad(
        trained.layer_sizes, trained.weights, data.features, data.labels
    )

    assert after < before
    assert trained.sample_count == len(data)
    assert trained == ffnn_train(params, data, epochs=20, learning_rate=0.1, seed=0)
    probabilities = ffnn_predict_proba(trained, data.features)
    assert probabilities.shape == (len(data),)


@pytest.mark.unit
def test_ffnn_train_rejects_bad_input() -> None:
    params = init_params((FEATURE_COUNT, 4, 1), seed=0)
    with pytest.raises(InvalidArgumentError):
        ffnn_train(params, Dataset.empty(), 1, 0.1, 0)
    with pytest.raises(InvalidArgumentError):
        ffnn_train(params, _separable(0), 1, 0.1, 0, batch_size=0)
    narrow = Dataset(np.zeros((2, FEATURE_COUNT)), [0, 1])
    with pytest.raises(ShapeError):
        ffnn_train(init_params((4, 2, 1), seed=0), narrow, 1, 0.1, 0)


@pytest.mark.unit
def test_fedavg_of_one_update_is_that_update() -> None:
    params = _update((4, 3, 1), 1, oem_id=2, sample_count=10, version=4)
    assert fedavg([params]) == params


@pytest.mark.unit
def test_fedavg_is_sample_weighted() -> None:
    layers = (2, 1)
    a = ModelParams(layers, [1.0, 1.0, 1.0], sample_count=1, oem_id=1, version=2)
    b = ModelParams(layers, [5.0, 5.0, 5.0], sample_count=3, oem_id=2, version=3)
    merged = fedavg([a, b])
    assert np.allclose(merged.weights, 4.0)
    assert merged.sample_count == 4
    assert merged.oem_id == 0
    assert merged.version == 3


@pytest.mark.unit
@pytest.mark.parametrize(
    'counts, expected', [((1, 1), [2.0, 4.0]), ((3, 1), [1.5, 3.5])]
)
def test_fedavg_hand_examples(counts, expected) -> None:
    a = ModelParams((1, 1), [1.0, 3.0], sample_count=counts[0])
    b = ModelParams((1, 1), [3.0, 5.0], sample_count=counts[1])
    assert fedavg([a, b]).weights.tolist() == expected


@pytest.mark.unit
def test_mix_pool_equals_average_of_oem_pools() -> None:
    """Pooling everything at once equals averaging the per-OEM averages."""
    layers = (4, 3, 1)
    updates = {
        oem: [
            _update(layers, 10 * oem + k, oem_id=oem, sample_count=5 + k + oem)
            for k in range(3)
        ]
        for oem in (1, 2)
    }
    everything = fedavg(updates[1] + updates[2])
    nested = fedavg([fedavg(updates[1]), fedavg(updates[2])])
    assert np.allclose(everything.weights, nested.weights, atol=1e-6)
    assert everything.sample_count == nested.sample_count


@pytest.mark.unit
def test_fedavg_rejects_bad_pools() -> None:
    with pytest.raises(InvalidArgumentError):
        fedavg([])
    with pytest.raises(ShapeError):
        fedavg([init_params((2, 1), 0), init_params((3, 1), 0)])
    with pytest.raises(InvalidArgumentError):
        fedavg([init_params((2, 1), 0)])


@pytest.mark.unit
def test_evaluate_per_class_recall() -> None:
    metrics = evaluate([0, 0, 1, 1, 1], [0, 1, 1, 1, 0])
    assert metrics.recall_class0 == 0.5
    assert metrics.recall_class1 == pytest.approx(2 / 3)
    assert metrics.accuracy == 0.6
    assert (metrics.support0, metrics.support1) == (2, 3)


@pytest.mark.unit
def test_evaluate_class_without_support_has_zero_recall() -> None:
    metrics = evaluate([0, 0], [0, 0])
    assert metrics.recall_class0 == 1.0
    assert metrics.recall_class1 == 0.0
    assert metrics.support1 == 0


@pytest.mark.unit
def test_evaluate_rejects_bad_input() -> None:
    with pytest.raises(InvalidArgumentError):
        evaluate([0], [0, 1])
    with pytest.raises(InvalidArgumentError):
        evaluate([], [])
    with pytest.raises(InvalidArgumentError, match='labels'):
        evaluate([0, 1], [0, 2])
    with pytest.raises(InvalidArgumentError, match='predictions'):
        evaluate([0.5], [1])


@pytest.mark.unit
def test_threshold_counts_ties_as_positive() -> None:
    assert list(threshold(np.array([0.49, 0.5, 0.9]))) == [0, 1, 1]


@pytest.mark.unit
def test_metrics_csv_rows() -> None:
    rows = evaluate([0, 1], [0, 1]).csv_rows('ML', 1024, 'stumps')
    assert rows == [
        ['ML', 0, 1.0, 1, 1.0, 1024, 'stumps'],
        ['ML', 1, 1.0, 1, 1.0, 1024, 'stumps'],
    ]


@pytest.mark.unit
def test_train_test_split_is_stratified_and_disjoint() -> None:
    data = _separable(7, n=100)
    train, test = train_test_split(data, 0.3, seed=1)

    assert len(train) + len(test) == len(data)
    for label in (0, 1):
        members = int((data.labels == label).sum())
        assert int((test.labels == label).sum()) == int(round(0.3 * members))
    rows = {tuple(r) for r in train.features}
    assert not rows & {tuple(r) for r in test.features}
    again = train_test_split(data, 0.3, seed=1)
    assert np.array_equal(again[1].features, test.features)


@pytest.mark.unit
@pytest.mark.parametrize('fraction', [0.0, 1.0, -0.1])
def test_train_test_split_rejects_bad_fraction(fraction) -> None:
    with pytest.raises(InvalidArgumentError):
        train_test_split(_separable(0), fraction, seed=0)


@pytest.mark.unit
def test_dataset_concat_and_subset() -> None:
    a, b = _separable(1, n=10), _separable(2, n=6)
    both = Dataset.concat([a, Dataset.empty(), b])
    assert len(both) == 16
    assert np.array_equal(both.subset(np.arange(10)).features, a.features)
    assert len(Dataset.concat([])) == 0
    assert len(Dataset.from_vectors(a.vectors())) == 10
