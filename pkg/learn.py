#!/usr/bin/env python3
"""Numeric kernels: feature extraction, boosted stumps, the federated
feed-forward network, FedAvg and per-class metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import FEATURE_COUNT
from errors import DegenerateDataError, InvalidArgumentError, ShapeError
from records import Window, as_trace
from utils import substream

FEATURE_NAMES = (
    "log_rate",
    "log_gap_mean",
    "log_gap_var",
    "payload_entropy",
    "id_entropy",
    "burst_share",
    "byte_mean",
    "byte_std",
    "zero_byte_share",
    "counter_breaks",
    "id_timing_cv",
    "top_id_share",
    "unique_payload_share",
    "signal_step",
    "high_byte_share",
    "id_dispersion",
)

BURST_GAP_US = 50.0
COUNTER_MODULUS = 16
MAX_TIMING_CV = 10.0
DECISION_THRESHOLD = 0.5


@dataclass
class FeatureVector:
    values: np.ndarray
    label: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape != (FEATURE_COUNT,):
            raise ShapeError(f"feature vectors have {FEATURE_COUNT} values")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("feature values must be finite")
        if self.label not in (0, 1):
            raise InvalidArgumentError("label must be 0 or 1")


@dataclass
class Dataset:
    """Batch form of a list of feature vectors.

    ``record_counts`` keeps the number of raw log records behind every row so
    upload sizes can be accounted for without keeping the traces.
    """
    features: np.ndarray
    labels: np.ndarray
    record_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64).reshape(
            -1, FEATURE_COUNT
        )
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.record_counts) == 0:
            self.record_counts = np.zeros(len(self.labels), dtype=np.int64)
        self.record_counts = np.asarray(self.record_counts, dtype=np.int64)
        if not len(self.features) == len(self.labels) == len(self.record_counts):
            raise ShapeError("features, labels and record counts differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.zeros((0, FEATURE_COUNT)), np.zeros(0, np.int64))

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "Dataset":
        if not vectors:
            return cls.empty()
        return cls(
            np.stack([v.values for v in vectors]),
            np.array([v.label for v in vectors], dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.record_counts for p in parts]),
        )

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(
            self.features[index], self.labels[index], self.record_counts[index]
        )

    def vectors(self) -> List[FeatureVector]:
        return [
            FeatureVector(row, int(label))
            for row, label in zip(self.features, self.labels)
        ]

    @property
    def positive_fraction(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0


TrainingData = Union[Dataset, Sequence[FeatureVector]]


def as_dataset(data: TrainingData) -> Dataset:
    if isinstance(data, Dataset):
        return data
    return Dataset.from_vectors(list(data))


def _entropy_bits(counts: np.ndarray) -> float:
    counts = counts[counts > 0]
    if counts.size == 0:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def extract_features(window: Window) -> FeatureVector:
    """Sixteen window features; label is 1 iff any record is attack-tagged."""
    trace = as_trace(window)
    n = len(trace)
    if n == 0:
        raise InvalidArgumentError("cannot extract features from an empty window")

    ts = trace["timestamp_us"].astype(np.float64)
    ids = trace["message_id"].astype(np.int64)
    payload = trace["payload"].astype(np.int64)
    values = np.zeros(FEATURE_COUNT)

    span_us = max(ts[-1] - ts[0], 1.0)
    gaps = np.diff(ts)
    values[0] = np.log10(n / (span_us * 1e-6))
    if gaps.size:
        values[1] = np.log10(1.0 + gaps.mean())
        values[2] = np.log10(1.0 + gaps.var())

    values[3] = _entropy_bits(np.bincount(payload.ravel(), minlength=256)) / 8.0
    _, id_counts = np.unique(ids, return_counts=True)
    if n > 1:
        values[4] = _entropy_bits(id_counts) / np.log2(n)

    # longest run of back-to-back records
    if gaps.size:
        tight = np.concatenate(([0], (gaps < BURST_GAP_US).astype(np.int8), [0]))
        edges = np.flatnonzero(np.diff(tight))
        runs = edges[1::2] - edges[::2]
        values[5] = (runs.max() + 1) / n if runs.size else 0.0

    values[6] = payload.mean() / 255.0
    values[7] = payload.std() / 128.0
    values[8] = float((payload == 0).mean())

    order = np.lexsort((ts, ids))
    same_id = ids[order][1:] == ids[order][:-1]
    counters = payload[order, 0]
    signals = payload[order, 1]
    if same_id.any():
        steps = np.mod(counters[1:] - counters[:-1], COUNTER_MODULUS)
        values[9] = float((steps[same_id] != 1).mean())
        values[13] = float(np.abs(np.diff(signals))[same_id].mean()) / 255.0
    values[10] = _timing_cv(ts[order], ids[order])

    values[11] = id_counts.max() / n
    values[12] = len(np.unique(trace["payload"], axis=0)) / n
    values[14] = float((payload[:, 2:] >= 0x80).mean())
    values[15] = len(id_counts) / n

    label = int(np.any(trace["attack_tag"] != 0))
    return FeatureVector(values, label)


def _timing_cv(ts: np.ndarray, ids: np.ndarray) -> float:
    """Mean coefficient of variation of per-identifier inter-arrival times."""
    cvs = []
    for message_id in np.unique(ids):
        stamps = ts[ids == message_id]
        if len(stamps) < 3:
            continue
        gaps = np.diff(stamps)
        mean = gaps.mean()
        cv = gaps.std() / mean if mean > 0 else MAX_TIMING_CV
        cvs.append(min(cv, MAX_TIMING_CV))
    return float(np.mean(cvs)) if cvs else 0.0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# Boosted stumps


@dataclass(frozen=True)
class Stump:
    """Depth-1 tree; ties at the threshold score the mean of both leaves."""
    feature: int
    threshold: float
    left: float
    right: float

    def scores(self, features: np.ndarray) -> np.ndarray:
        column = features[:, self.feature]
        out = np.where(column < self.threshold, self.left, self.right)
        return np.where(column == self.threshold, 0.5 * (self.left + self.right), out)


@dataclass(frozen=True)
class CentralModel:
    stumps: Tuple[Stump, ...]
    learning_rate: float
    rounds: int
    base_score: float = 0.0
    version: int = 0

    def __post_init__(self) -> None:
        if self.rounds != len(self.stumps):
            raise InvalidArgumentError("rounds must equal the number of stumps")
        for stump in self.stumps:
            if not 0 <= stump.feature < FEATURE_COUNT:
                raise ShapeError(f"stump feature index {stump.feature} out of range")


def _check_width(features: np.ndarray, width: int) -> None:
    if features.ndim != 2 or features.shape[1] != width:
        raise ShapeError(f"expected {width} features per row, got {features.shape}")


def train_central(
    data: TrainingData,
    rounds: int = 200,
    learning_rate: float = 0.1,
    reg_lambda: float = 1.0,
) -> CentralModel:
    """Gradient-boosted stumps on the logistic loss (Newton leaf values)."""
    ds = as_dataset(data)
    if rounds < 0:
        raise InvalidArgumentError("rounds must be >= 0")
    if len(ds) == 0 or len(np.unique(ds.labels)) < 2:
        raise DegenerateDataError("training data must contain both classes")
    _check_width(ds.features, FEATURE_COUNT)

    x, y = ds.features, ds.labels.astype(np.float64)
    prior = y.mean()
    base = float(np.log(prior / (1.0 - prior)))
    orders = [np.argsort(x[:, j], kind="stable") for j in range(FEATURE_COUNT)]
    sorted_columns = [x[order, j] for j, order in enumerate(orders)]

    margin = np.full(len(y), base)
    stumps: List[Stump] = []
    for _ in range(rounds):
        p = _sigmoid(margin)
        grad, hess = p - y, p * (1.0 - p)
        stump = _best_stump(grad, hess, orders, sorted_columns, reg_lambda)
        stump = Stump(
            stump.feature,
            stump.threshold,
            stump.left * learning_rate,
            stump.right * learning_rate,
        )
        margin += stump.scores(x)
        stumps.append(stump)
    return CentralModel(tuple(stumps), learning_rate, rounds, base)


def _best_stump(
    grad: np.ndarray,
    hess: np.ndarray,
    orders: List[np.ndarray],
    sorted_columns: List[np.ndarray],
    reg_lambda: float,
) -> Stump:
    g_total, h_total = grad.sum(), hess.sum()
    parent = g_total**2 / (h_total + reg_lambda)
    best: Optional[Tuple[float, Stump]] = None

    for feature, (order, column) in enumerate(zip(orders, sorted_columns)):
        g_left = np.cumsum(grad[order])[:-1]
        h_left = np.cumsum(hess[order])[:-1]
        valid = column[1:] > column[:-1]
        if not valid.any():
            continue
        g_right, h_right = g_total - g_left, h_total - h_left
        gain = (
            g_left**2 / (h_left + reg_lambda)
            + g_right**2 / (h_right + reg_lambda)
            - parent
        )
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if best is None or gain[i] > best[0]:
            stump = Stump(
                feature,
                float(0.5 * (column[i] + column[i + 1])),
                float(-g_left[i] / (h_left[i] + reg_lambda)),
                float(-g_right[i] / (h_right[i] + reg_lambda)),
            )
            best = (float(gain[i]), stump)

    if best is None:
        # every feature is constant: a single leaf
        leaf = float(-g_total / (h_total + reg_lambda))
        return Stump(0, 0.0, leaf, leaf)
    return best[1]


def _rows(x: Union[FeatureVector, np.ndarray]) -> np.ndarray:
    if isinstance(x, FeatureVector):
        return x.values.reshape(1, -1)
    return np.asarray(x, dtype=np.float64).reshape(-1, FEATURE_COUNT)


def central_margin(model: CentralModel, features: np.ndarray) -> np.ndarray:
    margin = np.full(len(features), model.base_score)
    for stump in model.stumps:
        margin += stump.scores(features)
    return margin


def predict_central(model: CentralModel, x: Union[FeatureVector, np.ndarray]) -> float:
    """Probability that one window is compromised."""
    return float(_sigmoid(central_margin(model, _rows(x)))[0])


def predict_central_batch(model: CentralModel, features: np.ndarray) -> np.ndarray:
    return _sigmoid(central_margin(model, _rows(features)))


# Federated feed-forward network


def weight_count(layer_sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(eq=False)
class ModelParams:
    """Flat float32 weights; per layer W (n_in x n_out) row-major, then b."""
    layer_sizes: Tuple[int, ...]
    weights: np.ndarray
    sample_count: int = 0
    oem_id: int = 0
    version: int = 0

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        self.weights = np.asarray(self.weights, dtype=np.float32).reshape(-1)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError("a network needs at least two non-empty layers")
        if self.weights.size != weight_count(self.layer_sizes):
            raise ShapeError(
                f"{self.weights.size} weights do not fit layers {self.layer_sizes}"
            )
        if self.sample_count < 0:
            raise InvalidArgumentError("sample_count must be >= 0")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.layer_sizes == other.layer_sizes
            and self.sample_count == other.sample_count
            and self.oem_id == other.oem_id
            and self.version == other.version
            and np.array_equal(self.weights, other.weights)
        )

    def with_weights(self, weights: np.ndarray, **changes: int) -> "ModelParams":
        values = {
            "sample_count": self.sample_count,
            "oem_id": self.oem_id,
            "version": self.version,
        }
        values.update(changes)
        return ModelParams(self.layer_sizes, weights, **values)


def init_params(layer_sizes: Sequence[int], seed: int, oem_id: int = 0) -> ModelParams:
    """He-normal weights, zero biases."""
    rng = substream(seed, "ffnn-init")
    chunks = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return ModelParams(tuple(layer_sizes), np.concatenate(chunks), oem_id=oem_id)


def _layers(
    layer_sizes: Sequence[int], weights: np.ndarray
) -> List[Tuple[np.ndarray, np.ndarray]]:
    layers, offset = [], 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = weights[offset : offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = weights[offset : offset + n_out]
        offset += n_out
        layers.append((w, b))
    return layers


def _forward(
    layers: List[Tuple[np.ndarray, np.ndarray]], x: np.ndarray
) -> Tuple[List[np.ndarray], np.ndarray]:
    activations = [x]
    for w, b in layers[:-1]:
        activations.append(np.maximum(activations[-1] @ w + b, 0.0))
    w, b = layers[-1]
    logits = (activations[-1] @ w + b)[:, 0]
    return activations, logits


def ffnn_loss_and_grad(
    layer_sizes: Sequence[int],
    weights: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    pos_weight: float = 1.0,
) -> Tuple[float, np.ndarray]:
    """Mean weighted binary cross-entropy and its gradient (float64)."""
    if layer_sizes[-1] != 1:
        raise ShapeError("the output layer must have one unit")
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    _check_width(x, layer_sizes[0])
    y = np.asarray(labels, dtype=np.float64)
    layers = _layers(layer_sizes, weights)

    activations, logits = _forward(layers, x)
    sample_weight = np.where(y > 0.5, pos_weight, 1.0)
    n = len(y)
    loss = float(np.mean(sample_weight * (np.logaddexp(0.0, logits) - y * logits)))

    delta = (sample_weight * (_sigmoid(logits) - y) / n)[:, None]
    grads: List[np.ndarray] = []
    for index in range(len(layers) - 1, -1, -1):
        w, _ = layers[index]
        a = activations[index]
        grads.append(delta.sum(axis=0))
        grads.append((a.T @ delta).ravel())
        if index:
            delta = (delta @ w.T) * (a > 0)
    return loss, np.concatenate(grads[::-1])


def ffnn_predict_proba(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    _check_width(x, params.layer_sizes[0])
    layers = _layers(params.layer_sizes, params.weights.astype(np.float64))
    return _sigmoid(_forward(layers, x)[1])


def ffnn_train(
    params: ModelParams,
    data: TrainingData,
    epochs: int,
    learning_rate: float,
    seed: int,
    batch_size: int = 32,
    pos_weight: float = 1.0,
) -> ModelParams:
    """Mini-batch gradient descent; returned sample_count is the data size."""
    ds = as_dataset(data)
    if len(ds) == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    if epochs < 0 or batch_size < 1:
        raise InvalidArgumentError("epochs must be >= 0 and batch_size >= 1")
    _check_width(ds.features, params.layer_sizes[0])

    weights = params.weights.astype(np.float64)
    rng = substream(seed, "ffnn-train")
    for _ in range(epochs):
        order = rng.permutation(len(ds))
        for start in range(0, len(ds), batch_size):
            batch = order[start : start + batch_size]
            _, grad = ffnn_loss_and_grad(
                params.layer_sizes,
                weights,
                ds.features[batch],
                ds.labels[batch],
                pos_weight,
            )
            weights -= learning_rate * grad
    return params.with_weights(weights, sample_count=len(ds))


def fedavg(updates: Sequence[ModelParams]) -> ModelParams:
    """Sample-count weighted average of parameter updates."""
    if not updates:
        raise InvalidArgumentError("fedavg needs at least one update")
    layer_sizes = updates[0].layer_sizes
    if any(u.layer_sizes != layer_sizes for u in updates):
        raise ShapeError("all updates must share layer sizes")
    total = sum(u.sample_count for u in updates)
    if total <= 0:
        raise InvalidArgumentError("total sample count must be > 0")

    acc = np.zeros(updates[0].weights.size)
    for update in updates:
        acc += update.sample_count * update.weights.astype(np.float64)
    oem_ids = {u.oem_id for u in updates}
    return ModelParams(
        layer_sizes,
        acc / total,
        sample_count=total,
        oem_id=oem_ids.pop() if len(oem_ids) == 1 else 0,
        version=max(u.version for u in updates),
    )


# Metrics


@dataclass(frozen=True)
class Metrics:
    recall_class0: float
    recall_class1: float
    accuracy: float
    support0: int
    support1: int

    def csv_rows(self, setup: str, payload_bytes: float, model: str) -> List[list]:
        """Rows (setup, class, recall, support, accuracy, payload_bytes, model)."""
        return [
            [setup, label, recall, support, self.accuracy, payload_bytes, model]
            for label, recall, support in (
                (0, self.recall_class0, self.support0),
                (1, self.recall_class1, self.support1),
            )
        ]


def _binary(values: Sequence[int], name: str) -> np.ndarray:
    flat = np.asarray(values).reshape(-1)
    if not np.isin(flat, (0, 1)).all():
        raise InvalidArgumentError(f"{name} must be 0 or 1")
    return flat.astype(np.int64)


def evaluate(predictions: Sequence[int], labels: Sequence[int]) -> Metrics:
    """Per-class recall and accuracy; a class with no support has recall 0."""
    pred = _binary(predictions, "predictions")
    true = _binary(labels, "labels")
    if len(pred) != len(true):
        raise InvalidArgumentError("predictions and labels differ in length")
    if len(true) == 0:
        raise InvalidArgumentError("cannot evaluate an empty prediction set")

    support0 = int((true == 0).sum())
    support1 = int((true == 1).sum())
    hit0 = int(((true == 0) & (pred == 0)).sum())
    hit1 = int(((true == 1) & (pred == 1)).sum())
    return Metrics(
        recall_class0=hit0 / support0 if support0 else 0.0,
        recall_class1=hit1 / support1 if support1 else 0.0,
        accuracy=(hit0 + hit1) / len(true),
        support0=support0,
        support1=support1,
    )


def threshold(probabilities: np.ndarray, cut: float = DECISION_THRESHOLD) -> np.ndarray:
    return (np.asarray(probabilities) >= cut).astype(np.int64)


def train_test_split(
    data: TrainingData, test_fraction: float, seed: int
) -> Tuple[Dataset, Dataset]:
    """Stratified split; both parts keep the original row order."""
    ds = as_dataset(data)
    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgumentError("test_fraction must lie in (0, 1)")
    test_mask = np.zeros(len(ds), dtype=bool)
    for label in (0, 1):
        members = np.flatnonzero(ds.labels == label)
        rng = substream(seed, "split", label)
        picked = rng.permutation(members)[: int(round(test_fraction * len(members)))]
        test_mask[picked] = True
    return ds.subset(~test_mask), ds.subset(test_mask)
