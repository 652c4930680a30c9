"""Optimisation and evaluation: Adam, schedule, folds, two-step training, fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import layers as L
from .augment import augment_voxels, round_robin_plan
from .errors import ConfigError, InputError, ShapeError
from .model import Model, attach_head, freeze_layers
from .sequence import FeatureSequence, LSTMParams, NeighborhoodPolicy, lstm_backward, lstm_classify

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    base_lr: float = 1e-4
    lr_decay_factor: float = math.sqrt(0.1)
    lr_decay_every: int = 100
    epochs: int = 300
    lstm_epochs: int | None = None  # defaults to ``epochs``
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    decay: float = 1e-6
    dropout_rate: float = 0.4
    batch_size: int = 16
    seed: int = 0
    train_fraction: float = 0.8
    folds: int = 5
    hidden_size: int = 50
    neighborhood: int = 4
    neighborhood_mode: str = "tile"

    def __post_init__(self):
        problems = []
        if self.base_lr <= 0:
            problems.append("base_lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            problems.append("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            problems.append("lr_decay_every must be >= 1")
        if self.epochs < 0 or (self.lstm_epochs is not None and self.lstm_epochs < 0):
            problems.append("epoch counts must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            problems.append("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.decay < 0:
            problems.append("epsilon must be positive and decay non-negative")
        if not 0 <= self.dropout_rate < 1:
            problems.append("dropout_rate must lie in [0, 1)")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 < self.train_fraction < 1:
            problems.append("train_fraction must lie in (0, 1)")
        if self.folds < 1:
            problems.append("folds must be >= 1")
        if self.hidden_size < 1 or self.neighborhood < 1:
            problems.append("hidden_size and neighborhood must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def sequence_epochs(self) -> int:
        return self.epochs if self.lstm_epochs is None else self.lstm_epochs

    @property
    def policy(self) -> NeighborhoodPolicy:
        return NeighborhoodPolicy(self.neighborhood, self.neighborhood_mode)


def lr_at(config: TrainingConfig, epoch: int, global_step: int) -> float:
    """Step decay every ``lr_decay_every`` epochs composed with ``1 / (1 + decay * step)``."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    stage = epoch // config.lr_decay_every
    return config.base_lr * config.lr_decay_factor ** stage / (1.0 + config.decay * global_step)


# -- Adam -----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
              config: TrainingConfig, trainable: Iterable[str] | None = None) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place.

    Names outside ``trainable`` (default: all of ``params``) are left untouched.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    names = list(params) if trainable is None else [n for n in params if n in set(trainable)]
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name in names:
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} differs from parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + config.epsilon)).astype(p.dtype, copy=False)
    return state


# -- datasets ---------------------------------------------------------------------------


@dataclass
class Sample:
    voxels: np.ndarray  # h x w x t
    label: int
    clip_id: str
    source_id: str = ""
    subject: str = ""

    def __post_init__(self):
        if not self.source_id:
            self.source_id = self.clip_id


@dataclass
class ClipDataset:
    samples: list[Sample]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "ClipDataset":
        return ClipDataset([self.samples[i] for i in indices], self.class_names)

    def voxels(self, indices=None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].voxels for i in idx])

    def labels(self, indices=None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.array([self.samples[i].label for i in idx], dtype=np.int64)


def augment_dataset(dataset: ClipDataset, target_count: int) -> ClipDataset:
    """Grow the dataset to ``target_count`` clips with round-robin flips and rotation."""
    out = list(dataset.samples)
    for src, op in round_robin_plan(len(dataset), target_count):
        s = dataset.samples[src]
        out.append(Sample(augment_voxels(s.voxels, op), s.label, f"{s.clip_id}#{op}", s.source_id, s.subject))
    return ClipDataset(out, dataset.class_names)


def adapt_voxels(voxels: np.ndarray, shape) -> np.ndarray:
    """Centre-crop or zero-pad every axis of ``voxels`` to ``shape``."""
    out = np.zeros(tuple(shape), dtype=voxels.dtype)
    src, dst = [], []
    for have, want in zip(voxels.shape, shape):
        if have >= want:
            off = (have - want) // 2
            src.append(slice(off, off + want))
            dst.append(slice(0, want))
        else:
            off = (want - have) // 2
            src.append(slice(0, have))
            dst.append(slice(off, off + have))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def fit_dataset(dataset: ClipDataset, model: Model, adapter: str | None = None) -> ClipDataset:
    """Check clip shapes against the model input, optionally crop/pad them."""
    want = tuple(model.input_shape[:3])
    if all(s.voxels.shape == want for s in dataset.samples):
        return dataset
    if adapter is None:
        bad = next(s for s in dataset.samples if s.voxels.shape != want)
        raise ShapeError(f"clip {bad.clip_id} has shape {bad.voxels.shape}, model expects {want}; configure an input adapter")
    if adapter != "crop-pad":
        raise ConfigError(f"unknown input adapter {adapter!r}")
    return ClipDataset([replace(s, voxels=adapt_voxels(s.voxels, want)) for s in dataset.samples], dataset.class_names)


# -- folds --------------------------------------------------------------------------------


@dataclass
class FoldPlan:
    folds: list[tuple[list[int], list[int]]]  # (train indices, test indices)
    group_by: str
    groups: list[list[str]]  # group keys held out by each fold

    def __len__(self) -> int:
        return len(self.folds)


def _group_key(sample: Sample, group_by: str) -> str:
    if group_by == "source":
        return sample.source_id
    if group_by == "subject":
        return sample.subject or sample.source_id
    raise ConfigError(f"unknown grouping {group_by!r}")


def build_fold_plan(dataset: ClipDataset, folds: int = 5, seed: int = 0, group_by: str = "source") -> FoldPlan:
    """Seeded, balanced, disjoint folds over source clips (or subjects).

    Augmented variants share their source's key and always land in its fold.
    """
    if folds < 2:
        raise ConfigError(f"cross-validation needs at least 2 folds, got {folds}")
    keys = [_group_key(s, group_by) for s in dataset.samples]
    unique = sorted(set(keys))
    if len(unique) < folds:
        raise InputError(f"{len(unique)} groups cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(unique))
    held = [[unique[i] for i in chunk] for chunk in np.array_split(order, folds)]
    plan = []
    for group in held:
        members = set(group)
        test = [i for i, k in enumerate(keys) if k in members]
        train = [i for i, k in enumerate(keys) if k not in members]
        plan.append((train, test))
    return FoldPlan(plan, group_by, held)


def holdout_split(dataset: ClipDataset, train_fraction: float = 0.8, seed: int = 0, group_by: str = "source") -> tuple[list[int], list[int]]:
    """Single seeded train/test split by group (the 80/20 protocol)."""
    keys = [_group_key(s, group_by) for s in dataset.samples]
    unique = sorted(set(keys))
    if len(unique) < 2:
        raise InputError("a train/test split needs at least two groups")
    order = np.random.default_rng(seed).permutation(len(unique))
    n_train = min(len(unique) - 1, max(1, int(round(train_fraction * len(unique)))))
    train_keys = {unique[i] for i in order[:n_train]}
    train = [i for i, k in enumerate(keys) if k in train_keys]
    test = [i for i, k in enumerate(keys) if k not in train_keys]
    return train, test


# -- metrics --------------------------------------------------------------------------------


def fmt(x: float) -> str:
    return format(float(x), ".6g")


@dataclass
class MetricsLog:
    rows: list[tuple[int, float, float, float, float, float]] = field(default_factory=list)

    HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc")

    def append(self, epoch, lr, train_loss, train_acc, test_loss=float("nan"), test_acc=float("nan")):
        self.rows.append((int(epoch), float(lr), float(train_loss), float(train_acc), float(test_loss), float(test_acc)))

    def __len__(self) -> int:
        return len(self.rows)

    def to_tsv(self, header: bool = True) -> str:
        lines = ["\t".join(self.HEADER)] if header else []
        for row in self.rows:
            lines.append("\t".join([str(row[0])] + [fmt(v) for v in row[1:]]))
        return "\n".join(lines) + "\n"


@dataclass
class TrainedArtifacts:
    model: Model
    head: L.FCLayer
    lstm: LSTMParams
    class_names: list[str]
    policy: NeighborhoodPolicy = field(default_factory=NeighborhoodPolicy)
    meta: dict = field(default_factory=dict)

    def copy(self) -> "TrainedArtifacts":
        return TrainedArtifacts(
            self.model.copy(),
            L.FCLayer(self.head.weights.copy(), self.head.bias.copy(), self.head.name),
            self.lstm.copy(),
            list(self.class_names),
            self.policy,
            copy.deepcopy(self.meta),
        )


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    loss: float = float("nan")


# -- helpers ---------------------------------------------------------------------------------


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def cnn_scores(model: Model, head: L.FCLayer, voxels: np.ndarray, labels: np.ndarray, chunk: int = 32):
    """Eval-mode loss and accuracy of the CNN plus softmax head."""
    total, correct = 0.0, 0
    for start in range(0, len(voxels), chunk):
        feats, _ = model.forward(voxels[start:start + chunk], "eval")
        logits = L.fc_forward(head, feats)
        y = labels[start:start + chunk]
        loss, _ = L.softmax_cross_entropy(logits.astype(np.float64), y)
        total += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return total / len(voxels), correct / len(voxels)


def extract_sequences(model: Model, dataset: ClipDataset, policy: NeighborhoodPolicy, chunk: int = 64) -> list[FeatureSequence]:
    """Feature sequences for every clip, batching the CNN over all windows."""
    h, w, depth, _ = model.input_shape
    windows, owners = [], []
    for idx, s in enumerate(dataset.samples):
        if s.voxels.shape[:2] != (h, w):
            raise ShapeError(f"clip {s.clip_id} spatial shape {s.voxels.shape[:2]} does not match model {(h, w)}")
        T = s.voxels.shape[2]
        if T < policy.neighborhood or T < depth:
            raise InputError(f"clip {s.clip_id} with {T} frames is too short")
        for win in policy.windows(s.voxels):
            windows.append(policy.expand(win, depth))
            owners.append(idx)
    feats = []
    for start in range(0, len(windows), chunk):
        out, _ = model.forward(np.stack(windows[start:start + chunk]), "eval")
        feats.append(out)
    feats = np.concatenate(feats).astype(np.float64)
    owners = np.array(owners)
    return [
        FeatureSequence(feats[owners == i], s.label, s.clip_id)
        for i, s in enumerate(dataset.samples)
    ]


def lstm_scores(params: LSTMParams, seqs: list[FeatureSequence]):
    total, correct = 0.0, 0
    preds = []
    for seq in seqs:
        logits, _ = lstm_classify(params, seq)
        loss, _ = L.softmax_cross_entropy(logits, seq.label)
        total += loss
        pred = int(np.argmax(logits))
        preds.append(pred)
        correct += int(pred == seq.label)
    return total / len(seqs), correct / len(seqs), np.array(preds, dtype=np.int64)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("cnn_shuffle", "dropout", "head", "lstm_init", "lstm_shuffle")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# -- training ---------------------------------------------------------------------------------


def train_cnn(model: Model, head: L.FCLayer, dataset: ClipDataset, config: TrainingConfig,
              test: ClipDataset | None = None, streams=None) -> MetricsLog:
    """Step one: fit the CNN and its softmax head on clip labels."""
    streams = streams or _streams(config.seed)
    log_ = MetricsLog()
    X, y = dataset.voxels().astype(model.dtype), dataset.labels()
    Xt = test.voxels().astype(model.dtype) if test is not None and len(test) else None
    yt = test.labels() if Xt is not None else None
    params = {f"cnn.{k}": v for k, v in model.named_parameters().items()}
    params["head.weight"], params["head.bias"] = head.weights, head.bias
    trainable = [f"cnn.{n}" for n in model.trainable_names()] + ["head.weight", "head.bias"]
    state = AdamState()
    step = 0
    for epoch in range(config.epochs):
        lr_epoch = lr_at(config, epoch, step)
        for batch in _batches(streams["cnn_shuffle"].permutation(len(X)), config.batch_size):
            lr = lr_at(config, epoch, step)
            feats, fstate = model.forward(X[batch], "train", streams["dropout"])
            logits = L.fc_forward(head, feats)
            _, glogits = L.softmax_cross_entropy(logits, y[batch])
            gfeat, gw, gb = L.fc_backward(head, feats, glogits.astype(model.dtype))
            grads = {f"cnn.{k}": v for k, v in model.backward(fstate, gfeat).items()}
            grads["head.weight"], grads["head.bias"] = gw, gb
            adam_step(state, params, grads, lr, config, trainable)
            model.version += 1
            step += 1
        loss, acc = cnn_scores(model, head, X, y)
        tl, ta = cnn_scores(model, head, Xt, yt) if Xt is not None else (float("nan"), float("nan"))
        log_.append(epoch, lr_epoch, loss, acc, tl, ta)
        log.debug("cnn epoch %d loss %.4f acc %.3f", epoch, loss, acc)
    return log_


def train_lstm(params: LSTMParams, seqs: list[FeatureSequence], config: TrainingConfig,
               test_seqs: list[FeatureSequence] | None = None, streams=None) -> MetricsLog:
    """Step two: fit the LSTM classifier on frozen CNN feature sequences."""
    streams = streams or _streams(config.seed)
    log_ = MetricsLog()
    state = AdamState()
    step = 0
    for epoch in range(config.sequence_epochs):
        lr_epoch = lr_at(config, epoch, step)
        for batch in _batches(streams["lstm_shuffle"].permutation(len(seqs)), config.batch_size):
            lr = lr_at(config, epoch, step)
            total = {k: np.zeros_like(v) for k, v in params.arrays.items()}
            for i in batch:
                logits, trace = lstm_classify(params, seqs[i])
                _, glogits = L.softmax_cross_entropy(logits, seqs[i].label)
                for k, g in lstm_backward(params, trace, glogits).items():
                    total[k] += g
            for g in total.values():
                g /= len(batch)
            adam_step(state, params.arrays, total, lr, config)
            params.version += 1
            step += 1
        loss, acc, _ = lstm_scores(params, seqs)
        if test_seqs:
            tl, ta, _ = lstm_scores(params, test_seqs)
        else:
            tl, ta = float("nan"), float("nan")
        log_.append(epoch, lr_epoch, loss, acc, tl, ta)
        log.debug("lstm epoch %d loss %.4f acc %.3f", epoch, loss, acc)
    return log_


def train(model: Model, lstm_params: LSTMParams | None, dataset: ClipDataset, config: TrainingConfig,
          trainable: Iterable[str] | None = None, test: ClipDataset | None = None,
          head: L.FCLayer | None = None) -> tuple[TrainedArtifacts, dict[str, MetricsLog]]:
    """Two-step training: CNN with a softmax head, then an LSTM on its frozen features.

    Returns the trained artifacts and the per-step metrics logs (``"cnn"``, ``"lstm"``).
    """
    if len(dataset) == 0:
        raise InputError("empty training set")
    fit_dataset(dataset, model)
    if test is not None and len(test):
        fit_dataset(test, model)
    if trainable is not None:
        freeze_layers(model, trainable)
    streams = _streams(config.seed)
    C = dataset.num_classes
    if head is None or head.out_features != C:
        head = attach_head(model.feature_size, C, streams["head"], model.dtype)
    if lstm_params is None:
        lstm_params = LSTMParams.create(model.feature_size, C, config.hidden_size, streams["lstm_init"])
    elif lstm_params.num_classes != C:
        lstm_params.reset_head(C, streams["lstm_init"])
    if lstm_params.input_size != model.feature_size:
        raise ShapeError(f"LSTM input size {lstm_params.input_size} does not match CNN features {model.feature_size}")

    cnn_log = train_cnn(model, head, dataset, config, test, streams)
    policy = config.policy
    if config.sequence_epochs > 0:
        seqs = extract_sequences(model, dataset, policy)
        test_seqs = extract_sequences(model, test, policy) if test is not None and len(test) else None
        lstm_log = train_lstm(lstm_params, seqs, config, test_seqs, streams)
    else:
        lstm_log = MetricsLog()
    meta = {"seed": config.seed, "epoch": config.epochs, "lstm_epochs": config.sequence_epochs}
    return TrainedArtifacts(model, head, lstm_params, list(dataset.class_names), policy, meta), {"cnn": cnn_log, "lstm": lstm_log}


def fine_tune(pretrained: TrainedArtifacts, new_dataset: ClipDataset, config: TrainingConfig,
              trainable: Iterable[str] = ("Conv4", "FC1"), adapter: str | None = None,
              test: ClipDataset | None = None) -> tuple[TrainedArtifacts, dict[str, MetricsLog]]:
    """Transfer learning: update only ``trainable`` CNN layers plus the heads.

    The pretrained artifacts are not modified.  Heads are re-initialised when
    the class count changes; the LSTM is retrained on the new features.
    """
    art = pretrained.copy()
    new_dataset = fit_dataset(new_dataset, art.model, adapter)
    if test is not None:
        test = fit_dataset(test, art.model, adapter)
    freeze_layers(art.model, trainable)
    if config.epochs == 0 and config.sequence_epochs == 0 and new_dataset.num_classes == art.lstm.num_classes:
        return art, {"cnn": MetricsLog(), "lstm": MetricsLog()}
    head = art.head if art.head.out_features == new_dataset.num_classes else None
    tuned, logs = train(art.model, art.lstm, new_dataset, config, None, test, head)
    tuned.meta["fine_tuned_from"] = pretrained.meta.get("source", "")
    tuned.meta["trainable"] = sorted(art.model.trainable)
    return tuned, logs


def evaluate(artifacts: TrainedArtifacts, dataset: ClipDataset) -> EvalResult:
    """Accuracy and confusion matrix (rows = true labels) of the LSTM decisions."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty test set")
    seqs = extract_sequences(artifacts.model, dataset, artifacts.policy)
    loss, acc, preds = lstm_scores(artifacts.lstm, seqs)
    C = max(artifacts.lstm.num_classes, dataset.num_classes)
    confusion = np.zeros((C, C), dtype=np.int64)
    for true, pred in zip(dataset.labels(), preds):
        confusion[true, pred] += 1
    return EvalResult(acc, confusion, preds, loss)


def confusion_from(labels, predictions, num_classes: int) -> tuple[float, np.ndarray]:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.size == 0:
        raise InputError("empty label set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return float(np.mean(labels == predictions)), confusion
