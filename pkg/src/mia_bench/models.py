"""Synthetic classification tasks and the small softmax classifiers trained on them.

These stand in for the image/text models of a full-scale study: the attack
and scenario code only ever consumes output probability vectors, so a
Gaussian-mixture task with a one- or two-hidden-layer perceptron is enough to
produce the member/nonmember confidence gap that membership inference
exploits.
"""

from __future__ import annotations

import io
import json
import hashlib
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, PoolExhaustedError, TrainingDivergedError

LOSS_FLOOR = 1e-12
SNAPSHOT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SyntheticTask:
    seed: int
    class_count: int
    feature_dim: int
    per_class_mean_scale: float = 1.0
    noise_scale: float = 1.0
    pool_size: int = 3000

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.pool_size < 4 * self.class_count:
            raise ValueError(f"pool_size {self.pool_size} < 4 * class_count {self.class_count}")


@dataclass(frozen=True, eq=False)
class Pool:
    """Labeled examples, optionally split into train / held-out / reserve index sets."""

    features: np.ndarray
    labels: np.ndarray
    train_idx: Optional[np.ndarray] = None
    heldout_idx: Optional[np.ndarray] = None
    reserve_idx: Optional[np.ndarray] = None

    def __len__(self):
        return self.labels.shape[0]


def class_means(task: SyntheticTask) -> np.ndarray:
    rng = np.random.default_rng([task.seed, 0])
    return rng.normal(size=(task.class_count, task.feature_dim)) * task.per_class_mean_scale


def generate_task(task: SyntheticTask, sample_seed: Optional[int] = None, size: Optional[int] = None) -> Pool:
    """Draw a labeled pool from the task's Gaussian mixture.

    Class means depend on ``task.seed`` only, so pools drawn with different
    ``sample_seed`` values come from the same distribution. Labels are
    balanced round-robin before shuffling.
    """
    size = task.pool_size if size is None else size
    means = class_means(task)
    rng = np.random.default_rng([task.seed, 1, 0 if sample_seed is None else sample_seed + 1])
    labels = rng.permutation(np.arange(size) % task.class_count)
    noise = rng.normal(size=(size, task.feature_dim)) * task.noise_scale
    return Pool(features=means[labels] + noise, labels=labels.astype(np.int64))


def split_pool(pool: Pool, n_train: int, n_heldout: int, seed: int) -> Pool:
    """Assign disjoint train / held-out index sets; leftovers become the reserve."""
    if n_train + n_heldout > len(pool):
        raise PoolExhaustedError(f"need {n_train + n_heldout} examples, pool has {len(pool)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    return replace(
        pool,
        train_idx=np.sort(order[:n_train]),
        heldout_idx=np.sort(order[n_train:n_train + n_heldout]),
        reserve_idx=np.sort(order[n_train + n_heldout:]),
    )


@dataclass(frozen=True)
class Hyper:
    hidden: Tuple[int, ...] = (64,)
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    activation: str = "relu"
    weight_decay: float = 0.0

    def with_seed(self, seed: int) -> "Hyper":
        return replace(self, seed=seed)


def _act(z, name):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(a, name):
    if name == "relu":
        return (a > 0).astype(a.dtype)
    return 1.0 - a * a


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class SoftmaxClassifier:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "relu"
    hyper: Optional[Hyper] = None
    loss_history: List[float] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[1]

    def _forward(self, x):
        acts = [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = _act(h @ w + b, self.activation)
            acts.append(h)
        return acts, h @ self.weights[-1] + self.biases[-1]

    def predict_proba(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.feature_dim:
            raise DimensionError(f"model expects {self.feature_dim} features, got {x.shape[1]}")
        p = softmax(self._forward(x)[1])
        return p[0] if single else p

    @classmethod
    def zeros(cls, feature_dim: int, class_count: int, hidden: Sequence[int] = ()):
        widths = [feature_dim, *hidden, class_count]
        return cls(
            weights=[np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
            biases=[np.zeros(b) for b in widths[1:]],
        )

    def to_arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays, activation="relu", hyper=None):
        n = sum(1 for k in arrays if k.startswith("w"))
        return cls(
            weights=[np.asarray(arrays[f"w{i}"]) for i in range(n)],
            biases=[np.asarray(arrays[f"b{i}"]) for i in range(n)],
            activation=activation,
            hyper=hyper,
        )


def predict_proba(model: SoftmaxClassifier, example) -> np.ndarray:
    return model.predict_proba(example)


def cross_entropy_loss(p, label: int) -> float:
    return float(-np.log(np.asarray(p, dtype=float)[label] + LOSS_FLOOR))


def losses(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy with the same floor as :func:`cross_entropy_loss`."""
    probs = np.asarray(probs)
    return -np.log(probs[np.arange(probs.shape[0]), labels] + LOSS_FLOOR)


def train_classifier(features, labels, class_count: int, hyper: Hyper = Hyper(), soft_targets=None) -> SoftmaxClassifier:
    """Train an MLP with softmax output by full-batch Adam on cross-entropy.

    ``soft_targets`` (rows summing to one) replace the one-hot labels, which
    is how distilled students are fit to a teacher's outputs.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training set must be a nonempty 2-D array")
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if soft_targets is None:
        target = np.zeros((n, class_count))
        target[np.arange(n), y] = 1.0
    else:
        target = np.asarray(soft_targets, dtype=float)

    rng = np.random.default_rng(hyper.seed)
    widths = [x.shape[1], *hyper.hidden, class_count]
    weights = [rng.normal(size=(a, b)) * np.sqrt(2.0 / a) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    model = SoftmaxClassifier(weights, biases, activation=hyper.activation, hyper=hyper)

    params = weights + biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    for epoch in range(1, hyper.epochs + 1):
        acts, logits = model._forward(x)
        probs = softmax(logits)
        loss = float(-np.mean(np.sum(target * np.log(probs + LOSS_FLOOR), axis=1)))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}")
        history.append(loss)

        delta = (probs - target) / n
        grads_w, grads_b = [], []
        for layer in range(len(weights) - 1, -1, -1):
            grads_w.append(acts[layer].T @ delta + hyper.weight_decay * weights[layer])
            grads_b.append(delta.sum(axis=0))
            if layer:
                delta = (delta @ weights[layer].T) * _act_grad(acts[layer], hyper.activation)
        grads = grads_w[::-1] + grads_b[::-1]

        for i, (p, g) in enumerate(zip(params, grads)):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mhat = m[i] / (1 - b1 ** epoch)
            vhat = v[i] / (1 - b2 ** epoch)
            p -= hyper.lr * mhat / (np.sqrt(vhat) + eps)

    final = float(-np.mean(np.sum(target * np.log(model.predict_proba(x) + LOSS_FLOOR), axis=1)))
    if not np.isfinite(final):
        raise TrainingDivergedError("final loss is not finite")
    history.append(final)
    model.loss_history = history
    return model


def accuracy(model: SoftmaxClassifier, features, labels) -> float:
    return float(np.mean(model.predict_proba(features).argmax(axis=1) == np.asarray(labels)))


@dataclass(frozen=True, eq=False)
class TargetDataset:
    """Half-member / half-nonmember target set with outputs of the target model.

    Membership is stored privately and read only through
    :func:`ground_truth`; attack code receives features, labels and outputs.
    """

    features: np.ndarray
    labels: np.ndarray
    outputs: np.ndarray
    dataset_id: str
    _membership: np.ndarray = field(repr=False)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "TargetDataset":
        idx = np.asarray(idx)
        return TargetDataset(
            self.features[idx], self.labels[idx], self.outputs[idx], self.dataset_id, self._membership[idx]
        )


def ground_truth(dataset: TargetDataset) -> np.ndarray:
    """Membership flags (True = member). For scoring code only, never for attacks."""
    return dataset._membership.copy()


def assemble_target_dataset(pool: Pool, model: SoftmaxClassifier, n: int, seed: int, dataset_id: str = "") -> TargetDataset:
    """Sample ``n/2`` members from the train split and ``n/2`` nonmembers from the held-out split."""
    if n % 2:
        raise ValueError("target dataset size must be even")
    if pool.train_idx is None or pool.heldout_idx is None:
        raise ValueError("pool has no train/held-out split")
    half = n // 2
    if len(pool.train_idx) < half or len(pool.heldout_idx) < half:
        raise PoolExhaustedError(
            f"need {half} train and {half} held-out examples, have {len(pool.train_idx)} and {len(pool.heldout_idx)}"
        )
    rng = np.random.default_rng(seed)
    members = rng.choice(pool.train_idx, size=half, replace=False)
    nonmembers = rng.choice(pool.heldout_idx, size=half, replace=False)
    idx = np.concatenate([members, nonmembers])
    flags = np.concatenate([np.ones(half, bool), np.zeros(half, bool)])
    order = rng.permutation(n)
    idx, flags = idx[order], flags[order]
    feats = pool.features[idx]
    return TargetDataset(feats, pool.labels[idx], model.predict_proba(feats), dataset_id, flags)


@dataclass(eq=False)
class ShadowBundle:
    """Shadow models trained on random halves of a pool from the target's task."""

    models: List[SoftmaxClassifier]
    pool: Pool
    in_masks: np.ndarray  # (k, N) True where the example trained shadow k
    outputs: np.ndarray  # (k, N, C)
    losses: np.ndarray  # (k, N)
    seed: int = 0

    def __len__(self):
        return len(self.models)

    def query(self, features) -> np.ndarray:
        """Outputs of every shadow on ``features`` as a ``(k, n, C)`` array."""
        return np.stack([m.predict_proba(features) for m in self.models])


def train_shadow_ensemble(task: SyntheticTask, k: int, hyper: Hyper, pool_size: int, seed: int) -> ShadowBundle:
    if k < 1:
        raise ValueError("need at least one shadow model")
    pool = generate_task(task, sample_seed=10_000 + seed, size=pool_size)
    rng = np.random.default_rng([seed, 7])
    n = len(pool)
    models, masks = [], np.zeros((k, n), bool)
    for j in range(k):
        chosen = rng.permutation(n)[: n // 2]
        masks[j, chosen] = True
        models.append(
            train_classifier(pool.features[chosen], pool.labels[chosen], task.class_count, hyper.with_seed(int(rng.integers(2**31))))
        )
    outputs = np.stack([m.predict_proba(pool.features) for m in models])
    shadow_losses = np.stack([losses(o, pool.labels) for o in outputs])
    return ShadowBundle(models, pool, masks, outputs, shadow_losses, seed=seed)


def save_snapshot(path, header: dict, pool: Pool, model: SoftmaxClassifier) -> str:
    """Write pool arrays and model weights to ``path`` (npz) and return a content digest.

    The header is stored as JSON under key ``header`` and always carries
    ``format_version``.
    """
    header = {"format_version": SNAPSHOT_FORMAT_VERSION, **header}
    arrays = {"features": pool.features, "labels": pool.labels}
    for name in ("train_idx", "heldout_idx", "reserve_idx"):
        if getattr(pool, name) is not None:
            arrays[name] = getattr(pool, name)
    arrays.update({f"model_{k}": v for k, v in model.to_arrays().items()})
    digest = snapshot_digest(header, arrays)
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return digest


def snapshot_digest(header: dict, arrays: dict) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def load_snapshot(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != SNAPSHOT_FORMAT_VERSION:
            raise ValueError(f"unsupported snapshot format_version {header.get('format_version')!r}")
        arrays = {k: data[k] for k in data.files if k != "header"}
    pool = Pool(
        arrays["features"],
        arrays["labels"],
        arrays.get("train_idx"),
        arrays.get("heldout_idx"),
        arrays.get("reserve_idx"),
    )
    hyper = Hyper(**{**header["hyper"], "hidden": tuple(header["hyper"]["hidden"])}) if "hyper" in header else None
    model = SoftmaxClassifier.from_arrays(
        {k[len("model_"):]: v for k, v in arrays.items() if k.startswith("model_")},
        activation=hyper.activation if hyper else "relu",
        hyper=hyper,
    )
    return header, pool, model
