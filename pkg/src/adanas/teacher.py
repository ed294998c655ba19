"""Frozen teacher knowledge: per-layer pooled states and probe classifiers.

A teacher is either synthesized in-process (a deep affine-relu encoder
fine-tuned on a toy task, then frozen) or loaded from the line-delimited
interchange format:

    header line: {"schema_version": 1, "J": ..., "H": ..., "num_classes": ...,
                  "pooling": "mean", "example_count": ...}
    one record per example: {"id": str, "label": int,
                             "layers": [base64(H little-endian float32), ... J]}

Records are order-insensitive; ids must be unique.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import TASK_PAIR, Dataset, Vocab, tokenize
from .errors import DataError, TrainingError, ValidationError
from .optim import Adam

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TeacherExample:
    id: str
    label: int
    layers: np.ndarray  # [J, H] float32


class TeacherView:
    """Immutable per-example, per-layer pooled teacher states."""

    def __init__(self, num_layers: int, hidden_dim: int, num_classes: int,
                 examples: list[TeacherExample], pooling: str = "mean"):
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        self.pooling = pooling
        self._examples: dict[str, TeacherExample] = {}
        for ex in examples:
            if ex.id in self._examples:
                raise DataError(f"duplicate teacher example id {ex.id!r}")
            if ex.layers.shape != (num_layers, hidden_dim):
                raise DataError(
                    f"teacher example {ex.id!r}: layer block has shape {ex.layers.shape}, "
                    f"expected ({num_layers}, {hidden_dim})")
            ex.layers.setflags(write=False)
            self._examples[ex.id] = ex

    @property
    def ids(self) -> list[str]:
        return list(self._examples)

    def __len__(self) -> int:
        return len(self._examples)

    def __contains__(self, example_id: str) -> bool:
        return example_id in self._examples

    def example(self, example_id: str) -> TeacherExample:
        try:
            return self._examples[example_id]
        except KeyError:
            raise DataError(f"unknown teacher example id {example_id!r}") from None

    def vectors(self, ids, layer: int) -> np.ndarray:
        """Pooled hidden states [B, H] for teacher layer ``layer`` in 1..J."""
        if not 1 <= layer <= self.num_layers:
            raise ValidationError(f"teacher layer {layer} outside [1, {self.num_layers}]")
        return np.stack([self.example(i).layers[layer - 1].astype(np.float64)
                         for i in ids])

    def labels(self, ids) -> np.ndarray:
        return np.array([self.example(i).label for i in ids], dtype=np.int64)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for example_id in sorted(self._examples):
            ex = self._examples[example_id]
            digest.update(example_id.encode())
            digest.update(str(ex.label).encode())
            digest.update(ex.layers.astype("<f4").tobytes())
        return digest.hexdigest()


def save_teacher(view: TeacherView, path) -> None:
    path = Path(path)
    header = {"schema_version": SCHEMA_VERSION, "J": view.num_layers,
              "H": view.hidden_dim, "num_classes": view.num_classes,
              "pooling": view.pooling, "example_count": len(view)}
    lines = [json.dumps(header, sort_keys=True)]
    for example_id in view.ids:
        ex = view.example(example_id)
        layers = [base64.b64encode(ex.layers[j].astype("<f4").tobytes()).decode("ascii")
                  for j in range(view.num_layers)]
        lines.append(json.dumps({"id": ex.id, "label": ex.label, "layers": layers},
                                sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_teacher(path) -> TeacherView:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read teacher file {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty teacher file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} line 1: bad header: {exc}") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema version {version!r}")
    try:
        j_total = int(header["J"])
        hidden = int(header["H"])
        num_classes = int(header["num_classes"])
        count = int(header["example_count"])
        pooling = header["pooling"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from exc

    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            example_id = rec["id"]
            label = int(rec["label"])
            encoded = rec["layers"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path} line {lineno}: malformed record: {exc}") from exc
        if len(encoded) != j_total:
            raise DataError(f"{path}: record {example_id!r} has {len(encoded)} layers, "
                            f"expected J={j_total}")
        rows = []
        for layer_idx, blob in enumerate(encoded):
            raw = base64.b64decode(blob)
            vec = np.frombuffer(raw, dtype="<f4")
            if vec.shape[0] != hidden:
                raise DataError(f"{path}: record {example_id!r} layer {layer_idx + 1} "
                                f"has {vec.shape[0]} floats, expected H={hidden}")
            rows.append(vec)
        if not 0 <= label < num_classes:
            raise DataError(f"{path}: record {example_id!r} label {label} outside "
                            f"[0, {num_classes})")
        examples.append(TeacherExample(id=example_id, label=label,
                                       layers=np.stack(rows)))
    if len(examples) != count:
        raise DataError(f"{path}: header promises {count} examples, found "
                        f"{len(examples)} (truncated or padded file)")
    return TeacherView(num_layers=j_total, hidden_dim=hidden,
                       num_classes=num_classes, examples=examples, pooling=pooling)


# ---------------------------------------------------------------------------
# probe classifiers
# ---------------------------------------------------------------------------

@dataclass
class ProbeSettings:
    lr: float = 3e-4
    weight_decay: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0


@dataclass
class ProbeSet:
    """One trained softmax classifier per teacher layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dev_accuracy: list[float]
    epochs: int
    _cache: dict[int, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def logits(self, x: np.ndarray, layer: int) -> np.ndarray:
        return x @ self.weights[layer - 1] + self.biases[layer - 1]

    def save(self, path) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "epochs": self.epochs,
            "dev_accuracy": self.dev_accuracy,
            "weights": [base64.b64encode(w.astype("<f8").tobytes()).decode("ascii")
                        for w in self.weights],
            "biases": [base64.b64encode(b.astype("<f8").tobytes()).decode("ascii")
                       for b in self.biases],
            "shapes": [list(w.shape) for w in self.weights],
        }
        Path(path).write_text(json.dumps(payload) + "\n")

    @classmethod
    def load(cls, path) -> "ProbeSet":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read probe file {path}: {exc}") from exc
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported probe schema version")
        weights = [np.frombuffer(base64.b64decode(blob), dtype="<f8").reshape(shape).copy()
                   for blob, shape in zip(payload["weights"], payload["shapes"])]
        biases = [np.frombuffer(base64.b64decode(blob), dtype="<f8").copy()
                  for blob in payload["biases"]]
        return cls(weights=weights, biases=biases,
                   dev_accuracy=payload["dev_accuracy"], epochs=payload["epochs"])


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _train_one_probe(x_train, y_train, x_dev, y_dev, num_classes,
                     settings: ProbeSettings, layer: int):
    rng = np.random.default_rng([settings.seed, layer])
    hidden = x_train.shape[1]
    # zero init: a bare linear classifier has no symmetry to break, and the
    # low distillation-style learning rate must not fight a random start
    w = T.parameter(np.zeros((hidden, num_classes)))
    b = T.parameter(np.zeros(num_classes))
    opt = Adam([w, b], lr=settings.lr, weight_decay=settings.weight_decay)
    n = x_train.shape[0]
    targets = T.one_hot(y_train, num_classes)
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            sel = order[start:start + settings.batch_size]
            with T.Tape() as tape:
                logits = T.add(T.matmul(T.constant(x_train[sel]), w), b)
                loss = T.softmax_xent(logits, T.constant(targets[sel]))
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
    dev_logits = x_dev @ w.data + b.data
    dev_acc = float((dev_logits.argmax(axis=1) == y_dev).mean())
    return w.data.copy(), b.data.copy(), dev_acc


def train_probes(view: TeacherView, train_ids, dev_ids,
                 settings: ProbeSettings | None = None) -> ProbeSet:
    """Fit one softmax probe per teacher layer on frozen pooled states."""
    settings = settings or ProbeSettings()
    y_train = view.labels(train_ids)
    y_dev = view.labels(dev_ids)
    if np.unique(y_train).size < 2:
        raise DataError("degenerate task: probe training data has a single class")
    weights, biases, accs = [], [], []
    for layer in range(1, view.num_layers + 1):
        x_train = view.vectors(train_ids, layer)
        x_dev = view.vectors(dev_ids, layer)
        w, b, acc = _train_one_probe(x_train, y_train, x_dev, y_dev,
                                     view.num_classes, settings, layer)
        weights.append(w)
        biases.append(b)
        accs.append(acc)
    return ProbeSet(weights=weights, biases=biases, dev_accuracy=accs,
                    epochs=settings.epochs)


def retrain_layer(probes: ProbeSet, view: TeacherView, layer: int, train_ids,
                  dev_ids, settings: ProbeSettings | None = None) -> None:
    """Retrain a single probe in place; other layers are untouched."""
    settings = settings or ProbeSettings()
    y_train = view.labels(train_ids)
    y_dev = view.labels(dev_ids)
    w, b, acc = _train_one_probe(view.vectors(train_ids, layer), y_train,
                                 view.vectors(dev_ids, layer), y_dev,
                                 view.num_classes, settings, layer)
    probes.weights[layer - 1] = w
    probes.biases[layer - 1] = b
    probes.dev_accuracy[layer - 1] = acc
    probes._cache.pop(layer, None)


def teacher_probe_probs(view: TeacherView, probes: ProbeSet, ids,
                        layer: int) -> np.ndarray:
    """Softmax outputs of probe ``layer`` for the requested examples (cached)."""
    if not 1 <= layer <= probes.num_layers:
        raise ValidationError(f"probe layer {layer} outside [1, {probes.num_layers}]")
    cache = probes._cache.setdefault(layer, {})
    missing = [i for i in ids if i not in cache]
    if missing:
        probs = _softmax_rows(probes.logits(view.vectors(missing, layer), layer))
        for example_id, row in zip(missing, probs):
            row.setflags(write=False)
            cache[example_id] = row
    return np.stack([cache[i] for i in ids])


# ---------------------------------------------------------------------------
# synthetic teacher
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTeacherSettings:
    target_accuracy: float = 0.9
    max_epochs: int = 200
    lr: float = 1e-2
    batch_size: int = 32


def _pooled_features(dataset: Dataset, embed: np.ndarray, vocab: Vocab,
                     examples) -> np.ndarray:
    """Mean of (frozen, random) token embeddings; pairs concatenate sides."""

    def pool(text: str) -> np.ndarray:
        ids = [vocab.token_to_id.get(tok, 1) for tok in tokenize(text)][:vocab.max_len]
        if not ids:
            return np.zeros(embed.shape[1])
        return embed[ids].mean(axis=0)

    rows = []
    for ex in examples:
        vec = pool(ex.text_a)
        if dataset.task_type == TASK_PAIR:
            vec = np.concatenate([vec, pool(ex.text_b)])
        rows.append(vec)
    return np.stack(rows)


def synthetic_teacher(dataset: Dataset, num_layers: int = 12, hidden_dim: int = 64,
                      seed: int = 0,
                      settings: SyntheticTeacherSettings | None = None) -> TeacherView:
    """Fine-tune a deep affine-relu encoder on the task, freeze it, and emit
    per-layer hidden states for every example."""
    settings = settings or SyntheticTeacherSettings()
    rng = np.random.default_rng(seed)
    vocab = Vocab.build(dataset, max_len=128)
    embed = rng.normal(scale=1.0, size=(len(vocab), hidden_dim))
    in_dim = hidden_dim * (2 if dataset.task_type == TASK_PAIR else 1)

    layers_w, layers_b = [], []
    dims = [in_dim] + [hidden_dim] * num_layers
    for j in range(num_layers):
        bound = np.sqrt(6.0 / dims[j])
        layers_w.append(T.parameter(rng.uniform(-bound, bound,
                                                size=(dims[j], hidden_dim))))
        layers_b.append(T.parameter(np.zeros(hidden_dim)))
    bound = np.sqrt(6.0 / hidden_dim)
    head_w = T.parameter(rng.uniform(-bound, bound,
                                     size=(hidden_dim, dataset.num_classes)))
    head_b = T.parameter(np.zeros(dataset.num_classes))
    params = [t for wb in zip(layers_w, layers_b) for t in wb] + [head_w, head_b]

    train = dataset.train
    x_train = _pooled_features(dataset, embed, vocab, train)
    y_train = np.array([ex.label for ex in train], dtype=np.int64)
    targets = T.one_hot(y_train, dataset.num_classes)

    def run_stack(feats: np.ndarray, collect: bool = False):
        h = T.constant(feats)
        collected = []
        for w, b in zip(layers_w, layers_b):
            h = T.relu(T.add(T.matmul(h, w), b))
            if collect:
                collected.append(h.data.copy())
        logits = T.add(T.matmul(h, head_w), head_b)
        return logits, collected

    opt = Adam(params, lr=settings.lr)
    n = len(train)
    reached = None
    for epoch in range(settings.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            sel = order[start:start + settings.batch_size]
            with T.Tape() as tape:
                logits, _ = run_stack(x_train[sel])
                loss = T.softmax_xent(logits, T.constant(targets[sel]))
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
        logits, _ = run_stack(x_train)
        acc = float((logits.data.argmax(axis=1) == y_train).mean())
        if acc >= settings.target_accuracy:
            reached = (epoch + 1, acc)
            break
    if reached is None:
        raise TrainingError(
            f"synthetic teacher failed to reach train accuracy "
            f"{settings.target_accuracy} within {settings.max_epochs} epochs "
            f"(final accuracy {acc:.3f}, {n} examples, J={num_layers}, H={hidden_dim})")

    examples = []
    all_examples = list(dataset.examples)
    feats = _pooled_features(dataset, embed, vocab, all_examples)
    _, collected = run_stack(feats, collect=True)
    states = np.stack(collected, axis=1)  # [B, J, H]
    for ex, block in zip(all_examples, states):
        examples.append(TeacherExample(id=ex.id, label=ex.label,
                                       layers=block.astype(np.float32)))
    return TeacherView(num_layers=num_layers, hidden_dim=hidden_dim,
                       num_classes=dataset.num_classes, examples=examples)
