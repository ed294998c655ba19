"""Search orchestration: supernet training, child derivation, retraining,
evaluation, and the brute-force enumeration oracle.

One search run owns one thread. Operation weights step with SGD+momentum on
a cosine-annealed learning rate; architecture logits step with Adam. Both
groups update on every batch from a single backward pass.
"""

from __future__ import annotations

import itertools
import json
import logging
import pickle
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, Vocab, encode_batch
from .errors import ConfigError, DataError, TrainingError, ValidationError
from .losses import (LossConfig, attentive_kd_loss, build_cost_table,
                     child_cell_flops, child_op_param_count, efficiency_loss,
                     total_loss)
from .ops import ALL_OPERATIONS, CellTopology, ChildGraph, OperationKind
from .optim import Adam, SGDMomentum, cosine_lr
from .space import ArchSample, ChildNet, SuperNet, derive_child, sample_architecture
from .teacher import ProbeSet, TeacherView

log = logging.getLogger("adanas.engine")

CHECKPOINT_VERSION = 1


@dataclass
class SearchConfig:
    k_max: int = 8
    n_nodes: int = 3
    embed_dim: int = 128
    max_len: int = 128
    gamma: float = 0.8
    beta: float = 4.0
    kd_temp: float = 1.0
    epochs: int = 80
    tau_start: float = 5.0
    tau_end: float = 0.5
    sgd_momentum: float = 0.9
    sgd_lr_max: float = 2e-2
    sgd_lr_min: float = 5e-4
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    operations: tuple[str, ...] = tuple(op.value for op in ALL_OPERATIONS)
    child_epochs: int | None = None
    # epochs of soft-mixture forward passes before hard straight-through
    # sampling begins; soft passes train every candidate site per step
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("tau schedule endpoints must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        self.operations = tuple(self.operations)
        self.ops()  # validate names eagerly

    def ops(self) -> tuple[OperationKind, ...]:
        try:
            return tuple(OperationKind(name) for name in self.operations)
        except ValueError as exc:
            raise ConfigError(f"unknown operation in config: {exc}") from exc

    def loss_config(self) -> LossConfig:
        return LossConfig(gamma=self.gamma, beta=self.beta, temperature=self.kd_temp)

    def tau_at(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.tau_start
        frac = epoch / (self.epochs - 1)
        return self.tau_start + (self.tau_end - self.tau_start) * frac


@dataclass
class EpochRecord:
    epoch: int
    total: float
    ce: float
    kd: float
    eff: float
    tau: float
    entropy_k: float
    entropy_edges: float
    child: str
    child_params: int
    child_flops: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class SearchRunReport:
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    final_child: str = ""
    wall_time: float = 0.0

    def save(self, path) -> None:
        lines = [rec.to_json() for rec in self.epochs]
        Path(path).write_text("\n".join(lines) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_teacher_alignment(dataset: Dataset, view: TeacherView) -> None:
    missing = [ex.id for ex in dataset.train if ex.id not in view]
    if missing:
        raise DataError(f"{len(missing)} train examples missing from the teacher "
                        f"view (first: {missing[0]!r})")
    if view.num_classes != dataset.num_classes:
        raise DataError(f"teacher has {view.num_classes} classes, dataset has "
                        f"{dataset.num_classes}")


class _SearchState:
    """Everything a search run needs to stop and resume bit-exactly."""

    def __init__(self, config: SearchConfig, dataset: Dataset):
        self.config = config
        self.task_type = dataset.task_type
        self.vocab = Vocab.build(dataset, max_len=config.max_len)
        self.topology = CellTopology(config.n_nodes)
        self.net = SuperNet(self.topology, config.k_max, config.embed_dim,
                            len(self.vocab), dataset.num_classes,
                            seed=config.seed, operations=config.ops())
        self.w_opt = SGDMomentum(self.net.weight_tensors(),
                                 momentum=config.sgd_momentum)
        self.a_opt = Adam(self.net.arch.tensors(), lr=config.arch_lr,
                          weight_decay=config.arch_weight_decay)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0

    def _bn_states(self):
        states = []
        for layer in self.net.layers:
            for key in sorted(layer.ops, key=lambda k: (k[0], k[1].value)):
                states.append(layer.ops[key].bn_state)
        return states

    def save(self, path) -> None:
        blob = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "task_type": self.task_type,
            "epoch": self.epoch,
            "weights": [t.data.copy() for t in self.net.weight_tensors()],
            "arch": [t.data.copy() for t in self.net.arch.tensors()],
            "bn": [(s.running_mean.copy(), s.running_var.copy())
                   for s in self._bn_states()],
            "w_opt": self.w_opt.state_dict(),
            "a_opt": self.a_opt.state_dict(),
            "rng": self.rng.bit_generator.state,
        }
        with open(path, "wb") as fh:
            pickle.dump(blob, fh)

    @classmethod
    def load(cls, path, dataset: Dataset) -> "_SearchState":
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {blob.get('version')!r}")
        config = SearchConfig(**{**blob["config"],
                                 "operations": tuple(blob["config"]["operations"])})
        state = cls(config, dataset)
        for tensor, arr in zip(state.net.weight_tensors(), blob["weights"]):
            tensor.data = arr.copy()
        for tensor, arr in zip(state.net.arch.tensors(), blob["arch"]):
            tensor.data = arr.copy()
        for bn, (mean, var) in zip(state._bn_states(), blob["bn"]):
            bn.running_mean = mean.copy()
            bn.running_var = var.copy()
        state.w_opt.load_state_dict(blob["w_opt"])
        state.a_opt.load_state_dict(blob["a_opt"])
        state.rng.bit_generator.state = blob["rng"]
        state.epoch = blob["epoch"]
        return state


def load_checkpoint_arch(path):
    """Architecture logits, config, and task type out of a checkpoint file."""
    try:
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
    except (OSError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {blob.get('version')!r}")
    config = SearchConfig(**{**blob["config"],
                             "operations": tuple(blob["config"]["operations"])})
    return blob["arch"], config, blob.get("task_type", "single_text")


def derive_from_checkpoint(path) -> ChildGraph:
    """argmax child of the theta vectors stored in a checkpoint."""
    arch_arrays, config, task_type = load_checkpoint_arch(path)
    topology = CellTopology(config.n_nodes)
    operations = config.ops()
    from .space import ArchParams

    arch = ArchParams(config.k_max, topology.num_edges, len(operations))
    for tensor, arr in zip(arch.tensors(), arch_arrays):
        tensor.data = arr.copy()
    return derive_child(arch, topology, operations=operations,
                        task_type=task_type, embed_dim=config.embed_dim)


def search(config: SearchConfig, dataset: Dataset,
           view: TeacherView | None = None, probes: ProbeSet | None = None,
           out_dir=None, resume_from=None,
           stop_after_epoch: int | None = None) -> tuple[ChildGraph, SearchRunReport]:
    """Train the supernet, then derive the argmax child.

    ``stop_after_epoch`` halts the run once that epoch's checkpoint is
    written (used to exercise save/resume); resume with ``resume_from``.
    """
    started = time.perf_counter()
    use_kd = config.gamma > 0.0
    if use_kd:
        if view is None or probes is None:
            raise ValidationError("gamma > 0 requires a teacher view and trained probes")
        _check_teacher_alignment(dataset, view)

    if resume_from is not None:
        state = _SearchState.load(resume_from, dataset)
    else:
        state = _SearchState(config, dataset)
    config = state.config
    net, vocab = state.net, state.vocab
    loss_cfg = config.loss_config()
    table = build_cost_table(config.embed_dim, config.max_len)
    operations = config.ops()
    train = dataset.train
    if not train:
        raise ValidationError("dataset has no train examples")
    targets = {ex.id: ex.label for ex in train}

    out_dir = Path(out_dir) if out_dir is not None else None
    checkpoint_path = out_dir / "checkpoint.pkl" if out_dir else None
    last_good = str(checkpoint_path) if (checkpoint_path and resume_from) else "none"

    report = SearchRunReport(seed=config.seed)
    for epoch in range(state.epoch, config.epochs):
        net.arch.tau = config.tau_at(epoch)
        lr = cosine_lr(epoch, config.epochs, config.sgd_lr_max, config.sgd_lr_min)
        sums = {"total": 0.0, "ce": 0.0, "kd": 0.0, "eff": 0.0}
        n_batches = 0
        hard = epoch >= config.warmup_epochs
        for idx in _batches(len(train), config.batch_size, state.rng):
            examples = [train[i] for i in idx]
            ids = [ex.id for ex in examples]
            labels = np.array([targets[i] for i in ids], dtype=np.int64)
            with T.Tape() as tape:
                sample = sample_architecture(net.arch, state.rng, hard=hard)
                (in_a, in_b), _ = encode_batch(vocab, examples, dataset.task_type,
                                               embedding=net.embedding)
                out = net.forward(in_a, in_b, sample, bn_mode="train")
                ce = T.softmax_xent(out.final_logits,
                                    T.constant(T.one_hot(labels, dataset.num_classes)))
                if use_kd:
                    kd = attentive_kd_loss(view, probes, ids, out.layer_logits,
                                           sample.y_k, labels,
                                           temperature=config.kd_temp)
                else:
                    kd = T.constant(0.0)
                if config.beta > 0.0:
                    eff = efficiency_loss(sample.y_edges, sample.y_k, table,
                                          operations=operations)
                else:
                    eff = T.constant(0.0)
                total = total_loss(ce, kd, eff, loss_cfg)
            if not np.isfinite(total.data):
                raise TrainingError(
                    f"search diverged at epoch {epoch} (non-finite loss); "
                    f"last good checkpoint: {last_good}")
            _optimizer_step(state, tape, total, lr)
            sums["total"] += total.item()
            sums["ce"] += ce.item()
            sums["kd"] += kd.item()
            sums["eff"] += eff.item()
            n_batches += 1
        child_now = derive_child(net.arch, state.topology, operations=operations,
                                 task_type=dataset.task_type,
                                 embed_dim=config.embed_dim)
        record = EpochRecord(
            epoch=epoch,
            total=sums["total"] / n_batches,
            ce=sums["ce"] / n_batches,
            kd=sums["kd"] / n_batches,
            eff=sums["eff"] / n_batches,
            tau=net.arch.tau,
            entropy_k=net.arch.entropy_k(),
            entropy_edges=net.arch.mean_entropy_edges(),
            child=child_now.encode(),
            child_params=child_op_param_count(child_now, config.embed_dim),
            child_flops=child_cell_flops(child_now, table),
        )
        report.epochs.append(record)
        log.info("epoch %d: total=%.4f ce=%.4f kd=%.4f eff=%.4f child=%s",
                 epoch, record.total, record.ce, record.kd, record.eff, record.child)
        state.epoch = epoch + 1
        if checkpoint_path is not None:
            state.save(checkpoint_path)
            last_good = str(checkpoint_path)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    child = derive_child(net.arch, state.topology, operations=operations,
                         task_type=dataset.task_type, embed_dim=config.embed_dim)
    report.final_child = child.encode()
    report.wall_time = time.perf_counter() - started
    if out_dir is not None:
        child.save(out_dir / "child.json")
        report.save(out_dir / "report.jsonl")
    return child, report


def _optimizer_step(state: _SearchState, tape: T.Tape, total: T.Tensor, lr: float) -> None:
    state.w_opt.zero_grad()
    state.a_opt.zero_grad()
    tape.backward(total)
    state.w_opt.step(lr)
    state.a_opt.step()


# ---------------------------------------------------------------------------
# child training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class ChildMetrics:
    best_dev_accuracy: float
    best_epoch: int
    final_dev_accuracy: float
    final_dev_loss: float
    history: list[dict] = field(default_factory=list)


def evaluate(net: ChildNet, vocab: Vocab, examples, task_type: str,
             batch_size: int = 64) -> tuple[float, dict[int, dict[str, int]]]:
    """Deterministic accuracy plus per-class counts (eval-mode statistics)."""
    examples = list(examples)
    if not examples:
        raise ValidationError("cannot evaluate an empty split")
    correct = 0
    per_class: dict[int, dict[str, int]] = {}
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        (in_a, in_b), labels = encode_batch(vocab, chunk, task_type,
                                            embedding=net.embedding)
        logits = net.forward(in_a, in_b, bn_mode="eval")
        preds = logits.data.argmax(axis=1)
        for label, pred in zip(labels, preds):
            stats = per_class.setdefault(int(label), {"correct": 0, "total": 0})
            stats["total"] += 1
            if pred == label:
                stats["correct"] += 1
                correct += 1
    return correct / len(examples), per_class


def _dev_loss(net: ChildNet, vocab: Vocab, examples, task_type: str,
              num_classes: int, batch_size: int = 64) -> float:
    examples = list(examples)
    total = 0.0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        (in_a, in_b), labels = encode_batch(vocab, chunk, task_type,
                                            embedding=net.embedding)
        logits = net.forward(in_a, in_b, bn_mode="eval")
        loss = T.softmax_xent(logits, T.constant(T.one_hot(labels, num_classes)))
        total += loss.item() * len(chunk)
    return total / len(examples)


def train_child(child: ChildGraph, dataset: Dataset, config: SearchConfig,
                seed: int | None = None) -> tuple[ChildNet, ChildMetrics]:
    """Retrain a derived child from scratch with the weight-optimizer recipe."""
    seed = config.seed if seed is None else seed
    vocab = Vocab.build(dataset, max_len=config.max_len)
    net = ChildNet(child, vocab_size=len(vocab), num_classes=dataset.num_classes,
                   seed=seed)
    opt = SGDMomentum(net.weight_tensors(), momentum=config.sgd_momentum)
    rng = np.random.default_rng(seed)
    train = dataset.train
    dev = dataset.dev
    epochs = config.child_epochs or config.epochs
    best_acc, best_epoch = -1.0, -1
    history = []
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, config.sgd_lr_max, config.sgd_lr_min)
        for idx in _batches(len(train), config.batch_size, rng):
            chunk = [train[i] for i in idx]
            with T.Tape() as tape:
                (in_a, in_b), labels = encode_batch(vocab, chunk, dataset.task_type,
                                                    embedding=net.embedding)
                logits = net.forward(in_a, in_b, bn_mode="train")
                loss = T.softmax_xent(
                    logits, T.constant(T.one_hot(labels, dataset.num_classes)))
            if not np.isfinite(loss.data):
                raise TrainingError(f"child training diverged at epoch {epoch}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step(lr)
        acc, _ = evaluate(net, vocab, dev, dataset.task_type)
        history.append({"epoch": epoch, "dev_accuracy": acc, "lr": lr})
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
    final_loss = _dev_loss(net, vocab, dev, dataset.task_type, dataset.num_classes)
    final_acc, _ = evaluate(net, vocab, dev, dataset.task_type)
    metrics = ChildMetrics(best_dev_accuracy=best_acc, best_epoch=best_epoch,
                           final_dev_accuracy=final_acc, final_dev_loss=final_loss,
                           history=history)
    return net, metrics


# ---------------------------------------------------------------------------
# brute-force oracle over small spaces
# ---------------------------------------------------------------------------

ENUMERATION_GUARD = 500


@dataclass(frozen=True)
class EnumResult:
    child: ChildGraph
    dev_loss: float
    dev_accuracy: float


def all_children(config: SearchConfig, task_type: str) -> list[ChildGraph]:
    """Every discrete architecture in the configured space, sorted by encoding."""
    topology = CellTopology(config.n_nodes)
    operations = config.ops()
    total = config.k_max * len(operations) ** topology.num_edges
    if total > ENUMERATION_GUARD:
        raise ConfigError(f"enumeration space has {total} children, "
                          f"exceeding the guard of {ENUMERATION_GUARD}")
    children = []
    for k in range(1, config.k_max + 1):
        for combo in itertools.product(operations, repeat=topology.num_edges):
            ops = dict(zip(topology.edges, combo))
            children.append(ChildGraph(k=k, n_nodes=config.n_nodes, ops=ops,
                                       task_type=task_type,
                                       embed_dim=config.embed_dim))
    children.sort(key=lambda c: c.encode())
    return children


def enumerate_and_rank(config: SearchConfig, dataset: Dataset,
                       workers: int = 1) -> list[EnumResult]:
    """Train every child in the space with identical budgets; rank by dev loss."""
    children = all_children(config, dataset.task_type)

    def run(indexed):
        index, child = indexed
        seed = np.random.SeedSequence([config.seed, index]).generate_state(1)[0]
        _, metrics = train_child(child, dataset, config, seed=int(seed))
        return EnumResult(child=child, dev_loss=metrics.final_dev_loss,
                          dev_accuracy=metrics.final_dev_accuracy)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, enumerate(children)))
    else:
        results = [run(item) for item in enumerate(children)]
    results.sort(key=lambda r: (r.dev_loss, r.child.encode()))
    return results


def rank_of_child(results: list[EnumResult], child: ChildGraph) -> int:
    """1-based rank of ``child`` in an enumeration ranking."""
    encoding = child.encode()
    for position, result in enumerate(results, start=1):
        if result.child.encode() == encoding:
            return position
    raise ValidationError(f"child {encoding} not present in the ranking")
