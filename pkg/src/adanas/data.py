"""Dataset loading, vocabulary, batching, toy-task generation, augmentation.

Datasets are UTF-8 tab-separated files with a header row: either
``text<TAB>label`` (single-text tasks) or ``text_a<TAB>text_b<TAB>label``
(text-pair tasks). Row order assigns stable example ids and the
deterministic train/dev split (every fifth row is dev).
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ValidationError
from .tensor import Tensor

log = logging.getLogger("adanas.data")

TASK_SINGLE = "single_text"
TASK_PAIR = "text_pair"
PAD_ID = 0
UNK_ID = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass(frozen=True)
class Example:
    id: str
    text_a: str
    text_b: str | None
    label: int
    split: str  # "train" or "dev"


@dataclass(frozen=True)
class Dataset:
    task_type: str
    examples: tuple[Example, ...]
    num_classes: int

    def __post_init__(self):
        if self.task_type not in (TASK_SINGLE, TASK_PAIR):
            raise ConfigError(f"unknown task type {self.task_type!r}")
        for ex in self.examples:
            has_b = ex.text_b is not None
            if has_b != (self.task_type == TASK_PAIR):
                raise DataError(f"example {ex.id}: text_b presence does not match task type")
            if not 0 <= ex.label < self.num_classes:
                raise DataError(f"example {ex.id}: label {ex.label} outside "
                                f"[0, {self.num_classes})")

    def split_examples(self, split: str) -> list[Example]:
        return [ex for ex in self.examples if ex.split == split]

    @property
    def train(self) -> list[Example]:
        return self.split_examples("train")

    @property
    def dev(self) -> list[Example]:
        return self.split_examples("dev")


def _split_for_row(index: int) -> str:
    return "dev" if index % 5 == 4 else "train"


def sniff_task_type(path) -> str:
    """Infer single-text vs text-pair from the TSV header row."""
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if header == ["text", "label"]:
        return TASK_SINGLE
    if header == ["text_a", "text_b", "label"]:
        return TASK_PAIR
    raise DataError(f"{path}: unrecognized header {header}")


def load_dataset(path, task_type: str) -> Dataset:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty dataset file")
    header = lines[0].split("\t")
    if task_type == TASK_SINGLE:
        wanted = ["text", "label"]
    elif task_type == TASK_PAIR:
        wanted = ["text_a", "text_b", "label"]
    else:
        raise ConfigError(f"unknown task type {task_type!r}")
    if header != wanted:
        raise DataError(f"{path} line 1: expected columns {wanted}, got {header}")

    examples = []
    labels = []
    for row, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != len(wanted):
            raise DataError(f"{path} line {row}: expected {len(wanted)} columns, "
                            f"got {len(cols)}")
        try:
            label = int(cols[-1])
        except ValueError:
            raise DataError(f"{path} line {row}: label {cols[-1]!r} is not an integer")
        if label < 0:
            raise DataError(f"{path} line {row}: negative label {label}")
        idx = row - 2
        text_b = cols[1] if task_type == TASK_PAIR else None
        examples.append(Example(id=f"r{idx}", text_a=cols[0], text_b=text_b,
                                label=label, split=_split_for_row(idx)))
        labels.append(label)
    if not examples:
        raise DataError(f"{path}: no example rows")
    return Dataset(task_type=task_type, examples=tuple(examples),
                   num_classes=max(labels) + 1)


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    rows = []
    if dataset.task_type == TASK_SINGLE:
        rows.append("text\tlabel")
        for ex in dataset.examples:
            rows.append(f"{ex.text_a}\t{ex.label}")
    else:
        rows.append("text_a\ttext_b\tlabel")
        for ex in dataset.examples:
            rows.append(f"{ex.text_a}\t{ex.text_b}\t{ex.label}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


class Vocab:
    """Token index built from the train split; 0 is padding, 1 is unknown."""

    def __init__(self, tokens: list[str], max_len: int = 128):
        self.max_len = max_len
        self.token_to_id = {tok: i + 2 for i, tok in enumerate(tokens)}

    @classmethod
    def build(cls, dataset: Dataset, max_len: int = 128) -> "Vocab":
        seen = set()
        for ex in dataset.train:
            seen.update(tokenize(ex.text_a))
            if ex.text_b is not None:
                seen.update(tokenize(ex.text_b))
        return cls(sorted(seen), max_len=max_len)

    def __len__(self) -> int:
        return len(self.token_to_id) + 2

    def encode(self, text: str) -> np.ndarray:
        ids = [self.token_to_id.get(tok, UNK_ID) for tok in tokenize(text)]
        ids = ids[:self.max_len]
        if not ids:
            log.warning("text maps to an all-padding row after tokenization")
        padded = np.full(self.max_len, PAD_ID, dtype=np.int64)
        padded[:len(ids)] = ids
        return padded


def encode_batch(vocab: Vocab, examples, task_type: str,
                 embedding: Tensor | None = None):
    """Token-id (or embedded) layer-1 inputs plus the label vector.

    Without ``embedding`` the inputs are int arrays [B, max_len]; with the
    trainable table they are tensors [B, embed_dim, max_len]. Single-text
    tasks return the same object for both inputs.
    """
    examples = list(examples)
    ids_a = np.stack([vocab.encode(ex.text_a) for ex in examples])
    if task_type == TASK_PAIR:
        ids_b = np.stack([vocab.encode(ex.text_b) for ex in examples])
    else:
        ids_b = ids_a
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    if embedding is None:
        return (ids_a, ids_b), labels
    emb_a = T.embedding(embedding, ids_a)
    emb_b = emb_a if ids_b is ids_a else T.embedding(embedding, ids_b)
    return (emb_a, emb_b), labels


# ---------------------------------------------------------------------------
# toy tasks with planted, exhaustively decidable rules
# ---------------------------------------------------------------------------

TOY_KINDS = ("keyword_sentiment", "pair_overlap_equivalence", "pair_order_entailment")


def _token_pool(vocab_size: int) -> list[str]:
    return [f"w{i:03d}" for i in range(vocab_size)]


def _is_subsequence(needle: list[str], haystack: list[str]) -> bool:
    it = iter(haystack)
    return all(tok in it for tok in needle)


def rule_oracle(kind: str):
    """The planted labeling rule; decides any example with certainty."""
    if kind == "keyword_sentiment":
        planted = _token_pool(1)[0]
        return lambda ex: int(planted in tokenize(ex.text_a))
    if kind == "pair_overlap_equivalence":
        def overlap(ex):
            a, b = set(tokenize(ex.text_a)), set(tokenize(ex.text_b))
            return int(len(a & b) / len(a | b) >= 0.5)
        return overlap
    if kind == "pair_order_entailment":
        return lambda ex: int(_is_subsequence(tokenize(ex.text_a), tokenize(ex.text_b)))
    raise ConfigError(f"unknown toy task kind {kind!r}")


def toy_task_generator(kind: str, size: int, vocab_size: int, seed: int,
                       length_range: tuple[int, int] = (6, 12)) -> Dataset:
    if kind not in TOY_KINDS:
        raise ConfigError(f"unknown toy task kind {kind!r}; choose from {TOY_KINDS}")
    if vocab_size < 20:
        raise ConfigError(f"vocab_size must be >= 20, got {vocab_size}")
    if size < 100:
        raise ValidationError(f"toy task size must be >= 100, got {size}")
    rng = np.random.default_rng(seed)
    pool = _token_pool(vocab_size)
    oracle = rule_oracle(kind)
    task_type = TASK_SINGLE if kind == "keyword_sentiment" else TASK_PAIR

    examples = []
    for i in range(size):
        target = i % 2
        for _ in range(200):
            if kind == "keyword_sentiment":
                length = int(rng.integers(length_range[0], length_range[1] + 1))
                toks = list(rng.choice(pool[1:], size=length))
                if target == 1:
                    toks[int(rng.integers(0, length))] = pool[0]
                text_a, text_b = " ".join(toks), None
            elif kind == "pair_overlap_equivalence":
                a = list(rng.choice(pool, size=int(rng.integers(6, 11)), replace=False))
                if target == 1:
                    b = list(a)
                    if rng.random() < 0.8:
                        b[int(rng.integers(0, len(b)))] = str(rng.choice(pool))
                    rng.shuffle(b)
                else:
                    b = list(rng.choice(pool, size=int(rng.integers(6, 11)), replace=False))
                text_a, text_b = " ".join(a), " ".join(b)
            else:  # pair_order_entailment
                b = list(rng.choice(pool, size=int(rng.integers(9, 15)), replace=False))
                a_len = int(rng.integers(5, 9))
                if target == 1:
                    positions = sorted(rng.choice(len(b), size=a_len, replace=False))
                    a = [b[p] for p in positions]
                elif rng.random() < 0.15:
                    # hard negative: tokens of b in scrambled order
                    positions = list(rng.choice(len(b), size=a_len, replace=False))
                    a = [b[p] for p in positions]
                    while a == sorted(a, key=b.index):
                        rng.shuffle(a)
                else:
                    a = list(rng.choice(pool, size=a_len, replace=False))
                text_a, text_b = " ".join(a), " ".join(b)
            candidate = Example(id=f"r{i}", text_a=text_a, text_b=text_b,
                                label=0, split=_split_for_row(i))
            if oracle(candidate) == target:
                examples.append(replace(candidate, label=target))
                break
        else:
            raise ValidationError(f"could not generate a label-{target} {kind} example")
    return Dataset(task_type=task_type, examples=tuple(examples), num_classes=2)


def augment(dataset: Dataset, replace_prob: float, seed: int, copies: int = 1) -> Dataset:
    """Uniform random in-vocabulary token replacement over the train split.

    Originals are retained; each train example gains ``copies`` perturbed
    twins whose labels are preserved. The replacement token always differs
    from the original.
    """
    if not 0.0 <= replace_prob <= 1.0:
        raise ConfigError(f"replace_prob must lie in [0, 1], got {replace_prob}")
    if replace_prob == 0.0 or copies < 1:
        return dataset
    rng = np.random.default_rng(seed)
    pool = sorted({tok for ex in dataset.train
                   for tok in tokenize(ex.text_a) + (tokenize(ex.text_b) if ex.text_b else [])})
    if len(pool) < 2:
        return dataset

    def perturb(text: str) -> str:
        toks = tokenize(text)
        out = []
        for tok in toks:
            if rng.random() < replace_prob:
                choice = tok
                while choice == tok:
                    choice = pool[int(rng.integers(0, len(pool)))]
                out.append(choice)
            else:
                out.append(tok)
        return " ".join(out)

    new_examples = list(dataset.examples)
    for ex in dataset.train:
        for c in range(copies):
            new_examples.append(replace(
                ex, id=f"aug{c}-{ex.id}", text_a=perturb(ex.text_a),
                text_b=perturb(ex.text_b) if ex.text_b is not None else None))
    return Dataset(task_type=dataset.task_type, examples=tuple(new_examples),
                   num_classes=dataset.num_classes)
