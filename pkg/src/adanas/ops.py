"""Candidate operations, cell topology, and discrete child architectures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import DataError, ValidationError

CHILD_SCHEMA_VERSION = 1


class OperationKind(Enum):
    STD_CONV_3 = "std_conv_3"
    STD_CONV_5 = "std_conv_5"
    STD_CONV_7 = "std_conv_7"
    DIL_CONV_3 = "dil_conv_3"
    DIL_CONV_5 = "dil_conv_5"
    DIL_CONV_7 = "dil_conv_7"
    MAX_POOL_3 = "max_pool_3"
    AVG_POOL_3 = "avg_pool_3"
    SKIP = "skip"
    ZERO = "zero"

    @property
    def is_conv(self) -> bool:
        return self.value.endswith(("conv_3", "conv_5", "conv_7"))

    @property
    def is_pool(self) -> bool:
        return self in (OperationKind.MAX_POOL_3, OperationKind.AVG_POOL_3)

    @property
    def kernel_size(self) -> int:
        if self.is_conv:
            return int(self.value[-1])
        if self.is_pool:
            return 3
        return 0

    @property
    def dilation(self) -> int:
        return 2 if self.value.startswith("dil_") else 1


ALL_OPERATIONS: tuple[OperationKind, ...] = tuple(OperationKind)


@dataclass(frozen=True)
class CellTopology:
    """DAG over two input nodes (0, 1) and N intermediate nodes (2..N+1)."""

    n_nodes: int = 3

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return tuple((i, j)
                     for j in range(2, self.n_nodes + 2)
                     for i in range(j))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def incoming(self, node: int) -> list[tuple[int, tuple[int, int]]]:
        """(edge_index, edge) pairs whose destination is ``node``."""
        return [(idx, e) for idx, e in enumerate(self.edges) if e[1] == node]


@dataclass
class ChildGraph:
    """Discrete architecture: a layer count plus one operation per edge."""

    k: int
    n_nodes: int
    ops: dict[tuple[int, int], OperationKind]
    task_type: str = "single_text"
    embed_dim: int = 128

    def __post_init__(self):
        topo = CellTopology(self.n_nodes)
        expected = set(topo.edges)
        if set(self.ops) != expected:
            raise ValidationError(
                f"child must assign exactly the {len(expected)} edges of N={self.n_nodes}")
        if self.k < 1:
            raise ValidationError(f"child layer count must be >= 1, got {self.k}")

    @property
    def topology(self) -> CellTopology:
        return CellTopology(self.n_nodes)

    def encode(self) -> str:
        """Canonical one-line encoding, stable across runs."""
        parts = [f"{i}-{j}:{op.value}" for (i, j), op in sorted(self.ops.items())]
        return f"K{self.k}|" + ",".join(parts)

    def to_dict(self) -> dict:
        return {
            "schema_version": CHILD_SCHEMA_VERSION,
            "task_type": self.task_type,
            "k": self.k,
            "n_nodes": self.n_nodes,
            "embed_dim": self.embed_dim,
            "edges": [{"from": i, "to": j, "op": op.value}
                      for (i, j), op in sorted(self.ops.items())],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ChildGraph":
        version = payload.get("schema_version")
        if version != CHILD_SCHEMA_VERSION:
            raise DataError(f"unsupported child schema version {version!r}")
        try:
            ops = {}
            for rec in payload["edges"]:
                try:
                    op = OperationKind(rec["op"])
                except ValueError:
                    raise ValidationError(f"unknown operation {rec['op']!r} in child file")
                ops[(int(rec["from"]), int(rec["to"]))] = op
            return cls(k=int(payload["k"]), n_nodes=int(payload["n_nodes"]), ops=ops,
                       task_type=payload.get("task_type", "single_text"),
                       embed_dim=int(payload.get("embed_dim", 128)))
        except KeyError as exc:
            raise DataError(f"child file missing field {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ChildGraph":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"child file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)
