"""Run a frozen pretrained transformer over a dataset and write per-layer
mean-pooled hidden states in the teacher interchange format.

Interchange format (line-delimited JSON, one header then one record per
example):

    {"schema_version": 1, "J": ..., "H": ..., "num_classes": ...,
     "pooling": "mean", "example_count": ...}
    {"id": "r0", "label": 0, "layers": [base64(H little-endian float32), ...]}

Layer j of record i is the mean over non-padding token positions of encoder
layer j's hidden states for example i. The model is never updated.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

log = logging.getLogger("teacher_export")

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExportManifest:
    model: str
    dataset: str
    num_layers: int
    hidden_dim: int
    pooling: str
    example_count: int
    checksum: str

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def read_tsv_dataset(path) -> tuple[list[dict], int]:
    """Parse the tab-separated dataset format; returns (rows, num_classes).

    Rows carry ``id`` (by row order), ``text_a``, optional ``text_b``,
    and integer ``label``.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = lines[0].split("\t")
    if header == ["text", "label"]:
        pair = False
    elif header == ["text_a", "text_b", "label"]:
        pair = True
    else:
        raise ValueError(f"{path}: unrecognized header {header}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != len(header):
            raise ValueError(f"{path} line {lineno}: expected {len(header)} columns")
        label = int(cols[-1])
        rows.append({
            "id": f"r{lineno - 2}",
            "text_a": cols[0],
            "text_b": cols[1] if pair else None,
            "label": label,
        })
    if not rows:
        raise ValueError(f"{path}: no example rows")
    num_classes = max(r["label"] for r in rows) + 1
    return rows, num_classes


def _mean_pool(hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Average token states over non-padding positions: [B, L, H] -> [B, H]."""
    weights = mask.unsqueeze(-1).to(hidden.dtype)
    summed = (hidden * weights).sum(dim=1)
    counts = weights.sum(dim=1).clamp(min=1.0)
    return summed / counts


def export(model_id: str, dataset_path, out_path, max_len: int = 128,
           batch_size: int = 16) -> ExportManifest:
    """Write the interchange file for ``dataset_path`` using ``model_id``.

    ``model_id`` may be a hub identifier or a local directory. Deterministic
    given the model and inputs; the model runs frozen in eval mode.
    """
    rows, num_classes = read_tsv_dataset(dataset_path)
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModel.from_pretrained(model_id, output_hidden_states=True)
    model.eval()
    num_layers = model.config.num_hidden_layers
    hidden_dim = model.config.hidden_size

    out_path = Path(out_path)
    header = {"schema_version": SCHEMA_VERSION, "J": num_layers, "H": hidden_dim,
              "num_classes": num_classes, "pooling": "mean",
              "example_count": len(rows)}
    lines = [json.dumps(header, sort_keys=True)]

    overflow = 0
    with torch.no_grad():
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            texts_a = [r["text_a"] for r in chunk]
            texts_b = [r["text_b"] for r in chunk] if chunk[0]["text_b"] is not None else None
            probe = tokenizer(texts_a, texts_b, padding=False, truncation=False)
            overflow += sum(len(ids) > max_len for ids in probe["input_ids"])
            encoded = tokenizer(texts_a, texts_b, padding=True, truncation=True,
                                max_length=max_len, return_tensors="pt")
            outputs = model(**encoded)
            # hidden_states[0] is the embedding layer; 1..J are encoder layers
            mask = encoded["attention_mask"]
            pooled = [_mean_pool(outputs.hidden_states[j], mask)
                      for j in range(1, num_layers + 1)]
            stacked = torch.stack(pooled, dim=1).cpu().numpy()  # [B, J, H]
            for row, block in zip(chunk, stacked):
                layers = [base64.b64encode(block[j].astype("<f4").tobytes()).decode("ascii")
                          for j in range(num_layers)]
                lines.append(json.dumps({"id": row["id"], "label": row["label"],
                                         "layers": layers}, sort_keys=True))
    if overflow:
        log.warning("%d examples exceeded max_len=%d and were truncated",
                    overflow, max_len)

    payload = "\n".join(lines) + "\n"
    out_path.write_text(payload, encoding="utf-8")
    checksum = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    manifest = ExportManifest(model=str(model_id), dataset=str(dataset_path),
                              num_layers=num_layers, hidden_dim=hidden_dim,
                              pooling="mean", example_count=len(rows),
                              checksum=checksum)
    manifest.save(str(out_path) + ".manifest.json")
    return manifest
