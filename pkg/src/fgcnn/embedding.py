"""Dual embedding tables and batched field-embedding assembly.

One flat table holds a row per one-hot feature; a field's global row is its
local index plus the field offset. Two same-shaped tables are kept: one feeds
feature generation, the other the classifier's raw-feature path, so the two
gradient streams never mix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch, DataError, DatasetSchema


@dataclass
class EmbeddingTable:
    weights: np.ndarray           # [t_f, k]
    offsets: np.ndarray           # [n_f]
    field_names: tuple[str, ...]
    cardinalities: tuple[int, ...]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    @property
    def t_f(self) -> int:
        return self.weights.shape[0]


@dataclass
class DualEmbeddings:
    gen_table: EmbeddingTable   # feeds feature generation
    clf_table: EmbeddingTable   # feeds the classifier's raw path


def _table_from_schema(schema: DatasetSchema, weights: np.ndarray) -> EmbeddingTable:
    return EmbeddingTable(
        weights=weights,
        offsets=schema.offsets(),
        field_names=tuple(schema.field_names()),
        cardinalities=tuple(f.cardinality for f in schema.fields),
    )


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_embedding_table(schema: DatasetSchema, k: int, rng: np.random.Generator,
                         dtype=np.float32) -> EmbeddingTable:
    if k < 1:
        raise ValueError(f"embedding size must be >= 1, got {k}")
    weights = glorot_uniform(rng, schema.t_f, k, (schema.t_f, k), dtype)
    return _table_from_schema(schema, weights)


def init_embeddings(schema: DatasetSchema, k: int, seed: int,
                    dtype=np.float32) -> DualEmbeddings:
    """Glorot-uniform init of both tables; deterministic under the seed."""
    rng = np.random.default_rng(seed)
    gen = init_embedding_table(schema, k, rng, dtype)
    clf = init_embedding_table(schema, k, rng, dtype)
    return DualEmbeddings(gen_table=gen, clf_table=clf)


def _validate_indices(batch: Batch, table: EmbeddingTable) -> None:
    idx = batch.indices
    mask = batch.value_mask
    if idx.shape[1] != len(table.cardinalities):
        raise DataError(
            f"batch has {idx.shape[1]} fields but table expects {len(table.cardinalities)}")
    card = np.asarray(table.cardinalities)[None, :, None]
    bad = (mask > 0) & ((idx < 0) | (idx >= card))
    if np.any(bad):
        b, f, v = np.argwhere(bad)[0]
        raise DataError(
            f"feature index {int(idx[b, f, v])} out of range for field "
            f"{table.field_names[f]!r} (cardinality {table.cardinalities[f]})")


def assemble_embedding_matrix(batch: Batch, table: EmbeddingTable) -> np.ndarray:
    """Per-field embeddings [b, n_f, k]; multivalent fields sum their values'
    embeddings, masked positions contribute nothing."""
    _validate_indices(batch, table)
    global_idx = batch.indices + table.offsets[None, :, None]
    rows = table.weights[global_idx]                       # [b, n_f, v, k]
    mask = batch.value_mask.astype(table.weights.dtype)
    return (rows * mask[..., None]).sum(axis=2)


def backward_embedding(grad_output: np.ndarray, batch: Batch,
                       table: EmbeddingTable) -> np.ndarray:
    """Adjoint of assemble: accumulate each output-row gradient into the rows
    that were looked up; untouched rows stay zero."""
    b, n_f, max_vals = batch.indices.shape
    if grad_output.shape != (b, n_f, table.k):
        raise ValueError(
            f"grad_output shape {grad_output.shape} does not match batch "
            f"({b}, {n_f}, {table.k})")
    global_idx = batch.indices + table.offsets[None, :, None]
    mask = batch.value_mask.astype(grad_output.dtype)
    contrib = grad_output[:, :, None, :] * mask[..., None]  # [b, n_f, v, k]
    grad = np.zeros_like(table.weights, dtype=grad_output.dtype)
    np.add.at(grad, global_idx.ravel(), contrib.reshape(-1, table.k))
    return grad
