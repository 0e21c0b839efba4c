"""Multi-field categorical data: vocabularies, bucketing, negative sampling,
batching, field permutation, synthetic generation, and the dataset file format.

Dataset files are UTF-8 CSV: the first row names the fields plus a "label"
column, one column per field, multivalent values joined by "|". A fitted
vocabulary is persisted as a versioned text sidecar.
"""
from __future__ import annotations

import csv
import hashlib
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

DUMMY_TOKEN = "other"
VALUE_SEP = "|"
LABEL_COLUMN = "label"
SCHEMA_MAGIC = "fgcnn-schema"
SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed input data, invalid parameters, or incompatible schema."""


# ---------------------------------------------------------------------------
# schema types

@dataclass
class FieldSchema:
    """Vocabulary of one categorical field.

    Index 0 is reserved for the rare-token dummy; retained tokens occupy
    1..cardinality-1 in first-seen order.
    """
    field_name: str
    token_to_index: dict[str, int]
    multivalent: bool = False

    @property
    def cardinality(self) -> int:
        return len(self.token_to_index) + 1

    def encode(self, token: str) -> int:
        return self.token_to_index.get(token, 0)

    def tokens_in_index_order(self) -> list[str]:
        toks = sorted(self.token_to_index.items(), key=lambda kv: kv[1])
        return [t for t, _ in toks]

    def decode(self, index: int) -> str:
        if index == 0:
            return DUMMY_TOKEN
        return self.tokens_in_index_order()[index - 1]


@dataclass
class DatasetSchema:
    """Ordered field vocabularies; the field order is part of the contract."""
    fields: list[FieldSchema]
    min_count: int = 1

    @property
    def n_f(self) -> int:
        return len(self.fields)

    @property
    def t_f(self) -> int:
        return sum(f.cardinality for f in self.fields)

    def offsets(self) -> np.ndarray:
        """Global row offset of each field in the flat feature space."""
        card = [f.cardinality for f in self.fields]
        return np.concatenate([[0], np.cumsum(card[:-1])]).astype(np.int64)

    def field_names(self) -> list[str]:
        return [f.field_name for f in self.fields]

    def to_text(self) -> str:
        lines = [f"{SCHEMA_MAGIC} {SCHEMA_VERSION}", f"min_count {self.min_count}",
                 f"fields {self.n_f}"]
        for f in self.fields:
            kind = "multivalent" if f.multivalent else "univalent"
            lines.append(f"field {f.field_name} {kind} {f.cardinality}")
            lines.extend(f.tokens_in_index_order())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetSchema":
        lines = text.splitlines()
        try:
            magic, version = lines[0].split()
            if magic != SCHEMA_MAGIC:
                raise DataError(f"not a schema file (magic {magic!r})")
            if int(version) != SCHEMA_VERSION:
                raise DataError(f"unsupported schema version {version}")
            min_count = int(lines[1].split()[1])
            n_fields = int(lines[2].split()[1])
            fields: list[FieldSchema] = []
            pos = 3
            for _ in range(n_fields):
                _, name, kind, card = lines[pos].split()
                pos += 1
                n_tokens = int(card) - 1
                tokens = lines[pos:pos + n_tokens]
                pos += n_tokens
                mapping = {tok: i + 1 for i, tok in enumerate(tokens)}
                if len(mapping) != n_tokens:
                    raise DataError(f"duplicate tokens in field {name!r}")
                fields.append(FieldSchema(name, mapping, multivalent=(kind == "multivalent")))
        except (IndexError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed schema file: {exc}") from exc
        return cls(fields=fields, min_count=min_count)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class Instance:
    """One example: per-field local feature indices plus a binary label."""
    per_field_indices: tuple[tuple[int, ...], ...]
    label: int


@dataclass
class Batch:
    """Densified instances. indices/value_mask are [b, n_f, max_vals]; padded
    positions carry index 0 and mask 0 so they contribute nothing to sums."""
    indices: np.ndarray
    value_mask: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.indices.shape[0]


@dataclass
class IngestStats:
    rows: int = 0
    truncated_values: int = 0
    unknown_tokens: int = 0


# ---------------------------------------------------------------------------
# vocabulary fitting and encoding

TokenRow = Sequence[Sequence[str]]


def build_vocab(field_names: Sequence[str], rows: Sequence[TokenRow],
                min_count: int) -> DatasetSchema:
    """Fit per-field vocabularies over a token table.

    Tokens seen fewer than min_count times map to the dummy index 0; all other
    tokens get unique indices in first-seen order.
    """
    if min_count < 1:
        raise DataError(f"min_count must be >= 1, got {min_count}")
    if not rows:
        raise DataError("cannot build a vocabulary from an empty corpus")
    n_f = len(field_names)
    counts: list[dict[str, int]] = [{} for _ in range(n_f)]
    first_seen: list[list[str]] = [[] for _ in range(n_f)]
    multival = [False] * n_f
    for r, row in enumerate(rows):
        if len(row) != n_f:
            raise DataError(f"ragged row at line {r + 1}: expected {n_f} fields, got {len(row)}")
        for j, cell in enumerate(row):
            if len(cell) == 0:
                raise DataError(f"empty value list in field {field_names[j]!r} at line {r + 1}")
            if len(cell) > 1:
                multival[j] = True
            for tok in cell:
                if tok not in counts[j]:
                    first_seen[j].append(tok)
                counts[j][tok] = counts[j].get(tok, 0) + 1
    fields = []
    for j, name in enumerate(field_names):
        mapping: dict[str, int] = {}
        for tok in first_seen[j]:
            if counts[j][tok] >= min_count:
                mapping[tok] = len(mapping) + 1
        fields.append(FieldSchema(name, mapping, multivalent=multival[j]))
    return DatasetSchema(fields=fields, min_count=min_count)


def encode_instances(schema: DatasetSchema, rows: Sequence[TokenRow],
                     labels: Sequence[int], max_vals: Optional[int] = None
                     ) -> tuple[list[Instance], IngestStats]:
    """Map token rows to Instances under a fitted schema.

    Unknown tokens encode to the dummy index 0. Multivalent cells longer than
    max_vals are truncated; truncations are counted in the returned stats.
    """
    stats = IngestStats()
    out: list[Instance] = []
    n_f = schema.n_f
    for r, (row, label) in enumerate(zip(rows, labels)):
        if len(row) != n_f:
            raise DataError(f"ragged row at line {r + 1}: expected {n_f} fields, got {len(row)}")
        if label not in (0, 1):
            raise DataError(f"label at line {r + 1} must be 0 or 1, got {label!r}")
        encoded = []
        for f, cell in zip(schema.fields, row):
            if not f.multivalent and len(cell) > 1:
                raise DataError(
                    f"field {f.field_name!r} is univalent but line {r + 1} carries "
                    f"{len(cell)} values")
            toks = list(cell)
            if max_vals is not None and len(toks) > max_vals:
                stats.truncated_values += len(toks) - max_vals
                toks = toks[:max_vals]
            idx = tuple(f.encode(t) for t in toks)
            stats.unknown_tokens += sum(1 for t in toks if t not in f.token_to_index)
            encoded.append(idx)
        out.append(Instance(tuple(encoded), int(label)))
        stats.rows += 1
    return out, stats


# ---------------------------------------------------------------------------
# numeric bucketing

def bucketize_numeric(value: float, boundaries: Sequence[float]) -> str:
    """Token "bucket_j" where j counts boundaries <= value (right-open intervals)."""
    if math.isnan(value):
        raise DataError("cannot bucketize NaN")
    bounds = np.asarray(boundaries, dtype=float)
    if bounds.ndim != 1 or (len(bounds) > 1 and not np.all(np.diff(bounds) > 0)):
        raise DataError("bucket boundaries must be strictly increasing")
    j = int(np.searchsorted(bounds, value, side="right"))
    return f"bucket_{j}"


def fit_quantile_boundaries(values: Sequence[float], n_buckets: int) -> list[float]:
    """Empirical quantile cut points giving n_buckets roughly equal buckets."""
    if n_buckets < 2:
        raise DataError(f"need at least 2 buckets, got {n_buckets}")
    arr = np.asarray(values, dtype=float)
    if arr.size == 0 or np.any(np.isnan(arr)):
        raise DataError("quantile fitting needs a non-empty, NaN-free sample")
    qs = np.quantile(arr, [i / n_buckets for i in range(1, n_buckets)])
    bounds = np.unique(qs)
    return [float(b) for b in bounds]


# ---------------------------------------------------------------------------
# sampling and batching

def negative_sample(instances: Sequence[Instance], keep_prob_negative: float,
                    seed: int) -> list[Instance]:
    """Keep every positive; keep each negative independently with the given
    probability. Deterministic under the seed."""
    if not (0.0 < keep_prob_negative <= 1.0):
        raise DataError(f"keep_prob_negative must be in (0, 1], got {keep_prob_negative}")
    rng = np.random.default_rng(seed)
    out = []
    for inst in instances:
        if inst.label == 1:
            out.append(inst)
        elif rng.random() < keep_prob_negative:
            out.append(inst)
    return out


def make_batches(instances: Sequence[Instance], batch_size: int,
                 shuffle_seed: Optional[int] = None) -> list[Batch]:
    """Densify instances into padded batches; the last batch may be short.

    Without a shuffle seed the original order is preserved.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if not instances:
        raise DataError("cannot batch an empty dataset")
    order = np.arange(len(instances))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(instances))
    batches = []
    for start in range(0, len(instances), batch_size):
        chunk = [instances[i] for i in order[start:start + batch_size]]
        n_f = len(chunk[0].per_field_indices)
        max_vals = max(1, max(len(v) for inst in chunk for v in inst.per_field_indices))
        idx = np.zeros((len(chunk), n_f, max_vals), dtype=np.int64)
        mask = np.zeros((len(chunk), n_f, max_vals), dtype=np.float64)
        labels = np.zeros(len(chunk), dtype=np.float64)
        for b, inst in enumerate(chunk):
            labels[b] = inst.label
            for f, vals in enumerate(inst.per_field_indices):
                idx[b, f, :len(vals)] = vals
                mask[b, f, :len(vals)] = 1.0
        batches.append(Batch(indices=idx, value_mask=mask, labels=labels))
    return batches


def permute_fields(instances: Sequence[Instance], permutation: Sequence[int],
                   schema: DatasetSchema) -> tuple[list[Instance], DatasetSchema]:
    """Reorder fields so new position p carries old field permutation[p]."""
    n_f = schema.n_f
    if sorted(permutation) != list(range(n_f)):
        raise DataError(f"permutation {list(permutation)} is not a bijection on [0, {n_f})")
    new_fields = [schema.fields[p] for p in permutation]
    new_schema = DatasetSchema(fields=new_fields, min_count=schema.min_count)
    new_instances = [
        Instance(tuple(inst.per_field_indices[p] for p in permutation), inst.label)
        for inst in instances
    ]
    return new_instances, new_schema


def inverse_permutation(permutation: Sequence[int]) -> list[int]:
    inv = [0] * len(permutation)
    for p, src in enumerate(permutation):
        inv[src] = p
    return inv


# ---------------------------------------------------------------------------
# synthetic data with one planted pairwise interaction

@dataclass
class SyntheticSpec:
    """Uniform categorical fields where the label depends on exactly one
    non-adjacent pair of fields through a joint weight table."""
    n_f: int
    cardinalities: tuple[int, ...]
    interacting_pair: tuple[int, int]
    pair_weights: np.ndarray
    bias: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        a, b = self.interacting_pair
        if len(self.cardinalities) != self.n_f:
            raise DataError("cardinalities must list one entry per field")
        if any(c < 1 for c in self.cardinalities):
            raise DataError("cardinalities must be >= 1")
        if not (0 <= a < self.n_f and 0 <= b < self.n_f):
            raise DataError(f"interacting pair {self.interacting_pair} out of range")
        if abs(a - b) < 2:
            raise DataError("interacting fields must be non-adjacent (|a-b| >= 2)")
        w = np.asarray(self.pair_weights)
        if w.shape != (self.cardinalities[a], self.cardinalities[b]):
            raise DataError(
                f"pair_weights shape {w.shape} does not match cardinalities "
                f"({self.cardinalities[a]}, {self.cardinalities[b]})")


def planted_spec(n_f: int = 8, cardinality: int = 10, pair: tuple[int, int] = (1, 5),
                 strength: float = 2.0, bias: float = 0.0, seed: int = 0) -> SyntheticSpec:
    """Convenience constructor: random normal interaction table of the given scale."""
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, strength, size=(cardinality, cardinality))
    return SyntheticSpec(n_f=n_f, cardinalities=(cardinality,) * n_f,
                         interacting_pair=pair, pair_weights=weights,
                         bias=bias, seed=seed)


def synthetic_schema(spec: SyntheticSpec) -> DatasetSchema:
    spec.validate()
    fields = []
    for j, card in enumerate(spec.cardinalities):
        mapping = {f"v{i}": i + 1 for i in range(card)}
        fields.append(FieldSchema(f"f{j}", mapping, multivalent=False))
    return DatasetSchema(fields=fields, min_count=1)


def generate_synthetic(spec: SyntheticSpec, n: int) -> tuple[list[Instance], np.ndarray]:
    """Sample n instances plus their true click probabilities.

    Field values are uniform over each field's retained tokens; the label is
    Bernoulli(sigmoid(bias + pair_weights[v_a, v_b])).
    """
    spec.validate()
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(spec.seed)
    a, b = spec.interacting_pair
    values = np.stack([rng.integers(0, card, size=n) for card in spec.cardinalities], axis=1)
    logits = spec.bias + np.asarray(spec.pair_weights)[values[:, a], values[:, b]]
    probs = 1.0 / (1.0 + np.exp(-logits))
    labels = (rng.random(n) < probs).astype(np.int64)
    instances = [
        Instance(tuple((int(v) + 1,) for v in values[i]), int(labels[i]))
        for i in range(n)
    ]
    return instances, probs


def bayes_auc(true_probs: np.ndarray, labels: Sequence[int]) -> float:
    """AUC achieved by ranking with the generator's true probabilities; the
    performance ceiling for any model on the synthetic data."""
    from .training import auc_score  # local import to avoid a cycle

    auc = auc_score(np.asarray(true_probs, dtype=float),
                    np.asarray(labels, dtype=float))
    if auc is None:
        raise DataError("bayes_auc needs both classes present")
    return auc


# ---------------------------------------------------------------------------
# file format

def write_dataset_file(path, schema: DatasetSchema, instances: Sequence[Instance]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.field_names() + [LABEL_COLUMN])
        for inst in instances:
            row = []
            for f, vals in zip(schema.fields, inst.per_field_indices):
                row.append(VALUE_SEP.join(f.decode(i) for i in vals))
            row.append(str(inst.label))
            writer.writerow(row)


def write_probs_file(path, probs: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in probs:
            fh.write(f"{float(p):.17g}\n")


def read_probs_file(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return np.array([float(line) for line in fh if line.strip()], dtype=float)


def read_dataset_file(path) -> tuple[list[str], list[list[tuple[str, ...]]], list[int]]:
    """Parse a dataset file into (field_names, token rows, labels)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty dataset file") from None
        if LABEL_COLUMN not in header:
            raise DataError(f"{path}: no {LABEL_COLUMN!r} column in header {header}")
        label_pos = header.index(LABEL_COLUMN)
        field_names = [h for i, h in enumerate(header) if i != label_pos]
        rows: list[list[tuple[str, ...]]] = []
        labels: list[int] = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise DataError(
                    f"{path}: ragged row at line {lineno}: expected {len(header)} "
                    f"columns, got {len(cells)}")
            try:
                labels.append(int(cells[label_pos]))
            except ValueError:
                raise DataError(f"{path}: bad label {cells[label_pos]!r} at line {lineno}") from None
            rows.append([tuple(c.split(VALUE_SEP)) for i, c in enumerate(cells)
                         if i != label_pos])
    return field_names, rows, labels


def load_dataset(path, schema: DatasetSchema,
                 max_vals: Optional[int] = None) -> tuple[list[Instance], IngestStats]:
    """Read a dataset file and encode it under an existing schema."""
    field_names, rows, labels = read_dataset_file(path)
    if field_names != schema.field_names():
        raise DataError(
            f"{path}: field order {field_names} does not match schema "
            f"{schema.field_names()}")
    return encode_instances(schema, rows, labels, max_vals=max_vals)


def fit_dataset(path, min_count: int,
                max_vals: Optional[int] = None) -> tuple[DatasetSchema, list[Instance], IngestStats]:
    """Read a dataset file, fit the vocabulary, and encode the same rows."""
    field_names, rows, labels = read_dataset_file(path)
    schema = build_vocab(field_names, rows, min_count)
    instances, stats = encode_instances(schema, rows, labels, max_vals=max_vals)
    return schema, instances, stats
