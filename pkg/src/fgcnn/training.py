"""Training orchestration: epochs, evaluation metrics, binary checkpoints,
and the parameter/multiply bookkeeping report.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import classifier as clf_mod
from . import featuregen as fg_mod
from . import nn
from .classifier import ClampStats, loss_and_grad
from .data import DataError, DatasetSchema, Instance, make_batches
from .model import FgcnnModel, ModelConfig

CHECKPOINT_MAGIC = b"FGCN"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 1
    seed: int = 0
    l2_embedding: float = 0.0
    eval_every: int = 1
    precision: str = "f32"

    def validate(self, uses_bn: bool = False) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if uses_bn and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when batch norm is enabled")
        nn.as_dtype(self.precision)


@dataclass
class Metrics:
    auc: Optional[float]
    logloss: float
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss,
                "n_pos": self.n_pos, "n_neg": self.n_neg}


# ---------------------------------------------------------------------------
# metrics

def auc_score(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Rank-statistic AUC with average ranks on tied scores.

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=float)
    # average rank within each tied group
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(scores)]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    rank_sum_pos = ranks[labels == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss_score(scores: np.ndarray, labels: np.ndarray) -> float:
    loss, _ = loss_and_grad(np.asarray(scores, dtype=float),
                            np.asarray(labels, dtype=float))
    return float(loss.mean())


def evaluate(model: FgcnnModel, instances: Sequence[Instance],
             batch_size: int = 1024) -> Metrics:
    """Score a dataset and report AUC plus mean log loss.

    Single-class datasets get auc=None; log loss is still computed.
    """
    if not instances:
        raise DataError("cannot evaluate on an empty dataset")
    scores = model.predict_scores(instances, batch_size=batch_size)
    labels = np.array([inst.label for inst in instances], dtype=float)
    return Metrics(
        auc=auc_score(scores, labels),
        logloss=logloss_score(scores, labels),
        n_pos=int((labels == 1).sum()),
        n_neg=int((labels == 0).sum()),
    )


# ---------------------------------------------------------------------------
# training loop

def train(model: FgcnnModel, instances: Sequence[Instance], config: TrainConfig,
          eval_instances: Optional[Sequence[Instance]] = None) -> list[dict]:
    """Run Adam over mini-batches for the configured number of epochs.

    Deterministic under (config.seed, single thread). History rows carry the
    epoch's mean training loss and, every eval_every epochs, eval metrics.
    On divergence (non-finite loss) the model is restored to the last epoch
    that completed cleanly and NumericError is raised.
    """
    uses_bn = model.config.classifier.use_bn or (
        model.config.featgen is not None and model.config.featgen.use_bn)
    config.validate(uses_bn=uses_bn)
    if not instances:
        raise DataError("cannot train on an empty dataset")
    opt = {name: nn.adam_init(p, lr=config.learning_rate)
           for name, p in model.params.items()}
    clamp_stats = ClampStats()
    history: list[dict] = []
    last_good = model.clone_params()
    for epoch in range(1, config.epochs + 1):
        shuffle_seed = config.seed * 1_000_003 + epoch
        dropout_rng = np.random.default_rng(shuffle_seed + 500_009)
        losses = []
        for batch in make_batches(instances, config.batch_size, shuffle_seed=shuffle_seed):
            yhat, cache = model.forward_batch(batch, mode="train", dropout_rng=dropout_rng)
            loss_vec, dlogit = loss_and_grad(yhat, batch.labels, clamp_stats)
            loss = float(loss_vec.mean())
            if not np.isfinite(loss):
                model.params = last_good
                raise nn.NumericError(
                    f"training diverged at epoch {epoch}; restored epoch {epoch - 1} state")
            losses.append(loss)
            grads = model.backward_batch(cache, dlogit / batch.size)
            if config.l2_embedding > 0.0:
                for name in ("emb.gen", "emb.clf"):
                    if name in grads:
                        grads[name] = grads[name] + 2.0 * config.l2_embedding * model.params[name]
            for name, g in grads.items():
                model.params[name], opt[name] = nn.adam_step(model.params[name], g, opt[name])
            model.commit_bn(cache)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "n_clamped": clamp_stats.n_clamped}
        if eval_instances is not None and epoch % config.eval_every == 0:
            m = evaluate(model, eval_instances)
            row["eval_auc"] = m.auc
            row["eval_logloss"] = m.logloss
        history.append(row)
        last_good = model.clone_params()
    return history


# ---------------------------------------------------------------------------
# checkpoints

class CheckpointError(RuntimeError):
    code = "checkpoint_error"


class NotACheckpointError(CheckpointError):
    code = "bad_magic"


class CheckpointVersionError(CheckpointError):
    code = "version_mismatch"


class SchemaDigestError(CheckpointError):
    code = "schema_digest_mismatch"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


def save_checkpoint(model: FgcnnModel, path, optimizer: Optional[dict] = None) -> None:
    """Binary layout: magic, version, config blob, schema digest, then named
    tensors as little-endian float32, row-major."""
    tensors: dict[str, np.ndarray] = dict(model.params)
    for site, state in model.bn_states.items():
        tensors[site + ".running_mean"] = state.mean
        tensors[site + ".running_var"] = state.var
    if optimizer is not None:
        for name, st in optimizer.items():
            tensors[f"opt.{name}.m"] = st.m
            tensors[f"opt.{name}.v"] = st.v
            tensors[f"opt.{name}.t"] = np.array([st.t], dtype=np.float32)
    blob = json.dumps({"model": model.config.to_dict(),
                       "precision": model.precision}, sort_keys=True).encode("utf-8")
    digest = model.schema.digest().encode("ascii")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(digest)))
    buf.write(digest)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise TruncatedCheckpointError(
            f"checkpoint truncated: wanted {n} bytes, got {len(b)}")
    return b


def load_checkpoint(path, schema: DatasetSchema):
    """Rebuild a model (and optimizer state, when present) from a checkpoint.

    Refuses to load if the file is not a checkpoint, its format version is
    unknown, or the schema digest does not match the supplied schema.
    Returns (model, optimizer_or_None).
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise NotACheckpointError(f"{path} is not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        blob = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        (dig_len,) = struct.unpack("<I", _read_exact(fh, 4))
        digest = _read_exact(fh, dig_len).decode("ascii")
        if digest != schema.digest():
            raise SchemaDigestError(
                "checkpoint was written against a different vocabulary: stored "
                f"schema digest {digest[:12]}.. does not match {schema.digest()[:12]}..")
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape)
            tensors[name] = arr.copy()
    config = ModelConfig.from_dict(blob["model"])
    dtype = nn.as_dtype(blob["precision"])
    params: dict[str, np.ndarray] = {}
    bn_means: dict[str, np.ndarray] = {}
    bn_vars: dict[str, np.ndarray] = {}
    opt_raw: dict[str, dict] = {}
    for name, arr in tensors.items():
        arr = arr.astype(dtype)
        if name.startswith("opt."):
            base, leaf = name[4:].rsplit(".", 1)
            opt_raw.setdefault(base, {})[leaf] = arr
        elif name.endswith(".running_mean"):
            bn_means[name[: -len(".running_mean")]] = arr
        elif name.endswith(".running_var"):
            bn_vars[name[: -len(".running_var")]] = arr
        else:
            params[name] = arr
    bn_states = {site: nn.BnState(mean=bn_means[site], var=bn_vars[site])
                 for site in bn_means}
    model = FgcnnModel(schema, config, params, bn_states, blob["precision"])
    optimizer = None
    if opt_raw:
        optimizer = {
            base: nn.AdamState(m=st["m"], v=st["v"], t=int(st["t"][0]))
            for base, st in opt_raw.items()
        }
    return model, optimizer


# ---------------------------------------------------------------------------
# parameter and multiply bookkeeping

@dataclass
class ComplexityReport:
    n_f: int
    t_f: int
    k: int
    t_fields: int
    round_fields: list[int]
    embedding_params: int
    conv_params: int
    recomb_weight_params: int
    recomb_bias_params: int
    clf_first_layer_weights: int
    clf_other_params: int
    predicted_total: int
    multiplies_featgen: int
    multiplies_classifier: int
    enumerated: dict[str, int]

    def to_text(self) -> str:
        lines = [
            f"fields (raw)              n_f = {self.n_f}",
            f"one-hot features          t_f = {self.t_f}",
            f"embedding size            k   = {self.k}",
            f"generated fields per round    {self.round_fields}",
            f"classifier input fields   T   = {self.t_fields}",
            "",
            f"embedding parameters (2*t_f*k)      {self.embedding_params}",
            f"conv kernel parameters              {self.conv_params}",
            f"recombination weights               {self.recomb_weight_params}",
            f"recombination biases                {self.recomb_bias_params}",
            f"classifier first-layer weights      {self.clf_first_layer_weights}",
            f"classifier remaining parameters     {self.clf_other_params}",
            f"predicted total                     {self.predicted_total}",
            "",
            f"multiplies per instance, generation {self.multiplies_featgen}",
            f"multiplies per instance, classifier {self.multiplies_classifier}",
            "",
            "enumerated tensor totals:",
        ]
        for key, val in self.enumerated.items():
            lines.append(f"  {key:<34}{val}")
        return "\n".join(lines)


def complexity_report(config: ModelConfig, n_f: int, t_f: int) -> ComplexityReport:
    """Predict per-component parameter counts from the configuration alone and
    enumerate the tensors the model would actually allocate."""
    k = config.k
    n_tables = int(config.include_raw) + int(config.featgen is not None)
    embedding = n_tables * t_f * k
    conv = recomb_w = recomb_b = 0
    mult_fg = 0
    round_fields: list[int] = []
    if config.featgen is not None and config.featgen.style == "cnn":
        fg = config.featgen
        rows = fg_mod.rows_chain(n_f, fg)
        in_maps = 1
        for i in range(fg.n_c):
            conv += fg.kernel_heights[i] * in_maps * fg.feature_maps[i]
            mult_fg += rows[i] * k * fg.feature_maps[i] * fg.kernel_heights[i] * in_maps
            mult_fg += rows[i] * k * fg.feature_maps[i]        # pooling comparisons
            if fg.use_recombination:
                d_in = rows[i + 1] * k * fg.feature_maps[i]
                d_out = rows[i + 1] * k * fg.new_maps[i]
                recomb_w += d_in * d_out
                recomb_b += d_out
                mult_fg += d_in * d_out
            in_maps = fg.feature_maps[i]
        round_fields = fg_mod.round_field_counts(n_f, fg)
    elif config.featgen is not None:
        round_fields = fg_mod.round_field_counts(n_f, config.featgen)
    t_fields = config.augmented_fields(n_f)

    clf = config.classifier
    first_w = 0
    other = 0
    if clf.kind in ("fm", "deepfm"):
        other += t_fields * k + 1                       # linear weights + bias
    if clf.kind != "fm":
        width = clf_mod.mlp_input_width(clf.kind, t_fields, k)
        sizes = list(clf.hidden_sizes)
        first_w = width * sizes[0]
        other += sizes[0]                               # first-layer bias
        if clf.use_bn:
            other += 2 * sizes[0]
        for prev, h in zip(sizes, sizes[1:]):
            other += prev * h + h + (2 * h if clf.use_bn else 0)
        other += sizes[-1] + 1                          # output projection
    if config.featgen is not None and config.featgen.style == "mlp":
        prev = n_f * k
        for n_i in round_fields:
            other += prev * (n_i * k) + n_i * k
            if config.featgen.use_bn:
                other += 2 * n_i * k
            prev = n_i * k
    if config.featgen is not None and config.featgen.use_bn and config.featgen.style == "cnn":
        for i in range(config.featgen.n_c):
            other += 2 * config.featgen.feature_maps[i]
            if config.featgen.use_recombination:
                rows = fg_mod.rows_chain(n_f, config.featgen)
                other += 2 * rows[i + 1] * k * config.featgen.new_maps[i]

    predicted = embedding + conv + recomb_w + recomb_b + first_w + other

    mult_clf = 0
    if clf.kind in ("ipnn", "fm", "deepfm"):
        mult_clf += t_fields * (t_fields - 1) * k // 2      # pairwise inner products
    if clf.kind != "fm":
        width = clf_mod.mlp_input_width(clf.kind, t_fields, k)
        for h in clf.hidden_sizes:
            mult_clf += width * h
            width = h
        mult_clf += width

    enumerated = _enumerate_shapes(config, n_f, t_f)
    return ComplexityReport(
        n_f=n_f, t_f=t_f, k=k, t_fields=t_fields, round_fields=round_fields,
        embedding_params=embedding, conv_params=conv,
        recomb_weight_params=recomb_w, recomb_bias_params=recomb_b,
        clf_first_layer_weights=first_w, clf_other_params=other,
        predicted_total=predicted, multiplies_featgen=mult_fg,
        multiplies_classifier=mult_clf, enumerated=enumerated,
    )


def _enumerate_shapes(config: ModelConfig, n_f: int, t_f: int) -> dict[str, int]:
    """Tensor sizes grouped by component, computed from the same shape rules
    the builder allocates with (no allocation)."""
    k = config.k
    sizes: dict[str, int] = {}
    if config.featgen is not None:
        sizes["emb.gen"] = t_f * k
    if config.include_raw:
        sizes["emb.clf"] = t_f * k
    if config.featgen is not None:
        for name, shape in fg_mod.param_shapes(n_f, k, config.featgen).items():
            sizes[name] = int(np.prod(shape))
    t_fields = config.augmented_fields(n_f)
    for name, shape in clf_mod.param_shapes(config.classifier, t_fields, k).items():
        sizes[name] = int(np.prod(shape))
    groups = {
        "embedding": 0, "conv_weights": 0, "recomb_weights": 0, "recomb_biases": 0,
        "clf_first_layer_weights": 0, "other": 0, "total": 0,
    }
    for name, size in sizes.items():
        groups["total"] += size
        if name.startswith("emb."):
            groups["embedding"] += size
        elif ".conv" in name and name.endswith(".w"):
            groups["conv_weights"] += size
        elif ".recomb" in name and name.endswith(".w") and ".bn" not in name:
            groups["recomb_weights"] += size
        elif ".recomb" in name and name.endswith(".b") and ".bn" not in name:
            groups["recomb_biases"] += size
        elif name == "clf.fc1.w":
            groups["clf_first_layer_weights"] += size
        else:
            groups["other"] += size
    return groups
