"""Pluggable classifiers over the augmented embedding matrix.

Four kinds share one parameter namespace:
  ipnn    pairwise inner products concatenated with flattened embeddings, MLP
  dnn     flattened embeddings only, MLP
  fm      bias + linear term + sum of pairwise inner products, no MLP
  deepfm  MLP logit plus the fm head's linear and pairwise terms

Hidden layers are affine -> optional batch norm -> relu -> optional dropout;
the final projection to one logit has neither batch norm nor activation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .embedding import glorot_uniform

KINDS = ("ipnn", "dnn", "fm", "deepfm")
LOSS_EPS = 1e-7


@dataclass
class ClassifierConfig:
    kind: str = "ipnn"
    hidden_sizes: tuple[int, ...] = (64, 32)
    use_bn: bool = False
    dropout_keep: float = 1.0

    @property
    def n_h(self) -> int:
        return len(self.hidden_sizes)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}, expected one of {KINDS}")
        if self.kind != "fm" and not self.hidden_sizes:
            raise ValueError(f"classifier kind {self.kind!r} needs at least one hidden layer")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")


@dataclass
class ClampStats:
    """Counts predictions clamped away from 0/1 before taking logs."""
    n_clamped: int = 0


# ---------------------------------------------------------------------------
# FM layer: all pairwise inner products of field rows

def fm_layer(e: np.ndarray) -> np.ndarray:
    """Inner products <e_i, e_j> for all i < j in lexicographic order.

    e: [b, T, k] -> [b, T(T-1)/2].
    """
    b, t, k = e.shape
    if t < 2:
        raise ValueError(f"fm_layer needs at least 2 fields, got {t}")
    gram = np.einsum("bik,bjk->bij", e, e)
    iu, ju = np.triu_indices(t, k=1)
    return gram[:, iu, ju]


def fm_layer_backward(grad: np.ndarray, e: np.ndarray) -> np.ndarray:
    b, t, k = e.shape
    iu, ju = np.triu_indices(t, k=1)
    dgram = np.zeros((b, t, t), dtype=grad.dtype)
    dgram[:, iu, ju] = grad
    return (np.einsum("bij,bjk->bik", dgram, e)
            + np.einsum("bji,bjk->bik", dgram, e))


def _pair_sum(e: np.ndarray) -> np.ndarray:
    """Sum over i<j of <e_i, e_j>, per batch row."""
    total = e.sum(axis=1)
    return 0.5 * ((total * total).sum(axis=1) - (e * e).sum(axis=(1, 2)))


def _pair_sum_backward(dout: np.ndarray, e: np.ndarray) -> np.ndarray:
    total = e.sum(axis=1, keepdims=True)
    return dout[:, None, None] * (total - e)


# ---------------------------------------------------------------------------
# parameter construction

def mlp_input_width(kind: str, t: int, k: int) -> int:
    if kind == "ipnn":
        return t * (t - 1) // 2 + t * k
    return t * k


def param_shapes(config: ClassifierConfig, t: int, k: int) -> dict[str, tuple[int, ...]]:
    config.validate()
    if t < 2 and config.kind in ("ipnn", "fm", "deepfm"):
        raise ValueError(f"classifier kind {config.kind!r} needs T >= 2 fields, got {t}")
    shapes: dict[str, tuple[int, ...]] = {}
    if config.kind in ("fm", "deepfm"):
        shapes["clf.linear.w"] = (t, k)
        shapes["clf.linear.b"] = (1,)
    if config.kind == "fm":
        return shapes
    width = mlp_input_width(config.kind, t, k)
    for i, h in enumerate(config.hidden_sizes, start=1):
        shapes[f"clf.fc{i}.w"] = (width, h)
        shapes[f"clf.fc{i}.b"] = (h,)
        if config.use_bn:
            shapes[f"clf.fc{i}.bn.g"] = (h,)
            shapes[f"clf.fc{i}.bn.b"] = (h,)
        width = h
    shapes["clf.out.w"] = (width, 1)
    shapes["clf.out.b"] = (1,)
    return shapes


def init_params(config: ClassifierConfig, t: int, k: int,
                rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config, t, k).items():
        if name.endswith(".bn.g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".b") or name.endswith(".bn.b"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name == "clf.linear.w":
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = glorot_uniform(rng, shape[0], shape[1], shape, dtype)
    return params


def bn_sites(config: ClassifierConfig) -> dict[str, int]:
    if not config.use_bn or config.kind == "fm":
        return {}
    return {f"clf.fc{i}.bn": h for i, h in enumerate(config.hidden_sizes, start=1)}


# ---------------------------------------------------------------------------
# forward / backward

def classifier_forward(e: np.ndarray, params: dict[str, np.ndarray],
                       config: ClassifierConfig, bn_states: Optional[dict] = None,
                       mode: str = "infer",
                       dropout_rng: Optional[np.random.Generator] = None):
    """Score the augmented matrix e [b, T, k]: returns (logit, cache, new_bn_states)."""
    config.validate()
    bn_states = bn_states or {}
    b, t, k = e.shape
    cache: dict = {"e": e, "kind": config.kind}
    new_states: dict = {}
    logit = np.zeros(b, dtype=e.dtype)

    if config.kind in ("fm", "deepfm"):
        w = params["clf.linear.w"]
        logit = logit + _pair_sum(e) + np.einsum("btk,tk->b", e, w) + params["clf.linear.b"][0]
    if config.kind == "fm":
        return logit, cache, new_states

    if config.kind == "ipnn":
        rfm = fm_layer(e)
        x = np.concatenate([rfm, e.reshape(b, t * k)], axis=1)
        cache["fm_width"] = rfm.shape[1]
    else:
        x = e.reshape(b, t * k)
    cache["x0"] = x

    layers = []
    h = x
    train = mode == "train"
    for i in range(1, config.n_h + 1):
        layer: dict = {"x_in": h}
        z = nn.affine(h, params[f"clf.fc{i}.w"], params[f"clf.fc{i}.b"])
        if config.use_bn:
            site = f"clf.fc{i}.bn"
            z, bncache, ns = nn.batchnorm_forward(
                z, params[site + ".g"], params[site + ".b"], bn_states[site], mode)
            new_states[site] = ns
            layer["bn"] = bncache
        layer["z"] = z
        a = nn.relu(z)
        if train and config.dropout_keep < 1.0:
            if dropout_rng is None:
                raise ValueError("dropout in train mode needs an rng")
            keep = config.dropout_keep
            mask = (dropout_rng.random(a.shape) < keep).astype(a.dtype) / keep
            a = a * mask
            layer["dropout"] = mask
        layers.append(layer)
        h = a
    cache["layers"] = layers
    cache["h_last"] = h
    logit = logit + nn.affine(h, params["clf.out.w"], params["clf.out.b"])[:, 0]
    return logit, cache, new_states


def classifier_backward(dlogit: np.ndarray, cache: dict,
                        params: dict[str, np.ndarray], config: ClassifierConfig):
    """Returns (d_e, param grads) for the matching forward call."""
    e = cache["e"]
    b, t, k = e.shape
    grads: dict[str, np.ndarray] = {}
    d_e = np.zeros_like(e)

    if config.kind in ("fm", "deepfm"):
        w = params["clf.linear.w"]
        d_e += _pair_sum_backward(dlogit, e)
        d_e += dlogit[:, None, None] * w[None]
        grads["clf.linear.w"] = np.einsum("b,btk->tk", dlogit, e)
        grads["clf.linear.b"] = np.array([dlogit.sum()], dtype=e.dtype)
    if config.kind == "fm":
        return d_e, grads

    dh, dw, db = nn.affine_backward(dlogit[:, None], cache["h_last"], params["clf.out.w"])
    grads["clf.out.w"] = dw
    grads["clf.out.b"] = db
    for i in range(config.n_h, 0, -1):
        layer = cache["layers"][i - 1]
        if "dropout" in layer:
            dh = dh * layer["dropout"]
        dz = dh * nn.relu_grad(layer["z"])
        if config.use_bn:
            dz, dg, dbeta = nn.batchnorm_backward(dz, layer["bn"])
            grads[f"clf.fc{i}.bn.g"] = dg
            grads[f"clf.fc{i}.bn.b"] = dbeta
        dh, dw, db = nn.affine_backward(dz, layer["x_in"], params[f"clf.fc{i}.w"])
        grads[f"clf.fc{i}.w"] = dw
        grads[f"clf.fc{i}.b"] = db

    if config.kind == "ipnn":
        p = cache["fm_width"]
        d_e += fm_layer_backward(dh[:, :p], e)
        d_e += dh[:, p:].reshape(e.shape)
    else:
        d_e += dh.reshape(e.shape)
    return d_e, grads


# thin op-level surfaces -----------------------------------------------------

def ipnn_forward(e, params, config, bn_states=None, mode="infer", dropout_rng=None):
    """Returns (logit, yhat) for the ipnn kind."""
    if config.kind != "ipnn":
        raise ValueError(f"ipnn_forward called with kind {config.kind!r}")
    logit, _, _ = classifier_forward(e, params, config, bn_states, mode, dropout_rng)
    return logit, nn.sigmoid(logit)


def dnn_forward(e, params, config, bn_states=None, mode="infer", dropout_rng=None):
    if config.kind != "dnn":
        raise ValueError(f"dnn_forward called with kind {config.kind!r}")
    logit, _, _ = classifier_forward(e, params, config, bn_states, mode, dropout_rng)
    return nn.sigmoid(logit)


def fm_only_forward(e, linear_w, linear_b):
    """Bias + per-field linear term + all pairwise inner products."""
    params = {"clf.linear.w": linear_w, "clf.linear.b": np.atleast_1d(linear_b)}
    logit, _, _ = classifier_forward(e, params, ClassifierConfig(kind="fm", hidden_sizes=()))
    return nn.sigmoid(logit)


def deepfm_forward(e, params, config, bn_states=None, mode="infer", dropout_rng=None):
    if config.kind != "deepfm":
        raise ValueError(f"deepfm_forward called with kind {config.kind!r}")
    logit, _, _ = classifier_forward(e, params, config, bn_states, mode, dropout_rng)
    return nn.sigmoid(logit)


# ---------------------------------------------------------------------------
# loss

def loss_and_grad(yhat: np.ndarray, y: np.ndarray,
                  stats: Optional[ClampStats] = None):
    """Elementwise cross entropy and its gradient against the pre-sigmoid logit.

    Predictions outside [LOSS_EPS, 1 - LOSS_EPS] are clamped before the logs
    and counted in stats. The logit gradient uses the fused form yhat - y.
    """
    yhat = np.asarray(yhat)
    if yhat.dtype.kind != "f":
        yhat = yhat.astype(float)
    y = np.asarray(y, dtype=yhat.dtype)
    clipped = np.clip(yhat, LOSS_EPS, 1.0 - LOSS_EPS)
    if stats is not None:
        stats.n_clamped += int(np.count_nonzero(clipped != yhat))
    loss = -(y * np.log(clipped) + (1.0 - y) * np.log1p(-clipped))
    return loss, yhat - y
