import math

import numpy as np
import pytest

from fgcnn import nn
from fgcnn.classifier import ClassifierConfig
from fgcnn.data import generate_synthetic, planted_spec, synthetic_schema
from fgcnn.featuregen import FeatureGenConfig
from fgcnn.model import FgcnnModel, ModelConfig
from fgcnn.training import (CheckpointVersionError, NotACheckpointError,
                            SchemaDigestError, TrainConfig, TruncatedCheckpointError,
                            auc_score, complexity_report, evaluate, load_checkpoint,
                            logloss_score, save_checkpoint, train)


def auc_pair_oracle(scores, labels):
    """Probability a random positive outranks a random negative, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _toy_setup(n=60, seed=0, **model_kw):
    spec = planted_spec(n_f=4, cardinality=4, pair=(0, 2), strength=2.0, seed=seed)
    schema = synthetic_schema(spec)
    instances, _ = generate_synthetic(spec, n)
    defaults = dict(
        k=4,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8,)),
        featgen=FeatureGenConfig(kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)),
    )
    defaults.update(model_kw)
    config = ModelConfig(**defaults)
    model = FgcnnModel.build(schema, config, seed)
    return schema, instances, model, config


# --- AUC -----------------------------------------------------------------------

def test_auc_perfect_ranking():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    labels = np.array([0, 0, 1, 1])
    assert auc_score(scores, labels) == 1.0


def test_auc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 5, size=200).astype(float)  # heavy ties
    labels = (rng.random(200) < 0.4).astype(float)
    assert abs(auc_score(scores, labels) - auc_pair_oracle(scores, labels)) < 1e-12


def test_auc_single_class_undefined():
    assert auc_score(np.array([0.2, 0.4]), np.array([1, 1])) is None


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.random(500)
    labels = (rng.random(500) < 0.3).astype(float)
    base = auc_score(scores, labels)
    for transform in (lambda s: 3 * s + 2, np.exp, lambda s: s ** 3):
        assert abs(auc_score(transform(scores), labels) - base) < 1e-12


def test_logloss_at_uniform_half():
    scores = np.full(100, 0.5)
    labels = (np.arange(100) % 2).astype(float)
    assert abs(logloss_score(scores, labels) - math.log(2.0)) < 1e-12


def test_evaluate_counts_classes():
    schema, instances, model, _ = _toy_setup()
    m = evaluate(model, instances)
    assert m.n_pos == sum(i.label for i in instances)
    assert m.n_pos + m.n_neg == len(instances)
    assert m.logloss >= 0.0


# --- train loop ------------------------------------------------------------------

def test_zero_learning_rate_freezes_params():
    schema, instances, model, _ = _toy_setup()
    before = model.clone_params()
    train(model, instances, TrainConfig(batch_size=16, learning_rate=0.0, epochs=3, seed=1))
    for name in before:
        assert np.array_equal(before[name], model.params[name]), name


def test_training_is_deterministic():
    def run():
        schema, instances, model, _ = _toy_setup()
        hist = train(model, instances,
                     TrainConfig(batch_size=16, learning_rate=1e-2, epochs=3, seed=5),
                     eval_instances=instances)
        return hist, model

    h1, m1 = run()
    h2, m2 = run()
    assert h1 == h2
    for name in m1.params:
        assert np.array_equal(m1.params[name], m2.params[name])


def test_training_reduces_loss():
    schema, instances, model, _ = _toy_setup(n=200)
    hist = train(model, instances,
                 TrainConfig(batch_size=32, learning_rate=1e-2, epochs=10, seed=2))
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_divergence_restores_last_good_state():
    schema, instances, model, _ = _toy_setup()
    good = model.clone_params()
    model.params["clf.out.w"][:] = np.nan
    with pytest.raises(nn.NumericError, match="diverged"):
        train(model, instances, TrainConfig(batch_size=16, epochs=2, seed=3))
    # epoch 1 never completed, so the restored state is the starting one
    assert np.all(np.isnan(model.params["clf.out.w"]))
    for name in good:
        if name != "clf.out.w":
            assert np.array_equal(model.params[name], good[name])


def test_l2_regularization_shrinks_embeddings():
    schema, instances, model, _ = _toy_setup(n=100)
    schema2, instances2, model2, _ = _toy_setup(n=100)
    cfg = dict(batch_size=32, learning_rate=1e-2, epochs=5, seed=4)
    train(model, instances, TrainConfig(**cfg, l2_embedding=0.0))
    train(model2, instances2, TrainConfig(**cfg, l2_embedding=1e-2))
    assert (np.linalg.norm(model2.params["emb.clf"])
            < np.linalg.norm(model.params["emb.clf"]))


def test_bn_requires_batch_of_two():
    schema, instances, model, _ = _toy_setup(
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8,), use_bn=True))
    with pytest.raises(ValueError):
        train(model, instances, TrainConfig(batch_size=1, epochs=1, seed=0))


def test_convex_submodel_loss_slope():
    # fm head with frozen embeddings is convex in the linear weights, so
    # full-batch descent at a small step must lower the loss every epoch
    from fgcnn.classifier import loss_and_grad
    from fgcnn.data import make_batches

    schema, instances, model, _ = _toy_setup(
        n=128,
        classifier=ClassifierConfig(kind="fm", hidden_sizes=()),
        featgen=None,
    )
    batch = make_batches(instances, len(instances))[0]
    opt = {n: nn.adam_init(model.params[n], lr=1e-3)
           for n in ("clf.linear.w", "clf.linear.b")}
    losses = []
    for _ in range(8):
        yhat, cache = model.forward_batch(batch, mode="train")
        loss_vec, dlogit = loss_and_grad(yhat, batch.labels)
        losses.append(float(loss_vec.mean()))
        grads = model.backward_batch(cache, dlogit / batch.size)
        for n in opt:
            model.params[n], opt[n] = nn.adam_step(model.params[n], grads[n], opt[n])
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_evaluate_single_class_reports_undefined_auc():
    schema, instances, model, _ = _toy_setup()
    positives = [i for i in instances if i.label == 1]
    m = evaluate(model, positives)
    assert m.auc is None
    assert m.logloss >= 0.0 and m.n_neg == 0


def test_multivalent_fields_train_end_to_end():
    from fgcnn.data import build_vocab, encode_instances

    rng = np.random.default_rng(13)
    tokens = [f"t{i}" for i in range(6)]
    rows = []
    labels = []
    for _ in range(80):
        bag = tuple(rng.choice(tokens, size=rng.integers(1, 4), replace=False))
        single = (str(rng.integers(0, 3)),)
        rows.append([single, bag])
        labels.append(int("t0" in bag))
    schema = build_vocab(["plain", "bag"], rows, min_count=1)
    assert schema.fields[1].multivalent
    instances, _ = encode_instances(schema, rows, labels)
    cfg = ModelConfig(
        k=4,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8,)),
        featgen=FeatureGenConfig(kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)))
    model = FgcnnModel.build(schema, cfg, seed=0)
    hist = train(model, instances,
                 TrainConfig(batch_size=20, learning_rate=1e-2, epochs=20, seed=0))
    # the bag membership signal is learnable, so loss must fall well below ln 2
    assert hist[-1]["train_loss"] < 0.5
    assert evaluate(model, instances).auc > 0.9


def test_f64_precision_training_runs():
    spec = planted_spec(n_f=4, cardinality=4, pair=(0, 2), seed=3)
    schema = synthetic_schema(spec)
    instances, _ = generate_synthetic(spec, 40)
    cfg = ModelConfig(
        k=3,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(6,)),
        featgen=FeatureGenConfig(kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)))
    model = FgcnnModel.build(schema, cfg, seed=0, precision="f64")
    assert all(p.dtype == np.float64 for p in model.params.values())
    train(model, instances,
          TrainConfig(batch_size=20, epochs=2, seed=0, precision="f64"))
    scores = model.predict_scores(instances)
    assert scores.dtype == np.float64
    assert np.all((scores > 0) & (scores < 1))


def test_raw_branch_updates_leave_gen_table_untouched():
    # disconnect the generated block from the classifier: emb.gen gets zero
    # gradient, so one optimizer step leaves it bit-identical
    schema, instances, model, config = _toy_setup(
        classifier=ClassifierConfig(kind="dnn", hidden_sizes=(8,)))
    n_raw = schema.n_f
    k = config.k
    model.params["clf.fc1.w"][n_raw * k:, :] = 0.0
    gen_before = model.params["emb.gen"].copy()
    clf_before = model.params["emb.clf"].copy()
    # a single full-batch step: afterwards the zeroed rows move and reconnect
    train(model, instances, TrainConfig(batch_size=len(instances), learning_rate=1e-2,
                                        epochs=1, seed=7))
    assert np.array_equal(model.params["emb.gen"], gen_before)
    assert not np.array_equal(model.params["emb.clf"], clf_before)


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    schema, instances, model, _ = _toy_setup()
    train(model, instances, TrainConfig(batch_size=16, epochs=1, seed=8))
    before = model.predict_scores(instances)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded, opt = load_checkpoint(path, schema)
    after = loaded.predict_scores(instances)
    assert np.array_equal(before, after)
    assert opt is None


def test_checkpoint_preserves_bn_state(tmp_path):
    schema, instances, model, _ = _toy_setup(
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8,), use_bn=True))
    train(model, instances, TrainConfig(batch_size=16, epochs=2, seed=9))
    path = tmp_path / "bn.ckpt"
    save_checkpoint(model, path)
    loaded, _ = load_checkpoint(path, schema)
    assert np.array_equal(model.predict_scores(instances),
                          loaded.predict_scores(instances))
    for site, state in model.bn_states.items():
        assert np.array_equal(state.mean, loaded.bn_states[site].mean)
        assert np.array_equal(state.var, loaded.bn_states[site].var)


def test_checkpoint_roundtrips_optimizer(tmp_path):
    schema, instances, model, _ = _toy_setup()
    opt = {n: nn.adam_init(p, lr=0.01) for n, p in model.params.items()}
    g = {n: np.ones_like(p) for n, p in model.params.items()}
    for n in model.params:
        model.params[n], opt[n] = nn.adam_step(model.params[n], g[n], opt[n])
    path = tmp_path / "opt.ckpt"
    save_checkpoint(model, path, optimizer=opt)
    _, opt2 = load_checkpoint(path, schema)
    assert opt2 is not None and opt2["emb.gen"].t == 1
    assert np.allclose(opt2["emb.gen"].m, opt["emb.gen"].m, atol=1e-7)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + bytes(64))
    schema, _, _, _ = _toy_setup()
    with pytest.raises(NotACheckpointError):
        load_checkpoint(path, schema)


def test_checkpoint_version_mismatch(tmp_path):
    schema, instances, model, _ = _toy_setup()
    path = tmp_path / "v.ckpt"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path, schema)


def test_checkpoint_schema_digest_mismatch(tmp_path):
    schema, instances, model, _ = _toy_setup()
    path = tmp_path / "d.ckpt"
    save_checkpoint(model, path)
    other_spec = planted_spec(n_f=4, cardinality=5, pair=(0, 2), seed=1)
    other_schema = synthetic_schema(other_spec)
    with pytest.raises(SchemaDigestError):
        load_checkpoint(path, other_schema)


def test_checkpoint_truncation(tmp_path):
    schema, instances, model, _ = _toy_setup()
    path = tmp_path / "t.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(path, schema)


# --- complexity -----------------------------------------------------------------------

def test_embedding_param_count_is_two_tables():
    config = ModelConfig(
        k=4,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8,)),
        featgen=FeatureGenConfig(kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)),
    )
    rep = complexity_report(config, n_f=6, t_f=30)
    assert rep.embedding_params == 2 * 30 * 4
    assert rep.enumerated["embedding"] == 2 * 30 * 4


def test_recombination_weight_count_reference_config():
    # n_f=8, k=2, one round, h=2, conv maps 4, new maps 2, pool height 2:
    # pooled rows 4, so weights are (4*2*4) x (4*2*2)
    config = ModelConfig(
        k=2,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8,)),
        featgen=FeatureGenConfig(kernel_heights=(2,), feature_maps=(4,), new_maps=(2,)),
    )
    rep = complexity_report(config, n_f=8, t_f=40)
    expected = (4 * 2 * 4) * (4 * 2 * 2)
    assert rep.recomb_weight_params == expected
    assert rep.enumerated["recomb_weights"] == expected
    # cross-check against tensors the model actually allocates
    schema = synthetic_schema(planted_spec(n_f=8, cardinality=4, pair=(0, 2)))
    model = FgcnnModel.build(schema, config, seed=0)
    assert model.params["fg.recomb1.w"].size == expected


def test_first_layer_width_matches_fm_operand():
    config = ModelConfig(
        k=3,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(16,)),
        featgen=FeatureGenConfig(kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)),
    )
    n_f = 6
    rep = complexity_report(config, n_f=n_f, t_f=30)
    t = rep.t_fields
    assert rep.clf_first_layer_weights == (t * (t - 1) // 2 + t * 3) * 16
    assert rep.enumerated["clf_first_layer_weights"] == rep.clf_first_layer_weights


def test_formula_matches_allocation_for_divisible_config():
    config = ModelConfig(
        k=2,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8, 4)),
        featgen=FeatureGenConfig(kernel_heights=(2, 2), feature_maps=(3, 3),
                                 new_maps=(2, 2)),
    )
    n_f = 8
    spec = planted_spec(n_f=n_f, cardinality=4, pair=(0, 2))
    schema = synthetic_schema(spec)
    rep = complexity_report(config, n_f=n_f, t_f=schema.t_f)
    model = FgcnnModel.build(schema, config, seed=1)
    assert rep.predicted_total == model.n_params()
    assert rep.enumerated["total"] == model.n_params()
    # the recombination weights follow the closed form n_f^2/h_p^(2i) k^2 m_c m_r
    closed = sum(n_f ** 2 // 2 ** (2 * i) * 4 * 3 * 2 for i in (1, 2))
    assert rep.recomb_weight_params == closed
