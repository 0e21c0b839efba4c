import json

import numpy as np
import pytest

from fgcnn import experiments as ex
from fgcnn.classifier import ClassifierConfig
from fgcnn.cli import main as cli_main
from fgcnn.data import generate_synthetic, planted_spec, synthetic_schema
from fgcnn.featuregen import FeatureGenConfig, generated_count
from fgcnn.model import FgcnnModel, ModelConfig
from fgcnn.training import TrainConfig, train


def _base_config(**kw):
    defaults = dict(
        k=4,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(8,)),
        featgen=FeatureGenConfig(kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)),
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def _toy_data(n=80, seed=0, n_f=4):
    spec = planted_spec(n_f=n_f, cardinality=4, pair=(0, 2), strength=2.0, seed=seed)
    schema = synthetic_schema(spec)
    instances, _ = generate_synthetic(spec, n)
    return schema, instances


# --- variants ------------------------------------------------------------------

def test_remove_new_parameter_set_is_plain_classifier():
    schema, _ = _toy_data()
    base = _base_config()
    full = FgcnnModel.build(schema, base, seed=0)
    removed = ex.build_variant("remove_new", base, schema, seed=0)
    assert not any(n.startswith("fg.") for n in removed.param_names())
    assert "emb.gen" not in removed.param_names()
    assert "emb.clf" in removed.param_names()
    expected_gone = {n for n in full.param_names()
                     if n.startswith("fg.") or n == "emb.gen"}
    assert set(full.param_names()) - set(removed.param_names()) == expected_gone


def test_remove_raw_drops_classifier_table():
    schema, _ = _toy_data()
    removed = ex.build_variant("remove_raw", _base_config(), schema, seed=0)
    assert "emb.clf" not in removed.param_names()
    assert "emb.gen" in removed.param_names()
    assert removed.config.augmented_fields(schema.n_f) == generated_count(
        schema.n_f, removed.config.featgen)


def test_mlp_variant_swaps_tensor_families():
    schema, _ = _toy_data()
    model = ex.build_variant("mlp_featgen", _base_config(), schema, seed=0)
    names = model.param_names()
    assert any(n.startswith("fg.mlp") for n in names)
    assert not any(".conv" in n or ".recomb" in n for n in names)


def test_no_recombination_keeps_generated_count():
    schema, _ = _toy_data()
    base = _base_config(featgen=FeatureGenConfig(
        kernel_heights=(2, 2), feature_maps=(5, 5), new_maps=(3, 3)))
    variant_cfg = ex.variant_model_config("no_recombination", base)
    assert not any(".recomb" in n for n in
                   ex.build_variant("no_recombination", base, schema, 0).param_names())
    assert (generated_count(schema.n_f, variant_cfg.featgen)
            == generated_count(schema.n_f, base.featgen))


def test_no_recombination_config_diff_is_single_flag_when_maps_match():
    base = _base_config(featgen=FeatureGenConfig(
        kernel_heights=(2,), feature_maps=(3,), new_maps=(3,)))
    variant_cfg = ex.variant_model_config("no_recombination", base)
    a, b = base.to_dict(), variant_cfg.to_dict()
    diffs = {k for k in a["featgen"] if a["featgen"][k] != b["featgen"][k]}
    assert diffs == {"use_recombination"}
    assert {k for k in a if a[k] != b[k]} == {"featgen"}


def test_variants_forward_and_train():
    schema, instances = _toy_data()
    base = _base_config()
    tc = TrainConfig(batch_size=20, epochs=1, seed=0)
    for name in ex.VARIANT_NAMES:
        model = ex.build_variant(name, base, schema, seed=0)
        train(model, instances, tc)
        scores = model.predict_scores(instances)
        assert np.all((scores > 0) & (scores < 1))


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        ex.variant_model_config("bogus", _base_config())


def test_variant_without_featgen_rejected():
    with pytest.raises(ValueError):
        ex.variant_model_config("no_recombination", _base_config(featgen=None))


# --- compatibility -----------------------------------------------------------------

def test_compatibility_protocol_shape():
    schema, instances = _toy_data(n=60)
    rows = ex.run_compatibility(["fm", "dnn", "deepfm", "ipnn"], instances, instances,
                                schema, _base_config(),
                                TrainConfig(batch_size=30, epochs=1, seed=0))
    assert len(rows) == 8
    for kind in ("fm", "dnn", "deepfm", "ipnn"):
        flags = [r["with_feature_generation"] for r in rows if r["kind"] == kind]
        assert sorted(flags) == [False, True]


# --- shuffle study ---------------------------------------------------------------------

def test_shuffle_identity_arm_matches_baseline_bit_exactly():
    schema, instances = _toy_data(n=60)
    base = _base_config(featgen=FeatureGenConfig(
        kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)))
    tc = TrainConfig(batch_size=30, epochs=1, seed=0)
    result = ex.run_shuffle_study(instances[:40], instances[40:], schema, base, tc,
                                  n_permutations=2, seed=3)
    assert result.permutations[0] == list(range(schema.n_f))
    baseline = ex.build_variant("full", base, schema, tc.seed)
    train(baseline, instances[:40], tc)
    from fgcnn.training import evaluate
    assert result.auc_with_recombination[0] == evaluate(baseline, instances[40:]).auc


def test_shuffle_arms_share_permutations_and_stats_nonnegative():
    schema, instances = _toy_data(n=60)
    tc = TrainConfig(batch_size=30, epochs=1, seed=0)
    result = ex.run_shuffle_study(instances[:40], instances[40:], schema,
                                  _base_config(), tc, n_permutations=3, seed=4)
    assert len(result.permutations) == 3
    assert len(result.auc_with_recombination) == 3
    assert len(result.auc_without_recombination) == 3
    assert result.std_with >= 0.0 and result.std_without >= 0.0


def test_shuffle_needs_two_permutations():
    schema, instances = _toy_data(n=20)
    with pytest.raises(ValueError):
        ex.run_shuffle_study(instances, instances, schema, _base_config(),
                             TrainConfig(epochs=1), n_permutations=1)


# --- sweep -------------------------------------------------------------------------

def test_sweep_layer_counts_emits_all_points():
    schema, instances = _toy_data(n=40, n_f=8)
    base = _base_config(featgen=FeatureGenConfig(
        kernel_heights=(2,), feature_maps=(2,), new_maps=(2,)))
    tc = TrainConfig(batch_size=20, epochs=1, seed=0)
    points = ex.sweep("n_layers", [1, 2, 3], instances, instances, schema, base, tc)
    assert len(points) == 3
    assert all("auc" in p for p in points)


def test_sweep_skips_invalid_kernel_heights():
    schema, instances = _toy_data(n=40, n_f=4)
    tc = TrainConfig(batch_size=20, epochs=1, seed=0)
    points = ex.sweep("kernel_height", [2, 4, 9], instances, instances, schema,
                      _base_config(), tc)
    assert "auc" in points[0] and "auc" in points[1]
    assert "skipped" in points[2]


def test_sweep_rejects_unknown_knob():
    schema, instances = _toy_data(n=20)
    with pytest.raises(ValueError):
        ex.sweep("width", [1], instances, instances, schema, _base_config(),
                 TrainConfig(epochs=1))


# --- CLI ---------------------------------------------------------------------------

TOY_CFG = """
[model]
k = 4

[feature_generation]
kernel_heights = 2
feature_maps = 2
new_maps = 2

[classifier]
kind = ipnn
hidden_sizes = 8

[training]
batch_size = 32
learning_rate = 0.003
epochs = 2
seed = 1

[synthetic]
n_fields = 4
cardinality = 4
pair = 0,2
strength = 2.0
n_train = 120
n_test = 60
"""


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CFG, encoding="utf-8")
    return path


def test_cli_train_is_deterministic(toy_cfg, tmp_path, capsys):
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    assert cli_main(["train", "--config", str(toy_cfg), "--out", str(out1)]) == 0
    assert cli_main(["train", "--config", str(toy_cfg), "--out", str(out2)]) == 0
    assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()
    assert (out1 / "metrics.txt").read_bytes() == (out2 / "metrics.txt").read_bytes()
    assert (out1 / "model.ckpt").read_bytes() == (out2 / "model.ckpt").read_bytes()


def test_cli_records_carry_seed_and_digest(toy_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli_main(["train", "--config", str(toy_cfg), "--out", str(out)]) == 0
    rows = [json.loads(line) for line in
            (out / "metrics.jsonl").read_text().splitlines()]
    assert all(r["seed"] == 1 for r in rows)
    assert len({r["config_digest"] for r in rows}) == 1


def test_cli_eval_roundtrip(toy_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli_main(["train", "--config", str(toy_cfg), "--out", str(out)]) == 0
    assert cli_main(["eval", "--config", str(toy_cfg), "--out", str(tmp_path / "ev"),
                     "--checkpoint", str(out / "model.ckpt")]) == 0
    rec = json.loads((tmp_path / "ev" / "eval.jsonl").read_text().splitlines()[0])
    assert 0.0 <= rec["auc"] <= 1.0


def test_cli_synth_writes_files(toy_cfg, tmp_path, capsys):
    out = tmp_path / "synth"
    assert cli_main(["synth", "--config", str(toy_cfg), "--out", str(out)]) == 0
    for name in ("train.csv", "test.csv", "train.probs", "test.probs", "schema.txt"):
        assert (out / name).exists()
    assert len((out / "test.probs").read_text().splitlines()) == 60


def test_cli_trains_from_files(toy_cfg, tmp_path, capsys):
    synth_dir = tmp_path / "synthdata"
    assert cli_main(["synth", "--config", str(toy_cfg), "--out", str(synth_dir)]) == 0
    cfg = tmp_path / "files.cfg"
    cfg.write_text(TOY_CFG + f"""
[data]
train = {synth_dir / 'train.csv'}
test = {synth_dir / 'test.csv'}
schema = {synth_dir / 'schema.txt'}
""", encoding="utf-8")
    assert cli_main(["train", "--config", str(cfg), "--out", str(tmp_path / "fr")]) == 0


def test_cli_unknown_flag_exits_one(toy_cfg, capsys):
    code = cli_main(["train", "--config", str(toy_cfg), "--bogus"])
    assert code == 1
    assert "usage" in capsys.readouterr().err


def test_cli_unknown_command_exits_one(capsys):
    assert cli_main(["frobnicate"]) == 1


def test_cli_missing_file_exits_two(tmp_path, capsys):
    assert cli_main(["train", "--config", str(tmp_path / "absent.cfg"),
                     "--out", str(tmp_path)]) == 2


def test_cli_bad_checkpoint_exits_two(toy_cfg, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"definitely not a checkpoint")
    assert cli_main(["eval", "--config", str(toy_cfg), "--out", str(tmp_path),
                     "--checkpoint", str(bad)]) == 2


def test_cli_complexity_prints_counts(toy_cfg, capsys):
    assert cli_main(["complexity", "--config", str(toy_cfg)]) == 0
    out = capsys.readouterr().out
    assert "embedding parameters" in out
    assert "enumerated tensor totals" in out


def test_cli_ablate_and_sweep_write_records(toy_cfg, tmp_path, capsys):
    out = tmp_path / "ab"
    assert cli_main(["ablate", "--config", str(toy_cfg), "--out", str(out)]) == 0
    lines = (out / "ablation.jsonl").read_text().splitlines()
    assert len(lines) == len(ex.VARIANT_NAMES)
    out2 = tmp_path / "sw"
    assert cli_main(["sweep", "--config", str(toy_cfg), "--knob", "new_maps",
                     "--values", "1,2", "--out", str(out2)]) == 0
    assert len((out2 / "sweep_new_maps.jsonl").read_text().splitlines()) == 2


def test_cli_shuffle_runs(toy_cfg, tmp_path, capsys):
    out = tmp_path / "sh"
    assert cli_main(["shuffle", "--config", str(toy_cfg), "--out", str(out),
                     "--permutations", "2"]) == 0
    blob = json.loads((out / "shuffle.json").read_text())
    assert len(blob["auc_with_recombination"]) == 2


def test_cli_gradcheck_exits_zero(tmp_path, capsys):
    assert cli_main(["gradcheck", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "gradcheck.json").exists()
    out = capsys.readouterr().out
    assert "full_model_ipnn" in out


def test_cli_gradcheck_failure_exits_three(monkeypatch, capsys):
    from fgcnn import checks

    monkeypatch.setattr(checks, "run_suite", lambda seeds: {"broken": 1.0})
    assert cli_main(["gradcheck", "--seed", "0"]) == 3
