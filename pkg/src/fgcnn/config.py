"""Experiment configuration files: key = value pairs inside named sections.

Sections: [model], [feature_generation], [classifier], [training], [data],
[synthetic], [complexity]. Every knob has a desk-scale default, so a config
file only states what it changes.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, replace
from typing import Optional

from .classifier import ClassifierConfig
from .featuregen import FeatureGenConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    """Unreadable or inconsistent configuration file."""


@dataclass
class DataConfig:
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    schema_path: Optional[str] = None
    min_count: int = 1
    max_vals: Optional[int] = None


@dataclass
class SyntheticConfig:
    n_fields: int = 8
    cardinality: int = 10
    pair: tuple[int, int] = (1, 5)
    strength: float = 2.0
    bias: float = 0.0
    seed: int = 0
    n_train: int = 20000
    n_test: int = 5000


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    synthetic: Optional[SyntheticConfig] = None
    schema_dims: Optional[tuple[int, int]] = None      # (n_f, t_f) for complexity-only runs

    def digest(self) -> str:
        payload = {
            "model": self.model.to_dict(),
            "train": vars(self.train),
            "data": vars(self.data),
            "synthetic": vars(self.synthetic) if self.synthetic else None,
        }
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def default_config() -> ExperimentConfig:
    """Desk-scale defaults: small synthetic task, minutes-scale training."""
    model = ModelConfig(
        k=8,
        classifier=ClassifierConfig(kind="ipnn", hidden_sizes=(64, 32),
                                    use_bn=False, dropout_keep=1.0),
        featgen=FeatureGenConfig(kernel_heights=(2, 2), feature_maps=(3, 3),
                                 new_maps=(3, 3), pool_height=2),
        include_raw=True,
    )
    train = TrainConfig(batch_size=256, learning_rate=1e-3, epochs=5, seed=0)
    return ExperimentConfig(model=model, train=train, data=DataConfig(),
                            synthetic=SyntheticConfig())


def _ints(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "t", "yes", "on"):
        return True
    if v in ("0", "false", "f", "no", "off"):
        return False
    raise ConfigFileError(f"not a boolean: {raw!r}")


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigFileError(f"cannot read config file {path}")
    cfg = default_config()
    try:
        if parser.has_section("model"):
            s = parser["model"]
            cfg.model.k = s.getint("k", cfg.model.k)
            cfg.model.include_raw = _bool(s.get("include_raw", str(cfg.model.include_raw)))
        if parser.has_section("feature_generation"):
            s = parser["feature_generation"]
            if not _bool(s.get("enabled", "true")):
                cfg.model.featgen = None
            else:
                fg = cfg.model.featgen or FeatureGenConfig(
                    kernel_heights=(2,), feature_maps=(3,), new_maps=(3,))
                if "kernel_heights" in s:
                    fg = replace(fg, kernel_heights=_ints(s["kernel_heights"]))
                if "feature_maps" in s:
                    fg = replace(fg, feature_maps=_ints(s["feature_maps"]))
                if "new_maps" in s:
                    fg = replace(fg, new_maps=_ints(s["new_maps"]))
                if "pool_height" in s:
                    fg = replace(fg, pool_height=s.getint("pool_height"))
                if "use_bn" in s:
                    fg = replace(fg, use_bn=_bool(s["use_bn"]))
                if "use_recombination" in s:
                    fg = replace(fg, use_recombination=_bool(s["use_recombination"]))
                if "style" in s:
                    fg = replace(fg, style=s["style"].strip())
                cfg.model.featgen = fg
        if parser.has_section("classifier"):
            s = parser["classifier"]
            c = cfg.model.classifier
            cfg.model.classifier = ClassifierConfig(
                kind=s.get("kind", c.kind).strip(),
                hidden_sizes=_ints(s["hidden_sizes"]) if "hidden_sizes" in s else c.hidden_sizes,
                use_bn=_bool(s.get("use_bn", str(c.use_bn))),
                dropout_keep=s.getfloat("dropout_keep", c.dropout_keep),
            )
        if parser.has_section("training"):
            s = parser["training"]
            t = cfg.train
            cfg.train = TrainConfig(
                batch_size=s.getint("batch_size", t.batch_size),
                learning_rate=s.getfloat("learning_rate", t.learning_rate),
                epochs=s.getint("epochs", t.epochs),
                seed=s.getint("seed", t.seed),
                l2_embedding=s.getfloat("l2_embedding", t.l2_embedding),
                eval_every=s.getint("eval_every", t.eval_every),
                precision=s.get("precision", t.precision).strip(),
            )
        if parser.has_section("data"):
            s = parser["data"]
            cfg.data = DataConfig(
                train_path=s.get("train", None),
                test_path=s.get("test", None),
                schema_path=s.get("schema", None),
                min_count=s.getint("min_count", 1),
                max_vals=s.getint("max_vals") if "max_vals" in s else None,
            )
        if parser.has_section("synthetic"):
            s = parser["synthetic"]
            d = cfg.synthetic or SyntheticConfig()
            pair = _ints(s.get("pair", f"{d.pair[0]},{d.pair[1]}"))
            cfg.synthetic = SyntheticConfig(
                n_fields=s.getint("n_fields", d.n_fields),
                cardinality=s.getint("cardinality", d.cardinality),
                pair=(pair[0], pair[1]),
                strength=s.getfloat("strength", d.strength),
                bias=s.getfloat("bias", d.bias),
                seed=s.getint("seed", d.seed),
                n_train=s.getint("n_train", d.n_train),
                n_test=s.getint("n_test", d.n_test),
            )
        if parser.has_section("complexity"):
            s = parser["complexity"]
            cfg.schema_dims = (s.getint("n_fields"), s.getint("total_features"))
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigFileError):
            raise
        raise ConfigFileError(f"{path}: {exc}") from exc
    return cfg
