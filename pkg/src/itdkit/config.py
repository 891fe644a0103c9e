"""Run configuration: declarative YAML files plus flag overrides.

Precedence is flags > file > defaults. Unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields as dc_fields

import yaml

ABLATION_LETTERS = "GHRSWP"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    hidden_size: int = 128
    pooling_heads: int = 8
    similarity_heads: int = 4
    epsilon: float = 0.5
    k: int = 15
    mu1: float = 0.2
    mu2: float = 0.1
    mu3: float = 0.1
    normalize_laplacian: bool = True
    encoder: str = "lstm"
    gnn: str = "gcn"
    gnn_layers: int = 1
    attention_norm: str = "softmax"
    pool_mode: str = "trainable"
    max_len: int = 256
    # ablation: letters to disable, e.g. "PW" switches off attentive
    # pooling and negative-feedback weighting
    ablation: str = ""
    # training
    r: object = "auto"  # negative-feedback weight; "auto" = train-split IR
    imbalance_mode: str = "weighted"  # "replicate" for the replication variant
    lr: object = "auto"  # "auto" selects from lr_grid by validation AUC
    lr_grid: tuple = (1e-4, 3e-4, 1e-3)
    weight_decay: float = 0.01
    batch_size: int = 256
    max_epochs: int = 10
    patience: int = 10
    seed: int = 1
    refresh_cadence: int = 1
    # retrieval
    ann_metric: str = "cosine"  # or "ip"
    ann_m: int = 24
    ann_ef_construction: int = 200
    ann_ef_search: int = 256
    # ingest / temporal split (defaults follow the CERT convention:
    # 2010 for train/validation, first half of 2011 for test)
    hour_offset: int = 0
    test_start: object = "2011-01-01"
    test_end: object = "2011-07-01"
    val_fraction: float = 0.1

    def validate(self):
        if self.hidden_size < 1:
            raise ConfigError("hidden_size must be positive")
        if self.pooling_heads < 1 or self.hidden_size % self.pooling_heads:
            raise ConfigError("hidden_size must be divisible by pooling_heads")
        if self.similarity_heads < 1:
            raise ConfigError("similarity_heads must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        for name in ("mu1", "mu2", "mu3"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v >= 0):
                raise ConfigError(f"{name} must be a non-negative number")
        if self.encoder not in ("rnn", "gru", "lstm", "attention"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.gnn not in ("gcn", "gat"):
            raise ConfigError(f"unknown gnn {self.gnn!r}")
        if self.gnn_layers < 1:
            raise ConfigError("gnn_layers must be >= 1")
        if self.attention_norm not in ("softmax", "raw_sum"):
            raise ConfigError(f"unknown attention_norm {self.attention_norm!r}")
        if self.pool_mode not in ("trainable", "encoder_cache"):
            raise ConfigError(f"unknown pool_mode {self.pool_mode!r}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        bad = set(self.ablation.upper()) - set(ABLATION_LETTERS)
        if bad:
            raise ConfigError(f"unknown ablation letters {sorted(bad)}")
        self.ablation = self.ablation.upper()
        if self.r != "auto" and not (isinstance(self.r, (int, float)) and self.r >= 1):
            raise ConfigError("r must be 'auto' or a number >= 1")
        if self.imbalance_mode not in ("weighted", "replicate"):
            raise ConfigError(f"unknown imbalance_mode {self.imbalance_mode!r}")
        if self.lr != "auto" and not (isinstance(self.lr, (int, float)) and self.lr > 0):
            raise ConfigError("lr must be 'auto' or a positive number")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if self.refresh_cadence < 1:
            raise ConfigError("refresh_cadence must be >= 1")
        if self.ann_metric not in ("cosine", "ip"):
            raise ConfigError(f"unknown ann_metric {self.ann_metric!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self

    def disabled(self, letter):
        return letter in self.ablation

    @property
    def use_graph(self):
        return not self.disabled("G")

    @property
    def use_hybrid(self):
        return not self.disabled("H")

    @property
    def use_reg(self):
        return not self.disabled("R") and self.use_graph

    @property
    def use_weighted_cosine(self):
        return not self.disabled("S")

    @property
    def use_weighting(self):
        return not self.disabled("W")

    @property
    def use_attentive_pooling(self):
        return not self.disabled("P")

    def to_dict(self):
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in dc_fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "lr_grid" in data:
            data["lr_grid"] = tuple(data["lr_grid"])
        cfg = cls(**data)
        return cfg.validate()


def load_run_config(path=None, overrides=None):
    """Defaults, overlaid by the YAML file at ``path`` (if given), then
    by non-None entries of ``overrides``."""
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        data.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)
