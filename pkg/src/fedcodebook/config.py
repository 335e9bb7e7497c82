"""Run configuration: one INI file drives every command.

Sections mirror the pipeline stages (model / federation / optimizer /
data / task / run).  Unknown keys are rejected rather than ignored so a
typo cannot silently fall back to a default.  parse -> serialize ->
parse is an identity.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .federation import SCHEMES, TrainSettings
from .finetune import TaskSpec
from .graphs import LABEL_LEVELS, SynthConfig, SynthDomain
from .model import GVQDims

SCHEME_ALIASES = {"no-phase1": "fedbook_no_phase1",
                  "no-phase2": "fedbook_no_phase2"}


def normalize_scheme(name: str) -> str:
    scheme = SCHEME_ALIASES.get(name, name)
    if scheme not in SCHEMES:
        choices = sorted(set(SCHEMES) | set(SCHEME_ALIASES))
        raise ConfigError(f"unknown scheme {name!r}; choose from {choices}")
    return scheme


@dataclass
class RunConfig:
    # model
    d: int = 8
    d_e: int = 0
    d_h: int = 8
    heads: int = 2
    tokens_per_head: int = 4
    mask_ratio: float = 0.25
    gamma: float = 2.0
    # federation
    clients: int = 4
    rounds_phase1: int = 2
    rounds_phase2: int = 2
    local_epochs: int = 2
    scheme: str = "fedbook"
    lam: float = 0.5
    # optimizer
    optimizer: str = "adam"
    lr: float = 1e-4
    # data
    source: str = "synth"
    data_dir: str = ""
    domains: int = 2
    graphs_per_client: int = 1
    nodes_per_graph: int = 60
    class_count: int = 2
    intra_edge_prob: float = 0.3
    inter_edge_prob: float = 0.05
    class_sep: float = 1.0
    feature_noise: float = 0.3
    center_scale: float = 2.0
    label_level: str = "node"
    # task
    task_level: str = "node"
    metric: str = "accuracy"
    multilabel: bool = False
    train_frac: float = 0.6
    val_frac: float = 0.2
    few_shot_k: int | None = None
    finetune_epochs: int = 30
    finetune_lr: float = 1e-2
    # run
    seed: int = 0
    out: str = "runs/out"

    def validate(self):
        self.scheme = normalize_scheme(self.scheme)
        self.dims().validate()
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda {self.lam} outside [0, 1]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if self.gamma <= 0.0:
            raise ConfigError("gamma must be positive")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.rounds_phase1 < 0 or self.rounds_phase2 < 1:
            raise ConfigError("need rounds_phase1 >= 0 and rounds_phase2 >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.source not in ("synth", "files"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "files":
            if not self.data_dir:
                raise ConfigError("source=files requires data_dir")
            if not Path(self.data_dir).exists():
                raise ConfigError(f"data_dir {self.data_dir!r} does not exist")
        else:
            if self.domains < 1:
                raise ConfigError("domains must be >= 1")
            if self.clients % self.domains:
                raise ConfigError(
                    f"clients={self.clients} not divisible by domains={self.domains}")
            if self.label_level not in LABEL_LEVELS:
                raise ConfigError(f"unknown label level {self.label_level!r}")
        self.task_spec().validate()
        return self

    # ---------------------------------------------------- derived objects

    def dims(self) -> GVQDims:
        return GVQDims(d=self.d, d_h=self.d_h, heads=self.heads,
                       tokens_per_head=self.tokens_per_head, d_e=self.d_e)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(local_epochs=self.local_epochs,
                             optimizer=self.optimizer, lr=self.lr,
                             gamma=self.gamma, mask_ratio=self.mask_ratio,
                             lam=self.lam)

    def task_spec(self) -> TaskSpec:
        return TaskSpec(level=self.task_level, metric=self.metric,
                        train_frac=self.train_frac, val_frac=self.val_frac,
                        few_shot_k=self.few_shot_k, multilabel=self.multilabel)

    def synth_config(self) -> SynthConfig:
        """Domain centers are drawn once from the run seed, so the same
        config file always describes the same dataset."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xD0]))
        centers = rng.normal(size=(self.domains, self.d)) * self.center_scale
        doms = [SynthDomain(name=f"domain{i}", feature_center=centers[i],
                            intra_edge_prob=self.intra_edge_prob,
                            inter_edge_prob=self.inter_edge_prob,
                            class_count=self.class_count,
                            nodes_per_graph=self.nodes_per_graph)
                for i in range(self.domains)]
        per_domain = (self.clients // self.domains) * self.graphs_per_client
        return SynthConfig(domains=doms, graphs_per_domain=per_domain,
                           label_level=self.label_level,
                           class_sep=self.class_sep,
                           feature_noise=self.feature_noise,
                           with_edge_features=self.d_e > 0)


_SECTIONS = {
    "model": ("d", "d_e", "d_h", "heads", "tokens_per_head", "mask_ratio",
              "gamma"),
    "federation": ("clients", "rounds_phase1", "rounds_phase2", "local_epochs",
                   "scheme", "lambda"),
    "optimizer": ("optimizer", "lr"),
    "data": ("source", "data_dir", "domains", "graphs_per_client",
             "nodes_per_graph", "class_count", "intra_edge_prob",
             "inter_edge_prob", "class_sep", "feature_noise", "center_scale",
             "label_level"),
    "task": ("task_level", "metric", "multilabel", "train_frac", "val_frac",
             "few_shot_k", "finetune_epochs", "finetune_lr"),
    "run": ("seed", "out"),
}
_KEY_TO_FIELD = {"lambda": "lam"}


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def _convert(name: str, raw: str):
    kind = _field_types()[name]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "on", "1"):
                return True
            if raw.lower() in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "int | None":
            return None if raw in ("", "none") else int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None


def load_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            field = _KEY_TO_FIELD.get(key, key)
            setattr(cfg, field, _convert(field, raw))
    return cfg


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path!r} does not exist")
    return load_config(p.read_text(encoding="utf-8"))


def serialize_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser.add_section(section)
        for name in names:
            field = _KEY_TO_FIELD.get(name, name)
            value = getattr(cfg, field)
            parser.set(section, name, "" if value is None else repr(value)
                       if isinstance(value, float) else str(value))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path):
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")
