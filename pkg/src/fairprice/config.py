"""TOML run configuration.

Every section maps onto a dataclass; unknown sections or keys are rejected
before any computation starts. Hyperparameters keep the symbol names of the
method (``lambda_f``, ``lambda_S``, ``a``, ``b``, ``n_a``, ``n_e``,
``alpha_c``...). A minimal file::

    [data]
    path = "quotes.csv"

    [data.mapping]
    feature_columns = ["x1", "x2", "region"]
    categorical_columns = ["region"]
    sale_column = "sale"
    price_column = "price"
    premium_column = "premium"
    sensitive_columns = [["age", "continuous"]]

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from fairprice.data import ColumnMapping, ConfigurationError
from fairprice.hgr import HgrConfig
from fairprice.optimize import TrainConfig


@dataclass
class DataSection:
    path: str = ""
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    mapping: ColumnMapping | None = None


@dataclass
class ConversionSection:
    lr: float = 0.05
    epochs: int = 200
    batch_size: int = 256
    momentum: float = 0.9
    patience: int = 10
    seed: int = 0


@dataclass
class PremiumSection:
    source: str = "column"      # or "fitted"
    iterations: int = 25


@dataclass
class CoefficientSection:
    model: str = "linear"       # or "mlp"
    hidden: tuple[int, ...] = (32, 32)


@dataclass
class TrainSection:
    lambda_f: float = 0.0
    lambda_S: float = 0.0
    a: float = 1.2
    b: float = 1.6
    n_e: int = 100
    batch_size: int = 256
    alpha_c: float = 0.01
    alpha_phi: float = 0.01
    alpha_psi: float = 0.01
    n_a: int = 5
    seed: int = 0
    optimizer: str = "sgd"
    adversary_hidden: int = 16
    selection: str = "best"

    def train_config(self, **overrides) -> TrainConfig:
        values = dict(lambda_f=self.lambda_f, lambda_s=self.lambda_S, bounds=(self.a, self.b),
                      epochs=self.n_e, batch_size=self.batch_size, lr_c=self.alpha_c,
                      lr_phi=self.alpha_phi, lr_psi=self.alpha_psi, n_ascent=self.n_a,
                      seed=self.seed, optimizer=self.optimizer, adversary_hidden=self.adversary_hidden,
                      selection=self.selection)
        values.update(overrides)
        return TrainConfig(**values)


@dataclass
class BaselineSection:
    grid_step: float = 0.001
    refine: bool = True
    trees: int = 300
    depth: int = 5
    shrinkage: float = 0.1


@dataclass
class FairnessSection:
    sensitive: str = ""         # column scored and penalized; default: first sensitive column
    rdc_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    hgr_hidden: int = 16
    hgr_lr: float = 0.1
    hgr_max_steps: int = 2000
    hgr_window: int = 100
    hgr_tol: float = 1e-4
    hgr_seed: int = 0

    def hgr_config(self) -> HgrConfig:
        return HgrConfig(hidden=self.hgr_hidden, lr_phi=self.hgr_lr, lr_psi=self.hgr_lr,
                         max_steps=self.hgr_max_steps, window=self.hgr_window, tol=self.hgr_tol,
                         seed=self.hgr_seed)


@dataclass
class SweepSection:
    methods: tuple[str, ...] = ("optigrad", "indirect")
    lambda_f: tuple[float, ...] = (0.0, 1.0, 5.0, 25.0)
    lambda_S: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0,)
    fairness: bool = True
    fairness_splits: tuple[str, ...] = ("train", "dev", "test")
    dominance_window: float = 0.005


@dataclass
class SynthSection:
    n: int = 10_000
    n_features: int = 12
    elasticity: float = -7.0
    dependence: float = 0.9
    seed: int = 0


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    conversion: ConversionSection = field(default_factory=ConversionSection)
    premium: PremiumSection = field(default_factory=PremiumSection)
    coefficient: CoefficientSection = field(default_factory=CoefficientSection)
    train: TrainSection = field(default_factory=TrainSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    fairness: FairnessSection = field(default_factory=FairnessSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    synth: SynthSection = field(default_factory=SynthSection)
    out: str = "out"
    jobs: int = 1
    source: str = ""            # path the config was read from (not hashed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        if self.data.mapping is not None:
            d["data"]["mapping"] = self.data.mapping.to_dict()
        return json.loads(json.dumps(d))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        if self.premium.source not in ("column", "fitted"):
            raise ConfigurationError(f"premium.source must be 'column' or 'fitted', got {self.premium.source!r}")
        if self.coefficient.model not in ("linear", "mlp"):
            raise ConfigurationError(f"coefficient.model must be 'linear' or 'mlp', got {self.coefficient.model!r}")
        if abs(sum(self.data.ratios) - 1.0) > 1e-9 or min(self.data.ratios) <= 0:
            raise ConfigurationError(f"data.ratios must be positive and sum to 1, got {self.data.ratios}")
        from fairprice.eval import METHODS
        for m in self.sweep.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown sweep method {m!r}; expected one of {METHODS}")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")
        try:
            self.train.train_config()
        except ValueError as exc:
            raise ConfigurationError(f"[train] {exc}") from exc
        if self.data.mapping is not None:
            self.data.mapping.validate()
            names = self.data.mapping.sensitive_names
            if self.fairness.sensitive and self.fairness.sensitive not in names:
                raise ConfigurationError(f"fairness.sensitive {self.fairness.sensitive!r} is not a sensitive column")
        if self.premium.source == "column" and self.data.mapping is not None \
                and self.data.mapping.premium_column is None:
            raise ConfigurationError("premium.source = 'column' needs data.mapping.premium_column")

    def sensitive_index(self) -> int:
        if not self.fairness.sensitive or self.data.mapping is None:
            return 0
        return self.data.mapping.sensitive_names.index(self.fairness.sensitive)


def _coerce(cls, table: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    values = {}
    for name, value in table.items():
        default = getattr(cls(), name) if name != "mapping" else None
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigurationError(f"[{where}] {name} must be a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigurationError(f"[{where}] {name} must be true or false")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(f"[{where}] {name} must be a number")
            value = float(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigurationError(f"[{where}] {name} must be an integer")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigurationError(f"[{where}] {name} must be a string")
        values[name] = value
    return cls(**values)


_SECTIONS = {"data": DataSection, "conversion": ConversionSection, "premium": PremiumSection,
             "coefficient": CoefficientSection, "train": TrainSection, "baselines": BaselineSection,
             "fairness": FairnessSection, "sweep": SweepSection, "synth": SynthSection}


def config_from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    doc = dict(doc)
    top = {k: doc.pop(k) for k in ("out", "jobs") if k in doc}
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        table = dict(doc.get(name, {}))
        if not isinstance(table, dict):
            raise ConfigurationError(f"[{name}] must be a table")
        mapping = table.pop("mapping", None) if name == "data" else None
        section = _coerce(cls, table, name)
        if mapping is not None:
            try:
                mapping = dict(mapping)
                mapping["sensitive_columns"] = [tuple(x) for x in mapping.get("sensitive_columns", [])]
                section.mapping = ColumnMapping.from_dict(mapping)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"[data.mapping] {exc}") from exc
        sections[name] = section
    cfg = RunConfig(**sections)
    if "out" in top:
        cfg.out = str(top["out"])
    if "jobs" in top:
        if not isinstance(top["jobs"], int) or isinstance(top["jobs"], bool):
            raise ConfigurationError("jobs must be an integer")
        cfg.jobs = top["jobs"]
    if base_dir is not None:
        if cfg.data.path and not Path(cfg.data.path).is_absolute():
            cfg.data.path = str(base_dir / cfg.data.path)
        if not Path(cfg.out).is_absolute():
            cfg.out = str(base_dir / cfg.out)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        doc = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    cfg = config_from_dict(doc, path.resolve().parent)
    cfg.source = str(path)
    return cfg


def mapping_toml(mapping: ColumnMapping) -> str:
    """The ``[data.mapping]`` table for ``mapping`` as TOML text."""
    lines = ["[data.mapping]"]
    for key, value in mapping.to_dict().items():
        if value is None:
            continue
        if key == "sensitive_columns":
            value = [list(v) for v in value]
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
