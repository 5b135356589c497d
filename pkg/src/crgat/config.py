"""Flat ``key = value`` experiment configuration with dotted section prefixes.

Example::

    seed = 3
    scenario.n_t = 4
    scenario.k_users = 2
    scenario.r_req = 0.5
    model.head_dims = 16, 16
    model.heads = 4, 4
    model.dense_dims = 64
    training.loss = pm
    training.lambda = 10

Unknown keys, duplicate keys and unparsable values are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import ScaConfig
from .channels import ScenarioConfig
from .errors import ContractError
from .model import CrgatConfig
from .oracle import OracleBudget
from .training import TrainConfig


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs from which a :class:`CrgatConfig` is built once N_T is known."""

    head_dims: tuple[int, ...] = (32, 64, 128, 256)
    heads: tuple[int, ...] = (10, 10, 10, 10)
    dense_dims: tuple[int, ...] = (1024, 512)
    leaky_slope: float = 0.2
    residual: bool = True
    # "auto" rescales inputs by the inverse RMS of the training channels
    input_scale: str = "1"

    def __post_init__(self):
        if len(self.head_dims) != len(self.heads):
            raise ContractError("model.head_dims and model.heads must have the same length")

    def build(self, n_t: int, p_max: float, h_train: np.ndarray | None = None) -> CrgatConfig:
        if self.input_scale == "auto":
            if h_train is None or len(h_train) == 0:
                raise ContractError("model.input_scale = auto needs training data")
            scale = 1.0 / float(np.sqrt(np.mean(np.abs(h_train) ** 2)))
        else:
            scale = float(self.input_scale)
        return CrgatConfig.build(
            n_t,
            head_dims=self.head_dims,
            heads=self.heads,
            dense_dims=self.dense_dims,
            leaky_slope=self.leaky_slope,
            p_max=p_max,
            residual=self.residual,
            input_scale=scale,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    scenario: ScenarioConfig
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    sca: ScaConfig = field(default_factory=ScaConfig)
    oracle: OracleBudget = field(default_factory=OracleBudget)

    def digest(self, section: str) -> str:
        """Stable hash of one section, used to key cached reference solutions."""
        obj = getattr(self, section)
        text = json.dumps(dataclasses.asdict(obj), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_ALIASES = {"training.lambda": "training.lam"}
_SECTIONS = {
    "scenario": ScenarioConfig,
    "model": ModelSpec,
    "training": TrainConfig,
    "sca": ScaConfig,
    "oracle": OracleBudget,
}
_SKIP = {("sca", "barrier")}


def _parse_value(raw: str, annotation: str, key: str):
    ann = annotation.replace(" ", "")
    try:
        if ann.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if ann.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if ann == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ann == "int":
            return int(raw)
        if ann in ("float", "float|None"):
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError:
        raise ContractError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    seed = None
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in seen:
            raise ContractError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key == "seed":
            seed = _parse_value(raw, "int", key)
            continue
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        types = {f.name: f.type for f in dataclasses.fields(cls)} if cls else {}
        if cls is None or name not in types or (section, name) in _SKIP:
            raise ContractError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _parse_value(raw, str(types[name]), key)
    if seed is None:
        raise ContractError("config must set 'seed'")
    scen = values["scenario"]
    if "n_t" not in scen or "k_users" not in scen:
        raise ContractError("config must set scenario.n_t and scenario.k_users")
    scen.setdefault("seed", seed)
    values["training"].setdefault("seed", seed)
    values["oracle"].setdefault("seed", seed)
    return ExperimentConfig(seed=seed, **{name: _SECTIONS[name](**kw) for name, kw in values.items()})


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ContractError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)
