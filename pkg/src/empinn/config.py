"""Experiment configuration, presets and (de)serialization."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .diffcore import ConfigurationError
from .network import EmbeddingSpec, NetworkConfig


@dataclass
class AdamPhase:
    steps: int = 0
    lr: float = 1e-3
    decay_steps: int = 0
    decay_rate: float = 1.0


@dataclass
class LbfgsPhase:
    max_iter: int = 0
    lr: float = 1.0
    m_hist: int = 50
    tol: float = 1e-12


@dataclass
class TrainConfig:
    adam: AdamPhase = field(default_factory=AdamPhase)
    lbfgs: LbfgsPhase = field(default_factory=LbfgsPhase)
    log_every: int = 100
    resample_every: int = 0  # redraw random collocation sets every k Adam steps; 0 = fixed


@dataclass
class CollocationConfig:
    residual: int = 1000
    ic: int = 0
    bc: int = 0
    strategy: str = "uniform_random"


@dataclass
class LossWeights:
    lambda_ic: float = 100.0
    lambda_bc: float = 1.0
    lambda_r: float = 1.0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    problem: str = "helmholtz"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    collocation: CollocationConfig = field(default_factory=CollocationConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"
    eval_shape: list | None = None
    reference_path: str | None = None
    check_rel_l2: float | None = None

    def validate(self):
        if self.problem not in ("allen_cahn", "helmholtz", "advection"):
            raise ConfigurationError(f"unknown problem {self.problem!r}")
        if not self.seeds:
            raise ConfigurationError("seed list is empty")
        net = self.network
        kind = net.embedding.kind
        if self.problem == "allen_cahn" and kind != "periodic_1d_plus_time":
            raise ConfigurationError("allen_cahn imposes its periodic boundary through periodic_1d_plus_time")
        if self.problem in ("allen_cahn", "advection") and kind == "gaussian_fourier":
            raise ConfigurationError(f"{self.problem} does not use Gaussian Fourier features")
        if self.problem == "helmholtz" and kind in ("periodic_1d_plus_time", "periodic_x_and_t"):
            raise ConfigurationError("helmholtz has no time coordinate for a periodic embedding")
        if net.output_transform == "adf_helmholtz" and self.problem != "helmholtz":
            raise ConfigurationError("adf_helmholtz transform only applies to helmholtz")
        if net.n_inputs != 2:
            raise ConfigurationError("all benchmarks have two input coordinates")
        if self.train.adam.steps < 0 or self.train.lbfgs.max_iter < 0 or self.train.log_every < 1 \
                or self.train.resample_every < 0:
            raise ConfigurationError("step budgets and resample_every must be non-negative, log_every positive")
        return self


def to_dict(config):
    return dataclasses.asdict(config)


def _coerce(value, type_name, where):
    # YAML 1.1 resolves "1e-12" (no dot) to a string; accept it for float fields
    is_float = type_name is float or str(type_name).startswith("float")
    if isinstance(value, str) and is_float:
        try:
            return float(value)
        except ValueError:
            raise ConfigurationError(f"{where} expects a number, got {value!r}") from None
    if isinstance(value, int) and not isinstance(value, bool) and is_float:
        return float(value)
    return value


def _build(cls, data):
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    kwargs = {}
    nested = {
        "network": NetworkConfig,
        "embedding": EmbeddingSpec,
        "train": TrainConfig,
        "adam": AdamPhase,
        "lbfgs": LbfgsPhase,
        "collocation": CollocationConfig,
        "weights": LossWeights,
    }
    for key, value in data.items():
        sub = nested.get(key)
        if sub is not None and isinstance(value, dict) and names[key].type not in ("dict",):
            value = _build(sub, value)
        kwargs[key] = _coerce(value, names[key].type, f"{cls.__name__}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def from_dict(data):
    return _build(ExperimentConfig, data).validate()


def load_config(path):
    path = Path(path)
    text = path.read_text()
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    return from_dict(data)


def save_config(config, path):
    path = Path(path)
    data = to_dict(config)
    if path.suffix in (".yaml", ".yml"):
        path.write_text(yaml.safe_dump(data, sort_keys=False))
    else:
        path.write_text(json.dumps(data, indent=2))


def apply_overrides(config, overrides):
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    data = to_dict(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigurationError(f"override key {key!r} does not exist")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigurationError(f"override key {key!r} does not exist")
        node[parts[-1]] = value
    return from_dict(data)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------


def _allen_cahn(name, blocks, width, steps, points, seeds, check=None):
    return ExperimentConfig(
        name=name,
        problem="allen_cahn",
        network=NetworkConfig(
            arch="em",
            num_blocks=blocks,
            width=width,
            embedding=EmbeddingSpec("periodic_1d_plus_time", m=10, period_x=2.0),
        ),
        train=TrainConfig(adam=AdamPhase(steps=steps, lr=1e-3, decay_steps=8000, decay_rate=0.9)),
        collocation=CollocationConfig(residual=points, ic=256),
        weights=LossWeights(lambda_ic=100.0),
        seeds=seeds,
        eval_shape=[201, 513],
        check_rel_l2=check,
    )


def _helmholtz(name, seeds, lbfgs_iter=500, check=None):
    return ExperimentConfig(
        name=name,
        problem="helmholtz",
        network=NetworkConfig(
            arch="em",
            num_blocks=1,
            width=64,
            embedding=EmbeddingSpec("gaussian_fourier", scale=2.0, num_features=32),
            output_transform="adf_helmholtz",
        ),
        train=TrainConfig(
            adam=AdamPhase(steps=500, lr=0.005),
            lbfgs=LbfgsPhase(max_iter=lbfgs_iter, lr=1.0),
        ),
        collocation=CollocationConfig(residual=10201, strategy="grid"),
        weights=LossWeights(lambda_ic=0.0, lambda_bc=1.0),
        seeds=seeds,
        eval_shape=[101, 101],
        check_rel_l2=check,
    )


def _advection(name, blocks, width, steps, points, seeds, check=None):
    return ExperimentConfig(
        name=name,
        problem="advection",
        network=NetworkConfig(
            arch="em",
            num_blocks=blocks,
            width=width,
            embedding=EmbeddingSpec("periodic_x_and_t", period_x=2 * np.pi, period_t=2 * np.pi),
        ),
        train=TrainConfig(adam=AdamPhase(steps=steps, lr=1e-3, decay_steps=2000, decay_rate=0.9)),
        collocation=CollocationConfig(residual=points, ic=256, bc=256),
        weights=LossWeights(lambda_ic=100.0, lambda_bc=1.0),
        seeds=seeds,
        eval_shape=[201, 257],
        check_rel_l2=check,
    )


PRESETS = {
    "allen_cahn_paper": lambda: _allen_cahn("allen_cahn_paper", 4, 185, 300_000, 25_600, [0, 1, 2, 3, 4]),
    "allen_cahn_desk": lambda: _allen_cahn("allen_cahn_desk", 2, 128, 50_000, 8_192, [0, 1, 2], check=1e-2),
    "helmholtz_paper": lambda: _helmholtz("helmholtz_paper", [0, 1, 2, 3, 4]),
    "helmholtz_desk": lambda: _helmholtz("helmholtz_desk", [0, 1, 2, 3, 4], check=1e-4),
    "advection_paper": lambda: _advection("advection_paper", 22, 128, 100_000, 20_000, [0, 1, 2, 3, 4]),
    "advection_desk": lambda: _advection("advection_desk", 4, 64, 30_000, 20_000, [0, 1, 2], check=5e-2),
}


def preset(name):
    try:
        return PRESETS[name]().validate()
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
