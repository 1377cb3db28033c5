"""Run configuration documents (YAML), validation and conversion to library objects."""
from __future__ import annotations

import ast
import math
import operator
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from deepwiener.core import Activation, ActivationKind
from deepwiener.discretization import DiscretizationMethod
from deepwiener.network import Architecture, InitOptions, LayerSpec, dimension_plan
from deepwiener.training import TrainConfig

PRESETS = ("s4-silverbox", "s5-silverbox", "s5r-silverbox", "lru-silverbox")

_OPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
    ast.Pow: operator.pow, ast.USub: operator.neg, ast.UAdd: operator.pos,
}


class ConfigError(ValueError):
    pass


def eval_expr(text: str) -> float:
    """Arithmetic on numbers and ``pi`` only, e.g. ``"3*pi/4"`` or ``"1/610.35"``."""

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ValueError(f"unsupported expression {text!r}")

    return ev(ast.parse(text.strip(), mode="eval"))


def _number(v):
    return eval_expr(v) if isinstance(v, str) else v


Real = Annotated[float, BeforeValidator(_number)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    parametrization: Union[Literal["lru", "ct_diag", "dplr"], list[Literal["lru", "ct_diag", "dplr"]]] = "lru"
    n_layers: int = Field(4, ge=1)
    n_lambda: int = Field(10, ge=1)
    hidden: int = Field(4, ge=1)
    n_u: int = Field(1, ge=1)
    n_y: int = Field(1, ge=1)
    activation: Literal["tanh", "elu", "swish"] = "elu"
    elu_alpha: Real = Field(1.0, gt=0)
    discretization: Literal["zoh", "bilinear", "forward_euler"] = "zoh"
    gamma_mode: Literal["scalar", "diagonal"] = "scalar"
    n_r: int = Field(1, ge=1)
    q_equals_p: bool = True
    epsilon: Real = Field(1e-3, gt=0)

    @model_validator(mode="after")
    def _layers(self):
        if isinstance(self.parametrization, list) and len(self.parametrization) != self.n_layers:
            raise ValueError(f"parametrization lists {len(self.parametrization)} layers, n_layers is {self.n_layers}")
        return self


class InitSection(_Section):
    strategy: Literal["ring", "hippo"] = "ring"
    r_min: Real = 0.5
    r_max: Real = 0.95
    theta_min: Real = 0.0
    theta_max: Real = math.pi
    ring_units: Literal["absolute", "nyquist"] = "absolute"
    clamp_phase: bool = True
    gamma: Union[Real, tuple[Real, Real]] = 1.0
    nyquist: Literal["warn", "rescale", "off"] = "warn"
    project_b: bool = True
    low_rank_scale: Real = 0.1
    seed: int = 0


class TrainSection(_Section):
    batch_size: int = 40
    lr0: Real = 0.003
    plateau_patience: int = 30
    plateau_factor: Real = 0.8
    early_stop_patience: int = 150
    max_epochs: int = 2750
    seed: int = 0
    adam_beta1: Real = 0.9
    adam_beta2: Real = 0.999
    adam_eps: Real = 1e-8

    @model_validator(mode="after")
    def _check(self):
        TrainConfig(**self.model_dump())
        return self


class DataSection(_Section):
    tau: Real = 1.0
    train_paths: list[str] = []
    val_paths: list[str] = []
    test_path: str | None = None
    experiment_length: int | None = Field(None, ge=1)
    val_experiments: int = Field(0, ge=0)
    val_fraction: Real = Field(0.2, gt=0, lt=1)
    window_length: int = Field(512, ge=1)
    windows_per_experiment: int = Field(76, ge=1)
    window_policy: Literal["disjoint", "even", "random"] = "even"
    window_stride: Real | None = None
    window_seed: int = 0
    output_scale: Real = 1.0
    output_unit: str = ""

    @model_validator(mode="after")
    def _tau(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        return self


class RunConfig(_Section):
    model: ModelSection = ModelSection()
    init: InitSection = InitSection()
    train: TrainSection = TrainSection()
    data: DataSection = DataSection()

    def architecture(self) -> Architecture:
        m = self.model
        kinds = m.parametrization if isinstance(m.parametrization, list) else [m.parametrization] * m.n_layers
        specs = [
            LayerSpec(kind, n_u, n_y, m.n_lambda, n_r=m.n_r, gamma_mode=m.gamma_mode, q_equals_p=m.q_equals_p,
                      tau=self.data.tau, epsilon=m.epsilon)
            for kind, (n_u, n_y) in zip(kinds, dimension_plan(m.n_u, m.n_y, m.n_layers, m.hidden))
        ]
        return Architecture(specs, Activation(ActivationKind(m.activation), m.elu_alpha),
                            DiscretizationMethod(m.discretization))

    def init_options(self) -> InitOptions:
        d = self.init.model_dump(exclude={"seed"})
        if isinstance(d["gamma"], (list, tuple)):
            d["gamma"] = tuple(d["gamma"])
        return InitOptions(**d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump())

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def _coerce(value: str):
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` assignments (values parsed as YAML scalars or lists)."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _coerce(value)
    return doc


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"])
        lines.append(f"{where}: {e['msg']}")
    return "; ".join(lines)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p):
        q = Path(p).expanduser()
        return str(q if q.is_absolute() else base / q)

    d = cfg.data
    data = d.model_copy(update={
        "train_paths": [fix(p) for p in d.train_paths],
        "val_paths": [fix(p) for p in d.val_paths],
        "test_path": None if d.test_path is None else fix(d.test_path),
    })
    return cfg.model_copy(update={"data": data})


def parse_config(doc: dict | None, overrides: list[str] | None = None, base: Path | None = None) -> RunConfig:
    doc = apply_overrides(dict(doc or {}), overrides or [])
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None
    return _resolve_paths(cfg, base) if base is not None else cfg


def preset_text(name: str) -> str:
    name = name.removesuffix(".yaml")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("deepwiener.presets").joinpath(f"{name}.yaml").read_text()


def load_config(path_or_preset, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML file or a shipped preset name; relative data paths resolve against the file."""
    path = Path(path_or_preset)
    if path.is_file():
        text, base = path.read_text(), path.resolve().parent
    elif str(path_or_preset).removesuffix(".yaml") in PRESETS:
        text, base = preset_text(str(path_or_preset)), Path.cwd()
    else:
        raise ConfigError(f"config file {path_or_preset} not found")
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path_or_preset}: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path_or_preset}: top level must be a mapping")
    return parse_config(doc, overrides, base)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.resolved(), sort_keys=False))
