"""Run configuration: a TOML (or JSON) document validated before any computation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigInvalid
from .geometry import METRIC_PRESETS, MetricPreset, register_metric_preset
from .system import NONLINEARITY_PRESETS, NonlinearityPreset, register_nonlinearity_preset

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ChartConfig(Strict):
    metric: str
    params: dict = Field(default_factory=dict)
    ranges: Optional[list[tuple[float, float]]] = None


class NonlinearityConfig(Strict):
    name: str
    params: dict = Field(default_factory=dict)


class PresetAlias(Strict):
    """A named preset that reuses ``base`` with some parameters fixed."""

    name: str
    base: str
    params: dict = Field(default_factory=dict)
    doc: str = ""


class CustomPresets(Strict):
    metric: list[PresetAlias] = Field(default_factory=list)
    nonlinearity: list[PresetAlias] = Field(default_factory=list)


class FunctionsConfig(Strict):
    count: int = Field(10, ge=1)
    seed: int = 0
    max_k: int = Field(2, ge=1)


class Term(Strict):
    amplitude: float
    k: list[float]
    phase: float = 0.0


class FieldConfig(Strict):
    """``offset + sum amplitude cos(k . x + phase)``."""

    terms: list[Term]
    offset: float = 0.0


class InitialConfig(Strict):
    kind: Literal["random", "constant", "bump", "file"] = "random"
    amplitude: float = 0.5
    value: Union[float, list[float]] = 0.0
    path: Optional[str] = None


class FamilyConfig(Strict):
    kind: Literal["random-bump", "trig-mix"] = "random-bump"
    count: int = Field(1000, ge=0)


class _Experiment(Strict):
    id: Optional[str] = None
    chart: Optional[ChartConfig] = None


class BochnerOptions(_Experiment):
    kind: Literal["bochner_sweep"]
    resolutions: list[int] = [32, 64, 128]
    functions: FunctionsConfig = FunctionsConfig()
    margin: float = 0.3


class HessianOptions(_Experiment):
    kind: Literal["hessian_inequality_scan"]
    n: int = 64
    functions: FunctionsConfig = FunctionsConfig()
    eps_grad: float = Field(1e-3, gt=0)


class LiouvilleOptions(_Experiment):
    kind: Literal["liouville_compact"]
    n: int = 64
    n_starts: int = Field(20, ge=1)
    amplitude: float = 0.5
    dt: float = Field(0.2, gt=0)
    steps: int = Field(500, ge=0)
    controls: list[Union[float, list[float]]] = Field(default_factory=list)


class VolumeOptions(_Experiment):
    kind: Literal["volume_growth"]
    dim: Literal[2, 3] = 2
    R_list: list[float] = [2.0, 4.0, 8.0, 16.0]
    h: Optional[float] = None


class CapacityOptions(_Experiment):
    kind: Literal["parabolicity_capacity"]
    dim: Literal[2, 3] = 2
    R_list: list[float] = [8.0, 16.0, 32.0]
    n_radial: int = 257
    n_angular: int = 16


class LevelSetOptions(_Experiment):
    kind: Literal["level_set_geodesic_check"]
    n: int = 128
    field: FieldConfig
    level: float
    eps_grad: float = Field(1e-3, gt=0)
    expect_geodesic: Optional[bool] = None
    tol: float = 2e-3


class StabilityOptions(_Experiment):
    kind: Literal["stability_suite"]
    n: int = 64
    bc: Literal["neumann", "dirichlet"] = "neumann"
    initial: InitialConfig = InitialConfig()
    dt: float = Field(0.2, gt=0)
    steps: int = Field(500, ge=0)
    family: FamilyConfig = FamilyConfig()
    poincare_count: int = Field(100, ge=0)
    slack: float = 1e-6
    poincare_slack: float = 1e-5


Experiment = Annotated[
    Union[
        BochnerOptions,
        HessianOptions,
        LiouvilleOptions,
        VolumeOptions,
        CapacityOptions,
        LevelSetOptions,
        StabilityOptions,
    ],
    Field(discriminator="kind"),
]


class RunConfig(Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    out: Optional[str] = None
    chart: ChartConfig = ChartConfig(metric="flat_torus")
    nonlinearity: Optional[NonlinearityConfig] = None
    tolerances: dict[str, float] = Field(default_factory=dict)
    presets: CustomPresets = CustomPresets()
    experiments: list[Experiment] = Field(default_factory=list)


TOLERANCE_KEYS = {"tol_const", "order_low", "order_high", "newton_tol"}


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc or '<root>'}: {err['msg']}")
    return "; ".join(lines)


def read_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None


def register_custom_presets(cfg: RunConfig) -> None:
    """Add the config's preset aliases to the registries (idempotent)."""
    for alias in cfg.presets.metric:
        base = METRIC_PRESETS.get(alias.base)
        if base is None:
            raise ConfigInvalid(f"presets.metric.{alias.name}: unknown metric preset {alias.base!r}")
        defaults = {**base.defaults, **alias.params}
        register_metric_preset(
            MetricPreset(alias.name, base.build, base.domain, defaults, alias.doc or f"{alias.base} with {alias.params}",
                         base.param_docs)
        )
    for alias in cfg.presets.nonlinearity:
        base = NONLINEARITY_PRESETS.get(alias.base)
        if base is None:
            raise ConfigInvalid(f"presets.nonlinearity.{alias.name}: unknown nonlinearity preset {alias.base!r}")
        register_nonlinearity_preset(
            NonlinearityPreset(alias.name, base.build, {**base.defaults, **alias.params},
                               alias.doc or f"{alias.base} with {alias.params}", base.param_docs)
        )


def _check_chart(chart: ChartConfig, where: str) -> None:
    if chart.metric not in METRIC_PRESETS:
        raise ConfigInvalid(f"{where}.metric: unknown metric preset {chart.metric!r}")


def validate(doc: dict) -> RunConfig:
    """Schema and registry validation; raises :class:`ConfigInvalid` with locations."""
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigInvalid(_format_errors(exc)) from None
    register_custom_presets(cfg)
    _check_chart(cfg.chart, "chart")
    if cfg.nonlinearity is not None and cfg.nonlinearity.name not in NONLINEARITY_PRESETS:
        raise ConfigInvalid(f"nonlinearity.name: unknown nonlinearity preset {cfg.nonlinearity.name!r}")
    unknown = set(cfg.tolerances) - TOLERANCE_KEYS
    if unknown:
        raise ConfigInvalid(f"tolerances: unknown keys {sorted(unknown)}")
    seen = set()
    for i, exp in enumerate(cfg.experiments):
        if exp.chart is not None:
            _check_chart(exp.chart, f"experiments.{i}.chart")
        if exp.kind in ("liouville_compact", "stability_suite") and cfg.nonlinearity is None:
            raise ConfigInvalid(f"experiments.{i}: {exp.kind} needs a [nonlinearity] section")
        eid = experiment_id(exp, i)
        if eid in seen:
            raise ConfigInvalid(f"experiments.{i}.id: duplicate id {eid!r}")
        seen.add(eid)
    return cfg


def experiment_id(exp, index: int) -> str:
    return exp.id or f"{index:02d}-{exp.kind}"


def load_config(path) -> RunConfig:
    return validate(read_document(path))
