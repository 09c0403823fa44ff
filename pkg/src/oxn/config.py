"""Experiment files: parsing, strict validation, canonical serialization.

An experiment file is a single YAML document::

    experiment:
      responses:   [ {<name>: {type: metric, metric_name: ..., left_window: 240s, ...}} ]
      treatments:  [ {<name>: {action: loss, params: {...}}} ]
      sue:         {compose: path, exclude: [...], include: [...], readiness_timeout: 120s}
      loadgen:     {run_time: 10m, base_url: http://..., stages: [...], tasks: [...]}
      baseline:    false
      detection:   {z: 3, k: 3}

Unknown keys are rejected everywhere. The structural rules are also
published as a JSON Schema document (:func:`experiment_schema`); rules that
need the compose file or span several fields are checked here only.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from importlib import resources
from typing import Annotated, Any, Literal
from urllib.parse import urlparse

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from oxn.treatments import Phase, lookup
from oxn.treatments.schedule import required_run_time
from oxn.units import FormatError, Seconds, format_duration, parse_duration

__all__ = [
    "ConfigError",
    "DetectionConfig",
    "ExperimentSpec",
    "ExperimentSyntaxError",
    "FormatError",
    "LoadgenSpec",
    "ResponseSpec",
    "SchemaError",
    "Stage",
    "SueSpec",
    "Task",
    "TreatmentSpec",
    "ValidationFailed",
    "ValidationReport",
    "Violation",
    "load_experiment",
    "parse_duration",
    "experiment_schema",
    "parse_experiment",
    "serialize_experiment",
    "validate",
]

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.-]*")


class ConfigError(Exception):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ExperimentSyntaxError(ConfigError):
    """The file is not well-formed YAML."""


class SchemaError(ConfigError):
    """Missing or unknown key, wrong type, or out-of-range value."""

    def __init__(self, message: str, path: str = "", errors: list[tuple[str, str]] | None = None):
        self.errors = errors or [(path, message)]
        super().__init__(message, path)


def _join(*parts) -> str:
    out = ""
    for p in parts:
        if isinstance(p, int):
            out += f"[{p}]"
        elif p != "":
            out += f".{p}" if out else str(p)
    return out


def _schema_error(exc: ValidationError, *prefix) -> SchemaError:
    errors = []
    for err in exc.errors():
        loc = [p for p in err["loc"] if not (isinstance(p, str) and "[" in p and p.endswith("]"))]
        msg = err["msg"].removeprefix("Value error, ")
        errors.append((_join(*prefix, *loc), msg))
    path, msg = errors[0]
    return SchemaError(msg, path, errors)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class ResponseSpec(_Strict):
    name: str
    kind: Literal["metric", "trace"] = Field(alias="type")
    metric_name: str | None = None
    service_name: str | None = None
    operation_name: str | None = None
    left_window: Seconds
    right_window: Seconds
    step: Seconds = 1.0

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "metric":
            if not self.metric_name:
                raise ValueError("metric responses need metric_name")
            if self.service_name or self.operation_name:
                raise ValueError("service_name/operation_name are only valid for trace responses")
            if self.step < 1:
                raise ValueError("step must be at least 1s")
        else:
            if not self.service_name:
                raise ValueError("trace responses need service_name")
            if self.metric_name:
                raise ValueError("metric_name is only valid for metric responses")
            if self.step <= 0:
                raise ValueError("step must be positive")
        return self

    @property
    def query(self) -> str:
        """Metric expression, or ``service[:operation]`` for traces."""
        if self.kind == "metric":
            return self.metric_name
        if self.operation_name:
            return f"{self.service_name}:{self.operation_name}"
        return self.service_name


Scalar = str | int | float | bool | None


class TreatmentSpec(_Strict):
    name: str
    action: str
    params: dict[str, Scalar] = Field(default_factory=dict)

    @property
    def phase(self) -> Phase:
        return lookup(self.action).phase

    @property
    def target(self) -> str:
        return str(self.params.get("service_name"))


class SueSpec(_Strict):
    compose_path: Path = Field(alias="compose")
    exclude: list[str] = Field(default_factory=list)
    include: list[str] | None = None
    readiness_timeout: Seconds = 120.0

    @model_validator(mode="after")
    def _disjoint(self):
        both = set(self.exclude) & set(self.include or [])
        if both:
            raise ValueError(f"services both included and excluded: {sorted(both)}")
        return self


class Stage(_Strict):
    duration: Seconds
    users: Annotated[int, Field(ge=0, strict=True)]
    spawn_rate: Annotated[float, Field(gt=0)]


class Task(_Strict):
    endpoint: str
    verb: Literal["get", "post", "put", "delete"]
    params: dict[str, Any] = Field(default_factory=dict)
    weight: Annotated[int, Field(ge=1, strict=True)] = 1

    @field_validator("verb", mode="before")
    @classmethod
    def _lower(cls, v):
        return v.lower() if isinstance(v, str) else v

    @field_validator("endpoint")
    @classmethod
    def _slash(cls, v: str) -> str:
        if not v.startswith("/"):
            raise ValueError("endpoint must begin with '/'")
        return v


class LoadgenSpec(_Strict):
    run_time: Seconds
    base_url: str
    stages: list[Stage] = Field(min_length=1)
    tasks: list[Task] = Field(min_length=1)
    think_time: Seconds = 0.0
    request_timeout: Seconds = 1.0

    @field_validator("base_url")
    @classmethod
    def _url(cls, v: str) -> str:
        u = urlparse(v)
        if u.scheme not in ("http", "https") or not u.hostname:
            raise ValueError("base_url must be an http(s) URL with a host")
        return v

    @model_validator(mode="after")
    def _fits(self):
        total = sum(s.duration for s in self.stages)
        if total > self.run_time:
            raise ValueError(f"stage durations sum to {total:g}s, more than run_time {self.run_time:g}s")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be positive")
        return self


class DetectionConfig(_Strict):
    z: Annotated[float, Field(gt=0)] = 3.0
    k: Annotated[int, Field(ge=1, strict=True)] = 3


class ExperimentSpec(_Strict):
    responses: list[ResponseSpec]
    treatments: list[TreatmentSpec]
    sue: SueSpec
    loadgen: LoadgenSpec
    baseline: bool = False
    detection: DetectionConfig = Field(default_factory=DetectionConfig)

    @property
    def fault_treatments(self) -> list[TreatmentSpec]:
        return [t for t in self.treatments if t.phase is Phase.FAULT]

    @property
    def instrumentation_treatments(self) -> list[TreatmentSpec]:
        return [t for t in self.treatments if t.phase is Phase.INSTRUMENTATION]

    def response(self, name: str) -> ResponseSpec:
        for r in self.responses:
            if r.name == name:
                return r
        raise KeyError(name)


# -- parsing ----------------------------------------------------------------


def experiment_schema() -> dict:
    """The JSON Schema (draft 2020-12) describing an experiment file."""
    return json.loads(resources.files("oxn").joinpath("schemas", "experiment.schema.json").read_text())


def _named_list(items: Any, section: str) -> list[dict]:
    """``[{name: body}, ...]`` -> ``[{"name": name, **body}, ...]``."""
    if not isinstance(items, list):
        raise SchemaError("expected a list", section)
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or len(item) != 1:
            raise SchemaError("expected a single-key mapping {name: {...}}", _join(section, i))
        (name, body), = item.items()
        if not isinstance(name, str) or not _IDENT.fullmatch(name):
            raise SchemaError(f"invalid name {name!r}", _join(section, i))
        if not isinstance(body, dict):
            raise SchemaError("expected a mapping", _join(section, i, name))
        if "name" in body:
            raise SchemaError("unexpected key 'name'", _join(section, i, "name"))
        out.append({"name": name, **body})
    return out


def _unique(items: list[dict], section: str) -> None:
    seen = {}
    for i, item in enumerate(items):
        if item["name"] in seen:
            raise SchemaError(f"duplicate name {item['name']!r} (also at [{seen[item['name']]}])",
                              _join(section, i))
        seen[item["name"]] = i


def _check_treatment(i: int, spec: TreatmentSpec) -> TreatmentSpec:
    try:
        cls = lookup(spec.action)
    except KeyError as exc:
        raise SchemaError(str(exc.args[0]), _join("treatments", i, "action")) from None
    try:
        params = cls.params_model.model_validate(spec.params)
    except ValidationError as exc:
        raise _schema_error(exc, "treatments", i, "params") from None
    return spec.model_copy(update={"params": params.model_dump(mode="python", exclude_none=True)})


def parse_experiment(text: str, base_dir: str | Path | None = None) -> ExperimentSpec:
    """Parse experiment-file text into a validated :class:`ExperimentSpec`.

    ``base_dir`` resolves a relative compose path (normally the directory of
    the experiment file). Raises :class:`ExperimentSyntaxError` for malformed
    YAML and :class:`SchemaError` (with ``.path``) for schema violations.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ExperimentSyntaxError(str(getattr(exc, "problem", exc)), where) from exc
    if not isinstance(doc, dict) or set(doc) != {"experiment"}:
        raise SchemaError("top level must be a single 'experiment' mapping", "")
    body = doc["experiment"]
    if not isinstance(body, dict):
        raise SchemaError("expected a mapping", "experiment")
    body = dict(body)
    for section in ("responses", "treatments"):
        if section in body:
            body[section] = _named_list(body[section], section)
            _unique(body[section], section)
    try:
        spec = ExperimentSpec.model_validate(body)
    except ValidationError as exc:
        raise _schema_error(exc) from None

    treatments = [_check_treatment(i, t) for i, t in enumerate(spec.treatments)]
    if not spec.responses:
        raise SchemaError("at least one response is required", "responses")
    faults = [t for t in treatments if t.phase is Phase.FAULT]
    if spec.baseline and faults:
        raise SchemaError("baseline experiments cannot contain fault treatments", "baseline")
    if not treatments and not spec.baseline:
        raise SchemaError("at least one treatment is required unless baseline: true", "treatments")

    sue = spec.sue
    if base_dir is not None and not sue.compose_path.is_absolute():
        sue = sue.model_copy(update={"compose_path": Path(base_dir) / sue.compose_path})
    return spec.model_copy(update={"treatments": treatments, "sue": sue})


def _param_out(action: str, params: dict) -> dict:
    model = lookup(action).params_model
    return model.model_construct(**params).model_dump(mode="json", exclude_none=True)


def to_document(spec: ExperimentSpec) -> dict:
    """Canonical YAML-shaped document for a spec."""
    responses = []
    for r in spec.responses:
        body = r.model_dump(mode="json", by_alias=True, exclude={"name"}, exclude_none=True)
        responses.append({r.name: body})
    treatments = [
        {t.name: {"action": t.action, "params": _param_out(t.action, t.params)}} for t in spec.treatments
    ]
    sue = spec.sue.model_dump(mode="json", by_alias=True, exclude_none=True)
    loadgen = spec.loadgen.model_dump(mode="json")
    for task in loadgen["tasks"]:
        task["params"] = task.get("params") or {}
    doc = {
        "responses": responses,
        "treatments": treatments,
        "sue": sue,
        "loadgen": loadgen,
        "baseline": spec.baseline,
        "detection": spec.detection.model_dump(mode="json"),
    }
    return {"experiment": doc}


def serialize_experiment(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(to_document(spec), sort_keys=False, default_flow_style=False)


# -- cross-field validation -------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message} [{self.code}]"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def __str__(self) -> str:
        return "OK" if self.ok else "\n".join(str(v) for v in self.violations)


class ValidationFailed(ConfigError):
    def __init__(self, report: ValidationReport):
        self.report = report
        first = report.violations[0]
        super().__init__(first.message, first.path)


def validate(spec: ExperimentSpec) -> ValidationReport:
    """Cross-field checks against the compose file. Violations are data."""
    from oxn.orchestration.compose import ComposeParseError, UnknownServiceError, filter_services, load_compose

    report = ValidationReport()
    add = lambda code, path, msg: report.violations.append(Violation(code, path, msg))  # noqa: E731

    needed = required_run_time(spec)
    if needed > spec.loadgen.run_time:
        add("schedule_overflow", "loadgen.run_time",
            f"fault window exceeds run time: faults and windows need {needed:g}s, "
            f"run_time is {spec.loadgen.run_time:g}s")

    path = spec.sue.compose_path
    if not path.is_file():
        add("compose_missing", "sue.compose", f"compose file not found: {path}")
        return report
    try:
        full = load_compose(path)
    except ComposeParseError as exc:
        add("compose_invalid", "sue.compose", str(exc))
        return report
    try:
        model = filter_services(full, spec.sue.exclude, spec.sue.include)
    except UnknownServiceError as exc:
        add("unknown_service", "sue", str(exc))
        return report

    excluded = set(full.services) - set(model.services)
    for i, t in enumerate(spec.treatments):
        target = t.target
        where = f"treatments[{i}].params.service_name"
        if target in excluded:
            add("excluded_target", where, f"treatment targets excluded service {target!r}")
        elif target not in model.services:
            add("unknown_target", where, f"treatment targets unknown service {target!r}")
    return report


def load_experiment(path: str | Path, check: bool = True) -> ExperimentSpec:
    """Read, parse and (by default) cross-validate an experiment file."""
    path = Path(path)
    spec = parse_experiment(path.read_text(), base_dir=path.parent)
    if check:
        report = validate(spec)
        if not report.ok:
            raise ValidationFailed(report)
    return spec
