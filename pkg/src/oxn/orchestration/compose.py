"""Compose-file model of the system under experiment (SUE).

Only the subset the engine acts on is typed (image, environment, ports,
depends_on, networks); every other key is carried through untouched.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import yaml

from oxn.orchestration.runtime import OrchestrationError
from oxn.treatments.base import InstrumentationTreatment, Treatment, make_treatment

EFFECTIVE_COMPOSE = "effective-compose.yml"


class ComposeParseError(OrchestrationError):
    pass


class UnknownServiceError(OrchestrationError):
    pass


@dataclass
class ServiceDef:
    name: str
    image: str | None = None
    environment: dict[str, str] = field(default_factory=dict)
    ports: list[str] = field(default_factory=list)
    depends_on: list[str] = field(default_factory=list)
    networks: list[str] = field(default_factory=list)
    config_files: dict[str, str] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_compose(self) -> dict[str, Any]:
        out = copy.deepcopy(self.extra)
        if self.image is not None:
            out["image"] = self.image
        if self.environment:
            out["environment"] = dict(sorted(self.environment.items()))
        if self.ports:
            out["ports"] = list(self.ports)
        if self.depends_on:
            out["depends_on"] = list(self.depends_on)
        if self.networks:
            out["networks"] = list(self.networks)
        return out


@dataclass
class SueModel:
    services: dict[str, ServiceDef]
    source: Path | None = None
    top_level: dict[str, Any] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.services

    def names(self) -> list[str]:
        return list(self.services)

    def to_compose(self) -> dict[str, Any]:
        out = copy.deepcopy(self.top_level)
        out["services"] = {n: s.to_compose() for n, s in self.services.items()}
        return out

    def render(self) -> str:
        return yaml.safe_dump(self.to_compose(), sort_keys=True, default_flow_style=False)


def _as_env(value: Any, where: str) -> dict[str, str]:
    if value is None:
        return {}
    if isinstance(value, dict):
        return {str(k): "" if v is None else str(v) for k, v in value.items()}
    if isinstance(value, list):
        env = {}
        for item in value:
            key, sep, val = str(item).partition("=")
            env[key] = val if sep else ""
        return env
    raise ComposeParseError(f"{where}.environment: expected mapping or list")


def _as_names(value: Any, where: str) -> list[str]:
    if value is None:
        return []
    if isinstance(value, dict):
        return [str(k) for k in value]
    if isinstance(value, list):
        return [str(v) for v in value]
    raise ComposeParseError(f"{where}: expected mapping or list")


def parse_compose(text: str, source: Path | None = None) -> SueModel:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ComposeParseError(f"{source or 'compose'}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("services"), dict):
        raise ComposeParseError(f"{source or 'compose'}: no 'services' mapping")
    services = {}
    for name, body in doc["services"].items():
        body = dict(body or {})
        where = f"services.{name}"
        svc = ServiceDef(
            name=str(name),
            image=body.pop("image", None),
            environment=_as_env(body.pop("environment", None), where),
            ports=[str(p) for p in body.pop("ports", None) or []],
            depends_on=_as_names(body.pop("depends_on", None), f"{where}.depends_on"),
            networks=_as_names(body.pop("networks", None), f"{where}.networks"),
            extra=body,
        )
        services[svc.name] = svc
    top = {k: v for k, v in doc.items() if k != "services"}
    return SueModel(services=services, source=source, top_level=top)


def load_compose(path: str | Path) -> SueModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ComposeParseError(f"cannot read compose file {path}: {exc}") from exc
    return parse_compose(text, source=path)


def filter_services(model: SueModel, exclude: Iterable[str] = (), include: Iterable[str] | None = None) -> SueModel:
    exclude = list(exclude)
    for name in [*exclude, *(include or [])]:
        if name not in model.services:
            raise UnknownServiceError(f"service {name!r} is not defined in the compose file")
    keep = set(include) if include else set(model.services)
    keep -= set(exclude)
    services = {n: copy.deepcopy(s) for n, s in model.services.items() if n in keep}
    for svc in services.values():
        for dep in svc.depends_on:
            if dep not in services:
                raise UnknownServiceError(
                    f"service {svc.name!r} depends on {dep!r}, which is excluded or undefined"
                )
    return SueModel(services=services, source=model.source, top_level=copy.deepcopy(model.top_level))


def _as_treatment(t) -> Treatment:
    if isinstance(t, Treatment):
        return t
    return make_treatment(t.name, t.action, t.params)


def build_sue(sue, instrumentation: Iterable = (), out_dir: str | Path | None = None) -> SueModel:
    """Filter the compose file and apply instrumentation treatments.

    ``sue`` is a :class:`~oxn.config.SueSpec`. The compose file on disk is
    never modified; when ``out_dir`` is given the effective compose file is
    written there.
    """
    model = filter_services(load_compose(sue.compose_path), sue.exclude, sue.include)
    for spec in instrumentation:
        treatment = _as_treatment(spec)
        if not isinstance(treatment, InstrumentationTreatment):
            raise ValueError(f"{treatment.name!r} is a {treatment.phase.value} treatment")
        if treatment.target not in model.services:
            raise UnknownServiceError(
                f"treatment {treatment.name!r} targets {treatment.target!r}, which is excluded or undefined"
            )
        model.services[treatment.target].environment.update(treatment.environment())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / EFFECTIVE_COMPOSE).write_text(model.render())
    return model
