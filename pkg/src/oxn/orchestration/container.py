"""Container backend speaking the Docker Engine HTTP API.

Only the endpoints the engine needs are used: networks, container
create/start/inspect/pause/unpause/kill/delete and exec.
"""

from __future__ import annotations

import logging
import re
import socket
import time
from concurrent.futures import ThreadPoolExecutor

import httpx

from oxn.orchestration.runtime import (
    BackendUnavailable,
    ExecResult,
    ReadinessTimeout,
    RuntimeApi,
    RuntimeCallError,
    ServiceState,
)

log = logging.getLogger(__name__)

DOCKER_SOCKET = "/var/run/docker.sock"
GRACE_PERIOD = 5.0
_COMPOSE_DURATION = re.compile(r"(?:(\d+)h)?(?:(\d+)m(?!s))?(?:(\d+)s)?(?:(\d+)ms)?")


def docker_client(socket_path: str = DOCKER_SOCKET, timeout: float = 30.0) -> httpx.Client:
    transport = httpx.HTTPTransport(uds=socket_path)
    return httpx.Client(transport=transport, base_url="http://docker", timeout=timeout)


def _nanos(text) -> int:
    if isinstance(text, (int, float)):
        return int(text * 1e9)
    m = _COMPOSE_DURATION.fullmatch(str(text))
    if not m or not any(m.groups()):
        raise ValueError(f"bad compose duration {text!r}")
    h, mi, s, ms = (int(g or 0) for g in m.groups())
    return ((h * 60 + mi) * 60 + s) * 1_000_000_000 + ms * 1_000_000


def _port_bindings(ports: list[str]) -> tuple[dict, dict, list[int]]:
    exposed, bindings, host_ports = {}, {}, []
    for spec in ports:
        spec, _, proto = spec.partition("/")
        proto = proto or "tcp"
        parts = spec.split(":")
        container = parts[-1]
        key = f"{container}/{proto}"
        exposed[key] = {}
        if len(parts) >= 2:
            host_ip = parts[0] if len(parts) == 3 else ""
            bindings[key] = [{"HostIp": host_ip, "HostPort": parts[-2]}]
            if proto == "tcp":
                host_ports.append(int(parts[-2]))
    return exposed, bindings, host_ports


def _start_order(model) -> list[str]:
    order, seen = [], set()

    def visit(name):
        if name in seen:
            return
        seen.add(name)
        for dep in model.services[name].depends_on:
            visit(dep)
        order.append(name)

    for name in sorted(model.services):
        visit(name)
    return order


class ContainerRuntime(RuntimeApi):
    backend = "container"

    def __init__(self, model, clock, journal, client: httpx.Client | None = None,
                 project: str = "oxn", probe_host: str = "127.0.0.1"):
        super().__init__(clock, journal)
        self.model = model
        self.client = client or docker_client()
        self.project = project
        self.probe_host = probe_host
        self.ids: dict[str, str] = {}
        self.network = f"{project}_default"
        for name in model.services:
            self.states[name] = ServiceState.STARTING

    # -- daemon plumbing --------------------------------------------------
    def _request(self, method: str, path: str, **kw) -> httpx.Response:
        try:
            resp = self.client.request(method, path, **kw)
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"container daemon unreachable: {exc}") from exc
        if resp.status_code >= 400:
            try:
                message = resp.json().get("message", resp.text)
            except ValueError:
                message = resp.text
            raise RuntimeCallError(f"{method} {path}: {resp.status_code} {message}")
        return resp

    def ping(self) -> None:
        self._request("GET", "/_ping")

    def _container(self, service: str) -> str:
        try:
            return self.ids[service]
        except KeyError:
            raise RuntimeCallError(f"no container for service {service!r}") from None

    def _create(self, name: str) -> str:
        svc = self.model.services[name]
        exposed, bindings, _ = _port_bindings(svc.ports)
        body = {
            "Image": svc.image,
            "Env": [f"{k}={v}" for k, v in sorted(svc.environment.items())],
            "ExposedPorts": exposed,
            "Labels": {"com.docker.compose.project": self.project, "com.docker.compose.service": name},
            "HostConfig": {"PortBindings": bindings, "NetworkMode": self.network},
            "NetworkingConfig": {"EndpointsConfig": {self.network: {"Aliases": [name]}}},
        }
        health = svc.extra.get("healthcheck")
        if isinstance(health, dict) and "test" in health:
            test = health["test"]
            body["Healthcheck"] = {
                "Test": test if isinstance(test, list) else ["CMD-SHELL", str(test)],
                **({"Interval": _nanos(health["interval"])} if "interval" in health else {}),
                **({"Timeout": _nanos(health["timeout"])} if "timeout" in health else {}),
                **({"Retries": int(health["retries"])} if "retries" in health else {}),
            }
        cname = f"{self.project}-{name}"
        try:
            resp = self._request("POST", "/containers/create", params={"name": cname}, json=body)
        except RuntimeCallError as exc:
            if " 404 " not in str(exc):
                raise
            self._request("POST", "/images/create", params={"fromImage": svc.image}, timeout=None)
            resp = self._request("POST", "/containers/create", params={"name": cname}, json=body)
        return resp.json()["Id"]

    def _ready(self, name: str, deadline: float) -> bool:
        cid = self.ids[name]
        svc = self.model.services[name]
        _, _, host_ports = _port_bindings(svc.ports)
        started = time.monotonic()
        while time.monotonic() < deadline:
            info = self._request("GET", f"/containers/{cid}/json").json()
            state = info.get("State", {})
            if not state.get("Running", False):
                time.sleep(0.5)
                continue
            health = state.get("Health")
            if health is not None:
                if health.get("Status") == "healthy":
                    return True
            elif host_ports:
                try:
                    with socket.create_connection((self.probe_host, host_ports[0]), timeout=1.0):
                        return True
                except OSError:
                    pass
            elif time.monotonic() - started >= GRACE_PERIOD:
                return True
            time.sleep(0.5)
        return False

    def boot(self, readiness_timeout: float) -> None:
        self.ping()
        self._request("POST", "/networks/create", json={"Name": self.network, "CheckDuplicate": True})
        for name in _start_order(self.model):
            self.ids[name] = self._create(name)
            self._request("POST", f"/containers/{self.ids[name]}/start")
            self.journal.append("start", name, container=self.ids[name])
        deadline = time.monotonic() + readiness_timeout
        names = list(self.model.services)
        with ThreadPoolExecutor(max_workers=max(1, min(16, len(names)))) as pool:
            ready = dict(zip(names, pool.map(lambda n: self._ready(n, deadline), names)))
        unready = [n for n, ok in ready.items() if not ok]
        if unready:
            raise ReadinessTimeout(unready, readiness_timeout)
        for name in names:
            self._transition(name, ServiceState.READY)
            self.journal.append("ready", name)

    def stop_all(self) -> None:
        for name, cid in self.ids.items():
            try:
                self._request("DELETE", f"/containers/{cid}", params={"force": "true", "v": "true"})
            except Exception as exc:  # best effort
                log.warning("removing %s failed: %s", name, exc)
        try:
            self._request("DELETE", f"/networks/{self.network}")
        except Exception as exc:
            log.warning("removing network %s failed: %s", self.network, exc)

    # -- RuntimeApi hooks -------------------------------------------------
    def _pause(self, service):
        self._request("POST", f"/containers/{self._container(service)}/pause")

    def _unpause(self, service):
        self._request("POST", f"/containers/{self._container(service)}/unpause")

    def _kill(self, service):
        self._request("POST", f"/containers/{self._container(service)}/kill")

    def _patch_env(self, service, key, value):
        self.model.services[service].environment[key] = value

    def _exec(self, service: str, command: list[str]) -> ExecResult:
        cid = self._container(service)
        created = self._request("POST", f"/containers/{cid}/exec",
                                json={"Cmd": command, "AttachStdout": True, "AttachStderr": True, "Tty": True})
        exec_id = created.json()["Id"]
        out = self._request("POST", f"/exec/{exec_id}/start", json={"Detach": False, "Tty": True})
        info = self._request("GET", f"/exec/{exec_id}/json").json()
        return ExecResult(int(info.get("ExitCode") or 0), out.text)
