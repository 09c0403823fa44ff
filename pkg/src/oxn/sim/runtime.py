"""Runtime backend for the simulated SUE.

Treatments talk to it exactly as they talk to containers: pause/kill calls
and exec'd ``tc``/``stress-ng`` command lines, which are interpreted here and
turned into fault modifiers on :class:`SimState`.
"""

from __future__ import annotations

import shlex

from oxn.orchestration.runtime import ExecResult, RuntimeApi, RuntimeCallError, ServiceState
from oxn.sim.engine import SimState
from oxn.sim.topology import SimTopology, topology_from_model


def _percent(text: str) -> float:
    return float(text.rstrip("%")) / 100.0


def _millis(text: str) -> float:
    if text.endswith("ms"):
        return float(text[:-2])
    if text.endswith("us"):
        return float(text[:-2]) / 1000.0
    if text.endswith("s"):
        return float(text[:-1]) * 1000.0
    return float(text) / 1000.0  # tc default unit is microseconds


class SimRuntime(RuntimeApi):
    backend = "sim"

    def __init__(self, model, clock, journal, entry: str, seed: int = 0,
                 topology: SimTopology | None = None):
        super().__init__(clock, journal)
        self.model = model
        self.entry = entry
        self.seed = seed
        self._topology = topology
        self.sim: SimState | None = None
        self._netem: dict[tuple[str, str], dict[str, float]] = {}
        for name in model.services:
            self.states[name] = ServiceState.STARTING

    @property
    def topology(self) -> SimTopology:
        if self.sim is None:
            raise RuntimeCallError("simulation not started")
        return self.sim.topology

    def boot(self) -> None:
        topology = self._topology or topology_from_model(self.model, self.entry, self.seed)
        self.sim = SimState(topology, self.clock)

    # -- backend hooks ----------------------------------------------------
    def _pause(self, service):
        self.sim.set_paused(service, True)

    def _unpause(self, service):
        self.sim.set_paused(service, False)

    def _kill(self, service):
        self.sim.set_killed(service)

    def _patch_env(self, service, key, value):
        self.model.services[service].environment[key] = value

    def _exec(self, service: str, command: list[str]) -> ExecResult:
        if self.sim is None:
            raise RuntimeCallError("simulation not started")
        svc = self.sim.services[service]
        if command[:2] == ["sh", "-c"]:
            inner = shlex.split(command[2])
            inner = [a for a in inner if a not in ("nohup", "&", "||", "true") and not a.startswith(">")
                     and a != "2>&1"]
            return self._exec(service, inner)
        tool = command[0]
        if tool not in ("tc", "stress-ng", "pkill") or (tool != "pkill" and tool not in svc.tools):
            return ExecResult(127, f"{tool}: not found")
        if tool == "tc":
            return self._tc(service, command[1:])
        if tool == "stress-ng":
            return self._stress(service, command[1:])
        # pkill stress-ng
        self.sim.modifiers[service].cpu_pressure = 0
        return ExecResult(0)

    def _tc(self, service: str, args: list[str]) -> ExecResult:
        svc = self.sim.services[service]
        if len(args) < 4 or args[0] != "qdisc" or args[2] != "dev":
            return ExecResult(1, "Command line is not complete. Try option \"help\"")
        verb, iface = args[1], args[3]
        if iface not in svc.interfaces:
            return ExecResult(1, f'Cannot find device "{iface}"')
        key = (service, iface)
        if verb == "show":
            return ExecResult(0, "qdisc netem" if key in self._netem else "qdisc noqueue")
        if args[4:6] != ["root", "netem"]:
            return ExecResult(1, "only root netem qdiscs are supported")
        if verb == "del":
            if key not in self._netem:
                return ExecResult(2, "RTNETLINK answers: No such file or directory")
            del self._netem[key]
            self._apply_netem(service)
            return ExecResult(0)
        if verb != "add":
            return ExecResult(1, f"unsupported tc verb {verb!r}")
        if key in self._netem:
            return ExecResult(2, "RTNETLINK answers: File exists")
        opts = args[6:]
        settings = {}
        i = 0
        try:
            while i < len(opts):
                if opts[i] == "delay":
                    settings["delay"] = _millis(opts[i + 1])
                elif opts[i] == "loss":
                    settings["loss"] = _percent(opts[i + 1])
                elif opts[i] == "corrupt":
                    settings["corrupt"] = _percent(opts[i + 1])
                else:
                    return ExecResult(1, f"unsupported netem option {opts[i]!r}")
                i += 2
        except (IndexError, ValueError):
            return ExecResult(1, "malformed netem arguments")
        self._netem[key] = settings
        self._apply_netem(service)
        return ExecResult(0)

    def _apply_netem(self, service: str) -> None:
        m = self.sim.modifiers[service]
        m.added_delay_ms = m.loss_p = m.corrupt_p = 0.0
        for (svc, _), s in self._netem.items():
            if svc != service:
                continue
            m.added_delay_ms += s.get("delay", 0.0)
            m.loss_p = 1 - (1 - m.loss_p) * (1 - s.get("loss", 0.0))
            m.corrupt_p = 1 - (1 - m.corrupt_p) * (1 - s.get("corrupt", 0.0))

    def _stress(self, service: str, args: list[str]) -> ExecResult:
        if args == ["--version"]:
            return ExecResult(0, "stress-ng, version 0.17.x (sim)")
        workers = 0
        i = 0
        while i < len(args):
            if args[i] in ("--cpu", "--vm", "--io"):
                try:
                    workers += int(args[i + 1])
                except (IndexError, ValueError):
                    return ExecResult(1, "malformed stressor count")
                i += 2
            elif args[i] == "--timeout":
                i += 2
            else:
                return ExecResult(1, f"unsupported option {args[i]!r}")
        if workers <= 0:
            return ExecResult(1, "no stressors given")
        self.sim.modifiers[service].cpu_pressure += workers
        return ExecResult(0)
