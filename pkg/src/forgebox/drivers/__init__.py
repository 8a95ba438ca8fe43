"""Target drivers: where a build actually happens."""

from forgebox.drivers.base import ExecOutcome, StatResult, Target, TargetDriver, normalize
from forgebox.drivers.memory import MemoryDriver, MemoryTarget
from forgebox.drivers.sandbox import SandboxDriver, SandboxTarget

DRIVERS = {"sandbox": SandboxDriver, "memory": MemoryDriver}


def get_driver(name: str, state_dir=".forgebox") -> TargetDriver:
    if name == "sandbox":
        return SandboxDriver(state_dir)
    if name == "memory":
        return MemoryDriver()
    raise ValueError(f"unknown driver {name!r}; choose from {', '.join(sorted(DRIVERS))}")


__all__ = [
    "DRIVERS",
    "ExecOutcome",
    "MemoryDriver",
    "MemoryTarget",
    "SandboxDriver",
    "SandboxTarget",
    "StatResult",
    "Target",
    "TargetDriver",
    "get_driver",
    "normalize",
]
