"""Exception hierarchy shared by every forgebox module."""

from __future__ import annotations


class ForgeboxError(Exception):
    """Base class for all errors raised by forgebox."""


# -- spec documents ---------------------------------------------------------


class SpecError(ForgeboxError):
    """A playbook or role document was rejected."""

    def __init__(self, message: str, source: str = "<string>", line: int | None = None):
        self.source = source
        self.line = line
        loc = source if line is None else f"{source}:{line}"
        super().__init__(f"{loc}: {message}")
        self.detail = message


class SpecSyntaxError(SpecError):
    pass


class SchemaError(SpecError):
    pass


class DuplicateError(SpecError):
    pass


class SelfDependError(SpecError):
    pass


# -- planning -----------------------------------------------------------------


class PlanError(ForgeboxError):
    pass


class UnknownDependency(PlanError):
    def __init__(self, role: str, dependency: str):
        self.role = role
        self.dependency = dependency
        super().__init__(f"role {role!r} depends on unknown role {dependency!r}")


class UnknownRole(PlanError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown role {name!r}")


class CycleError(PlanError):
    def __init__(self, members):
        self.members = frozenset(members)
        super().__init__("dependency cycle among roles: " + ", ".join(sorted(self.members)))


# -- targets ------------------------------------------------------------------


class DriverError(ForgeboxError):
    """Target I/O failed."""


class DeadTarget(DriverError):
    pass


class ConfinementError(DriverError):
    """A path or link would resolve outside the target root."""


class NotFound(ForgeboxError):
    pass


# -- images -------------------------------------------------------------------


class IntegrityError(ForgeboxError):
    """Bytes did not match the digest they were expected to have."""


class NetworkError(ForgeboxError):
    pass


class Conflict(ForgeboxError):
    pass


class PackageNotFound(ForgeboxError):
    pass
