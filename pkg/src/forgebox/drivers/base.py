"""The Target abstraction shared by every driver."""

from __future__ import annotations

import threading
import uuid
from abc import ABC, abstractmethod
from dataclasses import dataclass

from forgebox.drivers.archive import Entry, read_archive, sha256_hex, write_archive
from forgebox.errors import ConfinementError, DeadTarget, DriverError, IntegrityError

ALIVE = "alive"
DESTROYED = "destroyed"


@dataclass(frozen=True)
class ExecOutcome:
    exit_code: int
    stdout: bytes = b""
    stderr: bytes = b""
    duration_ms: int = 0


@dataclass(frozen=True)
class StatResult:
    exists: bool
    kind: str | None = None  # "file" | "dir" | "other"
    mode: int | None = None
    size: int | None = None


MISSING = StatResult(False)


def normalize(path: str) -> str:
    """Target path -> root-relative path without leading slash ("" is the root).

    Relative and absolute paths are both taken relative to the target root.
    A ``..`` that would climb above the root is a ConfinementError rather than
    being clamped.
    """
    if not isinstance(path, str):
        raise TypeError(f"target paths are strings, got {type(path).__name__}")
    if "\0" in path:
        raise ConfinementError(f"NUL byte in path {path!r}")
    parts: list[str] = []
    for part in path.split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            if not parts:
                raise ConfinementError(f"path {path!r} escapes the target root")
            parts.pop()
        else:
            parts.append(part)
    return "/".join(parts)


def join(cwd: str, path: str) -> str:
    """Resolve ``path`` against a target-relative working directory."""
    if path.startswith("/"):
        return normalize(path)
    return normalize("/" + normalize(cwd) + "/" + path)


class Target(ABC):
    """One provisionable environment. Single owner: one operation at a time."""

    def __init__(self, driver: TargetDriver, target_id: str):
        self.driver = driver
        self.id = target_id
        self.state = ALIVE

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.id} {self.state}>"

    @property
    def alive(self) -> bool:
        return self.state == ALIVE

    def _check_alive(self):
        if self.state != ALIVE:
            raise DeadTarget(f"target {self.id} has been destroyed")

    @abstractmethod
    def exec(self, argv, env=None, cwd: str = "/", timeout: float | None = None) -> ExecOutcome: ...

    @abstractmethod
    def write_file(self, path: str, data: bytes, mode: int = 0o644) -> None: ...

    @abstractmethod
    def read_file(self, path: str) -> bytes: ...

    @abstractmethod
    def stat(self, path: str) -> StatResult: ...

    @abstractmethod
    def mkdir(self, path: str, mode: int = 0o755) -> None: ...

    @abstractmethod
    def chmod(self, path: str, mode: int) -> None: ...

    @abstractmethod
    def symlink(self, path: str, linkname: str) -> None: ...

    @abstractmethod
    def entries(self) -> list[Entry]:
        """Every node under the root except the root itself."""

    def snapshot(self, epoch: int = 0, compress: bool = False) -> bytes:
        self._check_alive()
        return write_archive(self.entries(), epoch, compress)

    def digest(self, epoch: int = 0) -> str:
        return sha256_hex(self.snapshot(epoch))

    def load_entries(self, entries) -> None:
        """Materialize archive entries into this (empty) target."""
        dirs = []
        for entry in entries:
            if entry.kind == "dir":
                self.mkdir("/" + entry.path, 0o755)
                dirs.append(entry)
            elif entry.kind == "file":
                self.write_file("/" + entry.path, entry.data, entry.mode)
            else:
                self.symlink("/" + entry.path, entry.linkname)
        # final directory modes last so a read-only dir cannot block its children
        for entry in reversed(dirs):
            self.chmod("/" + entry.path, entry.mode)


class TargetDriver(ABC):
    name = "abstract"

    def __init__(self):
        self._lock = threading.Lock()
        self._live: dict[str, Target] = {}

    def _new_id(self) -> str:
        return uuid.uuid4().hex[:16]

    def _register(self, target: Target) -> Target:
        with self._lock:
            self._live[target.id] = target
        return target

    def live_targets(self) -> list[Target]:
        with self._lock:
            return [t for t in self._live.values() if t.alive]

    @abstractmethod
    def create(self) -> Target:
        """A fresh, empty target."""

    def instantiate(self, archive: bytes, expected_digest: str | None = None) -> Target:
        if expected_digest is not None and sha256_hex(archive) != expected_digest:
            raise IntegrityError(
                f"archive digest {sha256_hex(archive)} does not match expected {expected_digest}"
            )
        entries = read_archive(archive)
        target = self.create()
        try:
            target.load_entries(entries)
        except Exception:
            self.destroy(target)
            raise
        return target

    def destroy(self, target: Target) -> None:
        if target.state == DESTROYED:
            return
        try:
            self._release(target)
        finally:
            target.state = DESTROYED
            with self._lock:
                self._live.pop(target.id, None)

    @abstractmethod
    def _release(self, target: Target) -> None: ...


__all__ = [
    "ALIVE",
    "DESTROYED",
    "DriverError",
    "ExecOutcome",
    "MISSING",
    "StatResult",
    "Target",
    "TargetDriver",
    "join",
    "normalize",
]
