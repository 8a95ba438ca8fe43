"""In-memory target: a dict-backed tree with a scripted command table."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

from forgebox.drivers.archive import Entry, link_escapes
from forgebox.drivers.base import MISSING, ExecOutcome, StatResult, Target, TargetDriver, join, normalize
from forgebox.errors import ConfinementError, DriverError, NotFound

# handler(target, argv, env, cwd) -> exit code or ExecOutcome
Handler = Callable[["MemoryTarget", list, dict, str], "int | ExecOutcome"]

_MAX_LINKS = 40


@dataclass
class _Node:
    kind: str
    mode: int
    data: bytes = b""
    linkname: str = ""


def _true(target, argv, env, cwd):
    return 0


def _false(target, argv, env, cwd):
    return 1


def _exit(target, argv, env, cwd):
    return int(argv[1]) if len(argv) > 1 else 0


def _touch(target, argv, env, cwd):
    for arg in argv[1:]:
        path = "/" + join(cwd, arg)
        if not target.stat(path).exists:
            target.write_file(path, b"", 0o644)
    return 0


BUILTINS: dict[str, Handler] = {"true": _true, "false": _false, "exit": _exit, "touch": _touch}


class MemoryTarget(Target):
    def __init__(self, driver: MemoryDriver, target_id: str):
        super().__init__(driver, target_id)
        self.nodes: dict[str, _Node] = {"": _Node("dir", 0o755)}
        self.exec_log: list[list[str]] = []

    # path resolution follows symlinks inside the virtual namespace only
    def _resolve(self, path: str, follow_last: bool = True) -> str:
        queue = normalize(path).split("/") if normalize(path) else []
        resolved: list[str] = []
        hops = 0
        while queue:
            part = queue.pop(0)
            if part in ("", "."):
                continue
            if part == "..":
                if not resolved:
                    raise ConfinementError(f"{path!r} resolves outside the target root")
                resolved.pop()
                continue
            candidate = "/".join(resolved + [part])
            node = self.nodes.get(candidate)
            if node is not None and node.kind == "symlink" and (queue or follow_last):
                hops += 1
                if hops > _MAX_LINKS:
                    raise DriverError(f"too many levels of symbolic links in {path!r}")
                if node.linkname.startswith("/"):
                    raise ConfinementError(f"{path!r} passes through an absolute symlink")
                queue = node.linkname.split("/") + queue
                continue
            if node is not None and node.kind != "dir" and queue:
                raise DriverError(f"{candidate!r} is not a directory")
            resolved.append(part)
        return "/".join(resolved)

    def _ensure_dir(self, rel: str) -> str:
        if not rel:
            return ""
        parts = rel.split("/")
        current = ""
        for part in parts:
            current = self._resolve("/" + (current + "/" + part if current else part))
            node = self.nodes.get(current)
            if node is None:
                self.nodes[current] = _Node("dir", 0o755)
            elif node.kind != "dir":
                raise DriverError(f"{current!r} is not a directory")
        return current

    def _parent_and_name(self, path: str) -> tuple[str, str]:
        rel = normalize(path)
        if not rel:
            raise DriverError("the target root cannot be replaced")
        parent, _, name = rel.rpartition("/")
        return self._ensure_dir(parent), name

    def write_file(self, path, data, mode=0o644):
        self._check_alive()
        parent, name = self._parent_and_name(path)
        key = f"{parent}/{name}" if parent else name
        node = self.nodes.get(key)
        if node is not None and node.kind == "symlink":
            key = self._resolve("/" + key)
            node = self.nodes.get(key)
            if node is None:
                self._ensure_dir(key.rpartition("/")[0])
        if node is not None and node.kind == "dir":
            raise DriverError(f"{path!r} is a directory")
        self.nodes[key] = _Node("file", mode & 0o7777, bytes(data))

    def read_file(self, path):
        self._check_alive()
        node = self.nodes.get(self._resolve(path))
        if node is None:
            raise NotFound(f"{path!r} does not exist in target {self.id}")
        if node.kind != "file":
            raise DriverError(f"{path!r} is not a regular file")
        return node.data

    def stat(self, path):
        self._check_alive()
        try:
            node = self.nodes.get(self._resolve(path))
        except DriverError as exc:
            if isinstance(exc, ConfinementError):
                raise
            return MISSING
        if node is None:
            return MISSING
        size = len(node.data) if node.kind == "file" else 0
        return StatResult(True, node.kind, node.mode, size)

    def mkdir(self, path, mode=0o755):
        self._check_alive()
        rel = self._resolve(path)
        self._ensure_dir(rel)
        self.nodes[rel].mode = mode & 0o7777

    def chmod(self, path, mode):
        self._check_alive()
        node = self.nodes.get(self._resolve(path))
        if node is None:
            raise NotFound(f"{path!r} does not exist in target {self.id}")
        node.mode = mode & 0o7777

    def symlink(self, path, linkname):
        self._check_alive()
        parent, name = self._parent_and_name(path)
        key = f"{parent}/{name}" if parent else name
        if link_escapes(key, linkname):
            raise ConfinementError(f"symlink {path!r} -> {linkname!r} would escape the target root")
        if key in self.nodes:
            raise DriverError(f"{path!r} already exists")
        self.nodes[key] = _Node("symlink", 0o777, linkname=linkname)

    def exec(self, argv, env=None, cwd="/", timeout=None):
        self._check_alive()
        argv = [str(a) for a in argv]
        if not argv:
            raise DriverError("empty argv")
        cwd_rel = self._resolve(cwd)
        node = self.nodes.get(cwd_rel)
        if node is None or node.kind != "dir":
            raise NotFound(f"working directory {cwd!r} does not exist in target {self.id}")
        if "/" in argv[0]:
            join(cwd_rel, argv[0])  # confinement check only
        handler = self.driver.scripts.get(argv[0]) or BUILTINS.get(argv[0])
        self.exec_log.append(argv)
        start = time.monotonic()
        if handler is None:
            return ExecOutcome(127, b"", f"{argv[0]}: command not found\n".encode())
        result = handler(self, argv, dict(env or {}), "/" + cwd_rel)
        ms = int((time.monotonic() - start) * 1000)
        if isinstance(result, ExecOutcome):
            return result
        return ExecOutcome(int(result), b"", b"", ms)

    def entries(self):
        out = []
        for key, node in self.nodes.items():
            if not key:
                continue
            out.append(Entry(key, node.kind, node.mode, node.data, node.linkname))
        return out


class MemoryDriver(TargetDriver):
    """Targets that live only in this process.

    ``scripts`` maps ``argv[0]`` to a handler; unknown commands exit 127.
    """

    name = "memory"

    def __init__(self, scripts: dict[str, Handler] | None = None):
        super().__init__()
        self.scripts = dict(scripts or {})

    def create(self) -> MemoryTarget:
        return self._register(MemoryTarget(self, self._new_id()))

    def _release(self, target):
        target.nodes = {}
