"""Playbook and role documents: parsing, validation, serialization and lint.

Documents are a strict YAML subset. Unknown keys, duplicate keys, tabs and
non-string scalars where strings are expected are all errors. Floats are not
resolved implicitly, so ``version: 1.0`` stays the string ``"1.0"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import yaml

from forgebox.errors import (
    DuplicateError,
    SchemaError,
    SelfDependError,
    SpecSyntaxError,
)

NAME_RE = re.compile(r"^[a-z0-9][a-z0-9_-]*$")
# Versions double as registry path components, so they are kept path-safe.
VERSION_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._+~-]*$")
DIGEST_RE = re.compile(r"^[0-9a-f]{64}$")

DIRECTIVES = ("file", "dir", "copy", "fetch_url", "package", "command", "test")
STATE_DIRECTIVES = frozenset({"file", "dir", "copy", "fetch_url", "package"})

SCRATCH = "scratch"
CHARACTERISTICS_NAME = "machine_characteristics.txt"
DEFAULT_CHARACTERISTICS_PATHS = (
    "/" + CHARACTERISTICS_NAME,
    "/home/user/Desktop/" + CHARACTERISTICS_NAME,
)
DEFAULT_DOCS_PATHS = ("/home/user/Desktop/README.md",)


@dataclass(frozen=True, order=True)
class ImageRef:
    name: str
    version: str
    digest: str | None = None

    def __post_init__(self):
        if not NAME_RE.match(self.name):
            raise ValueError(f"invalid image name {self.name!r}")
        if not VERSION_RE.match(self.version):
            raise ValueError(f"invalid image version {self.version!r}")
        if self.digest is not None and not DIGEST_RE.match(self.digest):
            raise ValueError(f"invalid digest {self.digest!r}")

    @classmethod
    def parse(cls, text: str) -> ImageRef:
        """Parse ``name/version`` or ``name/version@<sha256 hex>``."""
        body, _, digest = text.partition("@")
        name, sep, version = body.partition("/")
        if not sep:
            raise ValueError(f"image reference {text!r} is not of the form name/version")
        return cls(name, version, digest or None)

    def with_digest(self, digest: str) -> ImageRef:
        return ImageRef(self.name, self.version, digest)

    @property
    def key(self) -> str:
        return f"{self.name}/{self.version}"

    def __str__(self) -> str:
        return self.key if self.digest is None else f"{self.key}@{self.digest}"


@dataclass(frozen=True)
class VerifyConfig:
    characteristics_paths: tuple[str, ...] = DEFAULT_CHARACTERISTICS_PATHS
    docs_paths: tuple[str, ...] = DEFAULT_DOCS_PATHS

    def to_dict(self) -> dict:
        return {
            "characteristics_paths": list(self.characteristics_paths),
            "docs_paths": list(self.docs_paths),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> VerifyConfig:
        return cls(tuple(data["characteristics_paths"]), tuple(data["docs_paths"]))


@dataclass(frozen=True)
class Playbook:
    name: str
    version: str
    base_image: ImageRef | str
    role_selection: tuple[str, ...]
    build_epoch: int | None = None
    verify_config: VerifyConfig = field(default_factory=VerifyConfig)
    source: str = field(default="<string>", compare=False)


@dataclass(frozen=True)
class TaskSpec:
    id: str
    directive: str
    args: Mapping[str, Any]
    creates: str | None = None
    line: int | None = field(default=None, compare=False)

    @property
    def is_state(self) -> bool:
        return self.directive in STATE_DIRECTIVES


@dataclass(frozen=True)
class RoleSpec:
    name: str
    depends: tuple[str, ...]
    tasks: tuple[TaskSpec, ...]
    source: str = field(default="<string>", compare=False)


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    source: str
    line: int | None
    message: str

    @property
    def location(self) -> str:
        return self.source if self.line is None else f"{self.source}:{self.line}"

    def __str__(self) -> str:
        return f"{self.location}: {self.severity} {self.code}: {self.message}"


# -- YAML loading -------------------------------------------------------------


class _StrictLoader(yaml.SafeLoader):
    """SafeLoader without implicit floats and with duplicate-key rejection."""

    def construct_mapping(self, node, deep=False):
        seen = set()
        for key_node, _ in node.value:
            key = self.construct_object(key_node, deep=True)
            if key in seen:
                raise SpecSyntaxError(
                    f"duplicate key {key!r}", self.name, key_node.start_mark.line + 1
                )
            seen.add(key)
        return super().construct_mapping(node, deep=deep)


_StrictLoader.yaml_implicit_resolvers = {
    first: [(tag, regex) for tag, regex in resolvers if tag != "tag:yaml.org,2002:float"]
    for first, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}


def _load(text: str, source: str):
    """Return ``(data, root_node)`` for a single YAML document."""
    if not isinstance(text, str):
        raise SpecSyntaxError("document must be text", source)
    for lineno, line in enumerate(text.splitlines(), 1):
        if "\t" in line:
            raise SpecSyntaxError("tab characters are not allowed", source, lineno)
    loader = _StrictLoader(text)
    loader.name = source
    try:
        node = loader.get_single_node()
        if node is None:
            raise SpecSyntaxError("empty document", source)
        data = loader.construct_document(node)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise SpecSyntaxError(exc.problem or str(exc), source, line) from None
    except yaml.YAMLError as exc:
        raise SpecSyntaxError(str(exc), source) from None
    finally:
        loader.dispose()
    return data, node


def _node_lookup(node, key: str):
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            if isinstance(k, yaml.ScalarNode) and k.value == key:
                return v
    return None


def _line(node) -> int | None:
    return None if node is None else node.start_mark.line + 1


class _Fields:
    """Typed accessors over one mapping, raising SchemaError with a location."""

    def __init__(self, data, node, what: str, source: str, required, optional=()):
        self.node = node
        self.source = source
        self.what = what
        if not isinstance(data, dict):
            raise SchemaError(f"{what} must be a mapping", source, _line(node))
        unknown = [k for k in data if k not in required and k not in optional]
        if unknown:
            raise SchemaError(
                f"unknown key {unknown[0]!r} in {what}", source, self._line_of(unknown[0])
            )
        for key in required:
            if key not in data:
                raise SchemaError(f"{what} is missing required key {key!r}", source, _line(node))
        self.data = data

    def _line_of(self, key) -> int | None:
        sub = _node_lookup(self.node, key) if isinstance(key, str) else None
        return _line(sub) if sub is not None else _line(self.node)

    def fail(self, key: str, message: str):
        raise SchemaError(f"{self.what}.{key}: {message}", self.source, self._line_of(key))

    def has(self, key: str) -> bool:
        return key in self.data

    def text(self, key: str, default=None, pattern: re.Pattern | None = None) -> str:
        value = self.data.get(key, default)
        if not isinstance(value, str):
            self.fail(key, f"expected a string, got {type(value).__name__}")
        if not value:
            self.fail(key, "must not be empty")
        if pattern is not None and not pattern.match(value):
            self.fail(key, f"{value!r} does not match {pattern.pattern}")
        return value

    def integer(self, key: str, default=None) -> int:
        value = self.data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(key, f"expected an integer, got {type(value).__name__}")
        return value

    def str_list(self, key: str, default=(), pattern: re.Pattern | None = None) -> tuple[str, ...]:
        value = self.data.get(key, list(default))
        if not isinstance(value, list):
            self.fail(key, "expected a list")
        for item in value:
            if not isinstance(item, str) or not item:
                self.fail(key, f"list entries must be non-empty strings, got {item!r}")
            if pattern is not None and not pattern.match(item):
                self.fail(key, f"{item!r} does not match {pattern.pattern}")
        return tuple(value)

    def str_map(self, key: str) -> dict[str, str]:
        value = self.data.get(key, {})
        if not isinstance(value, dict):
            self.fail(key, "expected a mapping")
        for k, v in value.items():
            if not isinstance(k, str) or not isinstance(v, str):
                self.fail(key, "keys and values must be strings")
        return dict(sorted(value.items()))

    def mode(self, key: str, default: int) -> int:
        value = self.data.get(key, default)
        raw = _node_lookup(self.node, key)
        if isinstance(raw, yaml.ScalarNode) and not raw.style:
            # plain 755 / 0644 are octal regardless of YAML's int rules; 488 is refused, not guessed at
            value = raw.value
        if isinstance(value, str):
            if not re.fullmatch(r"(0o?)?[0-7]{3,4}", value):
                self.fail(key, f"{value!r} is not an octal mode")
            value = int(value.replace("0o", ""), 8)
        if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 0o7777:
            self.fail(key, f"{value!r} is not a valid mode")
        return value


# -- directive schemas --------------------------------------------------------


def _target_path(f: _Fields, key: str) -> str:
    value = f.text(key)
    if not value.startswith("/"):
        f.fail(key, "target paths must be absolute (rooted at the target root)")
    if "\0" in value:
        f.fail(key, "NUL byte in path")
    return value


def _argv(f: _Fields) -> list[str]:
    argv = list(f.str_list("argv"))
    if not argv:
        f.fail("argv", "must not be empty")
    return argv


def _exec_args(f: _Fields) -> dict:
    return {"argv": _argv(f), "env": f.str_map("env"), "cwd": _target_path(f, "cwd") if f.has("cwd") else "/"}


def _schema_file(f: _Fields) -> dict:
    content = f.data.get("content")
    if not isinstance(content, str):
        f.fail("content", "expected a string")
    return {"path": _target_path(f, "path"), "content": content, "mode": f.mode("mode", 0o644)}


def _schema_dir(f: _Fields) -> dict:
    return {"path": _target_path(f, "path"), "mode": f.mode("mode", 0o755)}


def _schema_copy(f: _Fields) -> dict:
    src = f.text("src")
    parts = src.split("/")
    if src.startswith("/") or ".." in parts:
        f.fail("src", "must be a relative path inside the role's files/ directory")
    return {"src": src, "dest": _target_path(f, "dest"), "mode": f.mode("mode", 0o644)}


def _schema_fetch_url(f: _Fields) -> dict:
    return {
        "url": f.text("url"),
        "dest": _target_path(f, "dest"),
        "sha256": f.text("sha256", pattern=DIGEST_RE),
        "mode": f.mode("mode", 0o644),
    }


def _schema_package(f: _Fields) -> dict:
    return {"name": f.text("name", pattern=NAME_RE), "version": f.text("version", pattern=VERSION_RE)}


_SCHEMAS = {
    "file": (_schema_file, ("path", "content"), ("mode",)),
    "dir": (_schema_dir, ("path",), ("mode",)),
    "copy": (_schema_copy, ("src", "dest"), ("mode",)),
    "fetch_url": (_schema_fetch_url, ("url", "dest", "sha256"), ("mode",)),
    "package": (_schema_package, ("name", "version"), ()),
    "command": (_exec_args, ("argv",), ("env", "cwd")),
    "test": (_exec_args, ("argv",), ("env", "cwd")),
}


def validate_args(directive: str, args: Mapping[str, Any], source: str = "<string>", node=None) -> dict:
    """Check ``args`` against the directive schema and return them normalized."""
    if directive not in _SCHEMAS:
        raise SchemaError(f"unknown directive {directive!r}", source, _line(node))
    build, required, optional = _SCHEMAS[directive]
    return build(_Fields(args, node, directive, source, required, optional))


def _parse_task(data, node, source: str) -> TaskSpec:
    if not isinstance(data, dict):
        raise SchemaError("each task must be a mapping", source, _line(node))
    directives = [k for k in data if k not in ("id", "creates")]
    if not directives:
        raise SchemaError("task has no directive", source, _line(node))
    if len(directives) > 1:
        unknown = [d for d in directives if d not in _SCHEMAS]
        if unknown:
            raise SchemaError(f"unknown directive {unknown[0]!r}", source, _line(node))
        raise SchemaError(f"task names several directives: {', '.join(directives)}", source, _line(node))
    directive = directives[0]
    if directive not in _SCHEMAS:
        raise SchemaError(
            f"unknown directive {directive!r}", source, _line(_node_lookup(node, directive) or node)
        )
    f = _Fields(data, node, "task", source, ("id", directive), ("creates",))
    task_id = f.text("id", pattern=NAME_RE)
    creates = None
    if f.has("creates"):
        if directive != "command":
            f.fail("creates", f"'creates' is only valid on command tasks, not {directive}")
        creates = _target_path(f, "creates")
    args = validate_args(directive, data[directive], source, _node_lookup(node, directive))
    return TaskSpec(task_id, directive, args, creates, line=_line(node))


# -- public parsers -----------------------------------------------------------


def parse_image_ref(value: str) -> ImageRef | str:
    if value == SCRATCH:
        return SCRATCH
    return ImageRef.parse(value)


def parse_playbook(text: str, source: str = "<string>") -> Playbook:
    data, node = _load(text, source)
    f = _Fields(
        data, node, "playbook", source,
        ("name", "version", "base_image", "roles"),
        ("build_epoch", "verify"),
    )
    name = f.text("name", pattern=NAME_RE)
    version = f.text("version")
    if any(c.isspace() for c in version):
        f.fail("version", "must not contain whitespace")
    if not VERSION_RE.match(version):
        f.fail("version", f"{version!r} does not match {VERSION_RE.pattern}")
    try:
        base = parse_image_ref(f.text("base_image"))
    except ValueError as exc:
        f.fail("base_image", str(exc))
    roles = f.str_list("roles", pattern=NAME_RE)
    if not roles:
        f.fail("roles", "must select at least one role")
    seen: set[str] = set()
    for role in roles:
        if role in seen:
            raise DuplicateError(
                f"role {role!r} selected more than once", source, f._line_of("roles")
            )
        seen.add(role)
    epoch = None
    if f.has("build_epoch"):
        epoch = f.integer("build_epoch")
        if epoch < 0:
            f.fail("build_epoch", "must be non-negative")
    verify = VerifyConfig()
    if f.has("verify"):
        vf = _Fields(
            data["verify"], _node_lookup(node, "verify"), "verify", source,
            (), ("characteristics_paths", "docs_paths"),
        )
        verify = VerifyConfig(
            _abs_paths(vf, "characteristics_paths", DEFAULT_CHARACTERISTICS_PATHS),
            _abs_paths(vf, "docs_paths", DEFAULT_DOCS_PATHS),
        )
    return Playbook(name, version, base, roles, epoch, verify, source=source)


def _abs_paths(f: _Fields, key: str, default) -> tuple[str, ...]:
    paths = f.str_list(key, default=default)
    for p in paths:
        if not p.startswith("/"):
            f.fail(key, f"{p!r} must be an absolute target path")
    return paths


def parse_role(text: str, source: str = "<string>") -> RoleSpec:
    data, node = _load(text, source)
    f = _Fields(data, node, "role", source, ("name", "tasks"), ("depends",))
    name = f.text("name", pattern=NAME_RE)
    depends = f.str_list("depends", pattern=NAME_RE)
    if name in depends:
        raise SelfDependError(f"role {name!r} depends on itself", source, f._line_of("depends"))
    if len(set(depends)) != len(depends):
        raise DuplicateError(f"role {name!r} lists a dependency twice", source, f._line_of("depends"))
    raw_tasks = data["tasks"]
    tasks_node = _node_lookup(node, "tasks")
    if not isinstance(raw_tasks, list):
        f.fail("tasks", "expected a list")
    tasks = []
    ids: set[str] = set()
    for i, raw in enumerate(raw_tasks):
        item_node = tasks_node.value[i] if isinstance(tasks_node, yaml.SequenceNode) else None
        task = _parse_task(raw, item_node, source)
        if task.id in ids:
            raise DuplicateError(f"duplicate task id {task.id!r} in role {name!r}", source, task.line)
        ids.add(task.id)
        tasks.append(task)
    return RoleSpec(name, depends, tuple(tasks), source=source)


# -- serialization ------------------------------------------------------------


def _task_to_data(task: TaskSpec) -> dict:
    args = dict(task.args)
    if args.get("env") == {}:
        del args["env"]
    if "mode" in args:
        args["mode"] = format(args["mode"], "04o")
    out: dict[str, Any] = {"id": task.id, task.directive: args}
    if task.creates is not None:
        out["creates"] = task.creates
    return out


def dump_role(role: RoleSpec) -> str:
    data: dict[str, Any] = {"name": role.name}
    if role.depends:
        data["depends"] = list(role.depends)
    data["tasks"] = [_task_to_data(t) for t in role.tasks]
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=False, allow_unicode=True)


def dump_playbook(playbook: Playbook) -> str:
    data: dict[str, Any] = {
        "name": playbook.name,
        "version": playbook.version,
        "base_image": str(playbook.base_image),
        "roles": list(playbook.role_selection),
    }
    if playbook.build_epoch is not None:
        data["build_epoch"] = playbook.build_epoch
    data["verify"] = playbook.verify_config.to_dict()
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=False, allow_unicode=True)


# -- lint ---------------------------------------------------------------------


def lint(playbook: Playbook, roles: Iterable[RoleSpec]) -> list[Diagnostic]:
    """Static checks over parsed documents.

    E001  selected role has no document
    E002  role depends on a role with no document
    E003  two role documents declare the same name
    W001  command task without a ``creates`` guard (not idempotent)
    """
    diags: list[Diagnostic] = []
    by_name: dict[str, RoleSpec] = {}
    for role in sorted(roles, key=lambda r: (r.name, r.source)):
        if role.name in by_name:
            diags.append(Diagnostic(
                "error", "E003", role.source, None,
                f"role {role.name!r} is also defined in {by_name[role.name].source}",
            ))
            continue
        by_name[role.name] = role
    for name in playbook.role_selection:
        if name not in by_name:
            diags.append(Diagnostic(
                "error", "E001", playbook.source, None, f"selected role {name!r} has no role document"
            ))
    for role in by_name.values():
        for dep in role.depends:
            if dep not in by_name:
                diags.append(Diagnostic(
                    "error", "E002", role.source, None,
                    f"role {role.name!r} depends on unknown role {dep!r}",
                ))
        for task in role.tasks:
            if task.directive == "command" and task.creates is None:
                diags.append(Diagnostic(
                    "warning", "W001", role.source, task.line,
                    f"command task {role.name}/{task.id} has no 'creates' guard and will run on every build",
                ))
    return diags


def has_errors(diags: Iterable[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diags)
