"""Check-then-apply execution of a plan against a target, failing fast."""

from __future__ import annotations

import hashlib
import logging
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from forgebox import packages
from forgebox.imagestore import fetch
from forgebox.drivers.base import Target
from forgebox.errors import ConfinementError, ForgeboxError, NotFound
from forgebox.planner import Plan, PlanStep
from forgebox.speclang import TaskSpec

log = logging.getLogger(__name__)

CONVERGED = "converged"
DIVERGENT = "divergent"
UNKNOWN = "unknown"

OK = "ok"
CHANGED = "changed"
FAILED = "failed"
SKIPPED = "skipped"

SUCCESS = "success"


@dataclass(frozen=True)
class StateAssessment:
    verdict: str
    reason: str = ""


@dataclass(frozen=True)
class TaskResult:
    role: str
    task_id: str
    status: str
    message: str = ""
    duration_ms: int = 0

    @property
    def label(self) -> str:
        return f"{self.role}/{self.task_id}"


@dataclass
class BuildReport:
    results: list[TaskResult] = field(default_factory=list)
    outcome: str = SUCCESS
    failed_step: int | None = None

    @property
    def succeeded(self) -> bool:
        return self.outcome == SUCCESS

    def count(self, status: str) -> int:
        return sum(1 for r in self.results if r.status == status)

    def render(self) -> str:
        lines = [
            f"{i:3d} {r.label:<32} {r.status:<8} {r.message}".rstrip()
            for i, r in enumerate(self.results)
        ]
        lines.append(f"outcome: {self.outcome}" + (f" (step {self.failed_step})" if self.failed_step is not None else ""))
        return "\n".join(lines)


@dataclass
class BuildContext:
    """Where payload files, packages and fetched downloads come from."""

    root: Path
    cache_dir: Path | None = None
    transport: object = None

    def __post_init__(self):
        self.root = Path(self.root)

    def cache(self) -> Path:
        if self.cache_dir is None:
            self.cache_dir = Path(tempfile.mkdtemp(prefix="forgebox-cache-"))
        return Path(self.cache_dir)

    @property
    def repo(self) -> packages.PackageRepo:
        return packages.PackageRepo(self.root / "packages")

    def payload(self, role: str, src: str) -> bytes:
        files = (self.root / "roles" / role / "files").resolve()
        path = (files / src).resolve()
        if files not in path.parents:
            raise ConfinementError(f"copy source {src!r} escapes roles/{role}/files")
        if not path.is_file():
            raise NotFound(f"payload roles/{role}/files/{src} does not exist")
        return path.read_bytes()


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _check_file(target: Target, path: str, digest: str, mode: int | None) -> StateAssessment:
    st = target.stat(path)
    if not st.exists:
        return StateAssessment(DIVERGENT, f"{path} is absent")
    if st.kind != "file":
        return StateAssessment(DIVERGENT, f"{path} is a {st.kind}, not a file")
    if _digest(target.read_file(path)) != digest:
        return StateAssessment(DIVERGENT, f"{path} content differs")
    if mode is not None and st.mode != mode:
        return StateAssessment(DIVERGENT, f"{path} mode is {st.mode:04o}, want {mode:04o}")
    return StateAssessment(CONVERGED, f"{path} up to date")


def check(task: TaskSpec, target: Target, context: BuildContext | None = None, role: str | None = None) -> StateAssessment:
    """Assess whether ``task``'s declared state already holds. Never mutates."""
    args = task.args
    d = task.directive
    if d == "file":
        return _check_file(target, args["path"], _digest(args["content"].encode("utf-8")), args["mode"])
    if d == "dir":
        st = target.stat(args["path"])
        if not st.exists:
            return StateAssessment(DIVERGENT, f"{args['path']} is absent")
        if st.kind != "dir":
            return StateAssessment(DIVERGENT, f"{args['path']} is a {st.kind}, not a directory")
        if st.mode != args["mode"]:
            return StateAssessment(DIVERGENT, f"{args['path']} mode is {st.mode:04o}, want {args['mode']:04o}")
        return StateAssessment(CONVERGED, f"{args['path']} up to date")
    if d == "copy":
        if context is None or role is None:
            raise ValueError("copy tasks need a build context and role")
        return _check_file(target, args["dest"], _digest(context.payload(role, args["src"])), args["mode"])
    if d == "fetch_url":
        return _check_file(target, args["dest"], args["sha256"], None)
    if d == "package":
        if packages.is_installed(target, args["name"], args["version"]):
            return StateAssessment(CONVERGED, f"{args['name']}-{args['version']} installed")
        return StateAssessment(DIVERGENT, f"{args['name']}-{args['version']} not installed")
    if d == "command":
        if task.creates is None:
            return StateAssessment(UNKNOWN, "unguarded command")
        if target.stat(task.creates).exists:
            return StateAssessment(CONVERGED, f"{task.creates} exists")
        return StateAssessment(DIVERGENT, f"{task.creates} is absent")
    if d == "test":
        return StateAssessment(UNKNOWN, "tests always run")
    raise ValueError(f"unknown directive {d!r}")


def _exec_failure(outcome) -> str:
    tail = (outcome.stderr or outcome.stdout or b"").decode("utf-8", "replace").strip().splitlines()[-3:]
    msg = f"exit code {outcome.exit_code}"
    return msg + (": " + " | ".join(tail) if tail else "")


def apply(task: TaskSpec, target: Target, context: BuildContext, role: str) -> TaskResult:
    """Bring the target to the task's declared state.

    Raises DriverError, IntegrityError or PackageNotFound when that is not
    possible; a nonzero exit from a command or test is a ``failed`` result.
    """
    args = task.args
    d = task.directive
    start = time.monotonic()

    def done(status: str, message: str) -> TaskResult:
        return TaskResult(role, task.id, status, message, int((time.monotonic() - start) * 1000))

    if d == "file":
        target.write_file(args["path"], args["content"].encode("utf-8"), args["mode"])
        return done(CHANGED, f"wrote {args['path']}")
    if d == "dir":
        target.mkdir(args["path"], args["mode"])
        return done(CHANGED, f"created {args['path']}")
    if d == "copy":
        target.write_file(args["dest"], context.payload(role, args["src"]), args["mode"])
        return done(CHANGED, f"copied {args['src']} to {args['dest']}")
    if d == "fetch_url":
        path = fetch(args["url"], expected_digest=args["sha256"], cache=context.cache(), transport=context.transport)
        target.write_file(args["dest"], Path(path).read_bytes(), args["mode"])
        return done(CHANGED, f"fetched {args['url']}")
    if d == "package":
        packages.install(target, context.repo, args["name"], args["version"])
        return done(CHANGED, f"installed {args['name']}-{args['version']}")
    if d == "command":
        outcome = target.exec(args["argv"], args.get("env"), args.get("cwd", "/"))
        if outcome.exit_code != 0:
            return done(FAILED, _exec_failure(outcome))
        return done(CHANGED, "ran " + " ".join(args["argv"]))
    if d == "test":
        before = target.digest()
        outcome = target.exec(args["argv"], args.get("env"), args.get("cwd", "/"))
        if outcome.exit_code != 0:
            return done(FAILED, _exec_failure(outcome))
        if target.digest() != before:
            return done(FAILED, "test modified the target filesystem")
        return done(OK, "passed")
    raise ValueError(f"unknown directive {d!r}")


def run_step(step: PlanStep, target: Target, context: BuildContext) -> TaskResult:
    start = time.monotonic()
    try:
        assessment = check(step.task, target, context, step.role)
        if assessment.verdict == CONVERGED:
            return TaskResult(step.role, step.task.id, OK, assessment.reason, int((time.monotonic() - start) * 1000))
        return apply(step.task, target, context, step.role)
    except ForgeboxError as exc:
        message = f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # driver bugs still end the build as a failed step
        log.debug("step %s crashed", step.label, exc_info=True)
        message = f"internal error {type(exc).__name__}: {exc}"
    return TaskResult(step.role, step.task.id, FAILED, message, int((time.monotonic() - start) * 1000))


def converge(
    plan: Plan | Iterable[PlanStep],
    target: Target,
    context: BuildContext,
    progress: Callable[[TaskResult], None] | None = None,
) -> BuildReport:
    steps = list(plan.steps if isinstance(plan, Plan) else plan)
    report = BuildReport()
    for index, step in enumerate(steps):
        if report.failed_step is not None:
            result = TaskResult(step.role, step.task.id, SKIPPED, f"skipped after failure at step {report.failed_step}")
        else:
            result = run_step(step, target, context)
            if result.status == FAILED:
                report.failed_step = index
                report.outcome = FAILED
        report.results.append(result)
        if progress is not None:
            progress(result)
    return report


def stderr_progress(result: TaskResult) -> None:
    print(f"[{result.label}] {result.status.upper()} ({result.duration_ms} ms)", file=sys.stderr)
    if result.status == FAILED and result.message:
        print(f"    {result.message}", file=sys.stderr)


__all__ = [
    "BuildContext",
    "BuildReport",
    "StateAssessment",
    "TaskResult",
    "apply",
    "check",
    "converge",
    "run_step",
    "stderr_progress",
]
