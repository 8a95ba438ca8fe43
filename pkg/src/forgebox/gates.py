"""Quality gates: no image from a failed build, and the release checklist."""

from __future__ import annotations

from dataclasses import dataclass

from forgebox.drivers.base import Target, TargetDriver
from forgebox.engine import FAILED, BuildReport
from forgebox.errors import ForgeboxError
from forgebox.imagestore import ImageArtifact, ImageManifest, parse_characteristics

CRITERIA = ("C1", "C2", "C3", "C4")


@dataclass(frozen=True)
class GateDecision:
    passed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class ImageTestResult:
    role: str
    task_id: str
    exit_code: int
    passed: bool


@dataclass(frozen=True)
class GateReport:
    tests: tuple[ImageTestResult, ...]

    @property
    def all_passed(self) -> bool:
        return all(t.exit_code == 0 for t in self.tests)


@dataclass(frozen=True)
class Criterion:
    id: str
    passed: bool
    evidence: str

    def line(self) -> str:
        return f"{self.id} {'PASS' if self.passed else 'FAIL'} — {self.evidence}"


@dataclass(frozen=True)
class ChecklistReport:
    criteria: tuple[Criterion, ...]

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.criteria)

    def render(self) -> str:
        return "\n".join(c.line() for c in self.criteria)


def gate_build(report: BuildReport) -> GateDecision:
    if report.succeeded and report.failed_step is None:
        return GateDecision(True, "all steps converged")
    index = report.failed_step
    if index is None:
        index = next((i for i, r in enumerate(report.results) if r.status == FAILED), None)
    if index is None:
        return GateDecision(False, f"build outcome is {report.outcome}")
    r = report.results[index]
    return GateDecision(False, f"step {index} ({r.role}/{r.task_id}) failed: {r.message}")


def run_image_tests(target: Target, manifest: ImageManifest) -> GateReport:
    outcomes = []
    for test in manifest.tests:
        try:
            result = target.exec(list(test.argv), test.env, test.cwd)
            code = result.exit_code
        except ForgeboxError:
            code = -1
        outcomes.append(ImageTestResult(test.role, test.task_id, code, code == 0))
    return GateReport(tuple(outcomes))


def _check_characteristics(target: Target, manifest: ImageManifest) -> Criterion:
    paths = manifest.verify_config.characteristics_paths
    if not paths:
        return Criterion("C2", False, "no characteristics paths configured")
    problems = []
    for path in paths:
        if not target.stat(path).exists:
            problems.append(f"{path} missing")
            continue
        try:
            info = parse_characteristics(target.read_file(path).decode("utf-8"))
        except (ValueError, UnicodeDecodeError, ForgeboxError) as exc:
            problems.append(f"{path} unreadable ({exc})")
            continue
        if info.get("name") != manifest.name or info.get("version") != manifest.version:
            problems.append(
                f"{path} says {info.get('name')}/{info.get('version')}, manifest says {manifest.name}/{manifest.version}"
            )
    if problems:
        return Criterion("C2", False, "; ".join(problems))
    return Criterion("C2", True, f"{manifest.name}/{manifest.version} recorded at {', '.join(paths)}")


def _check_docs(target: Target, manifest: ImageManifest) -> Criterion:
    paths = manifest.verify_config.docs_paths
    if not paths:
        return Criterion("C4", False, "no documentation paths configured")
    problems = []
    for path in paths:
        st = target.stat(path)
        if not st.exists:
            problems.append(f"{path} missing")
        elif st.kind != "file" or not st.size:
            problems.append(f"{path} empty or not a file")
    if problems:
        return Criterion("C4", False, "; ".join(problems))
    return Criterion("C4", True, f"{len(paths)} document(s) present")


def _check_tests(target: Target, manifest: ImageManifest) -> Criterion:
    tests = run_image_tests(target, manifest)
    failing = [f"{t.role}/{t.task_id} exit {t.exit_code}" for t in tests.tests if not t.passed]
    if failing:
        return Criterion("C3", False, "failed: " + ", ".join(failing))
    return Criterion("C3", True, f"{len(tests.tests)} test(s) passed")


def _guard(cid, check, target, manifest) -> Criterion:
    try:
        return check(target, manifest)
    except ForgeboxError as exc:
        return Criterion(cid, False, f"{type(exc).__name__}: {exc}")


def run_release_checklist(image: ImageArtifact, driver: TargetDriver) -> ChecklistReport:
    """Evaluate all four release criteria against a private instance of ``image``.

    Every criterion is always reported; the instance is destroyed afterwards.
    """
    manifest = image.manifest
    target = None
    try:
        target = driver.instantiate(image.archive, expected_digest=manifest.archive_digest)
        c1 = Criterion("C1", True, f"instantiated {manifest.ref} as target {target.id}")
    except ForgeboxError as exc:
        c1 = Criterion("C1", False, f"{type(exc).__name__}: {exc}")
    try:
        if target is None:
            rest = [Criterion(c, False, "not evaluated: no target (C1 failed)") for c in CRITERIA[1:]]
        else:
            rest = [
                _guard("C2", _check_characteristics, target, manifest),
                _guard("C3", _check_tests, target, manifest),
                _guard("C4", _check_docs, target, manifest),
            ]
    finally:
        if target is not None:
            driver.destroy(target)
    return ChecklistReport((c1, *rest))
