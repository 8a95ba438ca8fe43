"""``forgebox`` command line.

Exit codes: 0 success, 1 build/gate/integrity/runtime failure, 2 spec or
lint error (and argument errors). Logs go to stderr; refs, digests and
target ids go to stdout, one per line.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import fcntl
import json
import logging
import os
import sys
import time
from pathlib import Path

import yaml

from forgebox import __version__
from forgebox.drivers import SandboxDriver, get_driver
from forgebox.drivers.archive import sha256_hex
from forgebox.engine import BuildContext, converge, stderr_progress
from forgebox.errors import ForgeboxError, IntegrityError, NotFound, PlanError, SpecError
from forgebox.gates import CRITERIA, ChecklistReport, Criterion, gate_build, run_release_checklist
from forgebox.imagestore import (
    Cache,
    ImageArtifact,
    ImageManifest,
    fetch,
    load_artifact,
    package,
    publish,
    resolve_base,
)
from forgebox.planner import make_plan
from forgebox.speclang import SCRATCH, Playbook, RoleSpec, has_errors, lint, parse_playbook, parse_role

log = logging.getLogger("forgebox")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_SPEC = 2

CONFIG_KEYS = {"state_dir", "cache_dir", "registries", "driver"}


@dataclasses.dataclass
class CliConfig:
    state_dir: Path
    cache_dir: Path
    registries: list[str]
    default_driver: str = "sandbox"

    def ensure_dirs(self) -> None:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.cache_dir.mkdir(parents=True, exist_ok=True)


@dataclasses.dataclass
class TargetRecord:
    id: str
    image: str
    root: str
    created_at: int


class UsageError(ForgeboxError):
    pass


def load_config(args, env=None) -> CliConfig:
    """Resolve settings: flag > environment > config file > default."""
    env = os.environ if env is None else env
    file_cfg: dict = {}
    config_path = args.config or env.get("FORGEBOX_CONFIG")
    if config_path is None and Path("forgebox.yaml").is_file():
        config_path = "forgebox.yaml"
    if config_path:
        try:
            file_cfg = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(file_cfg, dict) or set(file_cfg) - CONFIG_KEYS:
            raise UsageError(f"config {config_path}: allowed keys are {', '.join(sorted(CONFIG_KEYS))}")

    state_dir = Path(args.state_dir or env.get("FORGEBOX_STATE_DIR") or file_cfg.get("state_dir") or ".forgebox")
    cache_dir = Path(args.cache_dir or env.get("FORGEBOX_CACHE_DIR") or file_cfg.get("cache_dir") or state_dir / "cache")
    registries = args.registry or file_cfg.get("registries") or [str(state_dir / "registry")]
    if isinstance(registries, str):
        registries = [registries]
    driver = args.driver or file_cfg.get("driver") or "sandbox"
    return CliConfig(state_dir, cache_dir, [str(r) for r in registries], driver)


def resolve_epoch(flag, env, playbook: Playbook) -> int:
    """--epoch > FORGEBOX_EPOCH > playbook build_epoch > SOURCE_DATE_EPOCH > now."""
    for value, origin in ((flag, "--epoch"), (env.get("FORGEBOX_EPOCH"), "FORGEBOX_EPOCH")):
        if value not in (None, ""):
            return _epoch(value, origin)
    if playbook.build_epoch is not None:
        return playbook.build_epoch
    if env.get("SOURCE_DATE_EPOCH"):
        return _epoch(env["SOURCE_DATE_EPOCH"], "SOURCE_DATE_EPOCH")
    log.warning("no build epoch given; using the current time, so this image will not be reproducible")
    return int(time.time())


def _epoch(value, origin) -> int:
    try:
        epoch = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"{origin}: {value!r} is not an integer number of seconds") from None
    if epoch < 0:
        raise UsageError(f"{origin}: epoch must be non-negative")
    return epoch


# -- shared helpers -----------------------------------------------------------


def load_roles(context_dir: Path) -> list[RoleSpec]:
    roles = []
    roles_dir = context_dir / "roles"
    if not roles_dir.is_dir():
        return roles
    for role_file in sorted(roles_dir.glob("*/role.yaml")):
        role = parse_role(role_file.read_text(encoding="utf-8"), source=str(role_file))
        if role.name != role_file.parent.name:
            raise SpecError(f"role is named {role.name!r} but lives in roles/{role_file.parent.name}/", str(role_file))
        roles.append(role)
    return roles


def _prepare(args) -> tuple[Playbook, list[RoleSpec], Path]:
    playbook_path = Path(args.playbook)
    try:
        text = playbook_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read playbook: {exc.strerror}", str(playbook_path)) from None
    playbook = parse_playbook(text, source=str(playbook_path))
    if args.roles:
        selection = tuple(r.strip() for r in args.roles.split(",") if r.strip())
        if not selection or len(set(selection)) != len(selection):
            raise SpecError("--roles must name each role once", "--roles")
        playbook = dataclasses.replace(playbook, role_selection=selection)
    context_dir = Path(args.context) if args.context else playbook_path.parent
    roles = load_roles(context_dir)
    diags = lint(playbook, roles)
    for d in diags:
        print(str(d), file=sys.stderr)
    if has_errors(diags):
        raise SpecError(f"{sum(d.severity == 'error' for d in diags)} lint error(s)", str(playbook_path))
    return playbook, roles, context_dir


@contextlib.contextmanager
def state_lock(cfg: CliConfig):
    cfg.state_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.state_dir / "lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _records_dir(cfg: CliConfig) -> Path:
    return cfg.state_dir / "records"


def read_records(cfg: CliConfig) -> list[TargetRecord]:
    out = []
    d = _records_dir(cfg)
    if d.is_dir():
        for path in sorted(d.glob("*.json")):
            out.append(TargetRecord(**json.loads(path.read_text(encoding="utf-8"))))
    return out


def _resolve_image(cfg: CliConfig, image: str, verify: bool = True) -> ImageArtifact:
    """Local artifact directory/blob, or a ref/URL fetched through the cache."""
    if Path(image).exists():
        return load_artifact(image) if verify else _load_unverified(Path(image))
    path = fetch(image, cache=Cache(cfg.cache_dir), registries=cfg.registries)
    return load_artifact(path)


def _load_unverified(path: Path) -> ImageArtifact:
    try:
        return load_artifact(path)
    except IntegrityError:
        if path.is_dir():
            archive = next(p for p in (path / "image.tar", path / "image.tar.gz") if p.is_file())
            manifest = path / "manifest.json"
        else:
            archive, manifest = path, path.with_name(path.name + ".manifest.json")
        return ImageArtifact(ImageManifest.from_json(manifest.read_bytes()), archive.read_bytes())


# -- commands -----------------------------------------------------------------


def cmd_build(cfg: CliConfig, args) -> int:
    playbook, roles, context_dir = _prepare(args)
    plan = make_plan(playbook, roles)
    epoch = resolve_epoch(args.epoch, os.environ, playbook)
    out = args.out or cfg.registries[0]
    cfg.ensure_dirs()

    cache = Cache(cfg.cache_dir)
    base_path = resolve_base(playbook.base_image, cache, cfg.registries)
    base_bytes = base_path.read_bytes()
    base_digest = sha256_hex(base_bytes)
    base_label = SCRATCH if playbook.base_image == SCRATCH else f"{playbook.base_image.key}@{base_digest}"
    log.info("base image %s", base_label)

    driver = get_driver(cfg.default_driver, cfg.state_dir)
    target = driver.instantiate(base_bytes, expected_digest=base_digest)
    try:
        context = BuildContext(context_dir, cache_dir=cfg.cache_dir)
        report = converge(plan, target, context, progress=stderr_progress)
        decision = gate_build(report)
        if not decision:
            print(report.render(), file=sys.stderr)
            print(f"build failed, no image produced: {decision.reason}", file=sys.stderr)
            return EXIT_FAIL
        artifact = package(target, plan, playbook, epoch, base_image=base_label, compress=args.gzip)
    finally:
        driver.destroy(target)
    ref = publish(artifact, out)
    print(ref.key)
    print(ref.digest)
    return EXIT_OK


def cmd_validate(cfg: CliConfig, args) -> int:
    playbook, roles, _ = _prepare(args)
    plan = make_plan(playbook, roles)
    if args.explain:
        sys.stdout.write(plan.explain())
    print(f"ok: {len(plan.steps)} step(s) across {len(plan.role_order)} role(s)", file=sys.stderr)
    return EXIT_OK


def cmd_up(cfg: CliConfig, args) -> int:
    if cfg.default_driver != "sandbox":
        raise UsageError("'up' needs the sandbox driver; memory targets do not outlive the process")
    artifact = _resolve_image(cfg, args.image)
    driver = SandboxDriver(cfg.state_dir)
    with state_lock(cfg):
        target = driver.instantiate(artifact.archive, expected_digest=artifact.manifest.archive_digest)
        record = TargetRecord(target.id, str(artifact.manifest.ref), str(target.root), int(time.time()))
        _records_dir(cfg).mkdir(parents=True, exist_ok=True)
        tmp = _records_dir(cfg) / f".{target.id}.tmp"
        tmp.write_text(json.dumps(dataclasses.asdict(record), sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, _records_dir(cfg) / f"{target.id}.json")
    print(target.id)
    print(target.root)
    return EXIT_OK


def cmd_destroy(cfg: CliConfig, args) -> int:
    driver = SandboxDriver(cfg.state_dir)
    with state_lock(cfg):
        record = _records_dir(cfg) / f"{args.target_id}.json"
        found = record.is_file()
        if found:
            record.unlink()
        try:
            target = driver.attach(args.target_id)
        except NotFound:
            target = None
        if target is not None:
            driver.destroy(target)
    if not found and target is None:
        log.warning("no target %s; nothing to destroy", args.target_id)
    return EXIT_OK


def cmd_list(cfg: CliConfig, args) -> int:
    for rec in read_records(cfg):
        print(f"{rec.id}\t{rec.image}\t{rec.root}")
    return EXIT_OK


def cmd_verify(cfg: CliConfig, args) -> int:
    try:
        artifact = _resolve_image(cfg, args.image, verify=False)
    except (IntegrityError, NotFound) as exc:
        report = ChecklistReport(
            (Criterion("C1", False, f"{type(exc).__name__}: {exc}"),)
            + tuple(Criterion(c, False, "not evaluated: no target (C1 failed)") for c in CRITERIA[1:])
        )
    else:
        report = run_release_checklist(artifact, SandboxDriver(cfg.state_dir))
    print(report.render())
    return EXIT_OK if report.overall else EXIT_FAIL


def cmd_fetch(cfg: CliConfig, args) -> int:
    path = fetch(args.source, expected_digest=args.digest, cache=Cache(cfg.cache_dir), registries=cfg.registries)
    print(path)
    return EXIT_OK


def cmd_publish(cfg: CliConfig, args) -> int:
    artifact = load_artifact(args.artifact)
    ref = publish(artifact, args.out or cfg.registries[0])
    print(ref.key)
    print(ref.digest)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # shared options may appear before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given to the main parser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--state-dir", help="state directory (env FORGEBOX_STATE_DIR, default .forgebox)")
    common.add_argument("--cache-dir", help="download cache (env FORGEBOX_CACHE_DIR, default <state-dir>/cache)")
    common.add_argument("--registry", action="append", help="registry location, searched in order (repeatable)")
    common.add_argument("--driver", choices=("sandbox", "memory"), help="target driver (default sandbox)")
    common.add_argument("--config", help="YAML config file (env FORGEBOX_CONFIG)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="forgebox", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"forgebox {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def spec_args(p):
        p.add_argument("playbook")
        p.add_argument("--context", help="build context directory (default: the playbook's directory)")
        p.add_argument("--roles", help="comma-separated role selection overriding the playbook's")

    p = sub.add_parser("build", parents=[common], help="converge, test, package and publish an image")
    spec_args(p)
    p.add_argument("--epoch", help="build epoch in seconds (env FORGEBOX_EPOCH)")
    p.add_argument("--out", help="registry to publish into (default: first --registry)")
    p.add_argument("--gzip", action="store_true", help="publish image.tar.gz instead of image.tar")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("validate", parents=[common], help="parse, lint and plan without executing")
    spec_args(p)
    p.add_argument("--explain", action="store_true", help="print the plan, one step per line")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("up", parents=[common], help="fetch an image and start a target from it")
    p.add_argument("image", help="name/version[@digest], URL, or local artifact path")
    p.set_defaults(func=cmd_up)

    p = sub.add_parser("destroy", parents=[common], help="remove a target started with 'up'")
    p.add_argument("target_id")
    p.set_defaults(func=cmd_destroy)

    p = sub.add_parser("list", parents=[common], help="list targets started with 'up'")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("verify", parents=[common], help="run the release checklist against an image")
    p.add_argument("image")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fetch", parents=[common], help="download and verify an image into the cache")
    p.add_argument("source")
    p.add_argument("--digest", help="expected sha256 of the archive")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("publish", parents=[common], help="publish an artifact directory to a registry")
    p.add_argument("artifact")
    p.add_argument("--out", help="registry (default: first --registry)")
    p.set_defaults(func=cmd_publish)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_SPEC
    for name in ("state_dir", "cache_dir", "registry", "driver", "config", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="forgebox: %(levelname)s: %(message)s",
        force=True,
    )
    try:
        cfg = load_config(args)
        return args.func(cfg, args)
    except (SpecError, PlanError) as exc:
        print(f"forgebox: error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except UsageError as exc:
        print(f"forgebox: error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except ForgeboxError as exc:
        print(f"forgebox: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"forgebox: error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except KeyboardInterrupt:
        return EXIT_FAIL
    except Exception as exc:  # exit-code contract: never escape with a traceback code
        log.debug("unexpected failure", exc_info=True)
        print(f"forgebox: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
