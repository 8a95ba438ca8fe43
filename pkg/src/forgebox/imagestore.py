"""Images: packaging converged targets, registries, and verified fetching.

Registry layout (a plain directory tree, servable by any static HTTP server)::

    <root>/<name>/<version>/image.tar        (or image.tar.gz)
    <root>/<name>/<version>/manifest.json
    <root>/<name>/<version>/image.sha256     ("<hex>  image.tar", sha256sum format)

Cache layout::

    <cache>/sha256/<digest>                  verified archive bytes
    <cache>/sha256/<digest>.manifest.json    manifest, when fetched from a registry
    <cache>/refs/<registry key>/<name>/<version>   resolved digest
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
import urllib.error
import urllib.parse
import urllib.request
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

from forgebox import __version__
from forgebox.drivers.archive import EMPTY_ARCHIVE, GZIP_MAGIC, sha256_hex, tree_digest
from forgebox.drivers.base import Target
from forgebox.errors import Conflict, IntegrityError, NetworkError, NotFound
from forgebox.planner import Plan
from forgebox.speclang import DIGEST_RE, SCRATCH, ImageRef, Playbook, VerifyConfig

log = logging.getLogger(__name__)

ARCHIVE_NAMES = ("image.tar", "image.tar.gz")
MANIFEST_NAME = "manifest.json"
DIGEST_NAME = "image.sha256"
CHUNK = 64 * 1024


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class RegisteredTest:
    role: str
    task_id: str
    argv: tuple[str, ...]
    cwd: str = "/"
    env: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"role": self.role, "task_id": self.task_id, "argv": list(self.argv), "cwd": self.cwd, "env": dict(self.env)}

    @classmethod
    def from_dict(cls, d) -> RegisteredTest:
        return cls(d["role"], d["task_id"], tuple(d["argv"]), d.get("cwd", "/"), dict(d.get("env", {})))


@dataclass(frozen=True)
class ImageManifest:
    name: str
    version: str
    created_at: int
    base_image: str
    roles: tuple[str, ...]
    archive_digest: str
    tests: tuple[RegisteredTest, ...]
    verify_config: VerifyConfig
    tool_version: str

    @property
    def ref(self) -> ImageRef:
        return ImageRef(self.name, self.version, self.archive_digest)

    def to_json(self) -> str:
        data = {
            "name": self.name,
            "version": self.version,
            "created_at": self.created_at,
            "base_image": self.base_image,
            "roles": list(self.roles),
            "archive_digest": self.archive_digest,
            "tests": [t.to_dict() for t in self.tests],
            "verify_config": self.verify_config.to_dict(),
            "tool_version": self.tool_version,
        }
        return json.dumps(data, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str | bytes) -> ImageManifest:
        try:
            d = json.loads(text)
            manifest = cls(
                name=d["name"],
                version=d["version"],
                created_at=int(d["created_at"]),
                base_image=d["base_image"],
                roles=tuple(d["roles"]),
                archive_digest=d["archive_digest"],
                tests=tuple(RegisteredTest.from_dict(t) for t in d["tests"]),
                verify_config=VerifyConfig.from_dict(d["verify_config"]),
                tool_version=d["tool_version"],
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise IntegrityError(f"malformed manifest: {exc}") from None
        if not DIGEST_RE.match(manifest.archive_digest):
            raise IntegrityError(f"malformed manifest digest {manifest.archive_digest!r}")
        return manifest


@dataclass(frozen=True)
class ImageArtifact:
    manifest: ImageManifest
    archive: bytes

    @property
    def digest(self) -> str:
        return sha256_hex(self.archive)

    @property
    def tree_digest(self) -> str:
        return tree_digest(self.archive)

    @property
    def archive_name(self) -> str:
        return "image.tar.gz" if self.archive[:2] == GZIP_MAGIC else "image.tar"

    def verify(self) -> None:
        if self.digest != self.manifest.archive_digest:
            raise IntegrityError(
                f"archive digest {self.digest} does not match manifest digest {self.manifest.archive_digest}"
            )


# -- characteristics file -----------------------------------------------------


def characteristics_text(name, version, epoch, base, roles, tool_version=__version__) -> str:
    built = datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    lines = [
        f"name: {name}",
        f"version: {version}",
        f"built: {built}",
        f"base: {base}",
        f"roles: {', '.join(roles)}",
        f"tool: forgebox {tool_version}",
    ]
    return "\n".join(lines) + "\n"


def parse_characteristics(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno} is not 'key: value'")
        out[key.strip()] = value.strip()
    return out


# -- packaging ----------------------------------------------------------------


def package(
    target: Target,
    plan: Plan,
    playbook: Playbook,
    epoch: int,
    *,
    base_image: str | None = None,
    compress: bool = False,
    tool_version: str = __version__,
) -> ImageArtifact:
    """Write the characteristics file into ``target``, then snapshot it.

    Only call this for a build whose report succeeded.
    """
    base = base_image if base_image is not None else str(playbook.base_image)
    roles = plan.role_order
    text = characteristics_text(playbook.name, playbook.version, epoch, base, roles, tool_version)
    for path in playbook.verify_config.characteristics_paths:
        target.write_file(path, text.encode("utf-8"), 0o644)
    archive = target.snapshot(epoch, compress)
    tests = tuple(
        RegisteredTest(
            s.role, s.task.id, tuple(s.task.args["argv"]), s.task.args.get("cwd", "/"), dict(s.task.args.get("env", {}))
        )
        for s in plan.test_steps()
    )
    manifest = ImageManifest(
        name=playbook.name,
        version=playbook.version,
        created_at=epoch,
        base_image=base,
        roles=tuple(roles),
        archive_digest=sha256_hex(archive),
        tests=tests,
        verify_config=playbook.verify_config,
        tool_version=tool_version,
    )
    return ImageArtifact(manifest, archive)


def save_artifact(artifact: ImageArtifact, directory: str | os.PathLike) -> Path:
    """Write an artifact as a registry-style leaf directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / artifact.archive_name).write_bytes(artifact.archive)
    (directory / MANIFEST_NAME).write_text(artifact.manifest.to_json(), encoding="utf-8")
    (directory / DIGEST_NAME).write_text(f"{artifact.digest}  {artifact.archive_name}\n", encoding="ascii")
    return directory


def load_artifact(path: str | os.PathLike) -> ImageArtifact:
    """Load and verify an artifact from a leaf directory or a cache blob path."""
    path = Path(path)
    if path.is_dir():
        archive_path = next((path / n for n in ARCHIVE_NAMES if (path / n).is_file()), None)
        if archive_path is None:
            raise NotFound(f"no image archive in {path}")
        manifest_path = path / MANIFEST_NAME
    else:
        archive_path = path
        manifest_path = path.with_name(path.name + ".manifest.json")
    if not archive_path.is_file():
        raise NotFound(f"no image archive at {archive_path}")
    if not manifest_path.is_file():
        raise NotFound(f"no manifest for {archive_path}")
    artifact = ImageArtifact(ImageManifest.from_json(manifest_path.read_bytes()), archive_path.read_bytes())
    artifact.verify()
    return artifact


# -- registry -----------------------------------------------------------------


def _parse_digest_file(text: str) -> tuple[str, str]:
    first = text.strip().splitlines()[0] if text.strip() else ""
    parts = first.split()
    if len(parts) != 2 or not DIGEST_RE.match(parts[0]):
        raise IntegrityError(f"malformed digest file: {first!r}")
    name = parts[1].lstrip("*")
    if name not in ARCHIVE_NAMES:
        raise IntegrityError(f"digest file names unexpected archive {name!r}")
    return parts[0], name


def _local_registry(registry) -> Path:
    text = os.fspath(registry)
    if text.startswith("file://"):
        return Path(urllib.parse.urlparse(text).path)
    if "://" in text:
        raise ValueError(f"publishing is only supported to filesystem registries, not {text!r}")
    return Path(text)


def publish(artifact: ImageArtifact, registry: str | os.PathLike) -> ImageRef:
    artifact.verify()
    root = _local_registry(registry)
    m = artifact.manifest
    ref = ImageRef(m.name, m.version, artifact.digest)
    dest = root / m.name / m.version

    def existing() -> ImageRef:
        digest, _ = _parse_digest_file((dest / DIGEST_NAME).read_text(encoding="ascii"))
        if digest != artifact.digest:
            raise Conflict(f"{ref.key} already published with digest {digest}")
        return ref

    if dest.exists():
        return existing()
    dest.parent.mkdir(parents=True, exist_ok=True)
    staging = dest.parent / f".staging-{m.version}-{uuid.uuid4().hex[:8]}"
    try:
        save_artifact(artifact, staging)
        try:
            os.rename(staging, dest)
        except OSError:
            if dest.exists():
                return existing()
            raise
    finally:
        if staging.exists():
            shutil.rmtree(staging, ignore_errors=True)
    log.info("published %s", ref)
    return ref


def list_registry(registry: str | os.PathLike) -> list[ImageRef]:
    root = _local_registry(registry)
    refs = []
    if not root.is_dir():
        return refs
    for digest_file in root.glob(f"*/*/{DIGEST_NAME}"):
        digest, _ = _parse_digest_file(digest_file.read_text(encoding="ascii"))
        refs.append(ImageRef(digest_file.parent.parent.name, digest_file.parent.name, digest))
    return sorted(refs)


# -- transport ----------------------------------------------------------------


class Transport:
    """Reads bytes from ``file://`` URLs, plain paths, and http(s) URLs."""

    timeout = 30.0

    def open(self, url: str):
        parsed = urllib.parse.urlparse(url)
        if parsed.scheme in ("http", "https"):
            try:
                return urllib.request.urlopen(url, timeout=self.timeout)
            except urllib.error.HTTPError as exc:
                if exc.code == 404:
                    raise NotFound(f"{url}: HTTP 404") from None
                raise NetworkError(f"{url}: HTTP {exc.code}") from None
            except (urllib.error.URLError, OSError) as exc:
                raise NetworkError(f"{url}: {exc}") from None
        path = urllib.parse.unquote(parsed.path) if parsed.scheme == "file" else url
        if parsed.scheme not in ("", "file"):
            raise NetworkError(f"unsupported URL scheme {parsed.scheme!r} in {url}")
        try:
            return open(path, "rb")
        except (FileNotFoundError, NotADirectoryError):
            raise NotFound(f"{url} does not exist") from None
        except OSError as exc:
            raise NetworkError(f"{url}: {exc}") from None

    def read(self, url: str) -> bytes:
        with self.open(url) as fh:
            return fh.read()


class _CountingReader:
    def __init__(self, inner, owner):
        self._inner = inner
        self._owner = owner

    def read(self, n=-1):
        data = self._inner.read(n)
        self._owner.bytes_transferred += len(data)
        return data

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._inner.close()


class CountingTransport(Transport):
    """Wraps a transport and records every byte and URL it serves."""

    def __init__(self, inner: Transport | None = None):
        self.inner = inner or Transport()
        self.bytes_transferred = 0
        self.requests: list[str] = []

    def open(self, url):
        self.requests.append(url)
        return _CountingReader(self.inner.open(url), self)


def _url_join(base: str, *parts: str) -> str:
    return base.rstrip("/") + "/" + "/".join(urllib.parse.quote(p) if "://" in base else p for p in parts)


# -- cache and fetch ----------------------------------------------------------


class Cache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.blobs = self.root / "sha256"
        self.tmp = self.root / "tmp"

    def blob(self, digest: str) -> Path:
        return self.blobs / digest

    def manifest(self, digest: str) -> Path:
        return self.blobs / f"{digest}.manifest.json"

    def has(self, digest: str) -> bool:
        return self.blob(digest).is_file()

    def _ref_file(self, registry: str, ref: ImageRef) -> Path:
        key = hashlib.sha256(registry.encode("utf-8")).hexdigest()[:16]
        return self.root / "refs" / key / ref.name / ref.version

    def cached_ref(self, registry: str, ref: ImageRef) -> str | None:
        path = self._ref_file(registry, ref)
        if path.is_file():
            digest = path.read_text(encoding="ascii").strip()
            if DIGEST_RE.match(digest) and self.has(digest):
                return digest
        return None

    def remember_ref(self, registry: str, ref: ImageRef, digest: str) -> None:
        self._atomic_write(self._ref_file(registry, ref), digest.encode("ascii") + b"\n")

    def _atomic_write(self, dest: Path, data: bytes) -> None:
        dest.parent.mkdir(parents=True, exist_ok=True)
        self.tmp.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.tmp)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, dest)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def admit_bytes(self, data: bytes, expected_digest: str) -> Path:
        actual = sha256_hex(data)
        if actual != expected_digest:
            raise IntegrityError(f"digest mismatch: expected {expected_digest}, got {actual}")
        dest = self.blob(expected_digest)
        if not dest.is_file():
            self._atomic_write(dest, data)
        return dest

    def admit_stream(self, stream, expected_digest: str) -> Path:
        """Copy ``stream`` into the cache; nothing is admitted unless it verifies."""
        self.tmp.mkdir(parents=True, exist_ok=True)
        self.blobs.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.tmp)
        h = hashlib.sha256()
        try:
            with os.fdopen(fd, "wb") as out:
                while True:
                    chunk = stream.read(CHUNK)
                    if not chunk:
                        break
                    h.update(chunk)
                    out.write(chunk)
            if h.hexdigest() != expected_digest:
                raise IntegrityError(
                    f"digest mismatch: expected {expected_digest}, got {h.hexdigest()}"
                )
            dest = self.blob(expected_digest)
            os.replace(tmp, dest)
            return dest
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


def _as_ref(source) -> ImageRef | None:
    if isinstance(source, ImageRef):
        return source
    text = os.fspath(source)
    if "://" in text or os.path.exists(text):
        return None
    try:
        return ImageRef.parse(text)
    except ValueError:
        raise NotFound(f"{text!r} is neither an existing path, a URL, nor an image reference") from None


def fetch(
    source,
    expected_digest: str | None = None,
    cache: Cache | str | os.PathLike = ".forgebox/cache",
    registries: Iterable[str | os.PathLike] = (),
    transport: Transport | None = None,
) -> Path:
    """Return the cache path of a verified archive.

    ``source`` is an :class:`ImageRef` (or ``name/version[@digest]`` text),
    a URL, or a local archive path.
    """
    cache = cache if isinstance(cache, Cache) else Cache(cache)
    transport = transport or Transport()
    if expected_digest is not None and not DIGEST_RE.match(expected_digest):
        raise ValueError(f"invalid expected digest {expected_digest!r}")
    ref = _as_ref(source)
    if ref is not None:
        return _fetch_ref(ref, expected_digest, cache, [os.fspath(r) for r in registries], transport)

    url = os.fspath(source)
    if expected_digest is not None and cache.has(expected_digest):
        return cache.blob(expected_digest)
    if expected_digest is None:
        sibling = url.rsplit("/", 1)[0] + "/" + DIGEST_NAME if "/" in url else DIGEST_NAME
        try:
            expected_digest, name = _parse_digest_file(transport.read(sibling).decode("ascii", "replace"))
        except NotFound:
            raise IntegrityError(f"no digest given for {url} and no {DIGEST_NAME} beside it") from None
        if not url.endswith("/" + name) and url != name:
            raise IntegrityError(f"{DIGEST_NAME} beside {url} describes {name}, not this file")
        if cache.has(expected_digest):
            return cache.blob(expected_digest)
    with transport.open(url) as stream:
        return cache.admit_stream(stream, expected_digest)


def _fetch_ref(ref, expected_digest, cache: Cache, registries: list[str], transport) -> Path:
    wanted = expected_digest or ref.digest
    if expected_digest and ref.digest and expected_digest != ref.digest:
        raise IntegrityError(f"{ref} conflicts with expected digest {expected_digest}")
    if not registries:
        raise NotFound(f"{ref.key}: no registries configured")

    for registry in registries:
        digest = cache.cached_ref(registry, ref)
        if digest is not None and (wanted is None or digest == wanted) and cache.manifest(digest).is_file():
            return cache.blob(digest)

    for registry in registries:
        try:
            digest_text = transport.read(_url_join(registry, ref.name, ref.version, DIGEST_NAME))
        except NotFound:
            continue
        digest, archive_name = _parse_digest_file(digest_text.decode("ascii", "replace"))
        if wanted is not None and digest != wanted:
            raise IntegrityError(f"{ref.key} in {registry} has digest {digest}, expected {wanted}")
        if not cache.manifest(digest).is_file():
            manifest_bytes = transport.read(_url_join(registry, ref.name, ref.version, MANIFEST_NAME))
            manifest = ImageManifest.from_json(manifest_bytes)
            if manifest.archive_digest != digest or (manifest.name, manifest.version) != (ref.name, ref.version):
                raise IntegrityError(f"manifest for {ref.key} in {registry} does not describe digest {digest}")
        else:
            manifest_bytes = None
        if cache.has(digest):
            path = cache.blob(digest)
        else:
            with transport.open(_url_join(registry, ref.name, ref.version, archive_name)) as stream:
                path = cache.admit_stream(stream, digest)
        if manifest_bytes is not None:
            cache._atomic_write(cache.manifest(digest), manifest_bytes)
        cache.remember_ref(registry, ref, digest)
        return path
    raise NotFound(f"{ref.key} not found in any registry ({', '.join(registries)})")


def resolve_base(
    base: ImageRef | str,
    cache: Cache | str | os.PathLike,
    registries: Iterable[str | os.PathLike] = (),
    transport: Transport | None = None,
) -> Path:
    """Local archive path for a playbook's base image; ``scratch`` is the empty tree."""
    cache = cache if isinstance(cache, Cache) else Cache(cache)
    if base == SCRATCH:
        return cache.admit_bytes(EMPTY_ARCHIVE, sha256_hex(EMPTY_ARCHIVE))
    return fetch(base, cache=cache, registries=registries, transport=transport)
