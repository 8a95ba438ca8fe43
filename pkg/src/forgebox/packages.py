"""Fixture package manager.

A repository is a directory of ``<name>-<version>.pkg`` archives (the same
deterministic ustar format as images, holding root-relative paths) plus an
``index.tsv`` of ``name, version, file, sha256`` rows. Installing a package
unpacks it into the target and appends a row to the target's database at
``/var/fdb/packages.tsv``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from forgebox.drivers.archive import Entry, read_archive, sha256_hex, write_archive
from forgebox.drivers.base import Target
from forgebox.errors import IntegrityError, PackageNotFound

DB_PATH = "/var/fdb/packages.tsv"
INDEX_NAME = "index.tsv"


@dataclass(frozen=True)
class PackageRecord:
    name: str
    version: str
    filename: str
    sha256: str


class PackageRepo:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def index(self) -> dict[tuple[str, str], PackageRecord]:
        path = self.root / INDEX_NAME
        if not path.is_file():
            return {}
        out = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            name, version, filename, digest = line.split("\t")
            out[(name, version)] = PackageRecord(name, version, filename, digest)
        return out

    def lookup(self, name: str, version: str) -> PackageRecord:
        record = self.index().get((name, version))
        if record is None:
            raise PackageNotFound(f"package {name}-{version} is not in {self.root / INDEX_NAME}")
        return record

    def load(self, name: str, version: str) -> tuple[PackageRecord, list[Entry]]:
        record = self.lookup(name, version)
        path = self.root / record.filename
        if path.parent != self.root or not path.is_file():
            raise PackageNotFound(f"package archive {record.filename} missing from {self.root}")
        data = path.read_bytes()
        if sha256_hex(data) != record.sha256:
            raise IntegrityError(f"package {record.filename} does not match its index digest")
        return record, read_archive(data)

    def add(self, name: str, version: str, files: dict[str, tuple[bytes, int]]) -> PackageRecord:
        """Build a package from ``{path: (content, mode)}`` and index it."""
        data = build_package(files)
        filename = f"{name}-{version}.pkg"
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / filename).write_bytes(data)
        index = self.index()
        record = PackageRecord(name, version, filename, sha256_hex(data))
        index[(name, version)] = record
        rows = ["#name\tversion\tfile\tsha256"]
        rows += ["\t".join((r.name, r.version, r.filename, r.sha256)) for _, r in sorted(index.items())]
        (self.root / INDEX_NAME).write_text("\n".join(rows) + "\n", encoding="utf-8")
        return record


def build_package(files: dict[str, tuple[bytes, int]]) -> bytes:
    entries = {}
    for path, (content, mode) in files.items():
        rel = path.strip("/")
        parts = rel.split("/")
        for i in range(1, len(parts)):
            d = "/".join(parts[:i])
            entries.setdefault(d, Entry(d, "dir", 0o755))
        entries[rel] = Entry(rel, "file", mode, content)
    return write_archive(entries.values(), epoch=0)


def installed(target: Target) -> list[tuple[str, str, str]]:
    if not target.stat(DB_PATH).exists:
        return []
    rows = []
    for line in target.read_file(DB_PATH).decode("utf-8").splitlines():
        if line.strip():
            name, version, digest = line.split("\t")
            rows.append((name, version, digest))
    return rows


def is_installed(target: Target, name: str, version: str) -> bool:
    return any(n == name and v == version for n, v, _ in installed(target))


def install(target: Target, repo: PackageRepo, name: str, version: str) -> PackageRecord:
    record, entries = repo.load(name, version)
    target.load_entries(entries)
    db = target.read_file(DB_PATH) if target.stat(DB_PATH).exists else b""
    line = f"{name}\t{version}\t{record.sha256}\n".encode("utf-8")
    target.write_file(DB_PATH, db + line, 0o644)
    return record
