"""Deterministic ustar archives of a target tree.

Entries are sorted by the byte order of their path, owner fields are zeroed
and every mtime is the build epoch, so equal trees serialize to equal bytes.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import posixpath
import tarfile
from dataclasses import dataclass

from forgebox.errors import ConfinementError, IntegrityError

GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class Entry:
    path: str  # relative to the root, no leading slash
    kind: str  # "file" | "dir" | "symlink"
    mode: int
    data: bytes = b""
    linkname: str = ""


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def link_escapes(link_path: str, linkname: str) -> bool:
    """True if a symlink at ``link_path`` pointing to ``linkname`` leaves the root.

    Absolute targets always count as escaping: on a directory-backed target
    the host kernel would resolve them against the host root.
    """
    if not linkname or linkname.startswith("/") or "\0" in linkname:
        return True
    depth = len(posixpath.dirname(link_path).split("/")) if posixpath.dirname(link_path) else 0
    for part in linkname.split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            depth -= 1
            if depth < 0:
                return True
        else:
            depth += 1
    return False


def write_archive(entries, epoch: int = 0, compress: bool = False) -> bytes:
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for entry in sorted(entries, key=lambda e: e.path.encode("utf-8")):
            info = tarfile.TarInfo(entry.path)
            info.mode = entry.mode & 0o7777
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            info.mtime = epoch
            if entry.kind == "file":
                info.type = tarfile.REGTYPE
                info.size = len(entry.data)
                tar.addfile(info, io.BytesIO(entry.data))
            elif entry.kind == "dir":
                info.type = tarfile.DIRTYPE
                tar.addfile(info)
            elif entry.kind == "symlink":
                info.type = tarfile.SYMTYPE
                info.linkname = entry.linkname
                tar.addfile(info)
            else:
                raise ValueError(f"unsupported entry kind {entry.kind!r}")
    data = buf.getvalue()
    if compress:
        data = gzip.compress(data, compresslevel=9, mtime=0)
    return data


def decompress(data: bytes) -> bytes:
    if data[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise IntegrityError(f"corrupt gzip stream: {exc}") from None
    return data


def tree_digest(data: bytes) -> str:
    """Digest of the uncompressed tar stream."""
    return sha256_hex(decompress(data))


def _clean_name(name: str) -> str:
    if name.startswith("/") or "\0" in name:
        raise ConfinementError(f"archive member {name!r} is absolute")
    parts = [p for p in name.split("/") if p not in ("", ".")]
    if not parts or ".." in parts:
        raise ConfinementError(f"archive member {name!r} escapes the root")
    return "/".join(parts)


def read_archive(data: bytes) -> list[Entry]:
    """Parse and validate an archive produced by :func:`write_archive`."""
    raw = decompress(data)
    entries = []
    try:
        with tarfile.open(fileobj=io.BytesIO(raw), mode="r:") as tar:
            for member in tar:
                path = _clean_name(member.name)
                mode = member.mode & 0o7777
                if member.isreg():
                    fh = tar.extractfile(member)
                    body = fh.read() if fh is not None else b""
                    if len(body) != member.size:
                        raise IntegrityError(f"truncated archive member {path!r}")
                    entries.append(Entry(path, "file", mode, body))
                elif member.isdir():
                    entries.append(Entry(path, "dir", mode))
                elif member.issym():
                    if link_escapes(path, member.linkname):
                        raise ConfinementError(
                            f"archive symlink {path!r} -> {member.linkname!r} escapes the root"
                        )
                    entries.append(Entry(path, "symlink", mode, linkname=member.linkname))
                else:
                    raise IntegrityError(f"unsupported archive member type for {path!r}")
    except tarfile.TarError as exc:
        raise IntegrityError(f"unreadable archive: {exc}") from None
    return entries


EMPTY_ARCHIVE = write_archive([])
EMPTY_ARCHIVE_DIGEST = sha256_hex(EMPTY_ARCHIVE)
