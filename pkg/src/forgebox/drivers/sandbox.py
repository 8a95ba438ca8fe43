"""Directory-backed targets under a state directory.

Each target is ``<state_dir>/targets/<id>/root``. All path arguments are
resolved against that root and refused if the real path (after the kernel
would follow symlinks) lands outside it. Commands run as host processes with
the working directory inside the root, a scrubbed environment and
``FORGEBOX_ROOT`` pointing at the root; this confines the driver API, it is
not a security boundary for the commands themselves.
"""

from __future__ import annotations

import os
import shutil
import stat as stat_mod
import subprocess
import time
from pathlib import Path

from forgebox.drivers.archive import Entry, link_escapes
from forgebox.drivers.base import MISSING, ExecOutcome, StatResult, Target, TargetDriver, join, normalize
from forgebox.errors import ConfinementError, DriverError, NotFound

_TARGET_BIN_DIRS = ("usr/local/bin", "usr/bin", "bin")


def _kind(mode: int) -> str:
    if stat_mod.S_ISREG(mode):
        return "file"
    if stat_mod.S_ISDIR(mode):
        return "dir"
    return "other"


class SandboxTarget(Target):
    def __init__(self, driver: SandboxDriver, target_id: str, root: Path):
        super().__init__(driver, target_id)
        self.root = root
        self._real_root = os.path.realpath(root)

    # -- path handling --------------------------------------------------------

    def _host(self, rel: str) -> str:
        return os.path.join(self._real_root, rel) if rel else self._real_root

    def _confined(self, host_path: str, shown: str) -> str:
        real = os.path.realpath(host_path)
        if real != self._real_root and not real.startswith(self._real_root + os.sep):
            raise ConfinementError(f"{shown!r} resolves outside the target root")
        return real

    def _real(self, path: str) -> str:
        """Host path for a target path, following symlinks, confinement-checked."""
        return self._confined(self._host(normalize(path)), path)

    def _ensure_dir(self, rel: str, shown: str) -> str:
        current = self._real_root
        for part in rel.split("/") if rel else []:
            candidate = os.path.join(current, part)
            if os.path.lexists(candidate):
                current = self._confined(candidate, shown)
                if not os.path.isdir(current):
                    raise DriverError(f"{shown!r}: {part!r} is not a directory")
            else:
                try:
                    os.mkdir(candidate)
                    os.chmod(candidate, 0o755)
                except OSError as exc:
                    raise DriverError(f"cannot create {shown!r}: {exc}") from None
                current = candidate
        return current

    def _prepare_write(self, path: str) -> str:
        rel = normalize(path)
        if not rel:
            raise DriverError("the target root cannot be replaced")
        parent, _, name = rel.rpartition("/")
        host_parent = self._ensure_dir(parent, path)
        host = os.path.join(host_parent, name)
        if os.path.islink(host):
            # writes follow a confined link; its target's directory must already exist
            host = self._confined(host, path)
            if not os.path.isdir(os.path.dirname(host)):
                raise DriverError(f"{path!r} is a symlink into a missing directory")
        return host

    # -- Target API -----------------------------------------------------------

    def write_file(self, path, data, mode=0o644):
        self._check_alive()
        host = self._prepare_write(path)
        if os.path.isdir(host):
            raise DriverError(f"{path!r} is a directory")
        try:
            fd = os.open(host, os.O_WRONLY | os.O_CREAT | os.O_TRUNC | os.O_NOFOLLOW, 0o600)
            with os.fdopen(fd, "wb") as fh:
                fh.write(bytes(data))
            os.chmod(host, mode & 0o7777)
        except OSError as exc:
            raise DriverError(f"cannot write {path!r}: {exc}") from None

    def read_file(self, path):
        self._check_alive()
        host = self._real(path)
        if not os.path.lexists(host):
            raise NotFound(f"{path!r} does not exist in target {self.id}")
        if not os.path.isfile(host):
            raise DriverError(f"{path!r} is not a regular file")
        try:
            with open(host, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise DriverError(f"cannot read {path!r}: {exc}") from None

    def stat(self, path):
        self._check_alive()
        host = self._real(path)
        try:
            st = os.stat(host)
        except FileNotFoundError:
            return MISSING
        except NotADirectoryError:
            return MISSING
        except OSError as exc:
            raise DriverError(f"cannot stat {path!r}: {exc}") from None
        kind = _kind(st.st_mode)
        return StatResult(True, kind, stat_mod.S_IMODE(st.st_mode), st.st_size if kind == "file" else 0)

    def mkdir(self, path, mode=0o755):
        self._check_alive()
        host = self._ensure_dir(normalize(path), path)
        if host != self._real_root:
            self._chmod_host(host, mode, path)

    def chmod(self, path, mode):
        self._check_alive()
        host = self._real(path)
        if not os.path.exists(host):
            raise NotFound(f"{path!r} does not exist in target {self.id}")
        self._chmod_host(host, mode, path)

    def _chmod_host(self, host, mode, shown):
        try:
            os.chmod(host, mode & 0o7777)
        except OSError as exc:
            raise DriverError(f"cannot chmod {shown!r}: {exc}") from None

    def symlink(self, path, linkname):
        self._check_alive()
        rel = normalize(path)
        if link_escapes(rel, linkname):
            raise ConfinementError(f"symlink {path!r} -> {linkname!r} would escape the target root")
        parent, _, name = rel.rpartition("/")
        host = os.path.join(self._ensure_dir(parent, path), name)
        if os.path.lexists(host):
            raise DriverError(f"{path!r} already exists")
        try:
            os.symlink(linkname, host)
        except OSError as exc:
            raise DriverError(f"cannot create symlink {path!r}: {exc}") from None
        # the lexical check cannot see through other links; the kernel's view is final
        try:
            self._confined(host, path)
        except ConfinementError:
            os.unlink(host)
            raise

    def exec(self, argv, env=None, cwd="/", timeout=None):
        self._check_alive()
        argv = [str(a) for a in argv]
        if not argv:
            raise DriverError("empty argv")
        host_cwd = self._real(cwd)
        if not os.path.isdir(host_cwd):
            raise NotFound(f"working directory {cwd!r} does not exist in target {self.id}")
        cwd_rel = os.path.relpath(host_cwd, self._real_root)
        cwd_rel = "" if cwd_rel == "." else cwd_rel
        if "/" in argv[0]:
            argv[0] = self._confined(self._host(join(cwd_rel, argv[0])), argv[0])

        bin_dirs = [os.path.join(self._real_root, d) for d in _TARGET_BIN_DIRS]
        home = os.path.join(self._real_root, "home", "user")
        full_env = {
            "PATH": os.pathsep.join(bin_dirs + [os.environ.get("PATH", os.defpath)]),
            "HOME": home if os.path.isdir(home) else self._real_root,
            "LANG": "C.UTF-8",
            "LC_ALL": "C.UTF-8",
            "FORGEBOX_ROOT": self._real_root,
        }
        full_env.update(env or {})
        start = time.monotonic()
        try:
            proc = subprocess.run(
                argv,
                cwd=host_cwd,
                env=full_env,
                stdin=subprocess.DEVNULL,
                capture_output=True,
                timeout=timeout,
                umask=0o022,
            )
            code, out, err = proc.returncode, proc.stdout, proc.stderr
        except FileNotFoundError:
            code, out, err = 127, b"", f"{argv[0]}: command not found\n".encode()
        except PermissionError:
            code, out, err = 126, b"", f"{argv[0]}: permission denied\n".encode()
        except subprocess.TimeoutExpired as exc:
            code, out, err = 124, exc.stdout or b"", (exc.stderr or b"") + b"timed out\n"
        ms = int((time.monotonic() - start) * 1000)
        return ExecOutcome(code, out, err, ms)

    def entries(self):
        out = []
        for dirpath, dirnames, filenames in os.walk(self._real_root):
            dirnames.sort()
            for name in sorted(dirnames + filenames):
                host = os.path.join(dirpath, name)
                rel = os.path.relpath(host, self._real_root).replace(os.sep, "/")
                st = os.lstat(host)
                mode = stat_mod.S_IMODE(st.st_mode)
                if stat_mod.S_ISLNK(st.st_mode):
                    linkname = os.readlink(host)
                    if link_escapes(rel, linkname):
                        raise ConfinementError(f"refusing to snapshot escaping symlink {rel!r} -> {linkname!r}")
                    self._confined(host, "/" + rel)
                    out.append(Entry(rel, "symlink", 0o777, linkname=linkname))
                elif stat_mod.S_ISDIR(st.st_mode):
                    out.append(Entry(rel, "dir", mode))
                elif stat_mod.S_ISREG(st.st_mode):
                    with open(host, "rb") as fh:
                        out.append(Entry(rel, "file", mode, fh.read()))
                else:
                    raise DriverError(f"cannot snapshot special file {rel!r}")
        return out


class SandboxDriver(TargetDriver):
    name = "sandbox"

    def __init__(self, state_dir: str | os.PathLike = ".forgebox"):
        super().__init__()
        self.state_dir = Path(state_dir).absolute()
        self.targets_dir = self.state_dir / "targets"

    def root_of(self, target_id: str) -> Path:
        return self.targets_dir / target_id / "root"

    def create(self) -> SandboxTarget:
        target_id = self._new_id()
        root = self.root_of(target_id)
        root.mkdir(parents=True)
        os.chmod(root, 0o755)
        return self._register(SandboxTarget(self, target_id, root))

    def attach(self, target_id: str) -> SandboxTarget:
        """Reopen a target created by an earlier process."""
        if "/" in target_id or target_id in ("", ".", ".."):
            raise NotFound(f"no target {target_id!r}")
        root = self.root_of(target_id)
        if not root.is_dir():
            raise NotFound(f"no target {target_id!r}")
        return self._register(SandboxTarget(self, target_id, root))

    def target_ids(self) -> list[str]:
        if not self.targets_dir.is_dir():
            return []
        return sorted(p.name for p in self.targets_dir.iterdir() if (p / "root").is_dir())

    def _release(self, target):
        shutil.rmtree(self.targets_dir / target.id, ignore_errors=False)
