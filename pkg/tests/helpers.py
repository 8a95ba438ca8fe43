"""Shared builders for the test modules."""

from __future__ import annotations

import functools
import http.server
import threading
from contextlib import contextmanager

from forgebox.drivers import MemoryDriver
from forgebox.imagestore import Transport, package
from forgebox.planner import Plan, PlanStep
from forgebox.speclang import Playbook, TaskSpec, VerifyConfig


def small_artifact(name="demo", version="1.0", files=None, tests=(("true",),), epoch=1000):
    """Package a memory target holding ``files`` into an artifact."""
    target = MemoryDriver().create()
    files = {"/home/user/Desktop/README.md": b"docs\n"} if files is None else files
    for path, data in files.items():
        target.write_file(path, data)
    steps = tuple(
        PlanStep("app", TaskSpec(f"test{i}", "test", {"argv": list(argv), "env": {}, "cwd": "/"}))
        for i, argv in enumerate(tests)
    )
    playbook = Playbook(name, version, "scratch", ("app",), epoch, VerifyConfig())
    return package(target, Plan(steps, name, version), playbook, epoch)


class FlipTransport(Transport):
    """Delivers everything faithfully except one flipped byte in archive bodies."""

    def __init__(self, offset=700):
        self.offset = offset

    def open(self, url):
        stream = super().open(url)
        if not url.rsplit("/", 1)[-1].startswith("image.tar") and "/sha256/" not in url:
            return stream
        return _Flipped(stream, self.offset)


class _Flipped:
    def __init__(self, inner, offset):
        self._inner = inner
        self._offset = offset
        self._pos = 0

    def read(self, n=-1):
        data = bytearray(self._inner.read(n))
        if self._pos <= self._offset < self._pos + len(data):
            data[self._offset - self._pos] ^= 0x01
        self._pos += len(data)
        return bytes(data)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._inner.close()


class _QuietHandler(http.server.SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass


@contextmanager
def http_server(directory):
    """Serve ``directory`` over HTTP on an ephemeral port; yields the base URL."""
    handler = functools.partial(_QuietHandler, directory=str(directory))
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        server.server_close()


def run_cli(*argv, capsys=None):
    """Run the CLI in-process; returns (exit code, stdout lines, stderr text)."""
    from forgebox.cli import main

    code = main([str(a) for a in argv])
    if capsys is None:
        return code, [], ""
    captured = capsys.readouterr()
    return code, captured.out.splitlines(), captured.err
