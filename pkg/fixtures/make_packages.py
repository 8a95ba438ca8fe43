"""Regenerate the fixture package repository in packages/.

Output is deterministic; rerunning it must leave the committed files unchanged.
"""

from pathlib import Path

from forgebox.packages import PackageRepo

SOLVERS = {
    "oommf": "1.2b0",
    "nmag": "0.2.1",
    "magpar": "0.9",
    "fidimag": "2.0.0",
    "fakesolver": "1.0",
}

LAUNCHER = """#!/bin/sh
# {name} {version} (fixture build)
share="${{FORGEBOX_ROOT:-}}/opt/{name}/share"
case "$1" in
  --version)
    cat "$share/VERSION"
    ;;
  --selftest)
    test "$(cat "$share/VERSION")" = "{version}" || {{ echo "{name}: bad VERSION" >&2; exit 1; }}
    test -s "$share/reference.dat" || {{ echo "{name}: reference data missing" >&2; exit 1; }}
    echo "{name} {version}: selftest ok"
    ;;
  *)
    echo "usage: {name} --version | --selftest" >&2
    exit 2
    ;;
esac
"""


def main(root: Path = Path(__file__).parent / "packages") -> None:
    repo = PackageRepo(root)
    for name, version in SOLVERS.items():
        repo.add(name, version, {
            f"usr/local/bin/{name}": (LAUNCHER.format(name=name, version=version).encode(), 0o755),
            f"opt/{name}/share/VERSION": (version.encode(), 0o644),
            f"opt/{name}/share/reference.dat": (f"{name} reference field 0.0 0.0 1.0\n".encode(), 0o644),
        })


if __name__ == "__main__":
    main()
