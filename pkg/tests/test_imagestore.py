from __future__ import annotations

import dataclasses
import gzip
import hashlib
import json

import pytest

from forgebox.drivers import MemoryDriver
from forgebox.drivers.archive import EMPTY_ARCHIVE_DIGEST, read_archive
from forgebox.errors import Conflict, IntegrityError, NotFound
from forgebox.imagestore import (
    Cache,
    CountingTransport,
    ImageArtifact,
    ImageManifest,
    characteristics_text,
    fetch,
    list_registry,
    load_artifact,
    package,
    parse_characteristics,
    publish,
    resolve_base,
)
from forgebox.planner import make_plan
from forgebox.speclang import ImageRef, parse_playbook

from conftest import FIXTURES, PLAYBOOK
from helpers import FlipTransport, http_server, small_artifact


def cache_files(cache_dir):
    return sorted(p.name for p in (cache_dir / "sha256").glob("*")) if (cache_dir / "sha256").is_dir() else []


def test_characteristics_round_trip():
    text = characteristics_text("micromag", "1.0.0", 1700000000, "scratch", ["base", "oommf"], "0.1.0")
    assert parse_characteristics(text) == {
        "name": "micromag",
        "version": "1.0.0",
        "built": "2023-11-14T22:13:20Z",
        "base": "scratch",
        "roles": "base, oommf",
        "tool": "forgebox 0.1.0",
    }
    with pytest.raises(ValueError):
        parse_characteristics("no separator here\n")


def test_package_is_deterministic():
    a, b = small_artifact(), small_artifact()
    assert a.archive == b.archive and a.manifest == b.manifest
    assert small_artifact(epoch=1001).digest != a.digest


def test_characteristics_inside_archive():
    art = small_artifact()
    entries = {e.path: e for e in read_archive(art.archive)}
    info = parse_characteristics(entries["machine_characteristics.txt"].data.decode())
    assert (info["name"], info["version"]) == ("demo", "1.0")
    assert "home/user/Desktop/machine_characteristics.txt" in entries


def test_manifest_tests_match_plan():
    from forgebox.cli import load_roles

    pb = parse_playbook(PLAYBOOK.read_text())
    roles = load_roles(FIXTURES)
    plan = make_plan(pb, roles, selection=["fakesolver"])
    art = package(MemoryDriver().create(), plan, pb, 1)
    expected = [(s.role, s.task.id, tuple(s.task.args["argv"])) for s in plan.steps if s.task.directive == "test"]
    assert expected == [("fakesolver", "selftest", ("fakesolver", "--selftest"))]
    assert [(t.role, t.task_id, t.argv) for t in art.manifest.tests] == expected


def test_manifest_json_round_trip():
    art = small_artifact()
    text = art.manifest.to_json()
    assert list(json.loads(text)) == sorted(json.loads(text))
    assert ImageManifest.from_json(text) == art.manifest
    with pytest.raises(IntegrityError):
        ImageManifest.from_json("{}")


def test_publish_layout_and_listing(tmp_path):
    art = small_artifact()
    ref = publish(art, tmp_path / "reg")
    leaf = tmp_path / "reg" / "demo" / "1.0"
    assert sorted(p.name for p in leaf.iterdir()) == ["image.sha256", "image.tar", "manifest.json"]
    assert (leaf / "image.sha256").read_text() == f"{art.digest}  image.tar\n"
    assert hashlib.sha256((leaf / "image.tar").read_bytes()).hexdigest() == ref.digest
    assert list_registry(tmp_path / "reg") == [ImageRef("demo", "1.0", art.digest)]


def test_publish_twice_is_a_no_op(tmp_path):
    art = small_artifact()
    assert publish(art, tmp_path / "reg") == publish(art, tmp_path / "reg")
    assert len(list_registry(tmp_path / "reg")) == 1


def test_publish_conflict(tmp_path):
    publish(small_artifact(), tmp_path / "reg")
    with pytest.raises(Conflict):
        publish(small_artifact(files={"/other": b"x"}), tmp_path / "reg")


def test_publish_refuses_unverified(tmp_path):
    art = small_artifact()
    bad = ImageArtifact(art.manifest, art.archive + b"\0")
    with pytest.raises(IntegrityError):
        publish(bad, tmp_path / "reg")
    assert list_registry(tmp_path / "reg") == []


def test_fetch_by_ref_caches(tmp_path):
    art = small_artifact()
    publish(art, tmp_path / "reg")
    cache = Cache(tmp_path / "cache")
    counting = CountingTransport()
    path = fetch("demo/1.0", cache=cache, registries=[tmp_path / "reg"], transport=counting)
    assert path.read_bytes() == art.archive
    assert load_artifact(path) == art
    counting.bytes_transferred = 0
    again = fetch("demo/1.0", cache=cache, registries=[tmp_path / "reg"], transport=counting)
    assert again == path and counting.bytes_transferred == 0


def test_fetch_url_with_digest_then_hit(tmp_path):
    art = small_artifact()
    publish(art, tmp_path / "reg")
    url = (tmp_path / "reg" / "demo" / "1.0" / "image.tar").as_uri()
    counting = CountingTransport()
    first = fetch(url, art.digest, cache=tmp_path / "c", transport=counting)
    assert counting.bytes_transferred == len(art.archive)
    counting.bytes_transferred = 0
    assert fetch(url, art.digest, cache=tmp_path / "c", transport=counting) == first
    assert counting.bytes_transferred == 0 and len(counting.requests) == 1


def test_fetch_url_uses_sibling_digest(tmp_path):
    art = small_artifact()
    publish(art, tmp_path / "reg")
    url = (tmp_path / "reg" / "demo" / "1.0" / "image.tar").as_uri()
    assert fetch(url, cache=tmp_path / "c").name == art.digest


def test_flipped_byte(tmp_path):
    art = small_artifact()
    publish(art, tmp_path / "reg")
    with pytest.raises(IntegrityError):
        fetch("demo/1.0", cache=tmp_path / "c", registries=[tmp_path / "reg"], transport=FlipTransport())
    assert cache_files(tmp_path / "c") == []
    assert not any((tmp_path / "c" / "tmp").iterdir())
    # the same registry through an honest transport still works
    assert fetch("demo/1.0", cache=tmp_path / "c", registries=[tmp_path / "reg"]).name == art.digest


def test_wrong_expected_digest(tmp_path):
    art = small_artifact()
    publish(art, tmp_path / "reg")
    with pytest.raises(IntegrityError):
        fetch("demo/1.0", "0" * 64, cache=tmp_path / "c", registries=[tmp_path / "reg"])
    assert cache_files(tmp_path / "c") == []


def test_fetch_over_http(tmp_path):
    art = small_artifact()
    publish(art, tmp_path / "reg")
    with http_server(tmp_path / "reg") as base:
        counting = CountingTransport()
        path = fetch("demo/1.0", cache=tmp_path / "c", registries=[base], transport=counting)
        assert path.read_bytes() == art.archive
        sent = counting.bytes_transferred
        assert sent >= len(art.archive)
        fetch("demo/1.0", cache=tmp_path / "c", registries=[base], transport=counting)
        assert counting.bytes_transferred == sent
        with pytest.raises(NotFound):
            fetch("demo/9.9", cache=tmp_path / "c", registries=[base])
        with pytest.raises(IntegrityError):
            fetch(base + "/demo/1.0/image.tar", cache=tmp_path / "c2", transport=FlipTransport())
        assert cache_files(tmp_path / "c2") == []


def test_registries_searched_in_order(tmp_path):
    first, second = small_artifact(), small_artifact(files={"/x": b"2"})
    publish(first, tmp_path / "one")
    publish(second, tmp_path / "two")
    got = fetch("demo/1.0", cache=tmp_path / "c", registries=[tmp_path / "empty", tmp_path / "two", tmp_path / "one"])
    assert got.name == second.digest


def test_resolve_base(tmp_path):
    scratch = resolve_base("scratch", tmp_path / "c")
    assert scratch.name == EMPTY_ARCHIVE_DIGEST
    assert read_archive(scratch.read_bytes()) == []
    art = small_artifact(name="virtualmicromagnetics", version="full")
    publish(art, tmp_path / "reg")
    path = resolve_base(ImageRef("virtualmicromagnetics", "full"), tmp_path / "c", [tmp_path / "reg"])
    assert path.read_bytes() == art.archive
    with pytest.raises(NotFound):
        resolve_base(ImageRef("absent", "1"), tmp_path / "c", [tmp_path / "reg"])


def test_instantiate_matches_tree_digest(tmp_path):
    art = small_artifact()
    t = MemoryDriver().instantiate(art.archive, art.manifest.archive_digest)
    assert t.digest(art.manifest.created_at) == art.tree_digest


def test_gzip_artifact(tmp_path):
    plain = small_artifact()
    archive = gzip.compress(plain.archive, mtime=0)
    gz = ImageArtifact(dataclasses.replace(plain.manifest, archive_digest=hashlib.sha256(archive).hexdigest()), archive)
    ref = publish(gz, tmp_path / "reg")
    assert (tmp_path / "reg" / "demo" / "1.0" / "image.tar.gz").is_file()
    assert fetch(ref, cache=tmp_path / "c", registries=[tmp_path / "reg"]).read_bytes() == archive
    assert gz.tree_digest == plain.tree_digest
