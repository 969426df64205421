import json

import pytest
from click.testing import CliRunner
from fastapi.routing import APIRoute

from datacommons.accessctl import PrincipalId
from datacommons.cli import ROUTE_COMMANDS, main
from datacommons.commons import Commons
from datacommons.config import load_config
from datacommons.errors import MalformedRequest
from datacommons.fixtures import NEXRAD_ALIAS, NEXRAD_MD5, NEXRAD_SIZE, load_nexrad
from datacommons.gateway import create_app
from datacommons.idmodel import canonical_json


@pytest.fixture
def run(commons, app_client):
    runner = CliRunner()

    def invoke(*args, principal="admin", input=None):
        argv = ["--endpoint", "http://test", *(["--principal", principal] if principal else []), *args]
        return runner.invoke(main, argv, obj={"http": app_client}, input=input)

    load_nexrad(commons)
    return invoke


def _command_exists(path):
    cmd = main
    for part in path.split():
        cmd = cmd.commands.get(part) if hasattr(cmd, "commands") else None
        if cmd is None:
            return False
    return True


def test_resolve_prints_record(run):
    result = run("--json", "resolve", NEXRAD_ALIAS)
    assert result.exit_code == 0, result.output
    doc = json.loads(result.output)
    assert doc["size"] == NEXRAD_SIZE and doc["authority"] == "noaa-commons"


def test_json_output_is_canonical(run):
    result = run("--json", "resolve", NEXRAD_ALIAS)
    doc = json.loads(result.output)
    assert result.output.rstrip("\n").encode() == canonical_json(doc)


def test_exit_codes_by_error_class(run):
    missing = run("resolve", "no-such-id")
    assert missing.exit_code == 4
    assert missing.output.strip().startswith("error: not_found:")
    assert len(missing.output.strip().splitlines()) == 1
    denied = run("update-urls", NEXRAD_ALIAS, "https://x/y", principal=None)
    assert denied.exit_code == 3
    run("mint", "dup", "--md5", "a" * 32, "--size", "1")
    assert run("mint", "dup", "--md5", "a" * 32, "--size", "1").exit_code == 5
    assert run("resolve-hash", "--hash", "md5:zz", "--size", "1").exit_code == 2


def test_unreachable_endpoint_is_network_class():
    result = CliRunner().invoke(main, ["--endpoint", "http://127.0.0.1:9", "resolve", "x"])
    assert result.exit_code == 7


def test_resolve_hash_and_update(run):
    result = run("--json", "resolve-hash", "--hash", f"md5:{NEXRAD_MD5}", "--size", str(NEXRAD_SIZE))
    assert list(json.loads(result.output)) == ["hashes", "size", "urls"]
    updated = run("--json", "update-urls", NEXRAD_ALIAS, "https://new/a.tar")
    assert json.loads(updated.output)["urls"] == ["https://new/a.tar"]


def test_put_object_mint_and_dedup(run, tmp_path):
    src = tmp_path / "f.bin"
    src.write_bytes(b"cli bytes")
    assert run("put-object", "raw", "a", str(src), "--mint", "cli-a").exit_code == 0
    assert run("put-object", "raw", "b", str(src), "--mint", "cli-b").exit_code == 0
    dedup = json.loads(run("--json", "dedup").output)
    assert dedup[0]["aliases"] == ["cli-a", "cli-b"]


def test_meta_acl_attr_group_commands(run, tmp_path):
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"type": "object", "required": ["site"]}))
    assert run("meta", "schema", "granule", str(schema)).exit_code == 0
    body = tmp_path / "body.json"
    body.write_text(json.dumps({"site": "KDVN"}))
    assert run("meta", "put", NEXRAD_ALIAS, str(body), "--type", "granule").exit_code == 0
    got = json.loads(run("--json", "meta", "get", NEXRAD_ALIAS, "--type", "granule").output)
    assert got["body"] == {"site": "KDVN"}
    hits = json.loads(run("--json", "meta", "query", "instrument=NEXRAD").output)
    assert hits == [NEXRAD_ALIAS]
    assert run("acl", "grant", NEXRAD_ALIAS, "bob", "write").exit_code == 0
    acl = json.loads(run("--json", "acl", "show", NEXRAD_ALIAS).output)
    assert acl["user:bob"] == ["write"]
    assert run("acl", "revoke", NEXRAD_ALIAS, "bob", "write").exit_code == 0
    assert run("attr", "set", NEXRAD_ALIAS, "project=osdc").exit_code == 0
    assert json.loads(run("--json", "attr", "get", NEXRAD_ALIAS).output) == {"project": "osdc"}
    assert run("group", "set", "ops", "bob").exit_code == 0
    assert json.loads(run("--json", "group", "show", "ops").output) == ["bob"]


def test_usage_report_on_fixture_log(tmp_path):
    runner = CliRunner()
    log = tmp_path / "usage.jsonl"
    assert runner.invoke(main, ["usage", "fixture", "--out", str(log)]).exit_code == 0
    result = runner.invoke(main, ["usage", "report", "--thresholds", "20000,50000,100000,200000",
                                  "--log", str(log)])
    assert result.exit_code == 0, result.output
    rows = [line.split("\t") for line in result.output.strip().splitlines()[1:]]
    assert rows == [["20000", "120"], ["50000", "34"], ["100000", "23"], ["200000", "5"]]


def test_usage_gateway_commands(run):
    ev = run("usage", "record", "--actor", "alice", "--quantity", "100000",
             "--timestamp", "2015-11-02T00:00:00+00:00")
    assert ev.exit_code == 0, ev.output
    inv = json.loads(run("--json", "usage", "invoice", "--actor", "alice", "--period", "2015-11").output)
    assert inv["total"] == "40000.00"
    assert run("usage", "allocate", "--actor", "bob", "--cap", "5").exit_code == 0
    report = run("--json", "usage", "report", "--period", "2015-11", "--thresholds", "1000")
    assert json.loads(report.output) == [{"cutoff": 1000, "users": 1}]
    cap = run("--json", "usage", "capacity", "--compute-used", "90", "--compute-total", "100",
              "--storage-used", "80", "--storage-total", "100")
    assert json.loads(cap.output)["over_target"] == {"compute": True, "storage": False}


def test_every_route_has_a_command(commons):
    app = create_app(commons)
    routes = {(m, r.path) for r in app.routes if isinstance(r, APIRoute) for m in r.methods}
    assert routes == set(ROUTE_COMMANDS)
    for command in set(ROUTE_COMMANDS.values()):
        assert _command_exists(command), command


def test_local_export_import(tmp_path):
    runner = CliRunner()
    src = tmp_path / "src-data"
    node = Commons(src, authority="src")
    node.ingest("exported", b"bytes to move", actor=PrincipalId.user("admin"))
    node.close()
    out = tmp_path / "bundle"
    res = runner.invoke(main, ["--principal", "admin", "--json", "export", "--data-dir", str(src),
                               "--out", str(out), "exported"])
    assert res.exit_code == 0, res.output
    dst = tmp_path / "dst-data"
    res = runner.invoke(main, ["--principal", "bob", "--json", "import", "--data-dir", str(dst), str(out)])
    assert json.loads(res.output)["created"] == ["exported"]


def test_config_env_overrides(tmp_path):
    cfg = tmp_path / "commons.yaml"
    cfg.write_text("bind: 0.0.0.0:9000\nauthority: from-file\ndata_dir: /srv/a\n")
    config = load_config(cfg, env={"COMMONS_AUTHORITY": "from-env", "COMMONS_BIND": "127.0.0.1:7000"})
    assert (config.authority, config.host, config.port) == ("from-env", "127.0.0.1", 7000)
    assert str(config.data_dir) == "/srv/a"
    with pytest.raises(MalformedRequest):
        load_config(env={"COMMONS_BIND": "nonsense"})
