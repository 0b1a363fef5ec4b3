import os
import subprocess
import sys
import time

import pytest

from pelletflow.cli import main
from pelletflow.control import ProtocolError, parse_port_map, send_command

from conftest import data_path

INTEGRATION = data_path("integration.graph")


def cli(*args, env=None, timeout=60):
    e = dict(os.environ)
    e.update(env or {})
    return subprocess.run([sys.executable, "-m", "pelletflow", *args], capture_output=True, text=True,
                          timeout=timeout, env=e)


# -- validate

def test_validate_ok():
    r = cli("validate", INTEGRATION)
    assert r.returncode == 0 and r.stderr == "" and r.stdout == ""


def test_validate_dangling(tmp_path):
    p = tmp_path / "bad.graph"
    p.write_text("graph g\npellet A impl=identity\nport A.out out\nedge A.out -> B.in\n")
    r = cli("validate", str(p))
    assert r.returncode == 1
    lines = r.stderr.strip().splitlines()
    assert lines and all(line.split(":", 2)[0] in ("error", "warning") for line in lines)
    assert any("edge 1" in line for line in lines)


def test_validate_syntax_error(tmp_path, capsys):
    p = tmp_path / "bad.graph"
    p.write_text("graph g\npellet A impl=identity bogus=1\n")
    assert main(["validate", str(p)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_validate_unreadable(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "missing.graph")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_wordcount_graph_warns_but_validates():
    r = cli("validate", data_path("wordcount.graph"))
    assert r.returncode == 0
    assert "warning:" in r.stderr


# -- simulate

def test_simulate_periodic(tmp_path):
    out = tmp_path / "out"
    r = cli("simulate", data_path("periodic.sim"), "--out", str(out))
    assert r.returncode == 0, r.stderr
    rows = [line.split(",") for line in r.stdout.strip().splitlines()[1:]]
    assert {row[0]: int(row[1]) for row in rows} == {"static": 0, "dynamic": 0, "hybrid": 0}
    assert sorted(os.listdir(out)) == ["decisions_dynamic.csv", "decisions_hybrid.csv", "decisions_static.csv",
                                       "summary.csv", "trace_dynamic.csv", "trace_hybrid.csv", "trace_static.csv"]


def test_simulate_spiky_static_violates(tmp_path):
    r = cli("simulate", data_path("spiky.sim"), "--out", str(tmp_path))
    rows = {line.split(",")[0]: int(line.split(",")[1]) for line in r.stdout.strip().splitlines()[1:]}
    assert rows["static"] >= 1 and rows["dynamic"] == 0 and rows["hybrid"] == 0


def test_simulate_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert cli("simulate", data_path("random.sim"), "--out", str(tmp_path / d)).returncode == 0
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_bad_config(tmp_path, capsys):
    p = tmp_path / "x.sim"
    p.write_text("simulation x\nworkload wobble\n")
    assert main(["simulate", str(p), "--out", str(tmp_path)]) == 1
    assert "line 2" in capsys.readouterr().err
    assert main(["simulate", str(tmp_path / "nope.sim"), "--out", str(tmp_path)]) == 2


# -- run

def test_run_static_without_hints(tmp_path, capsys):
    p = tmp_path / "g.graph"
    p.write_text("graph g\npellet A impl=identity\nport A.in in\nport A.out out\n"
                 "pellet B impl=sink\nport B.in in\nedge A.out -> B.in\n")
    assert main(["run", str(p), "--strategy", "static", "--run-for", "0.1"]) == 1
    assert "hint" in capsys.readouterr().err


def test_run_invalid_graph(tmp_path):
    p = tmp_path / "g.graph"
    p.write_text("graph g\npellet A impl=identity\nport A.out out\nedge A.out -> B.in\n")
    assert main(["run", str(p), "--run-for", "0.1"]) == 1


def test_run_bad_alpha_env(capsys):
    os.environ["FLOE_ALPHA"] = "-3"
    try:
        assert main(["run", INTEGRATION, "--run-for", "0.1", "--strategy", "none"]) == 1
    finally:
        del os.environ["FLOE_ALPHA"]
    assert "FLOE_ALPHA" in capsys.readouterr().err


def test_run_socket_bind_failure(tmp_path):
    sock = tmp_path / "no" / "such" / "dir" / "ctl.sock"
    assert main(["run", INTEGRATION, "--run-for", "0.1", "--control-socket", str(sock)]) == 2


def test_run_streams_metrics(tmp_path):
    out = tmp_path / "metrics.csv"
    r = cli("run", INTEGRATION, "--run-for", "1.6", "--interval", "0.5", "--feed-rate", "10",
            "--metrics-out", str(out))
    assert r.returncode == 0, r.stderr
    lines = out.read_text().splitlines()
    assert lines[0] == "time,pellet,queue_len,D,L,N,cores,processed,emitted"
    assert len(lines) - 1 >= 20  # at least two rounds of 10 pellets


@pytest.fixture
def live(tmp_path):
    sock = str(tmp_path / "ctl.sock")
    proc = subprocess.Popen([sys.executable, "-m", "pelletflow", "run", INTEGRATION, "--control-socket", sock,
                             "--feed-rate", "20", "--strategy", "dynamic"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    deadline = time.monotonic() + 20
    while not os.path.exists(sock):
        if proc.poll() is not None or time.monotonic() > deadline:
            proc.kill()
            raise AssertionError(proc.stderr.read())
        time.sleep(0.05)
    yield sock, proc, tmp_path
    if proc.poll() is None:
        proc.kill()
    proc.wait(10)


def test_ctl_session(live):
    sock, proc, tmp = live
    r = cli("ctl", sock, "stats")
    assert r.returncode == 0
    rows = r.stdout.strip().splitlines()
    assert rows[0].startswith("time,pellet") and len(rows) == 11

    r = cli("ctl", sock, "set-cores", "I1", "2")
    assert r.returncode == 0 and "budget=8" in r.stdout

    r = cli("ctl", sock, "update-pellet", "I4", "identity", "sync")
    assert r.returncode == 0 and "target=I4 mode=sync epoch=1" in r.stdout

    r = cli("ctl", sock, "update-pellet", "I4", "no-such-impl")
    assert r.returncode == 1 and r.stderr.startswith("ERR rejected")

    r = cli("ctl", sock, "frobnicate")
    assert r.returncode == 1 and r.stderr.startswith("ERR unknown-verb")

    frag = tmp / "frag.graph"
    frag.write_text("graph f\npellet J1 impl=identity\nport J1.in in\nport J1.out out\n"
                    "pellet J2 impl=identity\nport J2.in in\nport J2.out out\nedge J1.out -> J2.in\n")
    r = cli("ctl", sock, "update-subgraph", "I4", str(frag), "I4.in=J1.in,I4.out=J2.out")
    assert r.returncode == 0, r.stderr
    assert "target=I4" in r.stdout

    r = cli("ctl", sock, "update-subgraph", "I4", str(frag), "I4.in=J1.in")
    assert r.returncode == 1

    r = cli("ctl", sock, "stats")
    assert {row.split(",")[1] for row in r.stdout.strip().splitlines()[1:]} >= {"J1", "J2"}

    r = cli("ctl", sock, "shutdown", "drain")
    assert r.returncode == 0 and "stopped pellets=11" in r.stdout
    assert proc.wait(20) == 0


def test_protocol_one_reply_per_request(live):
    import socket

    sock, proc, _ = live
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
        s.settimeout(10)
        s.connect(sock)
        s.sendall(b"stats\nbogus\n\nset-cores I1\n")
        buf = b""
        while buf.count(b"\n") < 4:
            buf += s.recv(65536)
    replies = buf.decode().splitlines()
    assert [r.split(" ")[0] for r in replies] == ["OK", "ERR", "ERR", "ERR"]
    assert replies[1].startswith("ERR unknown-verb")
    assert replies[3].startswith("ERR usage")
    assert send_command(sock, "shutdown now").startswith("OK stopped")


def test_ctl_no_server(tmp_path):
    r = cli("ctl", str(tmp_path / "none.sock"), "stats")
    assert r.returncode == 2


def test_parse_port_map():
    assert parse_port_map("B.in=B2.in,C.out=C3.out") == {("B", "in"): ("B2", "in"), ("C", "out"): ("C3", "out")}
    with pytest.raises(ProtocolError):
        parse_port_map("B.in")
    with pytest.raises(ProtocolError):
        parse_port_map("B=C.in")
