import os
import socket
import threading
import uuid

import pytest

from conftest import ServiceProcess
from gitshield.errors import PushRejected, ServiceError
from gitshield.trust import (FreshnessStore, ServiceClient, build_request, dispatch,
                             start_server)

PSK = b"p" * 32
ROOT1, ROOT2, ROOT3 = "1" * 40, "2" * 40, "3" * 40


def rid():
    return str(uuid.uuid4())


@pytest.fixture
def server(scratch):
    srv = start_server("127.0.0.1:0", PSK, os.path.join(scratch, "state"))
    yield srv
    srv.shutdown()
    srv.server_close()


@pytest.fixture
def client(server):
    return ServiceClient(server.addr, PSK)


def test_monotonic_pushes(client):
    r = rid()
    assert client.fetch_latest(r) is None
    client.push_root(r, 1, ROOT1)
    client.push_root(r, 2, ROOT2)
    assert client.fetch_latest(r) == (2, ROOT2)


def test_replay_and_gap_rejected(client):
    r = rid()
    client.push_root(r, 1, ROOT1)
    client.push_root(r, 2, ROOT2)
    with pytest.raises(PushRejected) as e:
        client.push_root(r, 1, ROOT1)
    assert e.value.reason == "replay"
    with pytest.raises(PushRejected) as e:
        client.push_root(r, 4, ROOT3)
    assert e.value.reason == "gap"
    assert client.fetch_latest(r) == (2, ROOT2)


def test_first_push_must_be_seq_one(client):
    with pytest.raises(PushRejected):
        client.push_root(rid(), 2, ROOT1)


def test_wrong_key_is_auth_failure(server):
    bad = ServiceClient(server.addr, b"q" * 32)
    with pytest.raises(ServiceError) as e:
        bad.provision(rid())
    assert e.value.reason == "auth"
    with pytest.raises(ServiceError):
        bad.push_root(rid(), 1, ROOT1)


def test_provision_stable_and_fresh(client):
    r = rid()
    a, b = client.provision(r), client.provision(r)
    assert a.init == "fresh" and a.expected_root is None
    assert a.region_keys == b.region_keys and a.mac_key == b.mac_key
    assert all(len(k) == 32 for k in a.region_keys.values())
    client.push_root(r, 1, ROOT1)
    c = client.provision(r)
    assert (c.init, c.seq, c.expected_root) == ("clone", 1, ROOT1)
    assert client.provision(rid()).mac_key != a.mac_key


def test_restart_keeps_state(scratch):
    state = os.path.join(scratch, "st")
    srv = start_server("127.0.0.1:0", PSK, state)
    c = ServiceClient(srv.addr, PSK)
    r = rid()
    for i in range(1, 6):
        c.push_root(r, i, f"{i:040x}")
    keys = c.provision(r).region_keys
    srv.shutdown()
    srv.server_close()
    srv = start_server("127.0.0.1:0", PSK, state)
    c = ServiceClient(srv.addr, PSK)
    assert c.fetch_latest(r) == (5, f"{5:040x}")
    assert c.provision(r).region_keys == keys
    with pytest.raises(PushRejected):
        c.push_root(r, 5, ROOT1)
    srv.shutdown()
    srv.server_close()


def _raw_exchange(addr, payload):
    host, port = addr.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=5) as s:
        f = s.makefile("rwb")
        greeting = f.readline().decode()
        f.write(payload(greeting.split()[2]) if callable(payload) else payload)
        f.flush()
        return f.readline().decode()


@pytest.mark.parametrize("frame", [b"garbage\n", b"TICAL1 PUSH nope 1 2 3 4\n", b"\xff\xfe\n",
                                   b"TICAL1 LATEST\n"])
def test_malformed_frames(server, client, frame):
    r = rid()
    client.push_root(r, 1, ROOT1)
    assert _raw_exchange(server.addr, frame) == "ERR malformed\n"
    assert client.fetch_latest(r) == (1, ROOT1)


def test_replayed_frame_rejected(server, client):
    r = rid()
    captured = {}

    def first(challenge):
        captured["frame"] = build_request(PSK, "PUSH", r, challenge, 1, ROOT1).encode()
        return captured["frame"]

    assert _raw_exchange(server.addr, first).startswith("OK accepted")
    # Same bytes against a new challenge: stale nonce.
    assert _raw_exchange(server.addr, captured["frame"]) == "ERR auth\n"


def test_dispatch_directly():
    store = FreshnessStore(PSK)
    r = rid()
    line = build_request(PSK, "PUSH", r, "ab" * 16, 1, ROOT1).encode()
    assert dispatch(store, line, "ab" * 16).startswith("OK accepted seq=1 ")
    assert store.latest(r) == (1, ROOT1)


def test_concurrent_same_seq_pushes(client):
    for _ in range(10):
        r = rid()
        client.push_root(r, 1, ROOT1)
        results = []

        def push(root):
            try:
                client.push_root(r, 2, root)
                results.append(root)
            except PushRejected:
                pass

        ts = [threading.Thread(target=push, args=(root,)) for root in (ROOT2, ROOT3)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert len(results) == 1
        assert client.fetch_latest(r) == (2, results[0])


def test_torn_last_line_ignored(scratch):
    state = os.path.join(scratch, "st")
    store = FreshnessStore(PSK, state)
    r = rid()
    store.push(r, 1, ROOT1)
    with open(os.path.join(state, "records.log"), "ab") as f:
        f.write(b"PUSH " + r.encode() + b" 2 ")
    assert FreshnessStore(PSK, state).latest(r) == (1, ROOT1)


def test_forged_record_in_log_detected(scratch):
    state = os.path.join(scratch, "st")
    store = FreshnessStore(PSK, state)
    r = rid()
    store.push(r, 1, ROOT1)
    path = os.path.join(state, "records.log")
    with open(path) as f:
        text = f.read()
    with open(path, "w") as f:
        f.write(text.replace(ROOT1, ROOT2))
    with pytest.raises(ServiceError):
        FreshnessStore(PSK, state)


def test_unreachable_service():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(ServiceError) as e:
        ServiceClient(f"127.0.0.1:{port}", PSK, timeout=1).fetch_latest(rid())
    assert e.value.reason == "unreachable"


def test_service_process_survives_kill(scratch):
    svc = ServiceProcess(os.path.join(scratch, "st"), PSK).start()
    try:
        c = ServiceClient(svc.addr, PSK)
        r = rid()
        c.push_root(r, 1, ROOT1)
        svc.kill9()
        svc.start()
        assert ServiceClient(svc.addr, PSK).fetch_latest(r) == (1, ROOT1)
    finally:
        svc.stop()
