"""Freshness and provisioning service.

The service keeps, per repository id, the highest accepted
``(seq, root)`` record and the repository's provisioned keys.  Records are
appended to a log and fsync'd before a push is acknowledged.

Wire protocol (TCP, one request per connection, UTF-8 lines)::

    S: TICAL1 CHALLENGE <challenge-hex>
    C: TICAL1 <VERB> <repo-id> [<seq> <root-hex>] <challenge-hex> <mac-hex>
    S: OK <payload> <mac-hex>      or      ERR <reason>

Request MACs are HMAC-SHA-256 under the pre-shared key over the frame
without its mac field.  Replies are MACed over the challenge followed by
the reply without its mac, so neither side can be replayed.
"""

import hashlib
import hmac
import logging
import os
import secrets
import socket
import socketserver
import threading
import time
import uuid
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import ConfigError, PushRejected, ServiceError
from .objects import is_object_id

log = logging.getLogger(__name__)

PROTOCOL = "TICAL1"
MAX_FRAME = 4096
REGION_KEY_IDS = ("git-b", "work", "user")
RECORDS_LOG = "records.log"
KEYS_LOG = "keys.log"


def mac_hex(key, text):
    return hmac.new(key, text.encode(), hashlib.sha256).hexdigest()


def parse_addr(addr):
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"service address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _check_repo_id(repo_id):
    try:
        return str(uuid.UUID(repo_id)) == repo_id
    except ValueError:
        return False


@dataclass(frozen=True)
class FreshnessRecord:
    repo_id: str
    seq: int
    root: str
    received_at: float
    mac: str

    def line(self):
        return f"PUSH {self.repo_id} {self.seq} {self.root} {self.received_at:.6f} {self.mac}\n"


@dataclass(frozen=True)
class ProvisionBundle:
    repo_id: str
    init: str
    seq: int
    expected_root: str
    region_keys: dict
    mac_key: bytes


class FreshnessStore:
    """Monotonic per-repository freshness records plus provisioned keys."""

    def __init__(self, psk, state_dir=None):
        self.psk = psk
        self.state_dir = state_dir
        self._lock = threading.Lock()
        self._latest = {}
        self._keys = {}
        if state_dir is not None:
            os.makedirs(state_dir, exist_ok=True)
            self._replay()

    def _record_mac(self, repo_id, seq, root):
        return mac_hex(self.psk, f"record {repo_id} {seq} {root}")

    def _replay(self):
        for line in self._read_lines(RECORDS_LOG):
            _, repo_id, seq, root, ts, mac = line.split(" ")
            seq = int(seq)
            if not hmac.compare_digest(mac, self._record_mac(repo_id, seq, root)):
                raise ServiceError("state", f"record MAC mismatch in {RECORDS_LOG}")
            prev = self._latest.get(repo_id)
            if seq != (prev.seq if prev else 0) + 1:
                raise ServiceError("state", f"non-monotonic record for {repo_id}")
            self._latest[repo_id] = FreshnessRecord(repo_id, seq, root, float(ts), mac)
        for line in self._read_lines(KEYS_LOG):
            _, repo_id, *pairs = line.split(" ")
            keys = dict(p.split("=", 1) for p in pairs)
            self._keys[repo_id] = {k: bytes.fromhex(v) for k, v in keys.items()}

    def _read_lines(self, name):
        path = os.path.join(self.state_dir, name)
        if not os.path.exists(path):
            return []
        with open(path, "rb") as f:
            data = f.read()
        lines = data.split(b"\n")
        # A torn final line was never acknowledged; drop it.
        return [l.decode() for l in lines[:-1] if l]

    def _append(self, name, line):
        if self.state_dir is None:
            return
        with open(os.path.join(self.state_dir, name), "ab") as f:
            f.write(line.encode())
            f.flush()
            os.fsync(f.fileno())

    def push(self, repo_id, seq, root):
        with self._lock:
            prev = self._latest.get(repo_id)
            stored = prev.seq if prev else 0
            if seq <= stored:
                raise PushRejected("replay", f"seq {seq} <= stored {stored}")
            if seq > stored + 1:
                raise PushRejected("gap", f"seq {seq} > stored {stored} + 1")
            rec = FreshnessRecord(repo_id, seq, root, time.time(),
                                  self._record_mac(repo_id, seq, root))
            self._append(RECORDS_LOG, rec.line())
            self._latest[repo_id] = rec
            return rec

    def latest(self, repo_id):
        with self._lock:
            rec = self._latest.get(repo_id)
        return (rec.seq, rec.root) if rec else None

    def provision(self, repo_id):
        with self._lock:
            keys = self._keys.get(repo_id)
            if keys is None:
                keys = {"mac_key": secrets.token_bytes(32)}
                keys.update({k: secrets.token_bytes(32) for k in REGION_KEY_IDS})
                pairs = " ".join(f"{k}={v.hex()}" for k, v in keys.items())
                self._append(KEYS_LOG, f"KEYS {repo_id} {pairs}\n")
                self._keys[repo_id] = keys
            rec = self._latest.get(repo_id)
        return ProvisionBundle(
            repo_id,
            "clone" if rec else "fresh",
            rec.seq if rec else 0,
            rec.root if rec else None,
            {k: keys[k] for k in REGION_KEY_IDS},
            keys["mac_key"],
        )


class LocalTrust:
    """In-process client bound directly to a :class:`FreshnessStore`."""

    def __init__(self, store=None):
        self.store = store if store is not None else FreshnessStore(secrets.token_bytes(32))

    def push_root(self, repo_id, seq, root):
        self.store.push(repo_id, seq, root)

    def fetch_latest(self, repo_id):
        return self.store.latest(repo_id)

    def provision(self, repo_id):
        return self.store.provision(repo_id)


# -- wire protocol -----------------------------------------------------------

def _wrap_key(psk, challenge):
    return hmac.new(psk, b"wrap:" + challenge.encode(), hashlib.sha256).digest()


def _seal_value(wrap_key, name, value):
    nonce = secrets.token_bytes(12)
    return (nonce + AESGCM(wrap_key).encrypt(nonce, value, name.encode())).hex()


def _open_value(wrap_key, name, text):
    raw = bytes.fromhex(text)
    try:
        return AESGCM(wrap_key).decrypt(raw[:12], raw[12:], name.encode())
    except InvalidTag:
        raise ServiceError("auth", f"cannot unwrap {name}") from None


def build_request(psk, verb, repo_id, challenge, seq=None, root=None):
    parts = [PROTOCOL, verb, repo_id]
    if seq is not None:
        parts += [str(seq), root]
    parts.append(challenge)
    body = " ".join(parts)
    return f"{body} {mac_hex(psk, body)}\n"


class _Reject(Exception):
    def __init__(self, reason):
        self.reason = reason


def dispatch(store, line, challenge):
    """Handle one request frame; returns the reply line (without MAC for ERR)."""
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError:
        raise _Reject("malformed") from None
    if not text.endswith("\n"):
        raise _Reject("malformed")
    tokens = text[:-1].split(" ")
    if len(tokens) < 5 or tokens[0] != PROTOCOL:
        raise _Reject("malformed")
    verb, repo_id = tokens[1], tokens[2]
    expected_len = 7 if verb == "PUSH" else 5
    if verb not in ("PUSH", "LATEST", "PROVISION") or len(tokens) != expected_len:
        raise _Reject("malformed")
    if not _check_repo_id(repo_id):
        raise _Reject("malformed")
    body, mac = text[:-1].rsplit(" ", 1)
    if not hmac.compare_digest(mac, mac_hex(store.psk, body)):
        raise _Reject("auth")
    if tokens[-2] != challenge:
        raise _Reject("auth")
    if verb == "PUSH":
        seq, root = tokens[3], tokens[4]
        if not seq.isdigit() or not is_object_id(root):
            raise _Reject("malformed")
        try:
            rec = store.push(repo_id, int(seq), root)
        except PushRejected as e:
            raise _Reject(e.reason) from None
        payload = f"accepted seq={rec.seq}"
    elif verb == "LATEST":
        latest = store.latest(repo_id)
        payload = f"seq={latest[0]} root={latest[1]}" if latest else "unknown"
    else:
        b = store.provision(repo_id)
        wk = _wrap_key(store.psk, challenge)
        fields = [f"repo={b.repo_id}", f"init={b.init}", f"seq={b.seq}",
                  f"root={b.expected_root or '-'}",
                  f"mac_key={_seal_value(wk, 'mac_key', b.mac_key)}"]
        fields += [f"key.{k}={_seal_value(wk, k, v)}" for k, v in sorted(b.region_keys.items())]
        payload = " ".join(fields)
    reply = f"OK {payload}"
    return f"{reply} {mac_hex(store.psk, challenge + ' ' + reply)}\n"


class _Handler(socketserver.StreamRequestHandler):
    timeout = 10

    def handle(self):
        challenge = secrets.token_hex(16)
        try:
            self.wfile.write(f"{PROTOCOL} CHALLENGE {challenge}\n".encode())
            line = self.rfile.readline(MAX_FRAME)
            try:
                reply = dispatch(self.server.store, line, challenge)
            except _Reject as e:
                reply = f"ERR {e.reason}\n"
            self.wfile.write(reply.encode())
        except OSError as e:
            log.debug("connection dropped: %s", e)


class FreshnessServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, listen_addr, store):
        self.store = store
        super().__init__(parse_addr(listen_addr), _Handler)

    @property
    def addr(self):
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def start_server(listen_addr, psk, state_dir=None):
    """Run a server on a background thread; returns it (call ``shutdown()``)."""
    server = FreshnessServer(listen_addr, FreshnessStore(psk, state_dir))
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    return server


def serve(listen_addr, state_dir, psk, ready=None):
    """Serve until interrupted.  ``ready`` receives the bound address."""
    with FreshnessServer(listen_addr, FreshnessStore(psk, state_dir)) as server:
        if ready is not None:
            ready(server.addr)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass


class ServiceClient:
    """Blocking client for a :class:`FreshnessServer`."""

    def __init__(self, addr, psk, timeout=5.0):
        self.addr = parse_addr(addr) if isinstance(addr, str) else addr
        self.psk = psk
        self.timeout = timeout

    def _call(self, verb, repo_id, seq=None, root=None):
        try:
            with socket.create_connection(self.addr, timeout=self.timeout) as sock:
                f = sock.makefile("rwb")
                greeting = f.readline(MAX_FRAME).decode().split()
                if len(greeting) != 3 or greeting[:2] != [PROTOCOL, "CHALLENGE"]:
                    raise ServiceError("protocol", "bad greeting")
                challenge = greeting[2]
                f.write(build_request(self.psk, verb, repo_id, challenge, seq, root).encode())
                f.flush()
                reply = f.readline(MAX_FRAME * 4).decode()
        except OSError as e:
            raise ServiceError("unreachable", str(e)) from None
        if not reply.endswith("\n"):
            raise ServiceError("protocol", "truncated reply")
        reply = reply[:-1]
        if reply.startswith("ERR "):
            reason = reply[4:]
            if verb == "PUSH" and reason in ("replay", "gap"):
                raise PushRejected(reason)
            raise ServiceError(reason)
        body, _, mac = reply.rpartition(" ")
        if not body.startswith("OK ") or not hmac.compare_digest(
                mac, mac_hex(self.psk, challenge + " " + body)):
            raise ServiceError("auth", "reply MAC mismatch")
        return challenge, body[3:].split(" ")

    def push_root(self, repo_id, seq, root):
        self._call("PUSH", repo_id, seq, root)

    def fetch_latest(self, repo_id):
        _, payload = self._call("LATEST", repo_id)
        if payload == ["unknown"]:
            return None
        fields = dict(p.split("=", 1) for p in payload)
        return int(fields["seq"]), fields["root"]

    def provision(self, repo_id):
        challenge, payload = self._call("PROVISION", repo_id)
        fields = dict(p.split("=", 1) for p in payload)
        wk = _wrap_key(self.psk, challenge)
        region_keys = {
            k[4:]: _open_value(wk, k[4:], v) for k, v in fields.items() if k.startswith("key.")
        }
        return ProvisionBundle(
            fields["repo"], fields["init"], int(fields["seq"]),
            None if fields["root"] == "-" else fields["root"],
            region_keys, _open_value(wk, "mac_key", fields["mac_key"]),
        )
