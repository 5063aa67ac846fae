"""A minimal Git object database, bit-compatible with stock Git.

Object ids are 40-character lowercase hex strings.  All host I/O goes
through a :class:`~gitshield.regions.RegionFS`, so the same code serves
plain repositories and ones whose metadata or objects are protected.
"""

import hashlib
import os
import re
import zlib
from dataclasses import dataclass, field

from .errors import (ConcurrentModificationError, IntegrityError,
                     NotFoundError, RollbackError, ShieldError)
from .regions import RegionFS

KINDS = ("blob", "tree", "commit")
FILE_MODE = "100644"
TREE_MODE = "40000"
NULL_ID = "0" * 40
EMPTY_BLOB_ID = "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
EMPTY_TREE_ID = "4b825dc642cb6eb9a060e54bf8d69288fbee4904"
MAIN_REF = "refs/heads/main"
GIT_CONFIG = (b"[core]\n\trepositoryformatversion = 0\n\tfilemode = true\n"
              b"\tbare = false\n\tlogallrefupdates = true\n")
HEAD_SYMREF = b"ref: refs/heads/main\n"

_HEX40 = re.compile(r"[0-9a-f]{40}")


def is_object_id(value):
    return isinstance(value, str) and _HEX40.fullmatch(value) is not None


def encode_object(kind, payload):
    if kind not in KINDS:
        raise ValueError(f"invalid object kind {kind!r}")
    return b"%s %d\x00" % (kind.encode(), len(payload)) + bytes(payload)


def hash_object(kind, payload):
    return hashlib.sha1(encode_object(kind, payload)).hexdigest()


@dataclass(frozen=True)
class GitObject:
    kind: str
    payload: bytes

    @property
    def id(self):
        return hash_object(self.kind, self.payload)


@dataclass(frozen=True)
class TreeEntry:
    mode: str
    name: str
    id: str

    def __post_init__(self):
        if self.mode not in (FILE_MODE, TREE_MODE):
            raise ValueError(f"unsupported tree entry mode {self.mode!r}")
        if not self.name or "/" in self.name or "\x00" in self.name:
            raise ValueError(f"invalid tree entry name {self.name!r}")

    def sort_key(self):
        name = self.name.encode()
        return name + b"/" if self.mode == TREE_MODE else name


def encode_tree(entries):
    out = []
    for e in sorted(entries, key=TreeEntry.sort_key):
        out.append(b"%s %s\x00" % (e.mode.encode(), e.name.encode()) + bytes.fromhex(e.id))
    return b"".join(out)


def parse_tree(payload):
    entries = []
    pos = 0
    while pos < len(payload):
        sp = payload.index(b" ", pos)
        nul = payload.index(b"\x00", sp)
        if nul + 21 > len(payload):
            raise ValueError("truncated tree entry")
        mode = payload[pos:sp].decode()
        name = payload[sp + 1:nul].decode()
        entries.append(TreeEntry(mode, name, payload[nul + 1:nul + 21].hex()))
        pos = nul + 21
    return entries


@dataclass(frozen=True)
class Identity:
    name: str
    email: str
    timestamp: int
    tz: str = "+0000"

    def encode(self):
        return f"{self.name} <{self.email}> {self.timestamp} {self.tz}"

    @classmethod
    def parse(cls, text):
        m = re.fullmatch(r"(.*) <(.*)> (\d+) ([+-]\d{4})", text)
        if not m:
            raise ValueError(f"malformed identity {text!r}")
        return cls(m.group(1), m.group(2), int(m.group(3)), m.group(4))


@dataclass(frozen=True)
class CommitRecord:
    tree: str
    parents: tuple
    author: Identity
    committer: Identity
    message: str

    def encode(self):
        lines = [f"tree {self.tree}"]
        lines += [f"parent {p}" for p in self.parents]
        lines.append(f"author {self.author.encode()}")
        lines.append(f"committer {self.committer.encode()}")
        return ("\n".join(lines) + "\n\n" + self.message).encode()

    @classmethod
    def parse(cls, payload):
        text = payload.decode()
        head, sep, message = text.partition("\n\n")
        if not sep:
            raise ValueError("commit without message separator")
        tree, parents, author, committer = None, [], None, None
        for line in head.split("\n"):
            key, _, value = line.partition(" ")
            if key == "tree" and tree is None:
                tree = value
            elif key == "parent" and author is None:
                parents.append(value)
            elif key == "author" and author is None:
                author = Identity.parse(value)
            elif key == "committer" and committer is None:
                committer = Identity.parse(value)
            else:
                raise ValueError(f"unexpected commit header line {line!r}")
        if tree is None or author is None or committer is None:
            raise ValueError("commit is missing a required header")
        for oid in [tree, *parents]:
            if not is_object_id(oid):
                raise ValueError(f"bad object id {oid!r} in commit")
        return cls(tree, tuple(parents), author, committer, message)


@dataclass(frozen=True)
class ReflogEntry:
    old: str
    new: str
    identity: Identity
    message: str

    def encode(self):
        return f"{self.old} {self.new} {self.identity.encode()}\t{self.message}\n".encode()

    @classmethod
    def parse(cls, line):
        meta, tab, message = line.partition("\t")
        if not tab:
            raise ValueError("reflog line without message")
        old, new, ident = meta[:40], meta[41:81], meta[82:]
        if not (is_object_id(old) and is_object_id(new)) or meta[40] != " " or meta[81] != " ":
            raise ValueError(f"malformed reflog line {line!r}")
        return cls(old, new, Identity.parse(ident), message)


@dataclass
class VerificationReport:
    root: str
    reachable: int = 0
    commits: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def build_trees(stage_entries):
    """Group a flat ``path -> (blob_id, mode)`` map into nested dicts."""
    root = {}
    for path, (blob_id, mode) in stage_entries.items():
        parts = path.split("/")
        node = root
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"path conflict at {path!r}")
        if parts[-1] in node:
            raise ValueError(f"path conflict at {path!r}")
        node[parts[-1]] = (blob_id, mode)
    return root


class Repository:
    """Loose-object repository at ``git_dir`` with a single ``main`` branch."""

    def __init__(self, git_dir, fs=None, counters=None):
        self.git_dir = os.path.abspath(git_dir)
        self.fs = fs if fs is not None else RegionFS(counters=counters)
        self.counters = self.fs.counters

    def path(self, *parts):
        return os.path.join(self.git_dir, *parts)

    @classmethod
    def init(cls, git_dir, fs=None, counters=None):
        repo = cls(git_dir, fs, counters)
        if os.path.exists(repo.path("HEAD")):
            raise ShieldError(f"repository already exists at {repo.git_dir}")
        for d in ("objects", "refs/heads", "logs/refs/heads"):
            repo.fs.makedirs(repo.path(d))
        with repo.fs.batch():
            repo.fs.protected_write(repo.path("HEAD"), HEAD_SYMREF)
            repo.fs.protected_write(repo.path("config"), GIT_CONFIG)
        return repo

    # -- objects -----------------------------------------------------------

    def object_path(self, oid):
        return self.path("objects", oid[:2], oid[2:])

    def has_object(self, oid):
        return self.fs.exists(self.object_path(oid))

    def write_loose(self, kind, payload):
        raw = encode_object(kind, payload)
        oid = hashlib.sha1(raw).hexdigest()
        path = self.object_path(oid)
        if self.fs.exists(path):
            return oid
        d = os.path.dirname(path)
        if not os.path.isdir(d):
            self.fs.makedirs(d)
        self.fs.protected_write(path, zlib.compress(raw))
        self.counters.loose_objects += 1
        return oid

    def read_raw(self, oid):
        """On-host bytes of an object after provider transforms, still deflated."""
        try:
            return self.fs.protected_read(self.object_path(oid))
        except NotFoundError:
            raise NotFoundError(f"object {oid} not found") from None

    def read_loose(self, oid):
        data = self.read_raw(oid)
        try:
            d = zlib.decompressobj()
            raw = d.decompress(data) + d.flush()
            if not d.eof or d.unused_data:
                raise ValueError("trailing or truncated zlib data")
            header, nul, payload = raw.partition(b"\x00")
            kind, _, size = header.decode().partition(" ")
            if not nul or kind not in KINDS or int(size) != len(payload) or str(int(size)) != size:
                raise ValueError("malformed object header")
        except (zlib.error, ValueError, UnicodeDecodeError) as e:
            raise IntegrityError(f"object {oid} is corrupt: {e}") from None
        if hashlib.sha1(raw).hexdigest() != oid:
            raise IntegrityError(f"object {oid} hash mismatch")
        return GitObject(kind, payload)

    def read_typed(self, oid, kind):
        obj = self.read_loose(oid)
        if obj.kind != kind:
            raise IntegrityError(f"object {oid} is a {obj.kind}, expected {kind}")
        return obj.payload

    # -- trees and commits -------------------------------------------------

    def write_tree(self, stage_entries):
        def write(node):
            entries = []
            for name, value in node.items():
                if isinstance(value, dict):
                    entries.append(TreeEntry(TREE_MODE, name, write(value)))
                else:
                    blob_id, mode = value
                    entries.append(TreeEntry(mode, name, blob_id))
            return self.write_loose("tree", encode_tree(entries))

        return write(build_trees(dict(stage_entries)))

    def read_tree(self, oid):
        payload = self.read_typed(oid, "tree")
        try:
            return parse_tree(payload)
        except (ValueError, UnicodeDecodeError) as e:
            raise IntegrityError(f"tree {oid} is malformed: {e}") from None

    def flatten_tree(self, oid, prefix=""):
        """``path -> (blob_id, mode)`` for every file reachable from a tree."""
        out = {}
        for e in self.read_tree(oid):
            path = prefix + e.name
            if e.mode == TREE_MODE:
                out.update(self.flatten_tree(e.id, path + "/"))
            else:
                out[path] = (e.id, e.mode)
        return out

    def create_commit(self, record):
        if not self.has_object(record.tree):
            raise ShieldError(f"commit tree {record.tree} does not exist")
        for p in record.parents:
            if not self.has_object(p):
                raise ShieldError(f"commit parent {p} does not exist")
        return self.write_loose("commit", record.encode())

    def read_commit(self, oid):
        payload = self.read_typed(oid, "commit")
        try:
            return CommitRecord.parse(payload)
        except (ValueError, UnicodeDecodeError) as e:
            raise IntegrityError(f"commit {oid} is malformed: {e}") from None

    def history(self, head=None):
        """Yield ``(oid, CommitRecord)`` from ``head`` back to the root commit."""
        oid = head or self.read_ref()
        while oid:
            rec = self.read_commit(oid)
            yield oid, rec
            oid = rec.parents[0] if rec.parents else None

    # -- refs --------------------------------------------------------------

    def check_config(self):
        """The shield writes ``config`` once; any other content is tampering."""
        try:
            data = self.fs.protected_read(self.path("config"))
        except NotFoundError:
            raise IntegrityError("repository config is missing") from None
        if data != GIT_CONFIG:
            raise IntegrityError("repository config was modified")

    def read_head_symref(self):
        try:
            data = self.fs.protected_read(self.path("HEAD"))
        except NotFoundError:
            raise IntegrityError("HEAD is missing") from None
        if data != HEAD_SYMREF:
            raise IntegrityError(f"HEAD does not point at {MAIN_REF}")

    def read_ref(self, ref=MAIN_REF):
        try:
            data = self.fs.protected_read(self.path(ref))
        except NotFoundError:
            return None
        try:
            text = data.decode()
        except UnicodeDecodeError:
            raise IntegrityError(f"ref {ref} is not text") from None
        if not text.endswith("\n") or not is_object_id(text[:-1]):
            raise IntegrityError(f"ref {ref} is malformed")
        return text[:-1]

    def update_ref(self, new_id, old_id, identity, message, ref=MAIN_REF):
        current = self.read_ref(ref)
        if current != old_id:
            raise ConcurrentModificationError(
                f"{ref}: expected {old_id or 'nil'}, found {current or 'nil'}")
        line = ReflogEntry(old_id or NULL_ID, new_id, identity, message).encode()
        with self.fs.batch():
            self.fs.protected_write(self.path(ref), (new_id + "\n").encode())
            self.fs.append(self.path("logs", "HEAD"), line)
            self.fs.append(self.path("logs", ref), line)

    def reflog(self, ref=MAIN_REF):
        path = self.path("logs", ref) if ref != "HEAD" else self.path("logs", "HEAD")
        try:
            data = self.fs.protected_read(path)
        except NotFoundError:
            return []
        try:
            return [ReflogEntry.parse(line) for line in data.decode().splitlines()]
        except (ValueError, UnicodeDecodeError, IndexError) as e:
            raise IntegrityError(f"reflog {ref} is malformed: {e}") from None

    # -- verification ------------------------------------------------------

    def fsck_walk(self, root):
        """Re-hash every object reachable from ``root``; never raises."""
        report = VerificationReport(root)
        if not is_object_id(root or ""):
            report.violations.append(f"missing root {root}")
            return report
        if not self.has_object(root):
            report.violations.append(f"missing root {root}")
            return report
        seen = set()
        todo = [(root, "commit")]
        while todo:
            oid, kind = todo.pop()
            if oid in seen:
                continue
            seen.add(oid)
            try:
                obj = self.read_loose(oid)
                if obj.kind != kind:
                    raise IntegrityError(f"object {oid} is a {obj.kind}, expected {kind}")
                if kind == "commit":
                    rec = CommitRecord.parse(obj.payload)
                    report.commits += 1
                    todo.append((rec.tree, "tree"))
                    todo.extend((p, "commit") for p in rec.parents)
                elif kind == "tree":
                    for e in parse_tree(obj.payload):
                        todo.append((e.id, "tree" if e.mode == TREE_MODE else "blob"))
            except (ValueError, UnicodeDecodeError) as e:
                report.violations.append(f"malformed {kind} {oid}: {e}")
            except NotFoundError:
                report.violations.append(f"missing {kind} {oid}")
            except IntegrityError as e:
                report.violations.append(f"corrupt {kind} {oid}: {e}")
        report.reachable = len(seen)
        return report

    def verify_reflogs(self, head):
        for ref in ("HEAD", MAIN_REF):
            entries = self.reflog(ref)
            prev = NULL_ID
            for e in entries:
                if e.old != prev:
                    raise IntegrityError(f"reflog {ref} is not a single chain")
                prev = e.new
            if entries and prev != head:
                raise IntegrityError(f"reflog {ref} does not end at HEAD")


def open_existing(git_dir, expected_root, fs=None, counters=None):
    """Open a repository only if its HEAD equals ``expected_root`` and fsck is clean."""
    repo = Repository(git_dir, fs, counters)
    if not os.path.isdir(repo.git_dir):
        raise NotFoundError(f"no repository at {repo.git_dir}")
    repo.read_head_symref()
    repo.check_config()
    head = repo.read_ref()
    if head != expected_root:
        raise RollbackError(
            f"repository head {head or 'nil'} does not match trusted root {expected_root}")
    report = repo.fsck_walk(head)
    if not report.ok:
        raise IntegrityError("; ".join(report.violations))
    repo.verify_reflogs(head)
    return repo
