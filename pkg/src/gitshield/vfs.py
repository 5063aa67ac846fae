"""The GITFS facade: file operations that version, verify and fail-stop.

:class:`Shield` exposes the intercepted file operations as methods.  In
fine mode every mutating call (a creating or truncating open, a write, a
rename, an unlink) produces one commit.  In coarse mode commits happen
only on close, fsync and process barriers.  A commit always completes
before the corresponding bytes are written back to the host.

Any integrity violation, store failure or failed freshness push aborts the
shield permanently; every later call raises :class:`ShieldAborted`.
"""

import contextlib
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

from .buffers import (DEFAULT_BUFFER_CAP, BufferSet, StageIndex, apply_write,
                      flush_to_host, load_and_verify, remove_from_stage,
                      serve_read, stage_buffer)
from .counters import Counters
from .errors import (AlreadyTrackedError, ConfigError, DestinationExistsError,
                     HandleError, IntegrityError, InvalidPathError,
                     NotFoundError, PathConflictError, RollbackError,
                     ShieldAborted, ShieldError, UntrackedFileError)
from .objects import CommitRecord, Identity, Repository, open_existing
from .regions import (RegionFS, RegionTable, configure_git_metadata_regions,
                      derive_key, get_variant)

log = logging.getLogger(__name__)

COMMITTER_NAME = "tical-shield"
COMMITTER_EMAIL = "shield@local"
AUDIT_HEADER = "tical-audit v1"
AUDIT_FIELDS = ("shield-id", "pid", "syscall", "trigger", "paths", "bytes")
STAGE_FILE = "tical-stage"
REPO_ID_FILE = "tical-repo-id"
MODES = ("fine", "coarse")
INIT_POLICIES = ("fresh", "clone", "auto")
BARRIER_KINDS = ("fork", "vfork", "clone", "exec", "exit")

_BAD_PATH_CHARS = frozenset("\x00\n\r\t,")


def canonical_path(path):
    """Region-relative, slash-separated path; leading ``/`` is accepted."""
    if not isinstance(path, str) or not path:
        raise InvalidPathError(f"invalid path {path!r}")
    rel = path[1:] if path.startswith("/") else path
    parts = rel.split("/")
    for part in parts:
        if part in ("", ".", "..") or _BAD_PATH_CHARS.intersection(part):
            raise InvalidPathError(f"path {path!r} is not canonical")
    if parts[0].lower() == ".git":
        raise InvalidPathError("the repository metadata directory is not accessible")
    return rel


def audit_message(shield_id, pid, syscall, trigger, paths, nbytes):
    return (f"{AUDIT_HEADER}\nshield-id: {shield_id}\npid: {pid}\nsyscall: {syscall}\n"
            f"trigger: {trigger}\npaths: {','.join(paths)}\nbytes: {nbytes}\n")


def parse_audit_message(message):
    """Inverse of :func:`audit_message`; raises ``ValueError`` on anything else."""
    lines = message.split("\n")
    if lines[0] != AUDIT_HEADER or len(lines) != len(AUDIT_FIELDS) + 2 or lines[-1]:
        raise ValueError("not an audit message")
    out = {}
    for key, line in zip(AUDIT_FIELDS, lines[1:-1]):
        k, sep, v = line.partition(": ")
        if k != key or not sep:
            raise ValueError(f"expected field {key!r}")
        out[key] = v
    out["pid"] = int(out["pid"])
    out["bytes"] = int(out["bytes"])
    out["paths"] = out["paths"].split(",") if out["paths"] else []
    return out


@dataclass
class PushPolicy:
    on_barrier: bool = True
    every_n_commits: int = None
    on_close: bool = False

    def __post_init__(self):
        if self.every_n_commits is not None and self.every_n_commits < 1:
            raise ConfigError("push.every_n_commits must be positive")


@dataclass
class ShieldConfig:
    repo_dir: str
    variant: str = "Inte-fine-disk"
    mode: str = None
    init: str = "auto"
    expected_root: str = None
    repo_id: str = None
    push: PushPolicy = field(default_factory=PushPolicy)
    buffer_cap_bytes: int = DEFAULT_BUFFER_CAP
    regions: list = field(default_factory=list)
    mirror_dir: str = None
    service_addr: str = None
    service_key: bytes = None
    shield_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    pid: int = field(default_factory=os.getpid)
    clock: object = None
    trace: bool = False

    def __post_init__(self):
        v = get_variant(self.variant)
        if self.mode is None:
            self.mode = v.mode
        elif self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        elif self.mode != v.mode:
            raise ConfigError(f"mode {self.mode} contradicts variant {self.variant}")
        if self.init not in INIT_POLICIES:
            raise ConfigError(f"init must be one of {INIT_POLICIES}")
        if self.buffer_cap_bytes <= 0:
            raise ConfigError("buffer.cap_bytes must be positive")
        self.repo_dir = os.path.abspath(self.repo_dir)

    def make_trust(self):
        from .trust import ServiceClient

        if not self.service_addr or not self.service_key:
            raise ConfigError("no freshness service configured (service.addr / service.key_hex)")
        return ServiceClient(self.service_addr, self.service_key)


@dataclass
class FileHandle:
    fd: int
    buf: object
    readable: bool
    writable: bool
    append: bool
    cursor: int = 0


class Shield:
    """One GITFS-protected directory tree and its runtime state."""

    def __init__(self, config, trust=None):
        self.config = config
        self.trust = trust if trust is not None else config.make_trust()
        self.variant = get_variant(config.variant)
        self.mode = config.mode
        self.repo_dir = config.repo_dir
        self.git_dir = os.path.join(self.repo_dir, ".git")
        self.counters = Counters()
        self.clock = config.clock or (lambda: int(time.time()))
        self.stage = StageIndex()
        self.buffers = BufferSet(config.buffer_cap_bytes)
        self.handles = {}
        self.repo_id = config.repo_id
        self.root_hash = None
        self.head_tree = None
        self.push_seq = 0
        self.aborted = False
        self.abort_cause = None
        self.started = False
        self.fs = None
        self.repo = None
        self.trace_log = []
        self._lock = threading.RLock()
        self._next_fd = 3
        self._stage_changed = False
        self._pending_paths = set()
        self._pending_bytes = 0
        self._commits_since_push = 0
        self._unpushed = []

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        with self._lock:
            if self.started:
                raise ShieldError("shield already started")
            try:
                self._start()
            except BaseException as e:
                self._abort(e)
                raise
            self.started = True
        return self

    def _start(self):
        exists = os.path.exists(os.path.join(self.git_dir, "HEAD"))
        id_path = os.path.join(self.git_dir, REPO_ID_FILE)
        if self.repo_id is None:
            if exists and os.path.exists(id_path):
                with open(id_path, "rb") as f:
                    self.repo_id = f.read().decode(errors="replace").strip()
            elif exists:
                raise IntegrityError("repository id file is missing")
            else:
                self.repo_id = str(uuid.uuid4())
        bundle = self.trust.provision(self.repo_id)
        policy = self.config.init
        if policy == "auto":
            policy = "clone" if (exists or bundle.init == "clone") else "fresh"
        self._build_fs(bundle)
        if policy == "fresh":
            if exists:
                raise ConfigError(f"a repository already exists at {self.repo_dir}")
            if bundle.init == "clone":
                raise ConfigError("the freshness service already holds records for this repository")
            self._init_fresh()
        else:
            latest = bundle.expected_root
            expected = self.config.expected_root or latest
            if expected is None:
                raise ConfigError("clone requested but no trusted root is known")
            if self.config.expected_root and latest and self.config.expected_root != latest:
                raise RollbackError(
                    f"configured root {self.config.expected_root} is not the latest pushed root {latest}")
            if not exists:
                raise NotFoundError(f"no repository at {self.repo_dir}")
            self.push_seq = bundle.seq
            self._init_clone(expected)

    def _build_fs(self, bundle):
        table = RegionTable(configure_git_metadata_regions(self.repo_dir, self.variant))
        keys = {k: bundle.region_keys[k] for k in ("git-b", "work")}
        data_regions = {"work"}
        for region in self.config.regions:
            table.add(region)
            keys[region.region_id] = derive_key(bundle.region_keys["user"], "region:" + region.prefix)
            data_regions.add(region.region_id)
        self.fs = RegionFS(table, keys, bundle.mac_key, self.counters, data_regions)

    def _init_fresh(self):
        self.fs.makedirs(self.repo_dir)
        self.repo = Repository.init(self.git_dir, self.fs)
        self.fs.protected_write(os.path.join(self.git_dir, REPO_ID_FILE),
                                (self.repo_id + "\n").encode())
        self._commit("init", self.mode, initial=True)
        self._push()

    def _init_clone(self, expected):
        self.repo = open_existing(self.git_dir, expected, self.fs)
        stored_id = self.fs.protected_read(os.path.join(self.git_dir, REPO_ID_FILE))
        if stored_id.decode(errors="replace").strip() != self.repo_id:
            raise IntegrityError("repository id does not match the provisioned id")
        head = self.repo.read_commit(expected)
        self.stage = StageIndex(self.repo.flatten_tree(head.tree))
        on_disk = StageIndex.parse(self.fs.protected_read(os.path.join(self.git_dir, STAGE_FILE)))
        if on_disk != self.stage:
            raise IntegrityError("stage file does not match the HEAD tree")
        self.root_hash = expected
        self.head_tree = head.tree

    def _abort(self, cause):
        if not self.aborted:
            log.error("shield %s aborting: %s", self.config.shield_id, cause)
        self.aborted = True
        if self.abort_cause is None:
            self.abort_cause = cause

    def abort(self, cause):
        """Fail-stop deliberately; the shield never recovers within this session."""
        with self._lock:
            self._abort(cause)

    def _check_alive(self):
        if self.aborted:
            raise ShieldAborted(self.abort_cause)
        if not self.started:
            raise ShieldError("shield not started")

    @contextlib.contextmanager
    def _pipeline(self):
        try:
            yield
        except (UntrackedFileError, ConfigError):
            raise
        except Exception as e:
            self._abort(e)
            raise ShieldAborted(e) from e

    def _trace(self, event, detail):
        if self.config.trace:
            self.trace_log.append((event, detail))

    def __enter__(self):
        if not self.started:
            self.start()
        return self

    def __exit__(self, *exc):
        if not self.aborted and exc[0] is None:
            self.shutdown()

    def shutdown(self):
        """Close every handle and run the ``exit`` barrier."""
        with self._lock:
            for fd in sorted(self.handles):
                self.close(fd)
            self.barrier("exit")

    # -- helpers -----------------------------------------------------------

    def host_path(self, path):
        return os.path.join(self.repo_dir, *path.split("/"))

    def _handle(self, fd, read=False, write=False):
        h = self.handles.get(fd)
        if h is None:
            raise HandleError(f"bad file handle {fd}")
        if not h.buf.valid:
            raise HandleError(f"handle {fd} refers to a removed file")
        if read and not h.readable:
            raise HandleError(f"handle {fd} is not open for reading")
        if write and not h.writable:
            raise HandleError(f"handle {fd} is not open for writing")
        return h

    def _check_conflict(self, path):
        for other in self.stage.paths():
            if other.startswith(path + "/") or path.startswith(other + "/"):
                raise PathConflictError(f"{path} conflicts with tracked {other}")

    def _note_change(self, *paths, nbytes=0):
        self._stage_changed = True
        self._pending_paths.update(paths)
        self._pending_bytes += nbytes

    def _stage(self, buf):
        stage_buffer(buf, self.stage, self.repo)
        buf.unflushed = True
        self._stage_changed = True
        self._unpushed.append(buf.blob_id)

    def _flush(self, buf):
        self._trace("flush", buf.path)
        flush_to_host(buf, self.fs)

    def _flush_committed(self, force=False):
        """Write back clean, committed buffers; the mem variant waits unless forced."""
        if self.variant.in_memory and not force:
            return
        for buf in self.buffers:
            if buf.valid and buf.unflushed and not buf.dirty:
                self._flush(buf)

    def _prune_dirs(self, path):
        parent = os.path.dirname(self.host_path(path))
        while parent != self.repo_dir and parent.startswith(self.repo_dir):
            try:
                os.rmdir(parent)
            except OSError:
                break
            self.counters.host_syscalls_total += 1
            parent = os.path.dirname(parent)

    def _commit(self, syscall, trigger, initial=False):
        if not initial and not self._stage_changed:
            return self.root_hash
        tree = self.repo.write_tree(self.stage.items())
        if not initial and tree == self.head_tree:
            self._reset_pending()
            return self.root_hash
        paths = sorted(self._pending_paths)
        ident = Identity(COMMITTER_NAME, COMMITTER_EMAIL, int(self.clock()))
        message = audit_message(self.config.shield_id, self.config.pid, syscall, trigger,
                                paths, self._pending_bytes)
        record = CommitRecord(tree, (self.root_hash,) if self.root_hash else (),
                              ident, ident, message)
        reflog_msg = ("commit (initial): " if initial else "commit: ") + syscall
        with self.fs.batch():
            oid = self.repo.create_commit(record)
            self.repo.update_ref(oid, self.root_hash, ident, reflog_msg)
            self.fs.protected_write(os.path.join(self.git_dir, STAGE_FILE), self.stage.serialize())
        self._trace("commit", oid)
        self._unpushed.extend([tree, oid])
        self.root_hash = oid
        self.head_tree = tree
        self.counters.commits += 1
        self._commits_since_push += 1
        self._reset_pending()
        n = self.config.push.every_n_commits
        if n and self._commits_since_push >= n and not initial:
            self._push()
        return oid

    def _reset_pending(self):
        self._stage_changed = False
        self._pending_paths.clear()
        self._pending_bytes = 0

    def _push(self):
        self._flush_committed(force=True)
        if self.config.mirror_dir:
            self._mirror_push()
        seq = self.push_seq + 1
        self.trust.push_root(self.repo_id, seq, self.root_hash)
        self.push_seq = seq
        self.counters.pushes += 1
        self._commits_since_push = 0

    def _mirror_push(self):
        """Ship verified objects and the new head to the mirror directory."""
        mirror = self.config.mirror_dir
        for sub in ("objects", "refs/heads"):
            os.makedirs(os.path.join(mirror, sub), exist_ok=True)
        head_path = os.path.join(mirror, "HEAD")
        if not os.path.exists(head_path):
            with open(head_path, "wb") as f:
                f.write(b"ref: refs/heads/main\n")
        for oid in dict.fromkeys(self._unpushed):
            dst = os.path.join(mirror, "objects", oid[:2], oid[2:])
            if os.path.exists(dst):
                continue
            self.repo.read_loose(oid)
            raw = self.fs._host_read(self.repo.object_path(oid))
            os.makedirs(os.path.dirname(dst), exist_ok=True)
            with open(dst, "wb") as f:
                f.write(raw)
                f.flush()
                os.fsync(f.fileno())
            self.counters.host_syscalls_total += 2
        ref = os.path.join(mirror, "refs", "heads", "main")
        with open(ref + ".tmp", "wb") as f:
            f.write((self.root_hash + "\n").encode())
            f.flush()
            os.fsync(f.fileno())
        os.replace(ref + ".tmp", ref)
        self.counters.host_syscalls_total += 3
        self._unpushed.clear()

    # -- file operations ---------------------------------------------------

    def open(self, path, flags=os.O_RDONLY):
        """Open ``path``; fine mode commits creating and truncating opens."""
        with self._lock:
            self._check_alive()
            path = canonical_path(path)
            acc = flags & os.O_ACCMODE
            readable = acc in (os.O_RDONLY, os.O_RDWR)
            writable = acc in (os.O_WRONLY, os.O_RDWR)
            create = bool(flags & os.O_CREAT)
            tracked = path in self.stage
            if tracked and create and flags & os.O_EXCL:
                raise DestinationExistsError(f"{path} already exists")
            if not tracked and not create:
                raise NotFoundError(f"{path} does not exist")
            if not tracked:
                self._check_conflict(path)
            with self._pipeline():
                buf = self.buffers.get(path)
                if buf is None:
                    buf = load_and_verify(path, self.host_path(path), self.fs, self.stage, flags)
                    self.buffers.add(buf)
                mutated = False
                if not tracked:
                    buf.dirty = True
                    mutated = True
                elif writable and flags & os.O_TRUNC and len(buf):
                    buf.content.clear()
                    buf.dirty = True
                    mutated = True
                if mutated:
                    self._note_change(path)
                    self._stage(buf)
                    if self.mode == "fine":
                        self._commit("open", "fine")
                        self._flush_committed()
                fd = self._next_fd
                self._next_fd += 1
                buf.open_count += 1
                self.handles[fd] = FileHandle(fd, buf, readable, writable,
                                              bool(flags & os.O_APPEND))
                return fd

    def write(self, fd, data):
        with self._lock:
            self._check_alive()
            h = self._handle(fd, write=True)
            data = bytes(data)
            if not data:
                return 0
            buf = h.buf
            pos = len(buf) if h.append else h.cursor
            self.buffers.check_cap(max(0, pos + len(data) - len(buf)))
            with self._pipeline():
                n = apply_write(buf, pos, data)
                h.cursor = pos + n
                self.counters.writes += 1
                self._note_change(buf.path, nbytes=n)
                if self.mode == "fine":
                    self._stage(buf)
                    self._commit("write", "fine")
                    self._flush_committed()
                return n

    def read(self, fd, size=-1):
        with self._lock:
            self._check_alive()
            h = self._handle(fd, read=True)
            if size < 0:
                size = len(h.buf)
            data = serve_read(h.buf, h.cursor, size)
            h.cursor += len(data)
            self.counters.reads += 1
            return data

    def seek(self, fd, offset, whence=os.SEEK_SET):
        with self._lock:
            self._check_alive()
            h = self._handle(fd)
            if whence == os.SEEK_SET:
                pos = offset
            elif whence == os.SEEK_CUR:
                pos = h.cursor + offset
            elif whence == os.SEEK_END:
                pos = len(h.buf) + offset
            else:
                raise HandleError(f"bad whence {whence}")
            if pos < 0:
                raise HandleError("negative seek position")
            h.cursor = pos
            return pos

    def _sync_handle(self, h, syscall):
        buf = h.buf
        if self.mode == "coarse":
            if buf.valid and buf.dirty:
                self._stage(buf)
            self._commit(syscall, "coarse")
            self._flush_committed()
        elif self.variant.in_memory:
            self._flush_committed(force=True)

    def fsync(self, fd):
        with self._lock:
            self._check_alive()
            h = self._handle(fd)
            with self._pipeline():
                self._sync_handle(h, "fsync")

    def close(self, fd):
        with self._lock:
            self._check_alive()
            h = self.handles.get(fd)
            if h is None:
                raise HandleError(f"bad file handle {fd}")
            buf = h.buf
            with self._pipeline():
                if buf.valid:
                    self._sync_handle(h, "close")
                    if self.variant.in_memory and self.config.push.on_close:
                        self._push()
            del self.handles[fd]
            buf.open_count -= 1
            if buf.open_count == 0 and buf.valid and not buf.dirty and not buf.unflushed:
                self.buffers.discard(buf.path)

    def rename(self, src, dst):
        with self._lock:
            self._check_alive()
            src, dst = canonical_path(src), canonical_path(dst)
            if src not in self.stage:
                raise NotFoundError(f"{src} does not exist")
            if dst in self.stage:
                raise DestinationExistsError(f"{dst} already exists")
            # Includes the source itself: a file cannot move beneath or above itself.
            self._check_conflict(dst)
            if os.path.lexists(self.host_path(dst)):
                raise DestinationExistsError(f"{dst} exists on the host")
            with self._pipeline():
                self.stage[dst] = self.stage[src]
                del self.stage[src]
                buf = self.buffers.get(src)
                if buf is not None:
                    self.buffers.move(src, dst)
                    buf.meta["host_path"] = self.host_path(dst)
                host_src = self.host_path(src)
                if self.fs.exists(host_src):
                    self.fs.rename(host_src, self.host_path(dst))
                    self._prune_dirs(src)
                elif buf is None or not buf.unflushed:
                    raise IntegrityError(f"tracked file {src} is missing on the host")
                self._note_change(src, dst)
                if self.mode == "fine":
                    self._commit("rename", "fine")
                    self._flush_committed()

    def unlink(self, path):
        with self._lock:
            self._check_alive()
            path = canonical_path(path)
            if path not in self.stage:
                raise NotFoundError(f"{path} does not exist")
            with self._pipeline():
                remove_from_stage(path, self.stage, self.buffers)
                self.fs.remove(self.host_path(path))
                self._prune_dirs(path)
                self._note_change(path)
                if self.mode == "fine":
                    self._commit("unlink", "fine")

    def barrier(self, kind="exit"):
        """Process-event barrier (fork/exec/exit): commit everything, then push."""
        if kind not in BARRIER_KINDS:
            raise ValueError(f"unknown barrier kind {kind!r}")
        with self._lock:
            self._check_alive()
            with self._pipeline():
                for buf in self.buffers:
                    if buf.valid and buf.dirty:
                        self._stage(buf)
                self._commit(kind, "barrier")
                self._flush_committed(force=True)
                if self.config.push.on_barrier:
                    self._push()

    def adopt(self, paths):
        """Import pre-existing untracked host files in one ``adopt`` commit."""
        with self._lock:
            self._check_alive()
            paths = [canonical_path(p) for p in paths]
            for p in paths:
                if p in self.stage:
                    raise AlreadyTrackedError(f"{p} is already tracked")
                if not os.path.isfile(self.host_path(p)):
                    raise NotFoundError(f"{p} does not exist on the host")
                self._check_conflict(p)
            with self._pipeline():
                adopted = []
                for p in paths:
                    with open(self.host_path(p), "rb") as f:
                        content = f.read()
                    self.counters.host_syscalls_total += 1
                    buf = load_and_verify(p, self.host_path(p), _AbsentHost(), self.stage)
                    apply_write(buf, 0, content)
                    self.buffers.add(buf)
                    self._stage(buf)
                    adopted.append(buf)
                    self._note_change(p, nbytes=len(content))
                self._commit("adopt", self.mode)
                for buf in adopted:
                    self._flush(buf)
                    self.buffers.discard(buf.path)

    # -- regions outside the repository --------------------------------------

    def region_write(self, host_path, content):
        with self._lock:
            self._check_alive()
            self._check_outside(host_path)
            with self._pipeline():
                self.fs.protected_write(host_path, content)

    def region_read(self, host_path):
        with self._lock:
            self._check_alive()
            self._check_outside(host_path)
            with self._pipeline():
                return self.fs.protected_read(host_path)

    def _check_outside(self, host_path):
        p = os.path.abspath(host_path)
        if p == self.repo_dir or p.startswith(self.repo_dir + "/"):
            raise InvalidPathError("use the file operations for paths inside the repository")

    # -- introspection -------------------------------------------------------

    def tracked_files(self):
        return self.stage.paths()

    def committed_files(self):
        """``path -> bytes`` reachable from HEAD, read from the object store."""
        head = self.repo.read_commit(self.root_hash)
        return {p: self.repo.read_typed(oid, "blob")
                for p, (oid, _) in self.repo.flatten_tree(head.tree).items()}


    def writev(self, fd, buffers):
        return self.write(fd, b"".join(buffers))

    linkat = rename  # moves, like rename; no second name is created

    vfs_open = open
    vfs_write = write
    vfs_read = read
    vfs_seek = seek
    vfs_close = close
    vfs_fsync = fsync
    vfs_rename = rename
    vfs_unlink = unlink
    abort_shield = abort
    commit_now = _commit


class _AbsentHost:
    """Stand-in host view used by adopt: the file is new to the stage."""

    def exists(self, path):
        return False


def shield_init(config, trust=None):
    return Shield(config, trust).start()
