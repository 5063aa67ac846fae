"""Seeded random workloads and the plain in-memory directory oracle."""

import os
import random

from gitshield.errors import (DestinationExistsError, HandleError, NotFoundError,
                              PathConflictError)

PATHS = ["a", "b", "c.txt", "d", "d/x", "d/y", "d/e/z", "long-name.bin", "q/r", "q/r/s"]
OPS = ["open", "open", "write", "write", "write", "write", "read", "read", "seek", "close",
       "rename", "unlink", "fsync", "barrier"]


class ModelFile:
    def __init__(self):
        self.data = bytearray()


class Model:
    """What a correct versioned directory should contain, with no Git at all."""

    def __init__(self):
        self.files = {}
        self.handles = {}

    def snapshot(self):
        return {p: bytes(f.data) for p, f in self.files.items()}

    def _conflict(self, path):
        for other in self.files:
            if (other.startswith(path + "/") or path.startswith(other + "/")):
                raise PathConflictError(path)

    def open(self, fd, path, flags):
        create = bool(flags & os.O_CREAT)
        f = self.files.get(path)
        if f is not None and create and flags & os.O_EXCL:
            raise DestinationExistsError(path)
        if f is None:
            if not create:
                raise NotFoundError(path)
            self._conflict(path)
            f = self.files[path] = ModelFile()
        elif flags & os.O_TRUNC and flags & os.O_ACCMODE != os.O_RDONLY:
            f.data.clear()
        acc = flags & os.O_ACCMODE
        self.handles[fd] = [f, 0, acc != os.O_WRONLY, acc != os.O_RDONLY, bool(flags & os.O_APPEND)]

    def _h(self, fd):
        h = self.handles.get(fd)
        if h is None or h[0] not in self.files.values():
            raise HandleError(fd)
        return h

    def write(self, fd, data):
        h = self._h(fd)
        if not h[3]:
            raise HandleError(fd)
        if not data:
            return 0
        f = h[0]
        pos = len(f.data) if h[4] else h[1]
        if pos > len(f.data):
            f.data.extend(bytes(pos - len(f.data)))
        f.data[pos:pos + len(data)] = data
        h[1] = pos + len(data)
        return len(data)

    def read(self, fd, n):
        h = self._h(fd)
        if not h[2]:
            raise HandleError(fd)
        out = bytes(h[0].data[h[1]:h[1] + n]) if n > 0 else b""
        h[1] += len(out)
        return out

    def seek(self, fd, pos):
        h = self._h(fd)
        h[1] = pos
        return pos

    def close(self, fd):
        if fd not in self.handles:
            raise HandleError(fd)
        del self.handles[fd]

    def fsync(self, fd):
        self._h(fd)

    def rename(self, src, dst):
        if src not in self.files:
            raise NotFoundError(src)
        if dst in self.files:
            raise DestinationExistsError(dst)
        self._conflict(dst)
        self.files[dst] = self.files.pop(src)

    def unlink(self, path):
        if path not in self.files:
            raise NotFoundError(path)
        del self.files[path]


def next_op(rng, model, opened):
    """Pick one operation, biased toward live handles and existing files."""
    kind = rng.choice(OPS)
    live = [fd for fd, h in model.handles.items() if h[0] in model.files.values()]

    def fd():
        if live and rng.random() < 0.9:
            return rng.choice(live)
        return rng.randrange(opened + 2)

    def path(existing=0.7):
        if model.files and rng.random() < existing:
            return rng.choice(sorted(model.files))
        return rng.choice(PATHS)

    if kind == "open":
        flags = rng.choice([os.O_RDONLY, os.O_RDWR, os.O_WRONLY, os.O_CREAT | os.O_RDWR,
                            os.O_CREAT | os.O_RDWR, os.O_CREAT | os.O_RDWR | os.O_APPEND,
                            os.O_CREAT | os.O_WRONLY | os.O_TRUNC,
                            os.O_RDWR | os.O_APPEND, os.O_CREAT | os.O_EXCL | os.O_RDWR])
        return ("open", path(0.5), flags)
    if kind == "write":
        size = rng.choice([0, 1, 7, 100, 4096, 5000, rng.randint(1, 20000)])
        return ("write", fd(), rng.randbytes(size))
    if kind == "read":
        return ("read", fd(), rng.choice([1, 10, 4096, 100000]))
    if kind == "seek":
        return ("seek", fd(), rng.randint(0, 12000))
    if kind in ("close", "fsync"):
        return (kind, fd())
    if kind == "rename":
        return ("rename", path(), rng.choice(PATHS))
    if kind == "unlink":
        return ("unlink", path())
    return ("barrier", rng.choice(["fork", "exec", "exit"]))


MUTATING = {"open", "write", "rename", "unlink"}
TRIGGERS = {"close", "fsync", "barrier"}


def run(shield, seed, max_ops=500):
    """Drive ``shield`` and the model in lockstep; returns (model, stats).

    Every call must produce the same result, or the same error class, on both.
    """
    rng = random.Random(seed)
    model = Model()
    fd_map = {}
    stats = {"effective_mutations": 0, "triggers": 0, "ops": rng.randint(1, max_ops)}
    for i in range(stats["ops"]):
        op = next_op(rng, model, len(fd_map))
        kind, args = op[0], op[1:]
        before = model.snapshot()
        if kind == "open":
            mfd = len(fd_map) + 1
            m_exc = s_exc = None
            try:
                model.open(mfd, *args)
            except Exception as e:
                m_exc = e
            try:
                sfd = shield.open(*args)
            except Exception as e:
                s_exc = e
            _same(i, op, m_exc, s_exc)
            if s_exc is None:
                fd_map[mfd] = sfd
            else:
                fd_map[mfd] = None
        else:
            if kind in ("write", "read", "seek", "close", "fsync"):
                sargs = (fd_map.get(args[0], -1) or -1,) + args[1:]
            else:
                sargs = args
            m_res = s_res = m_exc = s_exc = None
            try:
                m_res = getattr(model, kind)(*args) if kind != "barrier" else None
            except Exception as e:
                m_exc = e
            try:
                s_res = getattr(shield, kind)(*sargs)
            except Exception as e:
                s_exc = e
            _same(i, op, m_exc, s_exc)
            if kind == "read" and m_exc is None:
                assert m_res == s_res, f"op {i} {op[:2]}: read mismatch"
            if kind in TRIGGERS and s_exc is None:
                stats["triggers"] += 1
        if kind in MUTATING and model.snapshot() != before:
            stats["effective_mutations"] += 1
    return model, stats


def _same(i, op, m_exc, s_exc):
    label = f"op {i} {op[:2]}"
    if m_exc is None and s_exc is None:
        return
    if m_exc is None or s_exc is None:
        raise AssertionError(f"{label}: model raised {m_exc!r}, shield raised {s_exc!r}")
    if not isinstance(s_exc, type(m_exc)):
        raise AssertionError(f"{label}: model raised {m_exc!r}, shield raised {s_exc!r}")
