"""Trusted in-memory file images and the staging index.

Reads are served from a :class:`BufferedFile` whose content was either
written by the application in this session or hash-verified against the
stage when it was loaded.  Host bytes are only updated by
:func:`flush_to_host`, after the content has been committed.
"""

import time
from dataclasses import dataclass, field

from .errors import ConfigError, IntegrityError, NotFoundError, UntrackedFileError
from .objects import EMPTY_BLOB_ID, FILE_MODE, hash_object, is_object_id

DEFAULT_BUFFER_CAP = 256 << 20


class StageIndex:
    """Ordered ``path -> (blob_id, mode)`` map for the next commit's tree."""

    def __init__(self, entries=None):
        self._entries = dict(entries or {})

    def __contains__(self, path):
        return path in self._entries

    def __getitem__(self, path):
        return self._entries[path]

    def __setitem__(self, path, value):
        self._entries[path] = value

    def __delitem__(self, path):
        del self._entries[path]

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        return isinstance(other, StageIndex) and dict(self.items()) == dict(other.items())

    def get(self, path, default=None):
        return self._entries.get(path, default)

    def items(self):
        return sorted(self._entries.items())

    def paths(self):
        return sorted(self._entries)

    def copy(self):
        return StageIndex(self._entries)

    def serialize(self):
        return "".join(f"{p}\t{oid}\t{mode}\n" for p, (oid, mode) in self.items()).encode()

    @classmethod
    def parse(cls, data):
        entries = {}
        try:
            for line in data.decode().splitlines():
                path, oid, mode = line.split("\t")
                if not is_object_id(oid) or path in entries:
                    raise ValueError(line)
                entries[path] = (oid, mode)
        except (ValueError, UnicodeDecodeError) as e:
            raise IntegrityError(f"stage file is malformed: {e}") from None
        return cls(entries)


@dataclass
class BufferedFile:
    path: str
    content: bytearray
    blob_id: str
    dirty: bool = False
    unflushed: bool = False
    valid: bool = True
    open_count: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.content)


class BufferSet:
    """Live buffers keyed by path, with a total memory cap."""

    def __init__(self, cap_bytes=DEFAULT_BUFFER_CAP):
        self.cap_bytes = cap_bytes
        self._buffers = {}

    def __contains__(self, path):
        return path in self._buffers

    def __iter__(self):
        return iter(list(self._buffers.values()))

    def get(self, path):
        return self._buffers.get(path)

    def add(self, buf):
        old = self._buffers.get(buf.path)
        self.check_cap(len(buf) - (len(old) if old else 0))
        self._buffers[buf.path] = buf

    def discard(self, path):
        return self._buffers.pop(path, None)

    def move(self, src, dst):
        buf = self._buffers.pop(src)
        buf.path = dst
        self._buffers[dst] = buf

    def total_bytes(self):
        return sum(len(b) for b in self._buffers.values())

    def check_cap(self, extra=0):
        if self.total_bytes() + extra > self.cap_bytes:
            raise ConfigError(
                f"secure buffers would exceed the {self.cap_bytes}-byte cap; raise buffer.cap_bytes")


def load_and_verify(path, host_path, fs, stage, flags=0):
    """Read a tracked file into a verified buffer, or start an empty one."""
    tracked = path in stage
    on_host = fs.exists(host_path)
    meta = {"host_path": host_path, "flags": flags, "created": time.time()}
    if tracked:
        if not on_host:
            raise IntegrityError(f"tracked file {path} is missing on the host")
        content = fs.protected_read(host_path)
        blob_id = hash_object("blob", content)
        if blob_id != stage[path][0]:
            raise IntegrityError(f"content of {path} does not match the committed blob")
        return BufferedFile(path, bytearray(content), blob_id, meta=meta)
    if on_host:
        raise UntrackedFileError(f"{path} exists on the host but is not tracked")
    return BufferedFile(path, bytearray(), EMPTY_BLOB_ID, meta=meta)


def apply_write(buf, offset, data):
    """POSIX overlay write; gaps past EOF are zero-filled."""
    if offset < 0:
        raise ValueError("negative offset")
    n = len(data)
    if n == 0:
        return 0
    end = offset + n
    if offset > len(buf.content):
        buf.content.extend(bytes(offset - len(buf.content)))
    buf.content[offset:end] = data
    buf.dirty = True
    return n


def serve_read(buf, offset, length):
    if offset >= len(buf.content) or length <= 0:
        return b""
    return bytes(buf.content[offset:offset + length])


def stage_buffer(buf, stage, repo):
    """Persist the buffer's blob and point the stage entry at it."""
    blob_id = repo.write_loose("blob", buf.content)
    buf.blob_id = blob_id
    stage[buf.path] = (blob_id, FILE_MODE)
    buf.dirty = False
    return blob_id


def remove_from_stage(path, stage, buffers=None):
    if path not in stage:
        raise NotFoundError(f"{path} is not tracked")
    del stage[path]
    if buffers is not None:
        buf = buffers.discard(path)
        if buf is not None:
            buf.valid = False


def flush_to_host(buf, fs):
    """Write the committed buffer content through the host providers."""
    if buf.dirty:
        raise ValueError(f"{buf.path} must be staged before it is flushed")
    fs.protected_write(buf.meta["host_path"], bytes(buf.content))
    buf.unflushed = False
